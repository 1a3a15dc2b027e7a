//! Centralized autoencoder training on a synthetic rating matrix, then test
//! RMSE in rating units.
//!
//!     cargo run --release --example autoencoder_training

use edgecache::data::{self, RatingMatrix, SynthConfig};
use edgecache::dist::{run_centralized, TrainConfig};
use edgecache::eval::rmse;
use edgecache::model;

fn main() -> edgecache::Result<()> {
    let events = data::synth_zipf(&SynthConfig {
        users: 200,
        contents: 120,
        density: 0.15,
        exponent: 0.8,
        seed: 1,
    })?;
    let split = data::split(&events, 0.8, 1)?;
    let scale = split.train.max_value();
    let train: RatingMatrix = split.train.scaled(1.0 / scale);

    let cfg = TrainConfig {
        batch_size: 20,
        max_epochs: 150,
        seed: 1,
        ..TrainConfig::default()
    };
    let (params, log) = run_centralized(&train, &cfg)?;
    for r in log.records.iter().step_by(25) {
        println!("epoch {:>4}  loss {:.5}", r.epoch, r.loss);
    }

    let pred = model::predict(&params, &train.dense())?.scale(scale);
    println!(
        "{} parameters, test RMSE {:.4}",
        params.num_params(),
        rmse(&pred, &split.test)?
    );
    Ok(())
}
