//! Distributed training with the CS as a synchronous parameter server. Prints
//! the averaged gradient norm of the first rounds, then checks that a single
//! MEN reproduces centralized training exactly.
//!
//!     cargo run --release --example parameter_server

use edgecache::data::{self, RatingMatrix, SynthConfig};
use edgecache::dist::{
    run_centralized, run_distributed, run_distributed_with, Topology, TrainConfig,
};

fn main() -> edgecache::Result<()> {
    let events = data::synth_zipf(&SynthConfig {
        users: 120,
        contents: 60,
        density: 0.2,
        exponent: 0.8,
        seed: 4,
    })?;
    let x = RatingMatrix::from_events(&events)?;
    let x = x.scaled(1.0 / x.max_value());

    let cfg = TrainConfig {
        topology: Topology::Ddl,
        men_count: 3,
        batch_size: 12,
        max_epochs: 30,
        hidden_layers: vec![32, 32],
        seed: 4,
        ..TrainConfig::default()
    };
    let shards = data::shard(&x, cfg.men_count, cfg.seed)?;
    let (_, log) = run_distributed_with(&shards, &cfg, &mut |ev| {
        if ev.round < 3 {
            let norm = ev.gradient.values().map(|g| g * g).sum::<f64>().sqrt();
            println!(
                "round {} (epoch {}): |avg gradient| = {norm:.5}",
                ev.round, ev.epoch
            );
        }
    })?;
    let last = log.records.last().expect("trained");
    println!(
        "N=3: {} epochs, {} rounds, final loss {:.5}",
        last.epoch, last.round_count, last.loss
    );

    let single = TrainConfig {
        men_count: 1,
        ..cfg.clone()
    };
    let (a, _) = run_distributed(std::slice::from_ref(&x), &single)?;
    let (b, _) = run_centralized(
        &x,
        &TrainConfig {
            topology: Topology::Dl,
            ..single
        },
    )?;
    println!("N=1 matches centralized bit for bit: {}", a == b);
    Ok(())
}
