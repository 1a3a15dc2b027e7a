//! Scalar Adam trajectories under a constant gradient for both moment
//! schedules.
//!
//!     cargo run --example adam_trajectory

use edgecache::model::{Activation, Layer, ModelParams};
use edgecache::optim::{adam_step, AdamConfig, AdamMode, AdamState, Gradient, LayerGrad};
use edgecache::tensor::Matrix;

fn scalar(w: f64) -> ModelParams {
    ModelParams::from_layers(vec![Layer {
        weights: Matrix::from_rows(&[[w]]),
        bias: vec![0.0],
        activation: Activation::Linear,
    }])
    .expect("valid layer")
}

fn main() -> edgecache::Result<()> {
    let grad = Gradient {
        layers: vec![LayerGrad {
            weights: Matrix::from_rows(&[[1.0]]),
            bias: vec![0.0],
        }],
    };
    for mode in [AdamMode::Paper, AdamMode::Standard] {
        let cfg = AdamConfig {
            mode,
            ..AdamConfig::default()
        };
        let mut params = scalar(0.0);
        let mut state = AdamState::new(&params);
        print!("{mode:?}:");
        for step in 1..=10 {
            (params, state) = adam_step(params, state, &grad, &cfg)?;
            if step % 2 == 0 {
                print!(" {:+.6}", params.layers()[0].weights[(0, 0)]);
            }
        }
        println!();
    }
    Ok(())
}
