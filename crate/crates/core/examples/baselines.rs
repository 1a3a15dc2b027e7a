//! Zero-fill SVD and NMF predictors: test RMSE by rank.
//!
//!     cargo run --release --example baselines

use edgecache::baselines::{nmf_predict, Svd};
use edgecache::data::{self, SynthConfig};
use edgecache::eval::rmse;

fn main() -> edgecache::Result<()> {
    let events = data::synth_zipf(&SynthConfig {
        users: 150,
        contents: 100,
        density: 0.15,
        exponent: 0.8,
        seed: 2,
    })?;
    let split = data::split(&events, 0.8, 2)?;
    let svd = Svd::compute(&split.train.dense());
    println!("rank  svd_rmse  nmf_rmse");
    for k in [2, 4, 8, 16, 32] {
        let s = rmse(&svd.truncate(k)?.reconstruct(), &split.test)?;
        let n = rmse(&nmf_predict(&split.train, k, 200, 2)?, &split.test)?;
        println!("{k:>4}  {s:>8.4}  {n:>8.4}");
    }
    Ok(())
}
