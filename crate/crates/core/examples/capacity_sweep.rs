//! The four-method comparison over a capacity sweep, written to
//! `runs/capacity_sweep`. Pass an epoch count to shorten the run.
//!
//!     cargo run --release --example capacity_sweep -- 300

use edgecache::experiment::{run_experiment, ExperimentConfig, Method};
use serde_json::json;

fn main() -> edgecache::Result<()> {
    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(300);
    let cfg = ExperimentConfig::default().apply([
        ("synth.users", json!(600)),
        ("synth.contents", json!(400)),
        ("train.epochs", json!(epochs)),
        ("baselines.svd_ranks", json!([2, 8, 32])),
        ("baselines.nmf_ranks", json!([2, 8, 32])),
        ("parallel", json!(true)),
        ("out", json!("runs/capacity_sweep")),
    ])?;
    let report = run_experiment(&cfg)?;
    for m in Method::ALL {
        let o = report.outcome(m).expect("every method ran");
        let hits: Vec<String> = report
            .rows_for(m)
            .map(|r| format!("{:.3}", r.hit_rate))
            .collect();
        println!(
            "{:<4} rmse {:.4}  hit rate by capacity [{}]",
            m.name(),
            o.rmse,
            hits.join(", ")
        );
    }
    Ok(())
}
