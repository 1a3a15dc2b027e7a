//! Top-R placement from aggregated predictions and request replay, with the
//! local / neighbor / CS breakdown for a mesh and for isolated MENs.
//!
//!     cargo run --release --example placement_and_replay

use edgecache::baselines::svd_predict;
use edgecache::cache::plan_from_scores;
use edgecache::eval::{replay, NetworkTopology, ReplayOptions};
use edgecache::experiment::{self, ExperimentConfig, Method};
use serde_json::json;

fn main() -> edgecache::Result<()> {
    let cfg = ExperimentConfig::default().apply([
        ("synth.users", json!(300)),
        ("synth.contents", json!(200)),
        ("seed", json!(3)),
    ])?;
    let events = experiment::load_events(&cfg)?;
    let prep = experiment::prepare(&cfg, &events)?;
    let pred = svd_predict(&prep.split.train, 8)?;
    let scores = experiment::placement_scores(Method::Svd, &cfg, &prep, &pred)?;

    let mesh = cfg.topology();
    let isolated = NetworkTopology {
        links: Default::default(),
        ..mesh.clone()
    };
    println!("{} requests over {} MENs", prep.trace.len(), mesh.men_count);
    for gb in [2u64, 4, 8, 16] {
        let plan = plan_from_scores(&scores, gb * 1_000_000_000, cfg.cache.content_size)?;
        for (name, topo) in [("mesh", &mesh), ("isolated", &isolated)] {
            let r = replay(
                &plan,
                topo,
                &prep.trace,
                &prep.catalog,
                ReplayOptions::default(),
            )?;
            println!(
                "{gb:>3} GB {name:<8} hit {:.3}  delay {:>6.2}s  local {:>4} neighbor {:>4} cs {:>4}",
                r.hit_rate, r.avg_delay, r.local_hits, r.neighbor_hits, r.cs_fetches
            );
        }
    }
    Ok(())
}
