//! Ingest MovieLens 1M from `$EDGECACHE_DATA_DIR` (see `edgecache fetch`),
//! keep a dense core, split 80/20 and shard the users over six MENs. Falls
//! back to a synthetic file in the same format when the data is absent.
//!
//!     EDGECACHE_DATA_DIR=data cargo run --release --example movielens_pipeline

use std::path::{Path, PathBuf};

use edgecache::data::{self, Format, ShardManifest, SynthConfig};
use edgecache::experiment::dataset_in_dir;

fn main() -> edgecache::Result<()> {
    let found = std::env::var_os("EDGECACHE_DATA_DIR").and_then(|d| dataset_in_dir(Path::new(&d)));
    let path = match found {
        Some(p) => p,
        None => {
            let p = std::env::temp_dir().join("edgecache_synth_ratings.dat");
            let events = data::synth_zipf(&SynthConfig {
                users: 800,
                contents: 500,
                density: 0.08,
                exponent: 0.9,
                seed: 6,
            })?;
            data::write_events(&p, &events, Format::MovielensDat)?;
            println!("no MovieLens download found; using {}", p.display());
            p
        }
    };
    let events = data::ingest(&path, Format::from_path(&path))?;
    println!(
        "{} ratings from {}",
        events.len(),
        PathBuf::from(&path).display()
    );

    let core = data::subsample_dense_core(&events, 600, 400);
    let split = data::split(&core, 0.8, 0)?;
    println!(
        "core {} users × {} contents: {} train / {} test",
        split.train.n_users(),
        split.train.n_contents(),
        split.train.len(),
        split.test.len()
    );
    let shards = data::shard(&split.train, 6, 0)?;
    let manifest = ShardManifest::from_shards(&shards);
    for (men, users) in &manifest.0 {
        let ratings = shards[men - 1].len();
        println!("MEN {men}: {} users, {ratings} ratings", users.len());
    }
    Ok(())
}
