use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use edgecache::data::{self, Format, SynthConfig};
use edgecache::experiment::{self, parse_capacity, ExperimentConfig};
use edgecache::{Error, Result};

const MOVIELENS_URL: &str = "https://files.grouplens.org/datasets/movielens/ml-1m.zip";

#[derive(Parser)]
#[command(
    name = "edgecache",
    version,
    about = "Proactive cooperative edge caching experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the autoencoder in one topology and report test RMSE.
    Train(RunArgs),
    /// Compare SVD, NMF, DL and DDL over the capacity sweep.
    Evaluate(RunArgs),
    /// Distributed training for each value of `--mens` (comma separated).
    Sweep(RunArgs),
    /// Show where to get MovieLens 1M, or download it with `--download`.
    Fetch(FetchArgs),
    /// Write a synthetic Zipf rating file.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON config with flat dotted keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// MEN count (a list for `sweep`).
    #[arg(long, value_delimiter = ',')]
    mens: Vec<usize>,
    /// Global mini-batch size β.
    #[arg(long)]
    batch: Option<usize>,
    /// Maximum epochs T.
    #[arg(long)]
    epochs: Option<usize>,
    /// Dropout fraction r.
    #[arg(long)]
    dropout: Option<f64>,
    /// Read `--dropout` as the keep probability.
    #[arg(long)]
    dropout_keep: bool,
    #[arg(long, value_parser = ["dl", "ddl"])]
    topology: Option<String>,
    #[arg(long, value_parser = ["paper", "standard"])]
    adam_mode: Option<String>,
    /// Adam step size λ.
    #[arg(long)]
    step: Option<f64>,
    /// Hidden layer widths, e.g. `64,64`.
    #[arg(long, value_delimiter = ',')]
    hidden: Vec<usize>,
    /// Per-MEN storage sizes, e.g. `4GB,8GB,16GB`.
    #[arg(long, value_delimiter = ',')]
    capacities: Vec<String>,
    /// Methods to compare, e.g. `svd,nmf,dl,ddl`.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rating file (`.dat` MovieLens or `.csv`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic dataset `USERSxCONTENTS` instead of a file.
    #[arg(long)]
    synth: Option<String>,
    /// Train on unobserved entries as zero targets.
    #[arg(long)]
    zero_fill: bool,
    /// Count neighbor-MEN fetches as cache hits.
    #[arg(long)]
    count_neighbor_hits: bool,
    /// Local hits cost no transfer time.
    #[arg(long)]
    zero_local_delay: bool,
    /// DL placement from all users (`true`) or each MEN's users (`false`).
    #[arg(long)]
    dl_global_agg: Option<bool>,
    /// Run the methods concurrently.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct FetchArgs {
    /// Target directory; defaults to `$EDGECACHE_DATA_DIR`, then `./data`.
    #[arg(long)]
    dest: Option<PathBuf>,
    /// Download and unpack with `curl` and `unzip`.
    #[arg(long)]
    download: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 600)]
    users: usize,
    #[arg(long, default_value_t = 400)]
    contents: usize,
    #[arg(long, default_value_t = 0.1)]
    density: f64,
    /// Zipf exponent.
    #[arg(long, default_value_t = 0.8)]
    zipf: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; `.csv` or MovieLens `.dat`.
    #[arg(long)]
    out: PathBuf,
}

fn parse_synth_shape(text: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("--synth expects USERSxCONTENTS, got `{text}`"));
    let (u, c) = text.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((
        u.trim().parse().map_err(|_| bad())?,
        c.trim().parse().map_err(|_| bad())?,
    ))
}

fn resolve(args: &RunArgs, sweep: bool) -> Result<ExperimentConfig> {
    let base = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let mut o: Vec<(&str, Value)> = Vec::new();
    if let Some(v) = args.seed {
        o.push(("seed", v.into()));
    }
    match (sweep, args.mens.as_slice()) {
        (_, []) => {}
        (true, list) => o.push(("train.mens", list[0].into())),
        (false, [n]) => o.push(("train.mens", (*n).into())),
        (false, _) => return Err(Error::Config("--mens takes a single value here".into())),
    }
    if let Some(v) = args.batch {
        o.push(("train.batch", v.into()));
    }
    if let Some(v) = args.epochs {
        o.push(("train.epochs", v.into()));
    }
    if let Some(v) = args.dropout {
        o.push(("train.dropout", v.into()));
    }
    if args.dropout_keep {
        o.push(("train.dropout_keep", true.into()));
    }
    if let Some(v) = &args.topology {
        o.push(("train.topology", v.as_str().into()));
    }
    if let Some(v) = &args.adam_mode {
        o.push(("train.adam_mode", v.as_str().into()));
    }
    if let Some(v) = args.step {
        o.push(("train.step", v.into()));
    }
    if !args.hidden.is_empty() {
        o.push(("train.hidden", args.hidden.clone().into()));
    }
    if !args.capacities.is_empty() {
        let caps = args
            .capacities
            .iter()
            .map(|c| parse_capacity(c))
            .collect::<Result<Vec<_>>>()?;
        o.push(("cache.capacities", caps.into()));
    }
    if !args.methods.is_empty() {
        for m in &args.methods {
            m.parse::<experiment::Method>()?;
        }
        o.push(("methods", args.methods.clone().into()));
    }
    if let Some(v) = &args.out {
        o.push(("out", v.to_string_lossy().as_ref().into()));
    }
    if let Some(v) = &args.data {
        o.push(("data.path", v.to_string_lossy().as_ref().into()));
    }
    if let Some(shape) = &args.synth {
        let (users, contents) = parse_synth_shape(shape)?;
        o.push(("synth.users", users.into()));
        o.push(("synth.contents", contents.into()));
    }
    if args.zero_fill {
        o.push(("train.zero_fill", true.into()));
    }
    if args.count_neighbor_hits {
        o.push(("eval.count_neighbor_hits", true.into()));
    }
    if args.zero_local_delay {
        o.push(("eval.zero_local_delay", true.into()));
    }
    if let Some(v) = args.dl_global_agg {
        o.push(("cache.dl_global_agg", v.into()));
    }
    if args.parallel {
        o.push(("parallel", true.into()));
    }
    let mut cfg = base.apply(o)?;
    if cfg.data.path.is_none() && cfg.synth.is_none() {
        if let Some(dir) = std::env::var_os("EDGECACHE_DATA_DIR") {
            cfg.data.path = experiment::dataset_in_dir(Path::new(&dir));
        }
    }
    Ok(cfg)
}

fn train(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args, false)?;
    let report = experiment::run_training(&cfg)?;
    let last = report.log.records.last();
    println!(
        "{:?}: {} epochs, final loss {:.6}, test RMSE {:.4}",
        cfg.train.topology,
        report.log.len(),
        last.map_or(f64::NAN, |r| r.loss),
        report.rmse
    );
    println!("artifacts in {}", cfg.out.display());
    Ok(())
}

fn evaluate(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args, false)?;
    let report = experiment::run_experiment(&cfg)?;
    println!(
        "{:<6} {:>14} {:>8} {:>9} {:>11}",
        "method", "capacity", "rmse", "hit_rate", "avg_delay_s"
    );
    for r in &report.rows {
        println!(
            "{:<6} {:>14} {:>8.4} {:>9.4} {:>11.3}",
            r.method.name(),
            r.capacity_bytes,
            r.rmse,
            r.hit_rate,
            r.avg_delay_s
        );
    }
    println!(
        "results in {}",
        report.out_dir.join("results.csv").display()
    );
    Ok(())
}

fn sweep(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args, true)?;
    let mens = if args.mens.is_empty() {
        vec![1, 2, 3, 6]
    } else {
        args.mens.clone()
    };
    let rows = experiment::run_men_sweep(&cfg, &mens)?;
    for r in &rows {
        println!(
            "N={:<3} epochs={:<5} final_loss={:.6} rmse={:.4}",
            r.mens, r.epochs, r.final_loss, r.rmse
        );
    }
    println!("sweep in {}", cfg.out.join("sweep.csv").display());
    Ok(())
}

fn fetch(args: &FetchArgs) -> Result<()> {
    let dest = args
        .dest
        .clone()
        .or_else(|| std::env::var_os("EDGECACHE_DATA_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"));
    if !args.download {
        println!("MovieLens 1M is not bundled. To use it:");
        println!("  curl -LO {MOVIELENS_URL}");
        println!("  unzip ml-1m.zip -d {}", dest.display());
        println!("  export EDGECACHE_DATA_DIR={}", dest.display());
        println!("or rerun with --download.");
        return Ok(());
    }
    std::fs::create_dir_all(&dest)?;
    let zip = dest.join("ml-1m.zip");
    let status = Command::new("curl")
        .arg("-fL")
        .arg("-o")
        .arg(&zip)
        .arg(MOVIELENS_URL)
        .status()?;
    if !status.success() {
        return Err(Error::Data(format!("download of {MOVIELENS_URL} failed")));
    }
    let status = Command::new("unzip")
        .arg("-o")
        .arg(&zip)
        .arg("-d")
        .arg(&dest)
        .status()?;
    if !status.success() {
        return Err(Error::Data(format!("could not unpack {}", zip.display())));
    }
    println!("ratings in {}", dest.join("ml-1m/ratings.dat").display());
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let events = data::synth_zipf(&SynthConfig {
        users: args.users,
        contents: args.contents,
        density: args.density,
        exponent: args.zipf,
        seed: args.seed,
    })?;
    data::write_events(&args.out, &events, Format::from_path(&args.out))?;
    println!("{} ratings written to {}", events.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Cmd::Train(a) => train(a),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Fetch(a) => fetch(a),
        Cmd::Synth(a) => synth(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
