//! End-to-end runs: load or synthesize ratings, fit every method, score test
//! RMSE, place contents for each capacity and replay the test requests.
//!
//! Configuration is JSON with flat dotted keys (`"train.mens": 6`) applied on
//! top of the defaults; command-line flags are applied the same way after the
//! file, so there is one resolution order. The resolved flat map is written
//! into every run's `metadata.json`, which is itself a valid config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::baselines::{nmf_predict, Svd};
use crate::cache::{
    aggregate_popularity, plan_from_scores, ContentCatalog, PlacementPlan, Scores,
    DEFAULT_CONTENT_SIZE,
};
use crate::data::{self, Format, RatingEvent, RatingMatrix, ShardManifest, SplitPair, SynthConfig};
use crate::dist::{self, Aggregation, LossMode, Topology, TrainConfig, TrainLog};
use crate::error::{Error, Result};
use crate::eval::{
    build_request_trace, replay, rmse, NetworkTopology, ReplayOptions, Request, MBPS,
};
use crate::model::{self, Activation, ModelParams};
use crate::optim::{AdamConfig, AdamMode};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Svd,
    Nmf,
    Dl,
    Ddl,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Svd, Method::Nmf, Method::Dl, Method::Ddl];

    pub fn name(self) -> &'static str {
        match self {
            Method::Svd => "svd",
            Method::Nmf => "nmf",
            Method::Dl => "dl",
            Method::Ddl => "ddl",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    /// Guessed from the extension when absent.
    pub format: Option<Format>,
    /// Keep only the most active users (after `max_contents`).
    pub max_users: Option<usize>,
    /// Keep only the most rated contents.
    pub max_contents: Option<usize>,
    pub train_ratio: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            format: None,
            max_users: None,
            max_contents: None,
            train_ratio: 0.8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub users: usize,
    pub contents: usize,
    pub density: f64,
    pub exponent: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            users: 600,
            contents: 400,
            density: 0.1,
            exponent: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mens: usize,
    pub batch: usize,
    pub epochs: usize,
    pub dropout: f64,
    /// Read `dropout` as the keep probability instead of the drop fraction.
    pub dropout_keep: bool,
    /// Topology trained by the `train` command.
    pub topology: Topology,
    pub adam_mode: AdamMode,
    pub step: f64,
    pub hidden: Vec<usize>,
    pub output: Activation,
    pub tolerance: f64,
    pub patience: usize,
    /// Unobserved entries enter the loss as zero targets.
    pub zero_fill: bool,
    /// Weight worker gradients by batch size instead of the plain mean.
    pub weighted: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mens: t.men_count,
            batch: t.batch_size,
            epochs: t.max_epochs,
            dropout: t.dropout_rate,
            dropout_keep: false,
            topology: Topology::Ddl,
            adam_mode: t.adam.mode,
            step: t.adam.step,
            hidden: t.hidden_layers,
            output: t.output_activation,
            tolerance: t.tolerance,
            patience: t.patience,
            zero_fill: false,
            weighted: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    /// Every rank is fitted; the one with the lowest test RMSE is reported.
    pub svd_ranks: Vec<usize>,
    pub nmf_ranks: Vec<usize>,
    pub nmf_iters: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            svd_ranks: vec![16],
            nmf_ranks: vec![16],
            nmf_iters: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub backhaul_mbps: f64,
    pub men_mbps: f64,
    pub user_mbps: f64,
    /// Every MEN pair linked; otherwise MENs only reach the CS.
    pub full_mesh: bool,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            backhaul_mbps: 60.0,
            men_mbps: 100.0,
            user_mbps: 100.0,
            full_mesh: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSection {
    /// Per-MEN storage, bytes.
    pub capacities: Vec<u64>,
    pub content_size: u64,
    /// DL scores sum over all users, giving every MEN the same cache.
    pub dl_global_agg: bool,
}

impl Default for CacheSection {
    fn default() -> Self {
        Self {
            capacities: vec![4_000_000_000, 8_000_000_000, 16_000_000_000, 32_000_000_000],
            content_size: DEFAULT_CONTENT_SIZE,
            dl_global_agg: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub methods: Vec<Method>,
    pub out: PathBuf,
    /// Run the methods concurrently.
    pub parallel: bool,
    pub data: DataSection,
    pub synth: Option<SynthSection>,
    pub train: TrainSection,
    pub baselines: BaselineSection,
    pub network: NetworkSection,
    pub cache: CacheSection,
    pub eval: ReplayOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            methods: Method::ALL.to_vec(),
            out: PathBuf::from("runs/latest"),
            parallel: false,
            data: DataSection::default(),
            synth: None,
            train: TrainSection::default(),
            baselines: BaselineSection::default(),
            network: NetworkSection::default(),
            cache: CacheSection::default(),
            eval: ReplayOptions::default(),
        }
    }
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(Error::Config(format!("malformed config key `{key}`")));
        }
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
        let map = node.as_object_mut().expect("object");
        if parts.peek().is_none() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part).or_insert(Value::Null);
    }
    Ok(())
}

fn flatten_into(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, v, out);
            }
        }
        Value::Null => {}
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

impl ExperimentConfig {
    /// Applies `key = value` pairs on top of `self`.
    pub fn apply<I, K>(&self, overrides: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, Value)>,
        K: AsRef<str>,
    {
        let mut tree = serde_json::to_value(self)?;
        for (k, v) in overrides {
            set_dotted(&mut tree, k.as_ref(), v)?;
        }
        serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a config file. Keys may be dotted, nested, or a mix; a run's
    /// `metadata.json` is accepted through its `config` entry.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let value = match value {
            Value::Object(mut map) if map.get("config").is_some_and(Value::is_object) => {
                map.remove("config").expect("checked")
            }
            other => other,
        };
        if !value.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let mut flat = BTreeMap::new();
        flatten_into("", &value, &mut flat);
        Self::default().apply(flat)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The resolved configuration as flat dotted keys.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut flat = BTreeMap::new();
        flatten_into(
            "",
            &serde_json::to_value(self).expect("config serializes"),
            &mut flat,
        );
        flat
    }

    pub fn train_config(&self, topology: Topology) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            topology,
            men_count: t.mens,
            batch_size: t.batch,
            max_epochs: t.epochs,
            tolerance: t.tolerance,
            patience: t.patience,
            dropout_rate: if t.dropout_keep {
                1.0 - t.dropout
            } else {
                t.dropout
            },
            hidden_layers: t.hidden.clone(),
            output_activation: t.output,
            adam: AdamConfig {
                step: t.step,
                mode: t.adam_mode,
                ..AdamConfig::default()
            },
            loss: if t.zero_fill {
                LossMode::ZeroFill
            } else {
                LossMode::Observed
            },
            aggregation: if t.weighted {
                Aggregation::Weighted
            } else {
                Aggregation::Mean
            },
            seed: self.seed,
        }
    }

    pub fn topology(&self) -> NetworkTopology {
        let n = &self.network;
        let mut topo = if n.full_mesh {
            NetworkTopology::full_mesh(self.train.mens)
        } else {
            NetworkTopology::isolated(self.train.mens)
        };
        topo.backhaul_bps = n.backhaul_mbps * MBPS;
        topo.men_bps = n.men_mbps * MBPS;
        topo.user_bps = n.user_mbps * MBPS;
        topo
    }

    pub fn synth_config(&self) -> Option<SynthConfig> {
        self.synth.map(|s| SynthConfig {
            users: s.users,
            contents: s.contents,
            density: s.density,
            exponent: s.exponent,
            seed: self.seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.path.is_none() && self.synth.is_none() {
            return Err(Error::Config(
                "no dataset: set data.path (or EDGECACHE_DATA_DIR) or synth parameters".into(),
            ));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(Error::Config("a method is listed twice".into()));
        }
        if self.cache.capacities.is_empty() {
            return Err(Error::Config("capacity sweep is empty".into()));
        }
        if self.cache.content_size == 0 {
            return Err(Error::Config("content size must be > 0".into()));
        }
        if !(self.data.train_ratio > 0.0 && self.data.train_ratio < 1.0) {
            return Err(Error::Config("data.train_ratio must lie in (0, 1)".into()));
        }
        if self.baselines.svd_ranks.contains(&0) || self.baselines.nmf_ranks.contains(&0) {
            return Err(Error::Config("baseline ranks must be ≥ 1".into()));
        }
        if self.baselines.svd_ranks.is_empty() || self.baselines.nmf_ranks.is_empty() {
            return Err(Error::Config(
                "baseline rank lists must be non-empty".into(),
            ));
        }
        if self.train.dropout_keep && !(self.train.dropout > 0.0 && self.train.dropout <= 1.0) {
            return Err(Error::Config("keep probability must lie in (0, 1]".into()));
        }
        self.topology().validate()?;
        self.train_config(Topology::Ddl).validate()
    }
}

/// Where a MovieLens download is looked up under `EDGECACHE_DATA_DIR`.
pub fn dataset_in_dir(dir: &Path) -> Option<PathBuf> {
    ["ml-1m/ratings.dat", "ratings.dat", "ratings.csv"]
        .iter()
        .map(|rel| dir.join(rel))
        .find(|p| p.is_file())
}

pub fn load_events(cfg: &ExperimentConfig) -> Result<Vec<RatingEvent>> {
    let events = match (&cfg.data.path, cfg.synth_config()) {
        (Some(path), _) => {
            let format = cfg.data.format.unwrap_or_else(|| Format::from_path(path));
            data::ingest(path, format)?
        }
        (None, Some(synth)) => data::synth_zipf(&synth)?,
        (None, None) => return Err(Error::Config("no dataset configured".into())),
    };
    Ok(match (cfg.data.max_users, cfg.data.max_contents) {
        (None, None) => events,
        (users, contents) => data::subsample_dense_core(
            &events,
            users.unwrap_or(usize::MAX),
            contents.unwrap_or(usize::MAX),
        ),
    })
}

/// Everything the methods share: the split, its normalized training half,
/// the MEN shards and the replay trace.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub split: SplitPair,
    /// Ratings are divided by this before training and predictions multiplied
    /// back before scoring.
    pub scale: f64,
    pub train_norm: RatingMatrix,
    pub shards: Vec<RatingMatrix>,
    pub manifest: ShardManifest,
    pub trace: Vec<Request>,
    pub catalog: ContentCatalog,
}

pub fn prepare(cfg: &ExperimentConfig, events: &[RatingEvent]) -> Result<Prepared> {
    let split = data::split(events, cfg.data.train_ratio, cfg.seed)?;
    let scale = split.train.max_value();
    if !(scale > 0.0) {
        return Err(Error::Degenerate("training ratings are all zero".into()));
    }
    let train_norm = split.train.scaled(1.0 / scale);
    let shards = data::shard(&train_norm, cfg.train.mens, cfg.seed)?;
    let manifest = ShardManifest::from_shards(&shards);
    let trace = build_request_trace(&split.test, &manifest)?;
    let catalog = ContentCatalog::new(
        split.train.contents().ids().to_vec(),
        cfg.cache.content_size,
    )?;
    Ok(Prepared {
        split,
        scale,
        train_norm,
        shards,
        manifest,
        trace,
        catalog,
    })
}

/// A fitted method's predictions in rating units.
#[derive(Clone, Debug)]
pub struct MethodOutcome {
    pub method: Method,
    pub pred: Matrix,
    pub rmse: f64,
    /// Selected baseline rank.
    pub rank: Option<usize>,
    pub params: Option<ModelParams>,
    pub log: Option<TrainLog>,
    pub seconds: f64,
}

fn best_rank(
    ranks: &[usize],
    mut fit: impl FnMut(usize) -> Result<Matrix>,
    test: &RatingMatrix,
) -> Result<(usize, Matrix, f64)> {
    let mut best: Option<(usize, Matrix, f64)> = None;
    for &k in ranks {
        let pred = fit(k)?;
        let score = rmse(&pred, test)?;
        log::info!("rank {k}: test RMSE {score:.4}");
        if best.as_ref().is_none_or(|b| score < b.2) {
            best = Some((k, pred, score));
        }
    }
    best.ok_or_else(|| Error::Config("no ranks to fit".into()))
}

/// Trains the autoencoder in `topology` and returns it with its log.
pub fn train_model(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    topology: Topology,
) -> Result<(ModelParams, TrainLog)> {
    let tc = cfg.train_config(topology);
    match topology {
        Topology::Dl => dist::run_centralized(&prep.train_norm, &tc),
        Topology::Ddl => dist::run_distributed(&prep.shards, &tc),
    }
}

/// Predicted ratings for every training user, in rating units.
pub fn predict_ratings(params: &ModelParams, prep: &Prepared) -> Result<Matrix> {
    Ok(model::predict(params, &prep.train_norm.dense())?.scale(prep.scale))
}

pub fn run_method(
    method: Method,
    cfg: &ExperimentConfig,
    prep: &Prepared,
) -> Result<MethodOutcome> {
    let start = Instant::now();
    let test = &prep.split.test;
    let mut outcome = match method {
        Method::Svd => {
            let svd = Svd::compute(&prep.split.train.dense());
            let (k, pred, score) = best_rank(
                &cfg.baselines.svd_ranks,
                |k| Ok(svd.truncate(k)?.reconstruct()),
                test,
            )?;
            MethodOutcome {
                method,
                pred,
                rmse: score,
                rank: Some(k),
                params: None,
                log: None,
                seconds: 0.0,
            }
        }
        Method::Nmf => {
            let iters = cfg.baselines.nmf_iters;
            let (k, pred, score) = best_rank(
                &cfg.baselines.nmf_ranks,
                |k| nmf_predict(&prep.split.train, k, iters, cfg.seed),
                test,
            )?;
            MethodOutcome {
                method,
                pred,
                rmse: score,
                rank: Some(k),
                params: None,
                log: None,
                seconds: 0.0,
            }
        }
        Method::Dl | Method::Ddl => {
            let topology = if method == Method::Dl {
                Topology::Dl
            } else {
                Topology::Ddl
            };
            let (params, log) = train_model(cfg, prep, topology)?;
            let pred = predict_ratings(&params, prep)?;
            let score = rmse(&pred, test)?;
            MethodOutcome {
                method,
                pred,
                rmse: score,
                rank: None,
                params: Some(params),
                log: Some(log),
                seconds: 0.0,
            }
        }
    };
    outcome.seconds = start.elapsed().as_secs_f64();
    log::info!(
        "{}: test RMSE {:.4} in {:.1}s",
        method.name(),
        outcome.rmse,
        outcome.seconds
    );
    Ok(outcome)
}

/// Per-MEN aggregated popularity for a method's predictions.
pub fn placement_scores(
    method: Method,
    cfg: &ExperimentConfig,
    prep: &Prepared,
    pred: &Matrix,
) -> Result<BTreeMap<usize, Scores>> {
    let users = prep.train_norm.users();
    let contents = prep.train_norm.contents();
    if method == Method::Dl && cfg.cache.dl_global_agg {
        let global = aggregate_popularity(pred, users, contents, users.ids())?;
        return Ok(prep
            .manifest
            .0
            .keys()
            .map(|&m| (m, global.clone()))
            .collect());
    }
    prep.manifest
        .0
        .iter()
        .map(|(&m, us)| Ok((m, aggregate_popularity(pred, users, contents, us)?)))
        .collect()
}

/// One line of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub capacity_bytes: u64,
    pub rmse: f64,
    pub hit_rate: f64,
    pub avg_delay_s: f64,
    pub local: usize,
    pub neighbor: usize,
    pub cs: usize,
}

/// Places and replays one method at every configured capacity.
pub fn evaluate_method(
    outcome: &MethodOutcome,
    cfg: &ExperimentConfig,
    prep: &Prepared,
) -> Result<(Vec<ResultRow>, BTreeMap<u64, PlacementPlan>)> {
    let scores = placement_scores(outcome.method, cfg, prep, &outcome.pred)?;
    let topo = cfg.topology();
    let mut rows = Vec::new();
    let mut plans = BTreeMap::new();
    for &capacity in &cfg.cache.capacities {
        let plan = plan_from_scores(&scores, capacity, cfg.cache.content_size)?;
        plan.validate(cfg.cache.content_size)?;
        let r = replay(&plan, &topo, &prep.trace, &prep.catalog, cfg.eval)?;
        rows.push(ResultRow {
            method: outcome.method,
            capacity_bytes: capacity,
            rmse: outcome.rmse,
            hit_rate: r.hit_rate,
            avg_delay_s: r.avg_delay,
            local: r.local_hits,
            neighbor: r.neighbor_hits,
            cs: r.cs_fetches,
        });
        plans.insert(capacity, plan);
    }
    Ok((rows, plans))
}

pub fn write_results_csv(path: impl AsRef<Path>, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Writes `epoch,loss,wall_ms`.
pub fn emit_learning_curve(log: &TrainLog, path: impl AsRef<Path>) -> Result<()> {
    if log.is_empty() {
        return Err(Error::Degenerate("learning curve of an empty log".into()));
    }
    let mut out = String::from("epoch,loss,wall_ms\n");
    for r in &log.records {
        out.push_str(&format!("{},{},{:.3}\n", r.epoch, r.loss, r.wall_ms));
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub rows: Vec<ResultRow>,
    pub outcomes: Vec<MethodOutcome>,
    pub out_dir: PathBuf,
}

impl ExperimentReport {
    pub fn rows_for(&self, method: Method) -> impl Iterator<Item = &ResultRow> {
        self.rows.iter().filter(move |r| r.method == method)
    }

    pub fn outcome(&self, method: Method) -> Option<&MethodOutcome> {
        self.outcomes.iter().find(|o| o.method == method)
    }
}

fn run_methods(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Vec<MethodOutcome>> {
    let tag = |m: Method| move |e: Error| e.in_method(m.name());
    if cfg.parallel {
        thread::scope(|scope| {
            let handles: Vec<_> = cfg
                .methods
                .iter()
                .map(|&m| (m, scope.spawn(move || run_method(m, cfg, prep))))
                .collect();
            handles
                .into_iter()
                .map(|(m, h)| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Contract("method thread panicked".into())))
                        .map_err(tag(m))
                })
                .collect()
        })
    } else {
        cfg.methods
            .iter()
            .map(|&m| run_method(m, cfg, prep).map_err(tag(m)))
            .collect()
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn dataset_summary(prep: &Prepared) -> Value {
    serde_json::json!({
        "users": prep.split.train.n_users(),
        "contents": prep.split.train.n_contents(),
        "train_ratings": prep.split.train.len(),
        "test_ratings": prep.split.test.len(),
        "requests": prep.trace.len(),
        "rating_scale": prep.scale,
        "normalization": "divide by the largest training rating",
    })
}

/// Runs the full comparison and writes `results.csv`, `metadata.json`,
/// `placements.json`, `shards.json` and per-model training logs into
/// `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let total = Instant::now();
    let events = load_events(cfg)?;
    let prep = prepare(cfg, &events)?;
    log::info!(
        "{} users × {} contents, {} train / {} test ratings",
        prep.split.train.n_users(),
        prep.split.train.n_contents(),
        prep.split.train.len(),
        prep.split.test.len()
    );
    let outcomes = run_methods(cfg, &prep)?;

    let out = &cfg.out;
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    let mut placements = BTreeMap::new();
    let mut method_meta = BTreeMap::new();
    for o in &outcomes {
        let (r, plans) =
            evaluate_method(o, cfg, &prep).map_err(|e| e.in_method(o.method.name()))?;
        rows.extend(r);
        placements.insert(o.method.name(), plans);
        if let Some(log) = &o.log {
            fs::write(
                out.join(format!("train_log_{}.csv", o.method.name())),
                log.to_csv(),
            )?;
            if !log.is_empty() {
                emit_learning_curve(
                    log,
                    out.join(format!("learning_curve_{}.csv", o.method.name())),
                )?;
            }
        }
        method_meta.insert(
            o.method.name(),
            serde_json::json!({
                "rmse": o.rmse,
                "rank": o.rank,
                "epochs": o.log.as_ref().map(TrainLog::len),
                "rounds": o.log.as_ref().and_then(|l| l.records.last()).map(|r| r.round_count),
                "seconds": o.seconds,
            }),
        );
    }
    write_results_csv(out.join("results.csv"), &rows)?;
    write_json(&out.join("placements.json"), &placements)?;
    fs::write(out.join("shards.json"), prep.manifest.to_json()? + "\n")?;
    write_json(
        &out.join("metadata.json"),
        &serde_json::json!({
            "config": cfg.to_flat(),
            "seed": cfg.seed,
            "dataset": dataset_summary(&prep),
            "methods": method_meta,
            "network": cfg.topology(),
            "total_seconds": total.elapsed().as_secs_f64(),
            "version": env!("CARGO_PKG_VERSION"),
        }),
    )?;
    Ok(ExperimentReport {
        rows,
        outcomes,
        out_dir: out.clone(),
    })
}

#[derive(Clone, Debug)]
pub struct TrainingReport {
    pub params: ModelParams,
    pub log: TrainLog,
    pub rmse: f64,
}

/// Trains one topology (`train.topology`) and writes the model, its logs and
/// the shard manifest into `cfg.out`.
pub fn run_training(cfg: &ExperimentConfig) -> Result<TrainingReport> {
    cfg.validate()?;
    let start = Instant::now();
    let events = load_events(cfg)?;
    let prep = prepare(cfg, &events)?;
    let topology = cfg.train.topology;
    let name = match topology {
        Topology::Dl => "dl",
        Topology::Ddl => "ddl",
    };
    let (params, log) = train_model(cfg, &prep, topology).map_err(|e| e.in_method(name))?;
    let score = rmse(&predict_ratings(&params, &prep)?, &prep.split.test)?;

    let out = &cfg.out;
    fs::create_dir_all(out)?;
    write_json(&out.join("model.json"), &params)?;
    fs::write(out.join("train_log.csv"), log.to_csv())?;
    if !log.is_empty() {
        emit_learning_curve(&log, out.join("learning_curve.csv"))?;
    }
    fs::write(out.join("shards.json"), prep.manifest.to_json()? + "\n")?;
    write_json(
        &out.join("metadata.json"),
        &serde_json::json!({
            "config": cfg.to_flat(),
            "seed": cfg.seed,
            "topology": topology,
            "dataset": dataset_summary(&prep),
            "rmse": score,
            "epochs": log.len(),
            "seconds": start.elapsed().as_secs_f64(),
            "version": env!("CARGO_PKG_VERSION"),
        }),
    )?;
    Ok(TrainingReport {
        params,
        log,
        rmse: score,
    })
}

/// One line of `sweep.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mens: usize,
    pub epochs: usize,
    pub rounds: u64,
    pub final_loss: f64,
    pub rmse: f64,
}

/// Distributed training for each MEN count, writing `sweep.csv` and one
/// learning curve per count so wall time against N can be compared.
pub fn run_men_sweep(cfg: &ExperimentConfig, mens: &[usize]) -> Result<Vec<SweepRow>> {
    if mens.is_empty() {
        return Err(Error::Config("MEN sweep is empty".into()));
    }
    cfg.validate()?;
    let events = load_events(cfg)?;
    fs::create_dir_all(&cfg.out)?;
    let mut rows = Vec::new();
    let mut timings = BTreeMap::new();
    for &n in mens {
        let point = cfg.apply([("train.mens", Value::from(n))])?;
        point.validate()?;
        let prep = prepare(&point, &events)?;
        let start = Instant::now();
        let (params, log) =
            train_model(&point, &prep, Topology::Ddl).map_err(|e| e.in_method("ddl"))?;
        timings.insert(n, start.elapsed().as_secs_f64());
        let score = rmse(&predict_ratings(&params, &prep)?, &prep.split.test)?;
        if !log.is_empty() {
            emit_learning_curve(&log, cfg.out.join(format!("learning_curve_n{n}.csv")))?;
        }
        let last = log.records.last();
        rows.push(SweepRow {
            mens: n,
            epochs: log.len(),
            rounds: last.map_or(0, |r| r.round_count),
            final_loss: last.map_or(f64::NAN, |r| r.loss),
            rmse: score,
        });
    }
    let mut w = csv::Writer::from_path(cfg.out.join("sweep.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_json(
        &cfg.out.join("metadata.json"),
        &serde_json::json!({
            "config": cfg.to_flat(),
            "mens": mens,
            "seconds": timings,
            "version": env!("CARGO_PKG_VERSION"),
        }),
    )?;
    Ok(rows)
}

/// Parses `400MB`, `1.5GB`, `200000000` (bytes) and similar.
pub fn parse_capacity(text: &str) -> Result<u64> {
    let t = text.trim();
    let split = t.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let factor = match unit.trim().to_ascii_uppercase().as_str() {
        "" | "B" => 1.0,
        "KB" => 1e3,
        "MB" => 1e6,
        "GB" => 1e9,
        "TB" => 1e12,
        other => return Err(Error::Config(format!("unknown size unit `{other}`"))),
    };
    let value: f64 = num
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad size `{text}`")))?;
    if !(value >= 0.0) || !value.is_finite() {
        return Err(Error::Config(format!("bad size `{text}`")));
    }
    Ok((value * factor).round() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke(out: &Path) -> ExperimentConfig {
        ExperimentConfig::default()
            .apply([
                ("synth.users", Value::from(50)),
                ("synth.contents", Value::from(40)),
                ("synth.density", Value::from(0.3)),
                ("train.mens", Value::from(2)),
                ("train.batch", Value::from(10)),
                ("train.epochs", Value::from(3)),
                ("train.hidden", serde_json::json!([8, 8])),
                ("baselines.svd_ranks", serde_json::json!([2, 4])),
                ("baselines.nmf_ranks", serde_json::json!([2])),
                ("baselines.nmf_iters", Value::from(20)),
                (
                    "cache.capacities",
                    serde_json::json!([0, 1_000_000_000, 2_000_000_000]),
                ),
                ("out", Value::from(out.to_str().unwrap())),
            ])
            .unwrap()
    }

    #[test]
    fn defaults_follow_the_evaluation_setup() {
        let c = ExperimentConfig::default();
        assert_eq!(c.train.mens, 6);
        assert_eq!(c.train.hidden, vec![64, 64]);
        assert_eq!(c.train.dropout, 0.8);
        assert_eq!(c.train.step, 0.001);
        assert_eq!(c.train.epochs, 2000);
        assert_eq!(c.cache.content_size, 200_000_000);
        assert_eq!(c.network.backhaul_mbps, 60.0);
        assert_eq!(c.data.train_ratio, 0.8);
    }

    #[test]
    fn missing_dataset_is_a_config_error() {
        let err = ExperimentConfig::default().validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn dotted_and_nested_keys_agree() {
        let a = ExperimentConfig::from_json(r#"{"train.mens": 3, "synth.users": 90}"#).unwrap();
        let b = ExperimentConfig::from_json(r#"{"train": {"mens": 3}, "synth": {"users": 90}}"#)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.mens, 3);
        assert_eq!(a.synth.unwrap().contents, SynthSection::default().contents);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"train.menz": 3}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn flat_round_trip() {
        let c = smoke(Path::new("/tmp/x"));
        let back = ExperimentConfig::default().apply(c.to_flat()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn dropout_keep_inverts_rate() {
        let c = ExperimentConfig::default()
            .apply([
                ("train.dropout_keep", Value::from(true)),
                ("train.dropout", Value::from(0.8)),
            ])
            .unwrap();
        assert!((c.train_config(Topology::Dl).dropout_rate - 0.2).abs() < 1e-12);
    }

    #[test]
    fn capacity_units() {
        assert_eq!(parse_capacity("400MB").unwrap(), 400_000_000);
        assert_eq!(parse_capacity("1.5GB").unwrap(), 1_500_000_000);
        assert_eq!(parse_capacity("123").unwrap(), 123);
        assert!(parse_capacity("5 parsecs").is_err());
        assert!(parse_capacity("-1MB").is_err());
    }

    #[test]
    fn learning_curve_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        assert!(emit_learning_curve(&TrainLog::default(), &path).is_err());
        let log = TrainLog {
            records: (1..=3)
                .map(|e| dist::EpochRecord {
                    epoch: e,
                    loss: 1.0 / e as f64,
                    wall_ms: e as f64,
                    round_count: e as u64,
                })
                .collect(),
        };
        emit_learning_curve(&log, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next(), Some("epoch,loss,wall_ms"));
    }

    #[test]
    fn smoke_run_writes_one_row_per_method_and_capacity() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke(dir.path());
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.rows.len(), 4 * 3);
        let rows = read_results_csv(dir.path().join("results.csv")).unwrap();
        assert_eq!(rows, report.rows);
        for r in &rows {
            assert_eq!(
                r.local + r.neighbor + r.cs,
                report.rows[0].local + report.rows[0].neighbor + report.rows[0].cs
            );
        }
        for name in [
            "metadata.json",
            "placements.json",
            "shards.json",
            "learning_curve_ddl.csv",
        ] {
            assert!(dir.path().join(name).is_file(), "{name}");
        }
        let reloaded = ExperimentConfig::load(dir.path().join("metadata.json")).unwrap();
        assert_eq!(reloaded, cfg);
    }

    #[test]
    fn repeated_runs_give_identical_results() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_experiment(&smoke(a.path())).unwrap();
        let mut par = smoke(b.path());
        par.parallel = true;
        run_experiment(&par).unwrap();
        assert_eq!(
            fs::read(a.path().join("results.csv")).unwrap(),
            fs::read(b.path().join("results.csv")).unwrap()
        );
    }

    #[test]
    fn global_dl_aggregation_gives_identical_caches() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = smoke(dir.path());
        cfg.methods = vec![Method::Dl];
        let report = run_experiment(&cfg).unwrap();
        let placements: Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("placements.json")).unwrap())
                .unwrap();
        let plan = &placements["dl"]["2000000000"];
        assert_eq!(plan["1"]["contents"], plan["2"]["contents"]);
        assert_eq!(report.rows.len(), 3);
    }
}
