//! Training in both topologies.
//!
//! [`run_centralized`] is the CS learning over the concatenated dataset.
//! [`run_distributed`] runs one worker per MEN on its own shard; every round
//! the CS broadcasts the model, waits for exactly one gradient from each
//! worker computed on that model, averages them in `men_id` order and applies
//! one Adam step. Workers only ever send gradients and scalar loss values.
//!
//! Sub-stream layout for a run seeded with `seed`: stream 0 initializes the
//! model, stream `WORKER_STREAM_BASE + men_id` drives a worker's shuffling and
//! dropout. The centralized learner uses the stream of MEN 1, which makes a
//! single-MEN distributed run reproduce it bit for bit.

use std::panic::{self, AssertUnwindSafe};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::RatingMatrix;
use crate::error::{Error, Result};
use crate::model::{
    self, autoencoder_specs, Activation, DropoutSpec, LayerSpec, Mode, ModelParams,
};
use crate::optim::{
    adam_step, average_gradients, weighted_average_gradients, AdamConfig, AdamState, Gradient,
};
use crate::tensor::{Matrix, RngStream};

const INIT_STREAM: u64 = 0;
const WORKER_STREAM_BASE: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// Centralized learning at the CS.
    Dl,
    /// Distributed learning with the CS as a synchronous parameter server.
    Ddl,
}

impl std::str::FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dl" => Ok(Topology::Dl),
            "ddl" => Ok(Topology::Ddl),
            other => Err(Error::Config(format!("unknown topology `{other}`"))),
        }
    }
}

/// Which entries enter the reconstruction loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Observed entries only.
    #[default]
    Observed,
    /// Unobserved entries count as zero targets.
    ZeroFill,
}

/// How the CS combines worker gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Plain `1/N` mean.
    #[default]
    Mean,
    /// Mean weighted by each worker's batch size.
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub topology: Topology,
    pub men_count: usize,
    /// Global mini-batch β; each MEN uses β/N in the distributed topology.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Relative loss improvement under which an epoch counts as stalled.
    pub tolerance: f64,
    /// Consecutive stalled epochs before stopping; 0 disables early stop.
    pub patience: usize,
    pub dropout_rate: f64,
    pub hidden_layers: Vec<usize>,
    pub output_activation: Activation,
    pub adam: AdamConfig,
    pub loss: LossMode,
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            topology: Topology::Dl,
            men_count: 6,
            batch_size: 60,
            max_epochs: 2000,
            tolerance: 1e-5,
            patience: 20,
            dropout_rate: 0.8,
            hidden_layers: vec![64, 64],
            output_activation: Activation::Relu,
            adam: AdamConfig::default(),
            loss: LossMode::Observed,
            aggregation: Aggregation::Mean,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        if self.men_count == 0 {
            return Err(Error::Config("MEN count must be ≥ 1".into()));
        }
        if self.topology == Topology::Ddl && !self.batch_size.is_multiple_of(self.men_count) {
            return Err(Error::Config(format!(
                "batch size {} is not divisible by {} MENs",
                self.batch_size, self.men_count
            )));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::Config("hidden layers need at least one unit".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config("tolerance must be ≥ 0".into()));
        }
        DropoutSpec::new(self.dropout_rate, None)?;
        self.adam.validate()
    }

    pub fn layer_specs(&self, inputs: usize) -> Vec<LayerSpec> {
        autoencoder_specs(inputs, &self.hidden_layers, self.output_activation)
    }

    pub fn dropout(&self) -> DropoutSpec {
        let n_layers = self.hidden_layers.len() + 1;
        DropoutSpec::after_last_hidden(self.dropout_rate, n_layers).expect("rate validated")
    }

    /// Initial model for a catalog of `inputs` contents.
    pub fn init_params(&self, inputs: usize) -> Result<ModelParams> {
        ModelParams::init(
            &self.layer_specs(inputs),
            &mut RngStream::with_stream(self.seed, INIT_STREAM),
        )
    }

    fn worker_rng(&self, men_id: usize) -> RngStream {
        RngStream::with_stream(self.seed, WORKER_STREAM_BASE + men_id as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Cumulative milliseconds since training started.
    pub wall_ms: f64,
    /// Cumulative optimizer steps.
    pub round_count: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// `epoch,loss,wall_ms,round_count`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,wall_ms,round_count\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{:.3},{}\n",
                r.epoch, r.loss, r.wall_ms, r.round_count
            ));
        }
        out
    }
}

/// True iff the last `patience` epochs each improved the loss by a relative
/// amount below `tol`.
pub fn convergence_check(losses: &[f64], tol: f64, patience: usize) -> bool {
    if patience == 0 || losses.len() < patience + 1 {
        return false;
    }
    losses[losses.len() - patience - 1..].windows(2).all(|w| {
        let (prev, cur) = (w[0], w[1]);
        let improvement = if prev == 0.0 {
            0.0
        } else {
            (prev - cur) / prev.abs()
        };
        improvement < tol
    })
}

/// Observer hook, called once per optimizer step before the update.
pub struct RoundEvent<'a> {
    pub round: u64,
    pub epoch: usize,
    /// Model the gradient was computed under.
    pub model: &'a ModelParams,
    /// Gradient about to be applied (averaged, in the distributed topology).
    pub gradient: &'a Gradient,
}

/// One learner's view of its local data.
struct LocalLearner {
    inputs: Matrix,
    loss_mask: Matrix,
    rng: RngStream,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl LocalLearner {
    fn new(data: &RatingMatrix, loss: LossMode, batch: usize, rng: RngStream) -> Self {
        let inputs = data.dense();
        let loss_mask = match loss {
            LossMode::Observed => data.mask(),
            LossMode::ZeroFill => Matrix::filled(inputs.rows(), inputs.cols(), 1.0),
        };
        Self {
            order: (0..inputs.rows()).collect(),
            inputs,
            loss_mask,
            rng,
            cursor: 0,
            batch,
        }
    }

    fn len(&self) -> usize {
        self.inputs.rows()
    }

    /// Next mini-batch of row indices; reshuffles at the start of each pass.
    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor == 0 {
            self.rng.shuffle(&mut self.order);
        }
        let end = (self.cursor + self.batch).min(self.order.len());
        let rows = self.order[self.cursor..end].to_vec();
        self.cursor = if end >= self.order.len() { 0 } else { end };
        rows
    }

    fn step(
        &mut self,
        params: &ModelParams,
        dropout: &DropoutSpec,
    ) -> Result<(Gradient, f64, usize)> {
        let rows = self.next_batch();
        let x = self.inputs.select_rows(&rows);
        let mask = self.loss_mask.select_rows(&rows);
        let (y, trace) = model::forward(params, &x, dropout, Mode::Train, &mut self.rng)?;
        let loss = model::masked_mse(&y, &x, &mask)?;
        let grad = model::backward(params, &trace, &y, &x, &mask)?;
        Ok((grad, loss, rows.len()))
    }
}

fn check_loss(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, loss })
    }
}

/// Centralized training over `data`.
pub fn run_centralized(data: &RatingMatrix, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    run_centralized_with(data, cfg, &mut |_| {})
}

pub fn run_centralized_with(
    data: &RatingMatrix,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&RoundEvent<'_>),
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if data.n_users() == 0 || data.n_contents() == 0 {
        return Err(Error::Degenerate("training matrix is empty".into()));
    }
    let mut params = cfg.init_params(data.n_contents())?;
    let mut state = AdamState::new(&params);
    let dropout = cfg.dropout();
    let mut learner = LocalLearner::new(data, cfg.loss, cfg.batch_size, cfg.worker_rng(1));
    let rounds_per_epoch = learner.len().div_ceil(cfg.batch_size);
    let mut log = TrainLog::default();
    let start = Instant::now();

    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        for _ in 0..rounds_per_epoch {
            let (grad, loss, _) = learner.step(&params, &dropout)?;
            check_loss(loss, epoch)?;
            observer(&RoundEvent {
                round: state.step,
                epoch,
                model: &params,
                gradient: &grad,
            });
            (params, state) =
                adam_step(params, state, &grad, &cfg.adam).map_err(|e| diverged(e, epoch))?;
            loss_sum += loss;
        }
        let loss = loss_sum / rounds_per_epoch as f64;
        check_loss(loss, epoch)?;
        log.records.push(EpochRecord {
            epoch,
            loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            round_count: state.step,
        });
        if convergence_check(&log.losses(), cfg.tolerance, cfg.patience) {
            break;
        }
    }
    Ok((params, log))
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            epoch,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Local gradient sent from a MEN to the CS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientMsg {
    pub men_id: usize,
    /// Round of the model this gradient was computed under.
    pub round: u64,
    pub gradient: Gradient,
    pub sample_count: usize,
    pub batch_loss: f64,
}

/// Global model broadcast from the CS to every MEN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMsg {
    pub round: u64,
    pub params: ModelParams,
}

#[derive(Debug)]
pub enum WorkerReply {
    Gradient(GradientMsg),
    Failed {
        men_id: usize,
        round: u64,
        reason: String,
    },
}

/// CS side of the MEN ↔ CS link.
pub trait ServerTransport {
    fn broadcast(&mut self, msg: Arc<ModelMsg>) -> Result<()>;
    fn gather(&mut self) -> Result<WorkerReply>;
    /// Tells every worker to stop.
    fn shutdown(&mut self);
}

/// MEN side of the MEN ↔ CS link.
pub trait WorkerTransport: Send {
    /// Blocks for the next model; `None` once the CS has shut down.
    fn recv_model(&mut self) -> Option<Arc<ModelMsg>>;
    fn send(&mut self, reply: WorkerReply) -> Result<()>;
}

/// In-process transport over std channels.
pub struct ChannelServer {
    to_workers: Vec<Sender<Arc<ModelMsg>>>,
    from_workers: Receiver<WorkerReply>,
}

pub struct ChannelWorker {
    from_server: Receiver<Arc<ModelMsg>>,
    to_server: Sender<WorkerReply>,
}

pub fn channel_transport(workers: usize) -> (ChannelServer, Vec<ChannelWorker>) {
    let (reply_tx, reply_rx) = mpsc::channel();
    let mut to_workers = Vec::with_capacity(workers);
    let mut ends = Vec::with_capacity(workers);
    for _ in 0..workers {
        let (tx, rx) = mpsc::channel();
        to_workers.push(tx);
        ends.push(ChannelWorker {
            from_server: rx,
            to_server: reply_tx.clone(),
        });
    }
    (
        ChannelServer {
            to_workers,
            from_workers: reply_rx,
        },
        ends,
    )
}

impl ServerTransport for ChannelServer {
    fn broadcast(&mut self, msg: Arc<ModelMsg>) -> Result<()> {
        for (k, tx) in self.to_workers.iter().enumerate() {
            tx.send(Arc::clone(&msg)).map_err(|_| Error::WorkerFailed {
                men_id: k + 1,
                round: msg.round,
                reason: "worker hung up".into(),
            })?;
        }
        Ok(())
    }

    fn gather(&mut self) -> Result<WorkerReply> {
        self.from_workers
            .recv()
            .map_err(|_| Error::Contract("all workers hung up".into()))
    }

    fn shutdown(&mut self) {
        self.to_workers.clear();
    }
}

impl WorkerTransport for ChannelWorker {
    fn recv_model(&mut self) -> Option<Arc<ModelMsg>> {
        self.from_server.recv().ok()
    }

    fn send(&mut self, reply: WorkerReply) -> Result<()> {
        self.to_server
            .send(reply)
            .map_err(|_| Error::Contract("parameter server hung up".into()))
    }
}

/// A MEN's learner: its shard never leaves this struct.
pub struct MenWorker {
    pub men_id: usize,
    learner: LocalLearner,
    dropout: DropoutSpec,
}

impl MenWorker {
    pub fn new(men_id: usize, shard: &RatingMatrix, cfg: &TrainConfig) -> Self {
        let local_batch = match cfg.topology {
            Topology::Ddl => cfg.batch_size / cfg.men_count,
            Topology::Dl => cfg.batch_size,
        };
        Self {
            men_id,
            learner: LocalLearner::new(shard, cfg.loss, local_batch, cfg.worker_rng(men_id)),
            dropout: cfg.dropout(),
        }
    }

    /// Computes the local gradient for `model` on the next local batch.
    pub fn compute(&mut self, model: &ModelMsg) -> Result<GradientMsg> {
        let (gradient, batch_loss, sample_count) =
            self.learner.step(&model.params, &self.dropout)?;
        Ok(GradientMsg {
            men_id: self.men_id,
            round: model.round,
            gradient,
            sample_count,
            batch_loss,
        })
    }

    /// Serves models until the CS shuts the link down.
    pub fn serve(mut self, mut link: impl WorkerTransport) {
        while let Some(model) = link.recv_model() {
            let outcome = panic::catch_unwind(AssertUnwindSafe(|| self.compute(&model)));
            let reply = match outcome {
                Ok(Ok(msg)) => WorkerReply::Gradient(msg),
                Ok(Err(e)) => WorkerReply::Failed {
                    men_id: self.men_id,
                    round: model.round,
                    reason: e.to_string(),
                },
                Err(_) => WorkerReply::Failed {
                    men_id: self.men_id,
                    round: model.round,
                    reason: "worker panicked".into(),
                },
            };
            let failed = matches!(reply, WorkerReply::Failed { .. });
            if link.send(reply).is_err() || failed {
                break;
            }
        }
    }
}

fn validate_shards(shards: &[RatingMatrix], cfg: &TrainConfig) -> Result<()> {
    if shards.len() != cfg.men_count {
        return Err(Error::Config(format!(
            "{} shards for {} MENs",
            shards.len(),
            cfg.men_count
        )));
    }
    let first = &shards[0];
    if shards.iter().any(|s| s.contents() != first.contents()) {
        return Err(Error::Config("shards must share one catalog".into()));
    }
    let sizes: Vec<usize> = shards.iter().map(RatingMatrix::n_users).collect();
    let (lo, hi) = (
        sizes.iter().min().copied().unwrap_or(0),
        sizes.iter().max().copied().unwrap_or(0),
    );
    if lo == 0 {
        return Err(Error::Config("every shard needs at least one user".into()));
    }
    if hi - lo > 1 {
        return Err(Error::Config(format!(
            "shard sizes {sizes:?} differ by more than one user"
        )));
    }
    Ok(())
}

/// Distributed training with one worker thread per shard.
pub fn run_distributed(
    shards: &[RatingMatrix],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    run_distributed_with(shards, cfg, &mut |_| {})
}

pub fn run_distributed_with(
    shards: &[RatingMatrix],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&RoundEvent<'_>),
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    validate_shards(shards, cfg)?;
    let n = cfg.men_count;
    let local_batch = cfg.batch_size / n;
    let largest = shards.iter().map(RatingMatrix::n_users).max().unwrap_or(0);
    let rounds_per_epoch = largest.div_ceil(local_batch);
    let init = cfg.init_params(shards[0].n_contents())?;

    let (mut server, links) = channel_transport(n);
    thread::scope(|scope| {
        for (k, (shard, link)) in shards.iter().zip(links).enumerate() {
            let worker = MenWorker::new(k + 1, shard, cfg);
            scope.spawn(move || worker.serve(link));
        }
        let result = parameter_server(&mut server, init, cfg, rounds_per_epoch, observer);
        server.shutdown();
        result
    })
}

/// The CS loop: broadcast, barrier on N gradients from the current round,
/// average, step.
fn parameter_server(
    link: &mut impl ServerTransport,
    mut params: ModelParams,
    cfg: &TrainConfig,
    rounds_per_epoch: usize,
    observer: &mut dyn FnMut(&RoundEvent<'_>),
) -> Result<(ModelParams, TrainLog)> {
    let n = cfg.men_count;
    let mut state = AdamState::new(&params);
    let mut log = TrainLog::default();
    let start = Instant::now();

    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        for _ in 0..rounds_per_epoch {
            let round = state.step;
            let model = Arc::new(ModelMsg { round, params });
            link.broadcast(Arc::clone(&model))?;

            let mut inbox: Vec<Option<GradientMsg>> = vec![None; n];
            for _ in 0..n {
                match link.gather()? {
                    WorkerReply::Gradient(msg) => {
                        if msg.round != round {
                            return Err(Error::Contract(format!(
                                "stale gradient from MEN {}: computed at round {}, expected {round}",
                                msg.men_id, msg.round
                            )));
                        }
                        let slot = msg
                            .men_id
                            .checked_sub(1)
                            .and_then(|i| inbox.get_mut(i))
                            .ok_or_else(|| {
                                Error::Contract(format!("unknown MEN {}", msg.men_id))
                            })?;
                        if slot.is_some() {
                            return Err(Error::Contract(format!(
                                "MEN {} answered twice",
                                msg.men_id
                            )));
                        }
                        *slot = Some(msg);
                    }
                    WorkerReply::Failed {
                        men_id,
                        round,
                        reason,
                    } => {
                        return Err(Error::WorkerFailed {
                            men_id,
                            round,
                            reason,
                        });
                    }
                }
            }
            let msgs: Vec<GradientMsg> = inbox
                .into_iter()
                .map(|m| m.expect("barrier filled"))
                .collect();
            let grads: Vec<Gradient> = msgs.iter().map(|m| m.gradient.clone()).collect();
            let averaged = match cfg.aggregation {
                Aggregation::Mean => average_gradients(&grads)?,
                Aggregation::Weighted => {
                    let counts: Vec<usize> = msgs.iter().map(|m| m.sample_count).collect();
                    weighted_average_gradients(&grads, &counts)?
                }
            };
            let round_loss = msgs.iter().map(|m| m.batch_loss).sum::<f64>() / n as f64;
            check_loss(round_loss, epoch)?;
            observer(&RoundEvent {
                round,
                epoch,
                model: &model.params,
                gradient: &averaged,
            });
            let current =
                Arc::try_unwrap(model).map_or_else(|shared| shared.params.clone(), |m| m.params);
            (params, state) =
                adam_step(current, state, &averaged, &cfg.adam).map_err(|e| diverged(e, epoch))?;
            loss_sum += round_loss;
        }
        let loss = loss_sum / rounds_per_epoch as f64;
        check_loss(loss, epoch)?;
        log.records.push(EpochRecord {
            epoch,
            loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            round_count: state.step,
        });
        if convergence_check(&log.losses(), cfg.tolerance, cfg.patience) {
            break;
        }
    }
    Ok((params, log))
}
