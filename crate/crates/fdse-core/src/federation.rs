//! Round-based federated training: broadcast, local SGD, and per-method
//! aggregation, plus label-free adaptation to an unseen domain.
//!
//! Methods:
//! - `fdse`: decomposed model; shared tensors aggregated by min-norm
//!   consensus over client deltas, personalized tensors by similarity
//!   attention, BN feature-extractor stats by unweighted mean, BN eraser
//!   stats kept local. Local objective is task loss + lambda * consistency.
//! - `fedavg`: undecomposed model; every tensor (including BN stats) is
//!   data-size-weighted averaged.
//! - `fedbn`: like fedavg but all BN tensors (affine and stats) stay local.
//! - `local`: no aggregation at all.

use crate::aggregation::{
    aggregate_shared_layer, attention_aggregate, mean_tensors, weighted_mean_tensors,
    AggregationReport, SolverConfig,
};
use crate::bundle::Bundle;
use crate::data::{derive_rng, Benchmark, LabeledDataset};
use crate::error::{FdseError, Result};
use crate::model::{DecomposedModel, ForwardMode, ModelArch};
use crate::regularizer::{depth_weights, total_con_loss_on_tape, LayerStatSnapshot};
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "fdse-checkpoint/v1";
pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fdse,
    FedAvg,
    FedBn,
    Local,
}

impl std::str::FromStr for Method {
    type Err = FdseError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fdse" => Ok(Method::Fdse),
            "fedavg" => Ok(Method::FedAvg),
            "fedbn" => Ok(Method::FedBn),
            "local" => Ok(Method::Local),
            other => Err(FdseError::Config(format!(
                "unknown method '{}', expected fdse|fedavg|fedbn|local",
                other
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Fdse => "fdse",
            Method::FedAvg => "fedavg",
            Method::FedBn => "fedbn",
            Method::Local => "local",
        };
        f.write_str(s)
    }
}

/// Rule used on shared tensors; `Average` (data-size-weighted delta mean)
/// exists for the reduction-to-FedAvg ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedAggregator {
    MinNorm,
    Average,
}

impl std::str::FromStr for SharedAggregator {
    type Err = FdseError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "min_norm" | "minnorm" => Ok(SharedAggregator::MinNorm),
            "average" => Ok(SharedAggregator::Average),
            other => Err(FdseError::Config(format!(
                "unknown shared aggregator '{}', expected min_norm|average",
                other
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub method: Method,
    /// Communication rounds; 0 means evaluate the initial model only.
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-round multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub clip_norm: f64,
    /// Consistency-loss weight (fdse only).
    pub lambda: f64,
    /// Depth-weighting sharpness for the consistency loss.
    pub beta: f64,
    /// Attention temperature for personalized aggregation.
    pub tau: f64,
    /// BN running-stat momentum (weight on the previous value).
    pub bn_momentum: f64,
    pub seed: u64,
    /// Client-task thread count; 1 runs clients serially. Results are
    /// identical for any value.
    pub parallel_clients: usize,
    /// Evaluate every k rounds (the last round is always evaluated).
    pub eval_every: usize,
    /// Checkpoint every k rounds; 0 disables.
    pub checkpoint_every: usize,
    pub shared_aggregator: SharedAggregator,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            method: Method::Fdse,
            rounds: 100,
            local_epochs: 1,
            batch_size: 50,
            lr: 0.05,
            lr_decay: 0.998,
            clip_norm: 10.0,
            lambda: 0.1,
            beta: 0.001,
            tau: 1.0,
            bn_momentum: 0.9,
            seed: 0,
            parallel_clients: 1,
            eval_every: 1,
            checkpoint_every: 50,
            shared_aggregator: SharedAggregator::MinNorm,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(FdseError::Config("local_epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(FdseError::Config("batch_size must be >= 2 for batch statistics".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(FdseError::Config("lr must be finite and >= 0".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(FdseError::Config("lr_decay must be in (0, 1]".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(FdseError::Config("clip_norm must be > 0".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(FdseError::Config("lambda must be >= 0".into()));
        }
        if !(self.tau > 0.0) {
            return Err(FdseError::Config("tau must be > 0".into()));
        }
        if !(self.bn_momentum >= 0.0 && self.bn_momentum < 1.0) {
            return Err(FdseError::Config("bn_momentum must be in [0, 1)".into()));
        }
        if self.eval_every == 0 {
            return Err(FdseError::Config("eval_every must be >= 1".into()));
        }
        if self.parallel_clients == 0 {
            return Err(FdseError::Config("parallel_clients must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, round: usize) -> f64 {
        self.lr * self.lr_decay.powi(round as i32)
    }
}

/// How one named tensor travels between server and clients for a method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NameClass {
    /// Min-norm consensus over client deltas (or plain averaging under the
    /// ablation aggregator).
    Consensus,
    /// Similarity-attention over client values; result stays per-client.
    Attention,
    /// Unweighted mean of client values into the global model.
    UnweightedAverage,
    /// Data-size-weighted mean of client values into the global model.
    WeightedAverage,
    /// Never leaves the client.
    Keep,
}

fn classify(method: Method, name: &str) -> NameClass {
    match method {
        Method::Fdse => {
            if name.contains(".bn_dse.running_") {
                NameClass::Keep
            } else if name.contains(".dse.") || name.contains(".bn_dse.") {
                NameClass::Attention
            } else if name.contains(".bn_dfe.running_") {
                NameClass::UnweightedAverage
            } else {
                NameClass::Consensus
            }
        }
        Method::FedAvg => NameClass::WeightedAverage,
        Method::FedBn => {
            if name.contains(".bn_") {
                NameClass::Keep
            } else {
                NameClass::WeightedAverage
            }
        }
        Method::Local => NameClass::Keep,
    }
}

/// Normalized data-size weights for weighted averaging.
pub fn data_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(FdseError::EmptyData("all clients have empty training sets".into()));
    }
    Ok(sizes.iter().map(|&s| s as f64 / total as f64).collect())
}

#[derive(Debug, Clone)]
pub struct ClientSlot<F: Real> {
    pub id: usize,
    pub domain_id: String,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    /// Tensors this client keeps between rounds (attention + keep classes).
    pub personal: BTreeMap<String, Tensor<F>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientRound {
    pub client: usize,
    pub skipped: bool,
    pub batches: usize,
    pub train_loss: Option<f64>,
    pub task_loss: Option<f64>,
    pub con_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub val_correct: Option<u64>,
    pub val_total: Option<u64>,
    pub test_correct: Option<u64>,
    pub test_total: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub lr: f64,
    pub clients: Vec<ClientRound>,
    /// Accuracy over the pooled test samples of all clients.
    pub test_all: Option<f64>,
    /// Mean of per-client test accuracies.
    pub test_avg: Option<f64>,
    pub val_all: Option<f64>,
    pub val_avg: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub rounds_run: usize,
    /// Round whose validation AVG was best; test metrics are read there.
    pub best_round: Option<usize>,
    pub best_val_avg: Option<f64>,
    pub test_all_at_best: Option<f64>,
    pub test_avg_at_best: Option<f64>,
}

struct LocalOutcome<F: Real> {
    id: usize,
    skipped: bool,
    batches: usize,
    task_loss: Option<f64>,
    con_loss: Option<f64>,
    trained: BTreeMap<String, Tensor<F>>,
}

/// Per-client training and evaluation metrics from local SGD.
#[derive(Debug, Clone)]
pub struct LocalTrainMetrics {
    pub skipped: bool,
    pub batches: usize,
    pub task_loss: Option<f64>,
    pub con_loss: Option<f64>,
}

/// Run E epochs of clipped mini-batch SGD on the assembled client model.
/// `global_stats` enables the consistency term (fdse): per-block reference
/// (mean, var) read from the broadcast model. The rng drives only the
/// per-epoch shuffle. Batches smaller than 2 are dropped.
pub fn local_train<F: Real>(
    model: &mut DecomposedModel<F>,
    data: &LabeledDataset,
    cfg: &TrainerConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
    global_stats: Option<&[(Vec<F>, Vec<F>)]>,
) -> Result<LocalTrainMetrics> {
    if data.is_empty() {
        return Ok(LocalTrainMetrics { skipped: true, batches: 0, task_loss: None, con_loss: None });
    }
    let mut task_sum = 0.0f64;
    let mut con_sum = 0.0f64;
    let mut batches = 0usize;
    let mut indices: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.local_epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x32, labels) = data.batch(chunk)?;
            let x: Tensor<F> = x32.cast();
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &x, ForwardMode::Train)?;
            let task = tape.softmax_cross_entropy(fwd.logits, &labels)?;
            let loss = if let Some(globals) = global_stats {
                let (con, _) = total_con_loss_on_tape(
                    &mut tape,
                    &fwd.dfe_stats,
                    globals,
                    F::from_f64(cfg.bn_momentum),
                    cfg.beta,
                )?;
                con_sum += tape.value(con).item().into_f64();
                let weighted = tape.scale(con, F::from_f64(cfg.lambda))?;
                tape.add(task, weighted)?
            } else {
                task
            };
            task_sum += tape.value(task).item().into_f64();
            tape.backward(loss)?;
            let mut grads = Vec::with_capacity(fwd.leaves.len());
            for (name, id) in &fwd.leaves {
                if let Some(g) = tape.grad_tensor(*id) {
                    grads.push((name.clone(), g));
                }
            }
            model.sgd_step(&grads, lr, cfg.clip_norm)?;
            batches += 1;
        }
    }
    if batches == 0 {
        return Ok(LocalTrainMetrics { skipped: true, batches: 0, task_loss: None, con_loss: None });
    }
    Ok(LocalTrainMetrics {
        skipped: false,
        batches,
        task_loss: Some(task_sum / batches as f64),
        con_loss: global_stats.map(|_| con_sum / batches as f64),
    })
}

/// Count eval-mode argmax hits over a dataset in fixed-size chunks.
pub fn accuracy_counts<F: Real>(model: &mut DecomposedModel<F>, ds: &LabeledDataset) -> Result<(u64, u64)> {
    let mut correct = 0u64;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x32, labels) = ds.batch(chunk)?;
        let x: Tensor<F> = x32.cast();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &x, ForwardMode::Eval)?;
        let logits = tape.value(fwd.logits);
        let k = model.num_classes();
        for (i, &l) in labels.iter().enumerate() {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == l as usize {
                correct += 1;
            }
        }
    }
    Ok((correct, ds.len() as u64))
}

/// Pool per-client (correct, total) counts into ALL (pooled accuracy) and
/// AVG (mean of per-client accuracies).
pub fn pool_accuracy(counts: &[(u64, u64)]) -> (Option<f64>, Option<f64>) {
    let usable: Vec<&(u64, u64)> = counts.iter().filter(|(_, t)| *t > 0).collect();
    if usable.is_empty() {
        return (None, None);
    }
    let correct: u64 = usable.iter().map(|(c, _)| c).sum();
    let total: u64 = usable.iter().map(|(_, t)| t).sum();
    let all = correct as f64 / total as f64;
    let avg = usable.iter().map(|(c, t)| *c as f64 / *t as f64).sum::<f64>() / usable.len() as f64;
    (Some(all), Some(avg))
}

#[derive(Debug, Clone)]
struct BestSnapshot<F: Real> {
    round: usize,
    val_avg: f64,
    test_all: Option<f64>,
    test_avg: Option<f64>,
    global: DecomposedModel<F>,
    banks: Vec<BTreeMap<String, Tensor<F>>>,
}

pub struct FederatedRun<F: Real> {
    pub cfg: TrainerConfig,
    pub global: DecomposedModel<F>,
    pub clients: Vec<ClientSlot<F>>,
    pub round: usize,
    best: Option<BestSnapshot<F>>,
}

impl<F: Real> FederatedRun<F> {
    /// Build server and clients from a benchmark. Non-fdse methods force the
    /// undecomposed variant of the architecture.
    pub fn new(cfg: TrainerConfig, arch: ModelArch, bench: &Benchmark) -> Result<Self> {
        cfg.validate()?;
        if bench.domains.is_empty() {
            return Err(FdseError::NoClients);
        }
        let arch = if cfg.method == Method::Fdse { arch } else { arch.undecomposed() };
        arch.validate()?;
        let expect = (arch.input.0, arch.input.1, arch.input.2);
        let sample: Vec<usize> = bench.shape.clone();
        if sample != vec![expect.0, expect.1, expect.2] {
            return Err(FdseError::Dimension(format!(
                "benchmark samples {:?} do not match model input {:?}",
                sample, expect
            )));
        }
        if bench.num_classes != arch.num_classes {
            return Err(FdseError::Dimension(format!(
                "benchmark has {} classes, model {}",
                bench.num_classes, arch.num_classes
            )));
        }
        let mut init_rng = derive_rng(cfg.seed, &[3]);
        let global = DecomposedModel::build(arch, cfg.bn_momentum, &mut init_rng)?;
        let clients = bench
            .domains
            .iter()
            .enumerate()
            .map(|(id, d)| {
                let personal = global
                    .named_tensors()
                    .into_iter()
                    .filter(|(name, _)| {
                        matches!(classify(cfg.method, name), NameClass::Attention | NameClass::Keep)
                    })
                    .map(|(name, t)| (name, t.clone()))
                    .collect();
                ClientSlot {
                    id,
                    domain_id: d.spec.id.clone(),
                    train: d.train.clone(),
                    val: d.val.clone(),
                    test: d.test.clone(),
                    personal,
                }
            })
            .collect();
        Ok(FederatedRun { cfg, global, clients, round: 0, best: None })
    }

    /// Global model plus the client's personal tensors.
    pub fn assemble(&self, client: usize) -> Result<DecomposedModel<F>> {
        let slot = self
            .clients
            .get(client)
            .ok_or_else(|| FdseError::Config(format!("no client {}", client)))?;
        let mut model = self.global.clone();
        for (name, t) in &slot.personal {
            model.set_tensor(name, t)?;
        }
        Ok(model)
    }

    /// Model for a domain that never trained: personal tensors are the
    /// unweighted mean of all clients' banks.
    pub fn unseen_model(&self) -> Result<DecomposedModel<F>> {
        let mut model = self.global.clone();
        let names: Vec<String> = self.clients[0].personal.keys().cloned().collect();
        for name in names {
            let tensors: Vec<&Tensor<F>> =
                self.clients.iter().map(|c| &c.personal[&name]).collect();
            let mean = mean_tensors(&tensors)?;
            model.set_tensor(&name, &mean)?;
        }
        Ok(model)
    }

    fn fdse_global_stats(&self) -> Vec<(Vec<F>, Vec<F>)> {
        self.global
            .blocks
            .iter()
            .map(|b| {
                (b.bn_dfe.running_mean.data().to_vec(), b.bn_dfe.running_var.data().to_vec())
            })
            .collect()
    }

    /// Evaluate the current models without training (used for rounds = 0
    /// and for post-hoc inspection). Feeds model selection like a round.
    pub fn evaluate_only(&mut self) -> Result<RoundMetrics> {
        let round = self.round;
        let lr = self.cfg.lr_at(round);
        let mut clients = Vec::with_capacity(self.clients.len());
        let mut val_counts = Vec::new();
        let mut test_counts = Vec::new();
        for k in 0..self.clients.len() {
            let mut model = self.assemble(k)?;
            let (vc, vt) = accuracy_counts(&mut model, &self.clients[k].val)?;
            let (tc, tt) = accuracy_counts(&mut model, &self.clients[k].test)?;
            val_counts.push((vc, vt));
            test_counts.push((tc, tt));
            clients.push(ClientRound {
                client: k,
                skipped: false,
                batches: 0,
                train_loss: None,
                task_loss: None,
                con_loss: None,
                val_accuracy: if vt > 0 { Some(vc as f64 / vt as f64) } else { None },
                test_accuracy: if tt > 0 { Some(tc as f64 / tt as f64) } else { None },
                val_correct: Some(vc),
                val_total: Some(vt),
                test_correct: Some(tc),
                test_total: Some(tt),
            });
        }
        let (val_all, val_avg) = pool_accuracy(&val_counts);
        let (test_all, test_avg) = pool_accuracy(&test_counts);
        let metrics = RoundMetrics { round, lr, clients, test_all, test_avg, val_all, val_avg };
        self.consider_best(&metrics);
        Ok(metrics)
    }

    fn consider_best(&mut self, metrics: &RoundMetrics) {
        if let Some(v) = metrics.val_avg {
            let better = match &self.best {
                None => true,
                Some(b) => v > b.val_avg,
            };
            if better {
                self.best = Some(BestSnapshot {
                    round: metrics.round,
                    val_avg: v,
                    test_all: metrics.test_all,
                    test_avg: metrics.test_avg,
                    global: self.global.clone(),
                    banks: self.clients.iter().map(|c| c.personal.clone()).collect(),
                });
            }
        }
    }

    /// One communication round: local training on every client, then
    /// method-specific aggregation, then (optionally) evaluation.
    pub fn step_round(&mut self) -> Result<(RoundMetrics, Option<AggregationReport>)> {
        let round = self.round;
        let lr = self.cfg.lr_at(round);
        let use_con = self.cfg.method == Method::Fdse;
        let globals = if use_con { Some(self.fdse_global_stats()) } else { None };

        let cfg = &self.cfg;
        let run_one = |slot: &ClientSlot<F>| -> Result<LocalOutcome<F>> {
            let mut model = self.assemble(slot.id)?;
            let mut rng = derive_rng(cfg.seed, &[2, slot.id as u64, round as u64]);
            let m = local_train(&mut model, &slot.train, cfg, lr, &mut rng, globals.as_deref())?;
            Ok(LocalOutcome {
                id: slot.id,
                skipped: m.skipped,
                batches: m.batches,
                task_loss: m.task_loss,
                con_loss: m.con_loss,
                trained: model.export().into_iter().collect(),
            })
        };
        let outcomes: Vec<LocalOutcome<F>> = if self.cfg.parallel_clients > 1 {
            self.clients.par_iter().map(run_one).collect::<Result<Vec<_>>>()?
        } else {
            self.clients.iter().map(run_one).collect::<Result<Vec<_>>>()?
        };

        let report = self.aggregate(&outcomes)?;

        self.round += 1;
        let evaluate_now = round % self.cfg.eval_every == 0 || self.round == self.cfg.rounds;
        let mut clients = Vec::with_capacity(self.clients.len());
        let mut val_counts = Vec::new();
        let mut test_counts = Vec::new();
        for o in &outcomes {
            let (mut val_c, mut val_t, mut test_c, mut test_t) = (None, None, None, None);
            let (mut val_acc, mut test_acc) = (None, None);
            if evaluate_now {
                let mut model = self.assemble(o.id)?;
                let (vc, vt) = accuracy_counts(&mut model, &self.clients[o.id].val)?;
                let (tc, tt) = accuracy_counts(&mut model, &self.clients[o.id].test)?;
                val_counts.push((vc, vt));
                test_counts.push((tc, tt));
                if vt > 0 {
                    val_acc = Some(vc as f64 / vt as f64);
                }
                if tt > 0 {
                    test_acc = Some(tc as f64 / tt as f64);
                }
                (val_c, val_t, test_c, test_t) = (Some(vc), Some(vt), Some(tc), Some(tt));
            }
            clients.push(ClientRound {
                client: o.id,
                skipped: o.skipped,
                batches: o.batches,
                train_loss: match (o.task_loss, o.con_loss) {
                    (Some(t), Some(c)) => Some(t + self.cfg.lambda * c),
                    (Some(t), None) => Some(t),
                    _ => None,
                },
                task_loss: o.task_loss,
                con_loss: o.con_loss,
                val_accuracy: val_acc,
                test_accuracy: test_acc,
                val_correct: val_c,
                val_total: val_t,
                test_correct: test_c,
                test_total: test_t,
            });
        }
        let (val_all, val_avg) = pool_accuracy(&val_counts);
        let (test_all, test_avg) = pool_accuracy(&test_counts);
        let metrics = RoundMetrics { round, lr, clients, test_all, test_avg, val_all, val_avg };
        self.consider_best(&metrics);
        Ok((metrics, report))
    }

    fn aggregate(&mut self, outcomes: &[LocalOutcome<F>]) -> Result<Option<AggregationReport>> {
        let method = self.cfg.method;
        let names: Vec<String> =
            self.global.named_tensors().into_iter().map(|(n, _)| n).collect();
        let sizes: Vec<usize> = self.clients.iter().map(|c| c.train.len()).collect();
        let solver = SolverConfig::default();
        let mut shared_rows = Vec::new();
        let mut attention_rows = Vec::new();

        for name in &names {
            match classify(method, name) {
                NameClass::Consensus => match self.cfg.shared_aggregator {
                    SharedAggregator::Average => {
                        // Plain averaging needs no deltas; use the exact same
                        // arithmetic as WeightedAverage so the degenerate
                        // configuration tracks it bit for bit.
                        let w = data_weights(&sizes)?;
                        let tensors: Vec<&Tensor<F>> =
                            outcomes.iter().map(|o| &o.trained[name]).collect();
                        let mean = weighted_mean_tensors(&tensors, &w)?;
                        self.global.set_tensor(name, &mean)?;
                    }
                    SharedAggregator::MinNorm => {
                        let before = self.global.get_tensor(name)?.clone();
                        let deltas: Vec<Tensor<F>> = outcomes
                            .iter()
                            .map(|o| {
                                let after = &o.trained[name];
                                Tensor::new(
                                    before.shape().to_vec(),
                                    after
                                        .data()
                                        .iter()
                                        .zip(before.data())
                                        .map(|(&a, &b)| a - b)
                                        .collect(),
                                )
                            })
                            .collect::<Result<Vec<_>>>()?;
                        let (delta, row) = aggregate_shared_layer(name, &deltas, &solver)?;
                        shared_rows.push(row);
                        let new = Tensor::new(
                            before.shape().to_vec(),
                            before
                                .data()
                                .iter()
                                .zip(delta.data())
                                .map(|(&b, &d)| F::from_f64(b.into_f64() + d.into_f64()))
                                .collect(),
                        )?;
                        self.global.set_tensor(name, &new)?;
                    }
                },
                NameClass::Attention => {
                    let tensors: Vec<Tensor<F>> =
                        outcomes.iter().map(|o| o.trained[name].clone()).collect();
                    let (outs, row) = attention_aggregate(name, &tensors, self.cfg.tau)?;
                    attention_rows.push(row);
                    for (o, out) in outcomes.iter().zip(outs) {
                        self.clients[o.id].personal.insert(name.clone(), out);
                    }
                }
                NameClass::UnweightedAverage => {
                    let tensors: Vec<&Tensor<F>> =
                        outcomes.iter().map(|o| &o.trained[name]).collect();
                    let mean = mean_tensors(&tensors)?;
                    self.global.set_tensor(name, &mean)?;
                }
                NameClass::WeightedAverage => {
                    let w = data_weights(&sizes)?;
                    let tensors: Vec<&Tensor<F>> =
                        outcomes.iter().map(|o| &o.trained[name]).collect();
                    let mean = weighted_mean_tensors(&tensors, &w)?;
                    self.global.set_tensor(name, &mean)?;
                }
                NameClass::Keep => {
                    for o in outcomes {
                        self.clients[o.id].personal.insert(name.clone(), o.trained[name].clone());
                    }
                }
            }
        }

        if method == Method::Fdse {
            Ok(Some(AggregationReport {
                round: self.round,
                shared: shared_rows,
                personalized: attention_rows,
            }))
        } else {
            Ok(None)
        }
    }

    /// Run the configured number of rounds, invoking `sink` after each one.
    pub fn run(
        &mut self,
        mut sink: impl FnMut(&RoundMetrics, Option<&AggregationReport>) -> Result<()>,
    ) -> Result<RunSummary> {
        while self.round < self.cfg.rounds {
            let (metrics, report) = self.step_round()?;
            sink(&metrics, report.as_ref())?;
        }
        Ok(self.summary())
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            method: self.cfg.method,
            rounds_run: self.round,
            best_round: self.best.as_ref().map(|b| b.round),
            best_val_avg: self.best.as_ref().map(|b| b.val_avg),
            test_all_at_best: self.best.as_ref().and_then(|b| b.test_all),
            test_avg_at_best: self.best.as_ref().and_then(|b| b.test_avg),
        }
    }

    /// Rewind server and banks to the round with the best validation AVG.
    pub fn restore_best(&mut self) -> Result<usize> {
        let best = self
            .best
            .as_ref()
            .ok_or_else(|| FdseError::NotApplicable("no evaluated round to restore".into()))?;
        self.global = best.global.clone();
        for (c, bank) in self.clients.iter_mut().zip(best.banks.clone()) {
            c.personal = bank;
        }
        Ok(best.round)
    }

    /// Serialize round index, server tensors, and every client bank.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "round": self.round,
            "method": self.cfg.method,
            "arch": self.global.arch,
            "num_clients": self.clients.len(),
        });
        let mut b = Bundle::new(meta);
        for (name, t) in self.global.named_tensors() {
            b.push_tensor(format!("server/{}", name), &t.to_f32());
        }
        for c in &self.clients {
            for (name, t) in &c.personal {
                b.push_tensor(format!("client{}/{}", c.id, name), &t.to_f32());
            }
        }
        b.save(path)
    }

    /// Restore tensors and round index from a checkpoint produced by
    /// `save_checkpoint` with a matching config and benchmark.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let disp = path.display().to_string();
        let b = Bundle::load(path)?;
        let format = b.meta.get("format").and_then(|v| v.as_str()).unwrap_or("");
        if format != CHECKPOINT_FORMAT {
            return Err(FdseError::parse(
                &disp,
                format!("format '{}', expected '{}'", format, CHECKPOINT_FORMAT),
            ));
        }
        let round = b
            .meta
            .get("round")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| FdseError::parse(&disp, "missing round".to_string()))?;
        let n = b
            .meta
            .get("num_clients")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| FdseError::parse(&disp, "missing num_clients".to_string()))?;
        if n as usize != self.clients.len() {
            return Err(FdseError::parse(
                &disp,
                format!("checkpoint has {} clients, run has {}", n, self.clients.len()),
            ));
        }
        let method = b.meta.get("method").and_then(|v| v.as_str()).unwrap_or("");
        if method != self.cfg.method.to_string() {
            return Err(FdseError::parse(
                &disp,
                format!("checkpoint method '{}', run method '{}'", method, self.cfg.method),
            ));
        }
        let names: Vec<String> = self.global.named_tensors().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let t: Tensor<f32> = b.get(&format!("server/{}", name))?.to_tensor()?;
            self.global.set_tensor(&name, &t.cast())?;
        }
        for k in 0..self.clients.len() {
            let names: Vec<String> = self.clients[k].personal.keys().cloned().collect();
            for name in names {
                let t: Tensor<f32> = b.get(&format!("client{}/{}", k, name))?.to_tensor()?;
                self.clients[k].personal.insert(name, t.cast());
            }
        }
        self.round = round as usize;
        self.best = None;
        Ok(())
    }
}

/// FedBN-style label-free adaptation: one pass over the target data in
/// stat-collection mode, refreshing every BN running statistic. No gradient
/// steps. Returns the number of batches consumed.
pub fn adapt_stats<F: Real>(
    model: &mut DecomposedModel<F>,
    target: &LabeledDataset,
    batch_size: usize,
) -> Result<usize> {
    if target.is_empty() {
        return Err(FdseError::EmptyData("adaptation target is empty".into()));
    }
    let indices: Vec<usize> = (0..target.len()).collect();
    let mut batches = 0;
    for chunk in indices.chunks(batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let (x32, _) = target.batch(chunk)?;
        let x: Tensor<F> = x32.cast();
        let mut tape = Tape::new();
        model.forward(&mut tape, &x, ForwardMode::StatCollect)?;
        batches += 1;
    }
    Ok(batches)
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptTrace {
    /// Consistency loss at epoch boundaries, evaluated exactly over the full
    /// target dataset in fixed order. Entry 0 is the pre-adaptation value,
    /// entry e the value after e epochs, so the vector has epochs+1 entries.
    pub epoch_loss: Vec<f64>,
    pub batches_per_epoch: usize,
}

/// Depth-weighted consistency loss of `model` on `data`, evaluated exactly:
/// per-channel mean and biased variance of each decomposed block's
/// pre-normalization output over the whole dataset, compared against the
/// frozen reference statistics. Deterministic in the model parameters; no
/// momentum tracking and no sampling enter the value.
fn dataset_con_loss<F: Real>(
    model: &mut DecomposedModel<F>,
    data: &LabeledDataset,
    batch_size: usize,
    globals: &[(Vec<F>, Vec<F>)],
    beta: f64,
) -> Result<f64> {
    let blocks = model.blocks.len();
    let mut m_acc: Vec<Vec<f64>> = Vec::with_capacity(blocks);
    let mut s_acc: Vec<Vec<f64>> = Vec::with_capacity(blocks);
    for b in &model.blocks {
        let d = b.bn_dfe.running_mean.data().len();
        m_acc.push(vec![0.0; d]);
        s_acc.push(vec![0.0; d]);
    }
    let mut weight_sum = 0.0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (x32, _) = data.batch(chunk)?;
        let x: Tensor<F> = x32.cast();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &x, ForwardMode::AdaptDse)?;
        // Per block, batch statistics cover chunk_len * H * W elements with a
        // fixed spatial size, so chunk_len is the right combination weight.
        let w = chunk.len() as f64;
        for s in &fwd.dfe_stats {
            let bm = tape.value(s.mean).data().to_vec();
            let bv = tape.value(s.var).data().to_vec();
            for (c, (&m, &v)) in bm.iter().zip(&bv).enumerate() {
                let (m, v) = (m.into_f64(), v.into_f64());
                m_acc[s.block][c] += w * m;
                s_acc[s.block][c] += w * (v + m * m);
            }
        }
        weight_sum += w;
    }
    if weight_sum == 0.0 {
        return Err(FdseError::EmptyData("consistency evaluation over empty dataset".into()));
    }
    let weights = depth_weights(blocks, beta);
    let mut total = 0.0;
    for (block, ((m, s), (gm, gv))) in m_acc.iter().zip(&s_acc).zip(globals).enumerate() {
        let mean: Vec<f64> = m.iter().map(|v| v / weight_sum).collect();
        let var: Vec<f64> = s
            .iter()
            .zip(&mean)
            .map(|(e2, mu)| (e2 / weight_sum - mu * mu).max(0.0))
            .collect();
        let snap = LayerStatSnapshot {
            layer: block,
            local_mean: mean,
            local_var: var,
            global_mean: gm.iter().map(|v| v.into_f64()).collect(),
            global_var: gv.iter().map(|v| v.into_f64()).collect(),
        };
        total += weights[block] * snap.loss()?;
    }
    Ok(total)
}

/// Consistency-only adaptation of the eraser modules: only DSE conv weights
/// and BN eraser affine parameters receive gradients; the feature-extractor
/// BN statistics stay frozen and serve as the fixed reference. Each batch's
/// own statistics are compared against that reference directly; the momentum
/// recursion is a training-round construct, and with the reference frozen
/// there is no running estimate left to track. With `epochs == 0` the model
/// is untouched.
pub fn adapt_consistency<F: Real>(
    model: &mut DecomposedModel<F>,
    target: &LabeledDataset,
    epochs: usize,
    lr: f64,
    cfg: &TrainerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdaptTrace> {
    if target.is_empty() {
        return Err(FdseError::EmptyData("adaptation target is empty".into()));
    }
    if !model.arch.blocks.iter().any(|b| b.expansion > 1) {
        return Err(FdseError::NotApplicable(
            "consistency adaptation needs decomposed blocks (expansion > 1)".into(),
        ));
    }
    let globals: Vec<(Vec<F>, Vec<F>)> = model
        .blocks
        .iter()
        .map(|b| (b.bn_dfe.running_mean.data().to_vec(), b.bn_dfe.running_var.data().to_vec()))
        .collect();

    let mut trace = AdaptTrace { epoch_loss: Vec::new(), batches_per_epoch: 0 };
    let mut indices: Vec<usize> = (0..target.len()).collect();
    if epochs > 0 {
        trace
            .epoch_loss
            .push(dataset_con_loss(model, target, cfg.batch_size, &globals, cfg.beta)?);
    }

    for _ in 0..epochs {
        indices.shuffle(rng);
        let mut batches = 0;
        for chunk in indices.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x32, _) = target.batch(chunk)?;
            let x: Tensor<F> = x32.cast();
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &x, ForwardMode::AdaptDse)?;
            // Momentum zero makes the tape loss compare the batch statistics
            // straight against the frozen reference, so the gradient is not
            // damped by a history term.
            let (total, _) =
                total_con_loss_on_tape(&mut tape, &fwd.dfe_stats, &globals, F::zero(), cfg.beta)?;
            tape.backward(total)?;
            let mut grads = Vec::with_capacity(fwd.leaves.len());
            for (name, id) in &fwd.leaves {
                if let Some(g) = tape.grad_tensor(*id) {
                    grads.push((name.clone(), g));
                }
            }
            model.sgd_step(&grads, lr, cfg.clip_norm)?;
            batches += 1;
        }
        if batches == 0 {
            return Err(FdseError::EmptyData(format!(
                "no usable batches of size >= 2 (target has {} samples)",
                target.len()
            )));
        }
        trace
            .epoch_loss
            .push(dataset_con_loss(model, target, cfg.batch_size, &globals, cfg.beta)?);
        trace.batches_per_epoch = batches;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_benchmark, synth_domains_4, DomainSpec, GeneratorConfig};

    fn tiny_benchmark(domains: usize, seed: u64) -> Benchmark {
        let cfg = GeneratorConfig { num_classes: 4, samples_per_class: 20, ..GeneratorConfig::default() };
        let specs: Vec<DomainSpec> = DomainSpec::synth_domains_4().into_iter().take(domains).collect();
        generate_benchmark(&cfg, &specs, seed).unwrap()
    }

    fn tiny_arch() -> ModelArch {
        let mut arch = ModelArch::desk_default();
        arch.num_classes = 4;
        arch
    }

    fn tiny_cfg(method: Method) -> TrainerConfig {
        TrainerConfig {
            method,
            rounds: 2,
            batch_size: 16,
            lr: 0.05,
            eval_every: 1,
            checkpoint_every: 0,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn weighted_sizes_match_arithmetic() {
        let w = data_weights(&[100, 300]).unwrap();
        assert_eq!(w, vec![0.25, 0.75]);
        let a = Tensor::<f32>::new(vec![1], vec![0.0]).unwrap();
        let b = Tensor::<f32>::new(vec![1], vec![4.0]).unwrap();
        let m = weighted_mean_tensors(&[&a, &b], &w).unwrap();
        assert_eq!(m.data()[0], 3.0);
    }

    #[test]
    fn pooled_accuracy_arithmetic() {
        let (all, avg) = pool_accuracy(&[(5, 10), (30, 30)]);
        assert!((all.unwrap() - 0.875).abs() < 1e-12);
        assert!((avg.unwrap() - 0.75).abs() < 1e-12);
        let (all, avg) = pool_accuracy(&[(10, 10), (30, 30)]);
        assert_eq!(all.unwrap(), 1.0);
        assert_eq!(avg.unwrap(), 1.0);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let bench = tiny_benchmark(2, 5);
        let cfg = TrainerConfig { lr: 0.0, ..tiny_cfg(Method::Fdse) };
        let mut run = FederatedRun::<f32>::new(cfg, tiny_arch(), &bench).unwrap();
        let before: Vec<(String, Tensor<f32>)> = run
            .global
            .export()
            .into_iter()
            .filter(|(n, _)| !n.contains("running_"))
            .collect();
        let (metrics, report) = run.step_round().unwrap();
        assert!(metrics.clients[0].train_loss.is_some());
        assert!(report.is_some());
        for (name, t) in before {
            let now = run.global.get_tensor(&name).unwrap();
            assert_eq!(now.data(), t.data(), "{} changed under lr=0", name);
        }
    }

    #[test]
    fn determinism_serial_vs_parallel() {
        let bench = tiny_benchmark(2, 6);
        let mk = |parallel: usize| {
            let cfg = TrainerConfig { parallel_clients: parallel, ..tiny_cfg(Method::Fdse) };
            let mut run = FederatedRun::<f32>::new(cfg, tiny_arch(), &bench).unwrap();
            let mut out = Vec::new();
            run.run(|m, _| {
                out.push(serde_json::to_string(m).unwrap());
                Ok(())
            })
            .unwrap();
            (out, run.global.export())
        };
        let (m1, g1) = mk(1);
        let (m2, g2) = mk(3);
        assert_eq!(m1, m2);
        for ((n1, t1), (n2, t2)) in g1.iter().zip(&g2) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "{} differs", n1);
        }
    }

    #[test]
    fn fedbn_keeps_bn_local_and_global_bn_untouched() {
        let bench = tiny_benchmark(2, 7);
        let mut run = FederatedRun::<f32>::new(tiny_cfg(Method::FedBn), tiny_arch(), &bench).unwrap();
        let init_gamma = run.global.get_tensor("block0.bn_dfe.gamma").unwrap().clone();
        run.step_round().unwrap();
        // Server BN affine never aggregated for fedbn.
        assert_eq!(
            run.global.get_tensor("block0.bn_dfe.gamma").unwrap().data(),
            init_gamma.data()
        );
        // Clients trained on different domains hold different BN tensors.
        let a = &run.clients[0].personal["block0.bn_dfe.running_mean"];
        let b = &run.clients[1].personal["block0.bn_dfe.running_mean"];
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn local_method_never_aggregates() {
        let bench = tiny_benchmark(2, 8);
        let mut run = FederatedRun::<f32>::new(tiny_cfg(Method::Local), tiny_arch(), &bench).unwrap();
        let before = run.global.export();
        run.step_round().unwrap();
        for (name, t) in before {
            assert_eq!(run.global.get_tensor(&name).unwrap().data(), t.data(), "{}", name);
        }
        let a = &run.clients[0].personal["head.weight"];
        let b = &run.clients[1].personal["head.weight"];
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn single_client_round_runs() {
        let bench = tiny_benchmark(1, 9);
        let mut run = FederatedRun::<f32>::new(tiny_cfg(Method::Fdse), tiny_arch(), &bench).unwrap();
        let (metrics, report) = run.step_round().unwrap();
        assert_eq!(metrics.clients.len(), 1);
        let rep = report.unwrap();
        for row in &rep.shared {
            assert!(row.weights.iter().all(|&w| (w - 1.0).abs() < 1e-12 || w == 0.0));
        }
    }

    #[test]
    fn fdse_shared_params_identical_across_clients() {
        let bench = tiny_benchmark(2, 10);
        let mut run = FederatedRun::<f32>::new(tiny_cfg(Method::Fdse), tiny_arch(), &bench).unwrap();
        run.step_round().unwrap();
        let m0 = run.assemble(0).unwrap();
        let m1 = run.assemble(1).unwrap();
        assert_eq!(m0.get_tensor("block0.dfe.weight").unwrap().data(), m1.get_tensor("block0.dfe.weight").unwrap().data());
        assert_eq!(m0.get_tensor("head.weight").unwrap().data(), m1.get_tensor("head.weight").unwrap().data());
        assert_ne!(m0.get_tensor("block0.dse.weight").unwrap().data(), m1.get_tensor("block0.dse.weight").unwrap().data());
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let bench = tiny_benchmark(2, 11);
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("r1.tb");

        let cfg = TrainerConfig { rounds: 3, ..tiny_cfg(Method::Fdse) };
        let mut full = FederatedRun::<f32>::new(cfg.clone(), tiny_arch(), &bench).unwrap();
        let mut full_metrics = Vec::new();
        full.run(|m, _| {
            full_metrics.push(serde_json::to_string(m).unwrap());
            Ok(())
        })
        .unwrap();

        let mut part = FederatedRun::<f32>::new(cfg.clone(), tiny_arch(), &bench).unwrap();
        part.step_round().unwrap();
        part.save_checkpoint(&ckpt).unwrap();

        let mut resumed = FederatedRun::<f32>::new(cfg, tiny_arch(), &bench).unwrap();
        resumed.load_checkpoint(&ckpt).unwrap();
        assert_eq!(resumed.round, 1);
        let mut tail = Vec::new();
        resumed
            .run(|m, _| {
                tail.push(serde_json::to_string(m).unwrap());
                Ok(())
            })
            .unwrap();
        assert_eq!(tail, full_metrics[1..].to_vec());
    }

    #[test]
    fn adapt_stats_matches_momentum_recursion() {
        let bench = tiny_benchmark(1, 12);
        let run = FederatedRun::<f32>::new(tiny_cfg(Method::Fdse), tiny_arch(), &bench).unwrap();
        let mut model = run.assemble(0).unwrap();
        let target = &bench.domains[0].train;

        // Oracle: replay the recursion from the same start.
        let mut oracle_mean: Vec<f64> =
            model.blocks[0].bn_dfe.running_mean.data().iter().map(|&v| v as f64).collect();
        let momentum = 0.9f64;
        let mut reference = model.clone();
        let indices: Vec<usize> = (0..target.len()).collect();
        for chunk in indices.chunks(16) {
            if chunk.len() < 2 {
                continue;
            }
            let (x32, _) = target.batch(chunk).unwrap();
            let mut tape = Tape::new();
            let fwd = reference.forward(&mut tape, &x32, ForwardMode::StatCollect).unwrap();
            let bm = tape.value(fwd.dfe_stats[0].mean).data().to_vec();
            for (o, b) in oracle_mean.iter_mut().zip(&bm) {
                *o = momentum * *o + (1.0 - momentum) * *b as f64;
            }
        }

        let batches = adapt_stats(&mut model, target, 16).unwrap();
        assert!(batches > 0);
        for (m, o) in model.blocks[0].bn_dfe.running_mean.data().iter().zip(&oracle_mean) {
            assert!((*m as f64 - o).abs() < 1e-5, "{} vs {}", m, o);
        }
    }

    #[test]
    fn adapt_consistency_zero_epochs_is_noop_and_requires_dse() {
        let bench = tiny_benchmark(1, 13);
        let run = FederatedRun::<f32>::new(tiny_cfg(Method::Fdse), tiny_arch(), &bench).unwrap();
        let mut model = run.assemble(0).unwrap();
        let before = model.export();
        let cfg = tiny_cfg(Method::Fdse);
        let trace = adapt_consistency(
            &mut model,
            &bench.domains[0].train,
            0,
            0.01,
            &cfg,
            &mut derive_rng(0, &[9]),
        )
        .unwrap();
        assert!(trace.epoch_loss.is_empty());
        for (name, t) in before {
            assert_eq!(model.get_tensor(&name).unwrap().data(), t.data(), "{}", name);
        }

        let mut plain = DecomposedModel::<f32>::build(
            tiny_arch().undecomposed(),
            0.9,
            &mut derive_rng(1, &[0]),
        )
        .unwrap();
        let err = adapt_consistency(
            &mut plain,
            &bench.domains[0].train,
            1,
            0.01,
            &cfg,
            &mut derive_rng(0, &[9]),
        )
        .unwrap_err();
        assert!(matches!(err, FdseError::NotApplicable(_)));
    }

    #[test]
    fn single_step_matches_sgd_oracle() {
        // lambda = 0, E = 1, one full batch: local_train must equal one
        // clipped SGD step computed independently.
        let cfg = GeneratorConfig { num_classes: 4, samples_per_class: 5, ..GeneratorConfig::default() };
        let bench = generate_benchmark(&cfg, &DomainSpec::synth_domains_4()[..1], 21).unwrap();
        let data = &bench.domains[0].train;

        let tcfg = TrainerConfig {
            method: Method::Fdse,
            local_epochs: 1,
            batch_size: data.len(),
            lambda: 0.0,
            clip_norm: 10.0,
            ..TrainerConfig::default()
        };
        let mut arch = tiny_arch();
        arch.num_classes = 4;
        let mut model =
            DecomposedModel::<f64>::build(arch, 0.9, &mut derive_rng(3, &[0])).unwrap();
        let mut oracle = model.clone();

        let lr = 0.05;
        let m = local_train(&mut model, data, &tcfg, lr, &mut derive_rng(0, &[2, 0, 0]), None).unwrap();
        assert_eq!(m.batches, 1);

        // Oracle replays the same shuffle to get the same batch order.
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut derive_rng(0, &[2, 0, 0]));
        let (x32, labels) = data.batch(&idx).unwrap();
        let mut tape = Tape::new();
        let fwd = oracle.forward(&mut tape, &x32.to_f64(), ForwardMode::Train).unwrap();
        let loss = tape.softmax_cross_entropy(fwd.logits, &labels).unwrap();
        tape.backward(loss).unwrap();
        let mut grads = Vec::new();
        for (name, id) in &fwd.leaves {
            if let Some(g) = tape.grad_tensor(*id) {
                grads.push((name.clone(), g));
            }
        }
        oracle.sgd_step(&grads, lr, 10.0).unwrap();

        for (name, t) in oracle.export() {
            let got = model.get_tensor(&name).unwrap();
            for (a, b) in got.data().iter().zip(t.data()) {
                assert!((a - b).abs() < 1e-12, "{}: {} vs {}", name, a, b);
            }
        }
    }

    #[test]
    fn descent_over_epochs() {
        let bench = synth_domains_4(31).unwrap();
        let tcfg = TrainerConfig { batch_size: 64, ..tiny_cfg(Method::Fdse) };
        let mut run = FederatedRun::<f32>::new(tcfg, ModelArch::desk_default(), &bench).unwrap();
        let (m0, _) = run.step_round().unwrap();
        let (m1, _) = run.step_round().unwrap();
        let l0: f64 = m0.clients.iter().map(|c| c.train_loss.unwrap()).sum();
        let l1: f64 = m1.clients.iter().map(|c| c.train_loss.unwrap()).sum();
        assert!(l1 < l0, "no descent: {} -> {}", l0, l1);
    }
}
