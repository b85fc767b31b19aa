//! SGD training with a step learning-rate schedule, evaluation metrics and
//! the leave-one-task-out cross-validation protocol.
//!
//! Subjects are split into five partitions. A fold trains on every
//! partition but the test one, restricted to the known tasks, then tests on
//! the test partition: each known task separately, plus the held-out task
//! through its (never input-selected) memory-bank row.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, GradCheckReport, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{LabeledGraph, TaskId, TaskSet};
use crate::losses::{ce_loss_var, mse_loss_var, ortho_loss_var, total_loss_var, LossWeights};
use crate::math::{pearson, DType, Matrix, Real};
use crate::model::{DropoutKey, GraphInput, Mode, ModelConfig, ParamStore, TaGat};
use crate::rng::{fnv1a, stream, DOMAIN_SHUFFLE};

pub const NUM_PARTITIONS: u8 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub step_epochs: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Off by default (plain SGD).
    pub momentum: f64,
    /// Off by default (plain SGD).
    pub weight_decay: f64,
    pub precision: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 4e-6,
            step_epochs: 10,
            gamma: 0.4,
            epochs: 100,
            batch_size: 16,
            weights: LossWeights::default(),
            seed: 0,
            momentum: 0.0,
            weight_decay: 0.0,
            precision: DType::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if self.step_epochs == 0 {
            return bad("step_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        self.weights.validate()
    }
}

/// `lr0 · γ^⌊epoch / step_epochs⌋`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr0 * config.gamma.powi((epoch / config.step_epochs.max(1)) as i32)
}

/// `θ ← θ − lr·g` for every tensor; nothing is modified on shape mismatch.
pub fn sgd_step<T: Real>(params: &mut ParamStore<T>, grads: &[Matrix<T>], lr: T) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape("sgd_step", (params.len(), 1), (grads.len(), 1)));
    }
    for (slot, g) in grads.iter().enumerate() {
        if params.get(slot).shape() != g.shape() {
            return Err(Error::shape("sgd_step", params.get(slot).shape(), g.shape()));
        }
    }
    for (slot, g) in grads.iter().enumerate() {
        for (p, &d) in params.get_mut(slot).data_mut().iter_mut().zip(g.data()) {
            *p = *p - lr * d;
        }
    }
    Ok(())
}

/// One scan prepared for the model.
#[derive(Debug, Clone)]
pub struct Example<T: Real> {
    pub subject_id: String,
    pub task: TaskId,
    pub gender: u8,
    pub cog_score: f64,
    pub input: GraphInput<T>,
}

impl<T: Real> Example<T> {
    pub fn from_labeled(g: &LabeledGraph) -> Result<Self> {
        Ok(Example {
            subject_id: g.subject_id.clone(),
            task: g.task.clone(),
            gender: g.gender,
            cog_score: g.cog_score,
            input: GraphInput::from_graph(&g.graph)?,
        })
    }

    pub fn prepare(graphs: &[LabeledGraph]) -> Result<Vec<Self>> {
        graphs.par_iter().map(Self::from_labeled).collect()
    }
}

/// Which tasks and subjects were actually fed to the model during training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Exposure {
    /// Task index → number of scans passed to a training forward.
    pub task_counts: BTreeMap<usize, usize>,
    pub subjects: BTreeSet<String>,
    pub steps: usize,
}

impl Exposure {
    fn record<T: Real>(&mut self, batch: &[&Example<T>]) {
        for ex in batch {
            *self.task_counts.entry(ex.task.index).or_default() += 1;
            if !self.subjects.contains(&ex.subject_id) {
                self.subjects.insert(ex.subject_id.clone());
            }
        }
        self.steps += 1;
    }

    pub fn task_count(&self, task: &TaskId) -> usize {
        self.task_counts.get(&task.index).copied().unwrap_or(0)
    }
}

/// Everything besides the parameters that training needs to resume.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainState<T: Real> {
    pub next_epoch: usize,
    /// Momentum buffers, one per parameter tensor; empty without momentum.
    pub velocity: Vec<Matrix<T>>,
    pub exposure: Exposure,
}

/// Mean losses over the batches of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub mse: f64,
    pub ortho: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub ce: Var,
    pub mse: Var,
    pub ortho: Var,
    pub total: Var,
}

/// Weighted objective for one batch; the orthogonality term covers the whole bank.
pub fn batch_loss<T: Real>(
    model: &TaGat<T>,
    tape: &mut Tape<T>,
    vars: &[Var],
    batch: &[&Example<T>],
    weights: &LossWeights,
    mode: Mode,
) -> Result<LossVars> {
    let items: Vec<_> = batch.iter().map(|e| (&e.input, &e.task)).collect();
    let out = model.forward_batch(tape, vars, &items, mode)?;
    let labels: Vec<u8> = batch.iter().map(|e| e.gender).collect();
    let targets: Vec<T> = batch.iter().map(|e| T::c(e.cog_score)).collect();
    let ce = ce_loss_var(tape, out.probs, &labels)?;
    let mse = mse_loss_var(tape, out.scores, &targets)?;
    let ortho = ortho_loss_var(tape, vars[model.bank_slot()])?;
    let total = total_loss_var(tape, ce, mse, ortho, weights)?;
    Ok(LossVars { ce, mse, ortho, total })
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[DOMAIN_SHUFFLE, epoch as u64]));
    order
}

/// Runs epochs `state.next_epoch..config.epochs`, returning their history.
pub fn train<T: Real>(
    model: &mut TaGat<T>,
    data: &[Example<T>],
    config: &TrainConfig,
    state: &mut TrainState<T>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.momentum > 0.0 && state.velocity.is_empty() {
        state.velocity = model
            .params()
            .iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
    }
    let batches = data.len().div_ceil(config.batch_size);
    let mut history = Vec::new();
    for epoch in state.next_epoch..config.epochs {
        let lr = lr_at(epoch, config);
        let order = epoch_order(config.seed, epoch, data.len());
        let mut sums = [0.0f64; 4];
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example<T>> = chunk.iter().map(|&i| &data[i]).collect();
            let key = DropoutKey {
                seed: config.seed,
                epoch: epoch as u64,
                batch: b as u64,
            };
            let step = epoch * batches + b;
            let terms = train_step(model, &batch, config, key, lr, step, state)?;
            for (s, t) in sums.iter_mut().zip(terms) {
                *s += t;
            }
        }
        let k = batches as f64;
        history.push(EpochRecord {
            epoch,
            lr,
            ce: sums[0] / k,
            mse: sums[1] / k,
            ortho: sums[2] / k,
            total: sums[3] / k,
        });
        state.next_epoch = epoch + 1;
    }
    Ok(history)
}

fn train_step<T: Real>(
    model: &mut TaGat<T>,
    batch: &[&Example<T>],
    config: &TrainConfig,
    key: DropoutKey,
    lr: f64,
    step: usize,
    state: &mut TrainState<T>,
) -> Result<[f64; 4]> {
    state.exposure.record(batch);
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape);
    let loss = batch_loss(model, &mut tape, &vars, batch, &config.weights, Mode::Train(key))?;
    let item = |v: Var| tape.value(v).item().f64();
    let terms = [item(loss.ce), item(loss.mse), item(loss.ortho), item(loss.total)];
    if !terms.iter().all(|t| t.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            epoch: key.epoch as usize,
            ce: terms[0],
            mse: terms[1],
            ortho: terms[2],
        });
    }
    let mut grads = tape.backward(loss.total)?;
    let mut update: Vec<Matrix<T>> = vars.iter().map(|&v| grads.take(v)).collect();
    if config.weight_decay > 0.0 {
        let wd = T::c(config.weight_decay);
        for (slot, g) in update.iter_mut().enumerate() {
            *g = g.zip_map(model.params().get(slot), |d, p| d + wd * p)?;
        }
    }
    if config.momentum > 0.0 {
        let mu = T::c(config.momentum);
        for (v, g) in state.velocity.iter_mut().zip(update.iter_mut()) {
            *v = v.zip_map(g, |a, d| mu * a + d)?;
            *g = v.clone();
        }
    }
    sgd_step(model.params_mut(), &update, T::c(lr))?;
    Ok(terms)
}

/// Accuracy in percent; correlation is `None` when undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    pub pearson_corr: Option<f64>,
}

/// Accuracy and Pearson correlation from raw predictions.
pub fn metrics_from(predicted: &[u8], labels: &[u8], scores: &[f64], targets: &[f64]) -> Result<Metrics> {
    if predicted.len() != labels.len() || scores.len() != targets.len() || predicted.len() != scores.len() {
        return Err(Error::shape("metrics", (predicted.len(), 2), (scores.len(), 2)));
    }
    if predicted.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    let pearson_corr = match pearson(scores, targets) {
        Ok(r) => Some(r),
        Err(Error::DegenerateCorr(_) | Error::TooFewSamples { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(Metrics {
        n: predicted.len(),
        accuracy: 100.0 * correct as f64 / predicted.len() as f64,
        pearson_corr,
    })
}

/// Eval-mode metrics over `examples`.
pub fn evaluate<T: Real>(model: &TaGat<T>, examples: &[&Example<T>]) -> Result<Metrics> {
    let preds = examples
        .par_iter()
        .map(|e| model.predict(&e.input, &e.task))
        .collect::<Result<Vec<_>>>()?;
    let predicted: Vec<u8> = preds.iter().map(|p| p.predicted_class()).collect();
    let labels: Vec<u8> = examples.iter().map(|e| e.gender).collect();
    let scores: Vec<f64> = preds.iter().map(|p| p.score.f64()).collect();
    let targets: Vec<f64> = examples.iter().map(|e| e.cog_score).collect();
    metrics_from(&predicted, &labels, &scores, &targets)
}

pub type PartitionMap = BTreeMap<String, u8>;

/// Deterministic partition in `1..=5` from the subject id.
pub fn hash_partition(subject_id: &str) -> u8 {
    (fnv1a(subject_id.as_bytes()) % u64::from(NUM_PARTITIONS)) as u8 + 1
}

/// Partition of every subject: the explicit map when given, otherwise the hash.
pub fn resolve_partitions<'a>(
    subjects: impl IntoIterator<Item = &'a str>,
    explicit: Option<&PartitionMap>,
) -> Result<PartitionMap> {
    let mut out = PartitionMap::new();
    for s in subjects {
        let p = match explicit {
            Some(map) => *map.get(s).ok_or_else(|| {
                Error::InvalidArgument(format!("subject '{s}' missing from partition map"))
            })?,
            None => hash_partition(s),
        };
        if !(1..=NUM_PARTITIONS).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "subject '{s}' has partition {p}, expected 1..={NUM_PARTITIONS}"
            )));
        }
        out.insert(s.to_string(), p);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldSpec {
    pub held_out: TaskId,
    pub test_partition: u8,
    pub partitions: PartitionMap,
}

/// A fold's scans: training set, known-task test set and unseen-task test set.
pub struct FoldSplit<'a, T: Real> {
    pub train: Vec<&'a Example<T>>,
    pub known_test: Vec<&'a Example<T>>,
    pub unseen_test: Vec<&'a Example<T>>,
}

impl FoldSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=NUM_PARTITIONS).contains(&self.test_partition) {
            return Err(Error::InvalidArgument(format!(
                "test partition {} outside 1..={NUM_PARTITIONS}",
                self.test_partition
            )));
        }
        Ok(())
    }

    pub fn partition_of(&self, subject_id: &str) -> Result<u8> {
        self.partitions
            .get(subject_id)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("subject '{subject_id}' has no partition")))
    }

    pub fn split<'a, T: Real>(&self, examples: &'a [Example<T>]) -> Result<FoldSplit<'a, T>> {
        self.validate()?;
        let mut split = FoldSplit {
            train: Vec::new(),
            known_test: Vec::new(),
            unseen_test: Vec::new(),
        };
        for ex in examples {
            let in_test = self.partition_of(&ex.subject_id)? == self.test_partition;
            let known = ex.task != self.held_out;
            match (in_test, known) {
                (false, true) => split.train.push(ex),
                (true, true) => split.known_test.push(ex),
                (true, false) => split.unseen_test.push(ex),
                (false, false) => {}
            }
        }
        Ok(split)
    }

    pub fn test_subjects(&self) -> BTreeSet<&str> {
        self.partitions
            .iter()
            .filter(|(_, &p)| p == self.test_partition)
            .map(|(s, _)| s.as_str())
            .collect()
    }
}

/// Protocol instrumentation for one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Integrity {
    /// Training scans of the held-out task passed to the model.
    pub held_out_exposures: usize,
    /// Test-partition subjects passed to the model during training.
    pub subject_overlap: usize,
    pub train_scans: usize,
    pub train_subjects: usize,
    pub test_subjects: usize,
    /// L2 distance of the held-out task's bank row from its initial value.
    pub held_out_row_shift: f64,
}

impl Integrity {
    pub fn measure<T: Real>(
        fold: &FoldSpec,
        exposure: &Exposure,
        init_row: &[T],
        final_row: &[T],
    ) -> Self {
        let test = fold.test_subjects();
        let shift = init_row
            .iter()
            .zip(final_row)
            .map(|(&a, &b)| (a.f64() - b.f64()).powi(2))
            .sum::<f64>()
            .sqrt();
        Integrity {
            held_out_exposures: exposure.task_count(&fold.held_out),
            subject_overlap: exposure.subjects.iter().filter(|s| test.contains(s.as_str())).count(),
            train_scans: exposure.task_counts.values().sum(),
            train_subjects: exposure.subjects.len(),
            test_subjects: test.len(),
            held_out_row_shift: shift,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.held_out_exposures > 0 {
            return Err(Error::ProtocolViolation(format!(
                "held-out task reached training {} times",
                self.held_out_exposures
            )));
        }
        if self.subject_overlap > 0 {
            return Err(Error::ProtocolViolation(format!(
                "{} test subjects reached training",
                self.subject_overlap
            )));
        }
        Ok(())
    }
}

/// A trained fold model with its instrumentation.
pub struct FoldRun<T: Real> {
    pub model: TaGat<T>,
    pub state: TrainState<T>,
    pub history: Vec<EpochRecord>,
    pub integrity: Integrity,
}

/// Trains one fold from a fresh initialization, or continues `resume`.
pub fn train_fold<T: Real>(
    examples: &[Example<T>],
    fold: &FoldSpec,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    resume: Option<(TaGat<T>, TrainState<T>)>,
) -> Result<FoldRun<T>> {
    let split = fold.split(examples)?;
    let train_set: Vec<Example<T>> = split.train.into_iter().cloned().collect();
    let (mut model, mut state) = match resume {
        Some(r) => r,
        None => (TaGat::new(model_config.clone())?, TrainState::default()),
    };
    let row = fold.held_out.index - 1;
    let init_row = TaGat::<T>::new(model.config().clone())?.bank().row(row).to_vec();
    let history = train(&mut model, &train_set, train_config, &mut state)?;
    let integrity = Integrity::measure(fold, &state.exposure, &init_row, model.bank().row(row));
    integrity.check()?;
    Ok(FoldRun {
        model,
        state,
        history,
        integrity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Known,
    Unseen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub task: String,
    pub kind: CellKind,
    pub metrics: Metrics,
}

/// Known-task cells in task order, then the unseen-task cell.
pub fn evaluate_fold<T: Real>(
    model: &TaGat<T>,
    examples: &[Example<T>],
    tasks: &TaskSet,
    fold: &FoldSpec,
) -> Result<Vec<Cell>> {
    let split = fold.split(examples)?;
    let mut cells = Vec::with_capacity(tasks.len());
    let mut cell = |task: &TaskId, kind: CellKind, pool: &[&Example<T>]| -> Result<()> {
        let subset: Vec<&Example<T>> = pool.iter().copied().filter(|e| &e.task == task).collect();
        if subset.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no test scans for task '{}' in partition {}",
                task.name, fold.test_partition
            )));
        }
        cells.push(Cell {
            task: task.name.clone(),
            kind,
            metrics: evaluate(model, &subset)?,
        });
        Ok(())
    };
    for task in tasks.iter().filter(|t| t != &fold.held_out) {
        cell(&task, CellKind::Known, &split.known_test)?;
    }
    cell(&fold.held_out, CellKind::Unseen, &split.unseen_test)?;
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub held_out_task: String,
    pub test_partition: u8,
    pub cells: Vec<Cell>,
    pub integrity: Integrity,
    pub final_epoch: Option<EpochRecord>,
}

pub fn loto_fold<T: Real>(
    examples: &[Example<T>],
    tasks: &TaskSet,
    fold: &FoldSpec,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<FoldReport> {
    let run = train_fold(examples, fold, model_config, train_config, None)?;
    Ok(FoldReport {
        held_out_task: fold.held_out.name.clone(),
        test_partition: fold.test_partition,
        cells: evaluate_fold(&run.model, examples, tasks, fold)?,
        integrity: run.integrity,
        final_epoch: run.history.last().copied(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation (divisor n).
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(MeanStd {
        mean,
        std: var.sqrt(),
    })
}

/// One table cell aggregated over folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub acc: MeanStd,
    /// Over the folds where the correlation is defined.
    pub corr: Option<MeanStd>,
    pub folds: usize,
    pub corr_folds: usize,
}

impl CellSummary {
    pub fn from_metrics<'a>(metrics: impl IntoIterator<Item = &'a Metrics>) -> Option<Self> {
        let metrics: Vec<&Metrics> = metrics.into_iter().collect();
        let acc: Vec<f64> = metrics.iter().map(|m| m.accuracy).collect();
        let corr: Vec<f64> = metrics.iter().filter_map(|m| m.pearson_corr).collect();
        Some(CellSummary {
            acc: mean_std(&acc)?,
            corr: mean_std(&corr),
            folds: acc.len(),
            corr_folds: corr.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub held_out_task: String,
    pub folds: Vec<FoldReport>,
}

/// Five folds, one per test partition, trained in parallel.
pub fn cross_validate<T: Real>(
    examples: &[Example<T>],
    tasks: &TaskSet,
    held_out: &TaskId,
    partitions: &PartitionMap,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<CrossValidation> {
    let folds = (1..=NUM_PARTITIONS)
        .into_par_iter()
        .map(|p| {
            let fold = FoldSpec {
                held_out: held_out.clone(),
                test_partition: p,
                partitions: partitions.clone(),
            };
            loto_fold(examples, tasks, &fold, model_config, train_config)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossValidation {
        held_out_task: held_out.name.clone(),
        folds,
    })
}

/// Known and unseen columns for one task row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub known: Option<CellSummary>,
    pub unseen: Option<CellSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub label: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub runs: Vec<CrossValidation>,
    /// Task name → known/unseen cells in mean(std) over folds.
    pub table: BTreeMap<String, TableRow>,
}

pub fn report_label(weights: &LossWeights) -> &'static str {
    if weights.is_ablation() {
        "w/o L_ortho"
    } else {
        "TA-GAT"
    }
}

impl Report {
    /// Known cells pool every fold in which the task was trained; unseen
    /// cells pool the folds in which it was held out.
    pub fn new(model: ModelConfig, train: TrainConfig, runs: Vec<CrossValidation>) -> Self {
        let mut pooled: BTreeMap<(String, CellKind), Vec<Metrics>> = BTreeMap::new();
        for cell in runs.iter().flat_map(|r| &r.folds).flat_map(|f| &f.cells) {
            pooled
                .entry((cell.task.clone(), cell.kind))
                .or_default()
                .push(cell.metrics);
        }
        let mut table: BTreeMap<String, TableRow> = BTreeMap::new();
        for ((task, kind), metrics) in &pooled {
            let row = table.entry(task.clone()).or_default();
            let summary = CellSummary::from_metrics(metrics);
            match kind {
                CellKind::Known => row.known = summary,
                CellKind::Unseen => row.unseen = summary,
            }
        }
        Report {
            label: report_label(&train.weights).to_string(),
            model,
            train,
            runs,
            table,
        }
    }
}

/// Step for the full-model check. Central differences carry roundoff of
/// about `ulp(loss)/eps`, which dominates for the smallest head-weight
/// gradients at initialization, so the largest admissible step is used.
pub const MODEL_GRADCHECK_EPS: f64 = 1e-4;

/// Finite-difference check of the full objective through a toy model
/// (6 nodes, width 4, 3 tasks, dropout active with a fixed mask).
pub fn model_grad_check(seed: u64, eps: f64) -> Result<GradCheckReport> {
    const N: usize = 6;
    let mut config = ModelConfig::toy(N, 3);
    config.seed = seed;
    let model = TaGat::<f64>::new(config)?;
    let tasks = TaskSet::canonical(3)?;
    let mut rng = stream(seed, &[u64::MAX]);
    let mut examples = Vec::new();
    for k in 0..4 {
        let features = Matrix::from_fn(N, N, |i, j| {
            if i == j {
                1.0
            } else {
                rng.random_range(-0.9..0.9)
            }
        });
        let edges: Vec<(usize, usize, f64)> = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)]
            .iter()
            .take(4 + k)
            .map(|&(i, j)| (i, j, rng.random_range(0.05..0.9)))
            .collect();
        examples.push(Example {
            subject_id: format!("s{k}"),
            task: tasks.by_index(1 + k % 3)?,
            gender: (k % 2) as u8,
            cog_score: rng.random_range(0.0..1.0),
            input: GraphInput::new(features, &edges)?,
        });
    }
    let batch: Vec<&Example<f64>> = examples.iter().collect();
    let weights = LossWeights::default();
    let key = DropoutKey {
        seed,
        epoch: 0,
        batch: 0,
    };
    grad_check(
        |tape, vars| Ok(batch_loss(&model, tape, vars, &batch, &weights, Mode::Train(key))?.total),
        &model.params().values(),
        eps,
    )
}
