//! When to prune and how to run the whole train/prune/train pipeline.
//!
//! The detector tracks the squared distance of the parameters from their
//! initialization, `D_t = ||theta(t) - theta(0)||^2`. Training leaves the
//! rich active regime when the normalized epoch-to-epoch change
//! `|D_t - D_{t-1}| / D_1` falls below a threshold tied to the target
//! sparsity, `th = 1 - rho`: higher sparsity demands longer dense training.
//! The score costs one pass over the parameter vector per epoch.
//!
//! Two normalizations exist in the wild: by `D_1` (the default) and by
//! `||theta(0)||^2`; both are implemented and selected per config.

use std::time::Instant;

use serde::Serialize;

use crate::checkpoint::csr_disk_estimate;
use crate::criteria::{self, Criterion};
use crate::data::{Dataset, Task};
use crate::error::{CoreError, Result};
use crate::metrics::{MetricKind, MetricsRecord};
use crate::model::{accuracy, Batch, GraphOpts, Model};
use crate::rng::Rng;
use crate::structured;
use crate::tape::Tape;

// ---- detector ------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorNorm {
    /// Normalize by the first epoch's movement `D_1` (default).
    Delta1,
    /// Normalize by `||theta(0)||^2`.
    Theta0,
}

impl std::str::FromStr for DetectorNorm {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta1" => Ok(DetectorNorm::Delta1),
            "theta0" => Ok(DetectorNorm::Theta0),
            other => Err(CoreError::Config(format!(
                "unknown detector normalization {other:?} (expected delta1|theta0)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DetectorDecision {
    pub score: f64,
    pub should_prune: bool,
    /// Triangle-inequality upper bound on the score, computable from the
    /// same snapshots; the score never exceeds it.
    pub bound: f64,
}

/// Pruning-time detector state. Frozen after the first trigger.
#[derive(Clone, Debug)]
pub struct DetectorState {
    theta0: Vec<f64>,
    theta0_norm2: f64,
    prev_theta: Vec<f64>,
    prev_delta: f64,
    delta1: Option<f64>,
    pub th: f64,
    pub norm: DetectorNorm,
    pub delta_history: Vec<f64>,
    pub score_history: Vec<f64>,
    pub bound_history: Vec<f64>,
    pub triggered_epoch: Option<usize>,
    last_epoch: usize,
    frozen: Option<DetectorDecision>,
}

fn sq_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl DetectorState {
    pub fn new(theta0: Vec<f64>, th: f64, norm: DetectorNorm) -> Self {
        let theta0_norm2 = sq_norm(&theta0);
        DetectorState {
            prev_theta: theta0.clone(),
            prev_delta: 0.0,
            theta0,
            theta0_norm2,
            delta1: None,
            th,
            norm,
            delta_history: Vec::new(),
            score_history: Vec::new(),
            bound_history: Vec::new(),
            triggered_epoch: None,
            last_epoch: 0,
            frozen: None,
        }
    }

    /// Record the post-epoch parameters and decide whether to prune.
    ///
    /// Epochs must be strictly increasing starting at 1. The first update
    /// fixes `D_1` and never triggers on the score (there is no previous
    /// difference yet) unless the weights did not move at all, which is an
    /// immediate trigger. Once triggered the state is frozen: further
    /// updates return the stored decision unchanged.
    pub fn update(&mut self, theta_t: &[f64], epoch: usize) -> Result<DetectorDecision> {
        if let Some(frozen) = self.frozen {
            return Ok(frozen);
        }
        if theta_t.len() != self.theta0.len() {
            return Err(CoreError::Contract(format!(
                "detector saw {} parameters, snapshot has {}",
                theta_t.len(),
                self.theta0.len()
            )));
        }
        if epoch <= self.last_epoch || epoch == 0 {
            return Err(CoreError::Contract(format!(
                "detector epochs must increase strictly (got {epoch} after {})",
                self.last_epoch
            )));
        }

        let delta_t = sq_dist(theta_t, &self.theta0);
        let first = self.delta1.is_none();
        if first {
            self.delta1 = Some(delta_t);
        }
        let normalizer = match self.norm {
            DetectorNorm::Delta1 => self.delta1.expect("set above"),
            DetectorNorm::Theta0 => self.theta0_norm2,
        };

        let raw = (delta_t - self.prev_delta).abs();
        let score = if normalizer == 0.0 { 0.0 } else { raw / normalizer };
        let bound = if normalizer == 0.0 {
            0.0
        } else {
            let step = sq_dist(theta_t, &self.prev_theta).sqrt();
            let a = delta_t.sqrt();
            let b = self.prev_delta.sqrt();
            step * (a + b) / normalizer
        };

        let should_prune = if first {
            // No previous difference to compare; the degenerate "weights
            // never moved" case triggers immediately.
            self.delta1 == Some(0.0) && self.th > 0.0
        } else {
            score < self.th
        };

        self.delta_history.push(delta_t);
        self.score_history.push(score);
        self.bound_history.push(bound);
        self.prev_theta = theta_t.to_vec();
        self.prev_delta = delta_t;
        self.last_epoch = epoch;

        let decision = DetectorDecision { score, should_prune, bound };
        if should_prune {
            self.triggered_epoch = Some(epoch);
            self.frozen = Some(decision);
        }
        Ok(decision)
    }
}

/// Serializable image of a detector, enough to resume tracking.
#[derive(Clone, Debug)]
pub struct DetectorSnapshot {
    pub theta0: Vec<f64>,
    pub prev_theta: Vec<f64>,
    pub prev_delta: f64,
    pub delta1: Option<f64>,
    pub th: f64,
    pub norm: DetectorNorm,
    pub delta_history: Vec<f64>,
    pub score_history: Vec<f64>,
    pub bound_history: Vec<f64>,
    pub triggered_epoch: Option<usize>,
    pub last_epoch: usize,
}

impl DetectorState {
    pub fn snapshot(&self) -> DetectorSnapshot {
        DetectorSnapshot {
            theta0: self.theta0.clone(),
            prev_theta: self.prev_theta.clone(),
            prev_delta: self.prev_delta,
            delta1: self.delta1,
            th: self.th,
            norm: self.norm,
            delta_history: self.delta_history.clone(),
            score_history: self.score_history.clone(),
            bound_history: self.bound_history.clone(),
            triggered_epoch: self.triggered_epoch,
            last_epoch: self.last_epoch,
        }
    }

    pub fn restore(snap: DetectorSnapshot) -> Self {
        let theta0_norm2 = sq_norm(&snap.theta0);
        let frozen = snap.triggered_epoch.map(|_| DetectorDecision {
            score: snap.score_history.last().copied().unwrap_or(0.0),
            should_prune: true,
            bound: snap.bound_history.last().copied().unwrap_or(0.0),
        });
        DetectorState {
            theta0: snap.theta0,
            theta0_norm2,
            prev_theta: snap.prev_theta,
            prev_delta: snap.prev_delta,
            delta1: snap.delta1,
            th: snap.th,
            norm: snap.norm,
            delta_history: snap.delta_history,
            score_history: snap.score_history,
            bound_history: snap.bound_history,
            triggered_epoch: snap.triggered_epoch,
            last_epoch: snap.last_epoch,
            frozen,
        }
    }
}

/// Threshold tied to the target ratio: `1 - rho`.
pub fn default_threshold(rho: f64) -> f64 {
    1.0 - rho
}

/// First epoch (1-based) at which a recorded score series would trigger at
/// threshold `th`; decisions start at the second entry.
pub fn first_trigger_epoch(scores: &[f64], th: f64) -> Option<usize> {
    scores
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, &s)| s < th)
        .map(|(i, _)| i + 1)
}

// ---- schedules ------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    OneShotBefore,
    OneShotEarly,
    IterativeBefore,
    IterativeEarly,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Schedule {
    pub mode: ScheduleMode,
    pub it: usize,
    pub rho_final: f64,
}

impl Schedule {
    pub fn is_early(&self) -> bool {
        matches!(self.mode, ScheduleMode::OneShotEarly | ScheduleMode::IterativeEarly)
    }

    pub fn is_iterative(&self) -> bool {
        matches!(self.mode, ScheduleMode::IterativeBefore | ScheduleMode::IterativeEarly)
    }

    /// The pruning-ratio ladder: a single final ratio for one-shot
    /// schedules, the geometric approach plus the terminal step otherwise.
    pub fn ratios(&self) -> Result<Vec<f64>> {
        if self.is_iterative() {
            iterative_ratios(self.rho_final, self.it)
        } else {
            Ok(vec![self.rho_final])
        }
    }
}

/// `rho_i = rho_final - (rho_final - 1/2) * (1/2)^i` for i = 1..=it, then
/// the exact final ratio as the terminal step.
pub fn iterative_ratios(rho_final: f64, it: usize) -> Result<Vec<f64>> {
    if it == 0 {
        return Err(CoreError::Schedule("iteration count must be >= 1".into()));
    }
    if !(0.5..1.0).contains(&rho_final) {
        return Err(CoreError::Schedule(format!(
            "iterative schedule needs 0.5 <= rho_final < 1, got {rho_final} \
             (the ladder would start above its target)"
        )));
    }
    let mut out = Vec::with_capacity(it + 1);
    let mut factor = 1.0;
    for _ in 1..=it {
        factor *= 0.5;
        out.push(rho_final - (rho_final - 0.5) * factor);
    }
    out.push(rho_final);
    Ok(out)
}

/// Lifecycle mode behind the CLI strings crop-u, crop-s, cropit-u,
/// cropit-s, earlycrop-u, earlycrop-s.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ModeSpec {
    pub early: bool,
    pub iterative: bool,
    pub structured: bool,
}

impl std::str::FromStr for ModeSpec {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        let (early, iterative, structured) = match s {
            "crop-u" => (false, false, false),
            "crop-s" => (false, false, true),
            "cropit-u" => (false, true, false),
            "cropit-s" => (false, true, true),
            "earlycrop-u" => (true, false, false),
            "earlycrop-s" => (true, false, true),
            other => {
                return Err(CoreError::Config(format!(
                    "unknown mode {other:?} (expected crop-u|crop-s|cropit-u|cropit-s|earlycrop-u|earlycrop-s)"
                )))
            }
        };
        Ok(ModeSpec { early, iterative, structured })
    }
}

impl ModeSpec {
    /// crop/earlycrop become iterative when the config asks for more than
    /// one pruning iteration.
    pub fn schedule_mode(&self, it: usize) -> ScheduleMode {
        match (self.early, self.iterative || it > 1) {
            (false, false) => ScheduleMode::OneShotBefore,
            (false, true) => ScheduleMode::IterativeBefore,
            (true, false) => ScheduleMode::OneShotEarly,
            (true, true) => ScheduleMode::IterativeEarly,
        }
    }
}

// ---- optimizers ------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// SGD with momentum 0.9.
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(CoreError::Config(format!(
                "unknown optimizer {other:?} (expected sgd|adam)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    steps: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

const MOMENTUM: f64 = 0.9;
const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, param_count: usize) -> Self {
        Optimizer {
            kind,
            lr,
            steps: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for i in 0..params.len() {
                    self.m[i] = MOMENTUM * self.m[i] + grads[i];
                    params[i] -= self.lr * self.m[i];
                }
            }
            OptimizerKind::Adam => {
                let b1t = 1.0 - ADAM_B1.powi(self.steps as i32);
                let b2t = 1.0 - ADAM_B2.powi(self.steps as i32);
                for i in 0..params.len() {
                    self.m[i] = ADAM_B1 * self.m[i] + (1.0 - ADAM_B1) * grads[i];
                    self.v[i] = ADAM_B2 * self.v[i] + (1.0 - ADAM_B2) * grads[i] * grads[i];
                    let mh = self.m[i] / b1t;
                    let vh = self.v[i] / b2t;
                    params[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
    }

    /// Clear momentum at specific flat indices (after masking).
    pub fn zero_state_at(&mut self, idx: impl Iterator<Item = usize>) {
        for i in idx {
            self.m[i] = 0.0;
            self.v[i] = 0.0;
        }
    }
}

// ---- pipeline ------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct PipelineConfig {
    /// One of the six mode strings.
    pub mode: String,
    pub criterion: Criterion,
    /// Weight ratio for -U modes, node ratio for -S modes.
    pub rho: f64,
    /// Pruning iterations; > 1 makes any mode iterative.
    pub it: usize,
    pub th_override: Option<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub batch_size: usize,
    pub scoring_batch: usize,
    pub detector_norm: DetectorNorm,
    /// Fallback cap on dense training when the detector never triggers;
    /// defaults to half the epoch budget.
    pub detector_max_epoch: Option<usize>,
    /// Training steps between iterative pruning steps.
    pub steps_between_iterations: usize,
    pub include_biases: bool,
    /// Force the prune point (prune-point experiments); 0 prunes before
    /// training. The detector still records its score series.
    pub forced_prune_epoch: Option<usize>,
}

impl PipelineConfig {
    pub fn new(mode: &str, rho: f64, epochs: usize, seed: u64) -> Self {
        PipelineConfig {
            mode: mode.to_string(),
            criterion: Criterion::Crop,
            rho,
            it: 1,
            th_override: None,
            epochs,
            lr: 2e-3,
            optimizer: OptimizerKind::Adam,
            seed,
            batch_size: 128,
            scoring_batch: 256,
            detector_norm: DetectorNorm::Delta1,
            detector_max_epoch: None,
            steps_between_iterations: 0,
            include_biases: false,
            forced_prune_epoch: None,
        }
    }

    pub fn mode_spec(&self) -> Result<ModeSpec> {
        self.mode.parse()
    }

    pub fn validate(&self) -> Result<()> {
        self.mode_spec()?;
        if !(0.0..1.0).contains(&self.rho) {
            return Err(CoreError::Config(format!("rho {} out of [0, 1)", self.rho)));
        }
        if self.epochs == 0 {
            return Err(CoreError::Config("epochs must be >= 1".into()));
        }
        if self.it == 0 {
            return Err(CoreError::Config("it must be >= 1".into()));
        }
        if self.batch_size == 0 || self.scoring_batch == 0 {
            return Err(CoreError::Config("batch sizes must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CoreError::Config("learning rate must be positive".into()));
        }
        if let Some(f) = self.forced_prune_epoch {
            if f > self.epochs {
                return Err(CoreError::Config(format!(
                    "forced prune epoch {f} beyond budget {}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }
}

pub struct PipelineOutcome {
    pub model: Model,
    pub record: MetricsRecord,
}

fn epoch_rng(seed: u64, epoch: usize) -> Rng {
    Rng::derive(seed, 0xE70C_0000 + epoch as u64)
}

/// One pass over the training set; returns the mean loss.
pub fn train_one_epoch(
    model: &mut Model,
    opt: &mut Optimizer,
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<f64> {
    let mut order = dataset.train_idx.clone();
    epoch_rng(seed, epoch).shuffle(&mut order);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in order.chunks(batch_size) {
        let (inputs, targets) = dataset.gather(chunk);
        let batch = Batch { inputs: &inputs, targets: &targets };
        let mut tape = Tape::new();
        let (graph, loss) = model.build_loss(&mut tape, &batch, GraphOpts::params_only())?;
        let g = tape.grad(loss, &graph.param_ids)?;
        let mut flat_g = Vec::with_capacity(model.param_count());
        for t in &g.grads {
            flat_g.extend_from_slice(t.data());
        }
        let mut flat_p = model.flatten_params();
        opt.step(&mut flat_p, &flat_g);
        model.set_params(&flat_p)?;
        model.enforce_masks();
        total += tape.value(loss)[0] * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Test metric: classification accuracy (higher better) or RMSE (lower).
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<(MetricKind, f64)> {
    let (inputs, targets) = dataset.test_batch();
    let outputs = model.forward(&inputs)?;
    match (&dataset.task, &targets) {
        (Task::Classification(_), crate::model::Targets::Labels(labels)) => {
            Ok((MetricKind::Accuracy, accuracy(&outputs, labels)))
        }
        (Task::Regression, crate::model::Targets::Values(values)) => {
            let mse = outputs
                .data()
                .iter()
                .zip(values.data().iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / outputs.numel() as f64;
            Ok((MetricKind::Rmse, mse.sqrt()))
        }
        _ => Err(CoreError::Data("dataset task/targets mismatch".into())),
    }
}

/// Median duration of `forward + backward` over 30 timed batches after 5
/// warm-ups, in milliseconds.
///
/// Timing-sensitive: a process-wide lock serializes this section so that
/// parallel sweep workers cannot distort each other's measurements.
pub fn median_batch_ms(model: &Model, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    static TIMING_LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());
    let _serial = TIMING_LOCK.lock().expect("timing lock");
    let take: Vec<usize> = dataset.train_idx.iter().take(batch_size).cloned().collect();
    let (inputs, targets) = dataset.gather(&take);
    let batch = Batch { inputs: &inputs, targets: &targets };
    let mut times = Vec::with_capacity(30);
    for i in 0..35 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let (graph, loss) = model.build_loss(&mut tape, &batch, GraphOpts::params_only())?;
        let _ = tape.grad(loss, &graph.param_ids)?;
        let dt = t0.elapsed().as_secs_f64() * 1e3;
        if i >= 5 {
            times.push(dt);
        }
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(times[times.len() / 2])
}

struct PrunePhase {
    scoring_s: f64,
    node_sparsity: Option<f64>,
    capped: bool,
    degenerate: bool,
}

fn prune_model(
    model: &mut Model,
    opt: &mut Optimizer,
    dataset: &Dataset,
    cfg: &PipelineConfig,
    schedule: &Schedule,
    structured_mode: bool,
    at_epoch: usize,
) -> Result<PrunePhase> {
    let t0 = Instant::now();
    let (score_inputs, score_targets) = dataset.scoring_batch(cfg.scoring_batch);
    let batch = Batch { inputs: &score_inputs, targets: &score_targets };
    let ratios = schedule.ratios()?;
    let mut capped = false;
    let mut degenerate = false;
    let mut node_sparsity = None;

    if structured_mode {
        structured::inject_gates(model)?;
        let mut last_mask = None;
        for (step, &rho_i) in ratios.iter().enumerate() {
            let scores = structured::gate_scores(model, &batch)?;
            degenerate |= scores.degenerate;
            let mask = structured::build_node_mask(model, &scores, rho_i)?;
            structured::apply_node_mask_as_gates(model, &mask)?;
            last_mask = Some(mask);
            if step + 1 < ratios.len() && cfg.steps_between_iterations > 0 {
                intermediate_steps(model, opt, dataset, cfg, at_epoch, step)?;
            }
        }
        let mask = last_mask.expect("at least one ratio");
        node_sparsity = Some(mask.node_sparsity());
        *model = structured::compact(model, &mask)?;
        // Physical shapes changed; momentum no longer maps onto the new
        // parameter vector.
        *opt = Optimizer::new(cfg.optimizer, cfg.lr, model.param_count());
    } else {
        let map = model.param_index_map(cfg.include_biases);
        for (step, &rho_i) in ratios.iter().enumerate() {
            let scores = criteria::score(model, &batch, &map, cfg.criterion, cfg.seed ^ 0x5C0)?;
            degenerate |= scores.degenerate;
            let mask = criteria::build_mask(&scores, rho_i, &map, at_epoch)?;
            capped |= mask.capped;
            mask.apply(model, &map)?;
            opt.zero_state_at(
                mask.keep
                    .iter()
                    .enumerate()
                    .filter(|(_, &k)| k == 0)
                    .map(|(r, _)| map.rankable_to_full(r)),
            );
            if step + 1 < ratios.len() && cfg.steps_between_iterations > 0 {
                intermediate_steps(model, opt, dataset, cfg, at_epoch, step)?;
            }
        }
    }
    Ok(PrunePhase {
        scoring_s: t0.elapsed().as_secs_f64(),
        node_sparsity,
        capped,
        degenerate,
    })
}

fn intermediate_steps(
    model: &mut Model,
    opt: &mut Optimizer,
    dataset: &Dataset,
    cfg: &PipelineConfig,
    at_epoch: usize,
    step: usize,
) -> Result<()> {
    let mut order = dataset.train_idx.clone();
    epoch_rng(cfg.seed, at_epoch * 1000 + step).shuffle(&mut order);
    for chunk in order.chunks(cfg.batch_size).take(cfg.steps_between_iterations) {
        let (inputs, targets) = dataset.gather(chunk);
        let batch = Batch { inputs: &inputs, targets: &targets };
        let mut tape = Tape::new();
        let (graph, loss) = model.build_loss(&mut tape, &batch, GraphOpts::params_only())?;
        let g = tape.grad(loss, &graph.param_ids)?;
        let mut flat_g = Vec::with_capacity(model.param_count());
        for t in &g.grads {
            flat_g.extend_from_slice(t.data());
        }
        let mut flat_p = model.flatten_params();
        opt.step(&mut flat_p, &flat_g);
        model.set_params(&flat_p)?;
        model.enforce_masks();
    }
    Ok(())
}

/// Run the full lifecycle: (a) before-training variants prune first;
/// (b) early variants train densely, consult the detector each epoch, and
/// prune at the trigger or at the fallback cap; (c) iterative variants
/// re-score between ratio steps. Training then continues to the epoch
/// budget and metrics are collected.
pub fn run_pipeline(mut model: Model, dataset: &Dataset, cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let mode = cfg.mode_spec()?;
    let schedule = Schedule {
        mode: mode.schedule_mode(cfg.it),
        it: cfg.it,
        rho_final: cfg.rho,
    };
    let th = cfg.th_override.unwrap_or(default_threshold(cfg.rho));
    let m_cap = cfg.detector_max_epoch.unwrap_or((cfg.epochs / 2).max(1));

    let weights_before: usize = model.layers.iter().map(|l| l.weight.numel()).sum();
    let total_t0 = Instant::now();
    let mut warnings: Vec<String> = Vec::new();
    let mut diverged: Option<String> = None;
    let mut epoch_loss: Vec<f64> = Vec::new();
    let mut delta_scores: Vec<f64> = Vec::new();
    let mut scoring_s = 0.0;
    let mut dense_phase_s = 0.0;
    let mut sparse_phase_s = 0.0;
    let mut node_sparsity = None;
    let mut trigger_epoch: Option<usize> = None;
    let mut pruned = false;

    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, model.param_count());
    // Trigger detector (respects th) and a never-triggering recorder that
    // keeps the score series going for every epoch run.
    let mut detector = DetectorState::new(model.flatten_params(), th, cfg.detector_norm);
    let mut recorder = DetectorState::new(model.flatten_params(), f64::NEG_INFINITY, cfg.detector_norm);

    let wants_early = mode.early || cfg.forced_prune_epoch.is_some_and(|e| e > 0);
    let prune_before = (!mode.early && cfg.forced_prune_epoch.is_none())
        || cfg.forced_prune_epoch == Some(0);

    if prune_before && cfg.rho > 0.0 {
        let phase = prune_model(&mut model, &mut opt, dataset, cfg, &schedule, mode.structured, 0)?;
        scoring_s += phase.scoring_s;
        node_sparsity = phase.node_sparsity;
        if phase.capped {
            warnings.push("layer protection capped the pruned count".into());
        }
        if phase.degenerate {
            warnings.push("degenerate scoring: gradient vanished on the scoring batch".into());
        }
        trigger_epoch = Some(0);
        pruned = true;
    } else if cfg.rho == 0.0 {
        pruned = true; // dense baseline: nothing to prune, ever
    }

    let mut phase_t0 = Instant::now();
    for epoch in 1..=cfg.epochs {
        match train_one_epoch(&mut model, &mut opt, dataset, cfg.batch_size, cfg.seed, epoch) {
            Ok(loss) => epoch_loss.push(loss),
            Err(CoreError::NonFinite { op }) => {
                diverged = Some(format!("non-finite value in {op} at epoch {epoch}"));
                break;
            }
            Err(e) => return Err(e),
        }

        let theta = model.flatten_params();
        // The recorder follows the current parameter vector; after physical
        // compaction the flat layout changes and tracking restarts.
        if recorder.theta0.len() != theta.len() {
            recorder = DetectorState::new(theta.clone(), f64::NEG_INFINITY, cfg.detector_norm);
            delta_scores.push(0.0);
        } else {
            let rec = recorder.update(&theta, epoch)?;
            delta_scores.push(rec.score);
        }

        if !pruned && wants_early {
            let fire = if let Some(fe) = cfg.forced_prune_epoch {
                // Forced prune point: detector records but does not decide.
                if detector.theta0.len() == theta.len() {
                    let _ = detector.update(&theta, epoch)?;
                }
                epoch == fe
            } else {
                let dec = detector.update(&theta, epoch)?;
                if dec.should_prune {
                    true
                } else if epoch == m_cap {
                    warnings.push(format!(
                        "detector did not trigger by the fallback cap; pruned at epoch {epoch}"
                    ));
                    true
                } else {
                    false
                }
            };
            if fire {
                dense_phase_s += phase_t0.elapsed().as_secs_f64();
                let phase =
                    prune_model(&mut model, &mut opt, dataset, cfg, &schedule, mode.structured, epoch)?;
                scoring_s += phase.scoring_s;
                node_sparsity = phase.node_sparsity;
                if phase.capped {
                    warnings.push("layer protection capped the pruned count".into());
                }
                if phase.degenerate {
                    warnings.push("degenerate scoring: gradient vanished on the scoring batch".into());
                }
                trigger_epoch = Some(epoch);
                pruned = true;
                phase_t0 = Instant::now();
            }
        }
    }
    if pruned && trigger_epoch.is_some_and(|e| e > 0) {
        sparse_phase_s += phase_t0.elapsed().as_secs_f64();
    } else {
        dense_phase_s += phase_t0.elapsed().as_secs_f64();
    }

    let epochs_run = epoch_loss.len();
    // A diverged model holds non-finite parameters; evaluation and timing
    // are meaningless, so the partial record carries NaNs there.
    let (metric_kind, test_metric, batch_ms) = if diverged.is_none() {
        let (kind, metric) = evaluate(&model, dataset)?;
        let ms = median_batch_ms(&model, dataset, cfg.batch_size)?;
        (kind, metric, ms)
    } else {
        let kind = match dataset.task {
            Task::Classification(_) => MetricKind::Accuracy,
            Task::Regression => MetricKind::Rmse,
        };
        (kind, f64::NAN, f64::NAN)
    };

    let weights_after_nonzero: usize = model
        .layers
        .iter()
        .map(|l| l.weight_mask.iter().filter(|&&m| m != 0.0).count())
        .sum();
    let weight_sparsity = if weights_before == 0 {
        0.0
    } else {
        (weights_before - weights_after_nonzero) as f64 / weights_before as f64
    };

    let record = MetricsRecord {
        metric_kind,
        test_metric,
        weight_sparsity,
        node_sparsity,
        total_time_s: total_t0.elapsed().as_secs_f64(),
        median_batch_ms: batch_ms,
        param_count: model.nonzero_param_count() as u64,
        csr_disk_bytes: csr_disk_estimate(&model).csr16_bytes,
        trigger_epoch,
        epoch_loss,
        delta_scores,
        dense_phase_s,
        scoring_s,
        sparse_phase_s,
        warnings,
        diverged,
    };
    record.validate(epochs_run)?;
    Ok(PipelineOutcome { model, record })
}
