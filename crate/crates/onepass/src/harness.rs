//! Experiment orchestration: random hyperparameter initialisation, the nine
//! experimental settings, trial execution on the block schedule, sensitivity
//! grids, bootstrap statistics, and result export.
//!
//! A trial trains one network once, pausing every `t` weight updates to
//! record losses and, in the tuning settings, to compute a hypergradient and
//! move the hyperparameters. Training is never restarted and nothing
//! differentiable survives a block boundary.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Graph, NodeId, Tensor};
use crate::data::{self, DataError, Dataset, Split, TargetColumn, TargetParse};
use crate::hypergrad::{
    baydin_flat, baydin_hypergradient, dense_reference_hypergradient, hypergradient_error,
    lorraine_hypergradient, Hypergradient, HypergradError, NeumannConfig, NeumannEngine,
    UnrollEngine,
};
use crate::model::{LossKind, MlpSpec, ModelError};
use crate::seeds;
use crate::update::{sgd_step, HyperMask, HyperVector, MetaOptimiser, SgdState};

const STREAM_INIT: u64 = 1;
const STREAM_WEIGHTS: u64 = 2;
const STREAM_BATCH: u64 = 3;
const STREAM_SPLIT: u64 = 101;
const STREAM_BOOTSTRAP: u64 = 102;

/// Seed of the built-in synthetic corpus. Fixed so the corpus acts like a
/// file on disk: the experiment seed changes splits, inits, and weights,
/// never the data itself.
const SYNTHETIC_CORPUS_SEED: u64 = 0xE7E59;

/// Classification losses above this are treated as NaN when statistics are
/// computed; the records themselves keep the raw value.
const OUTLIER_LOSS: f64 = 1e3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] AdError),
    #[error(transparent)]
    Hypergrad(#[from] HypergradError),
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// The experimental settings: three untuned baselines, two restricted
/// hypergradient baselines, three variants of the truncated-series tuner,
/// and exact differentiation through the update window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Random,
    RandomXlr,
    Random3Batched,
    Lorraine,
    Baydin,
    OursWdLr,
    OursWdLrM,
    OursWdHdlrM,
    DiffThroughOpt,
}

impl Setting {
    pub const ALL: [Setting; 9] = [
        Setting::Random,
        Setting::RandomXlr,
        Setting::Random3Batched,
        Setting::Lorraine,
        Setting::Baydin,
        Setting::OursWdLr,
        Setting::OursWdLrM,
        Setting::OursWdHdlrM,
        Setting::DiffThroughOpt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Setting::Random => "random",
            Setting::RandomXlr => "random_xlr",
            Setting::Random3Batched => "random_3batched",
            Setting::Lorraine => "lorraine",
            Setting::Baydin => "baydin",
            Setting::OursWdLr => "ours_wd_lr",
            Setting::OursWdLrM => "ours_wd_lr_m",
            Setting::OursWdHdlrM => "ours_wd_hdlr_m",
            Setting::DiffThroughOpt => "diff_through_opt",
        }
    }

    /// Which hyperparameter coordinates the meta step may move. `None`
    /// means the setting performs no meta steps at all.
    pub fn mask(self) -> Option<HyperMask> {
        match self {
            Setting::Random | Setting::RandomXlr | Setting::Random3Batched => None,
            Setting::Lorraine => Some(HyperMask { lr: false, wd: true, momentum: false }),
            Setting::Baydin => Some(HyperMask { lr: true, wd: false, momentum: false }),
            Setting::OursWdLr => Some(HyperMask { lr: true, wd: true, momentum: false }),
            Setting::OursWdLrM | Setting::OursWdHdlrM | Setting::DiffThroughOpt => {
                Some(HyperMask { lr: true, wd: true, momentum: true })
            }
        }
    }

    pub fn tunes(self) -> bool {
        self.mask().is_some()
    }

    /// Untuned settings have no use for held-out validation data, so their
    /// training portion absorbs it.
    pub fn merges_validation(self) -> bool {
        matches!(self, Setting::Random | Setting::RandomXlr | Setting::Random3Batched)
    }

    /// One learning rate per parameter tensor instead of a shared scalar.
    pub fn per_tensor_lr(self) -> bool {
        matches!(self, Setting::OursWdHdlrM)
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Setting::ALL
            .into_iter()
            .find(|setting| setting.name() == s)
            .ok_or_else(|| format!("unknown setting {s:?}"))
    }
}

/// Initialisation ranges for the hyperparameter draws. Learning rate and
/// weight decay ranges are exponents of 10; momentum and the step-wise
/// learning rate multiplier are natural values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitRanges {
    pub lr_log10: (f64, f64),
    pub wd_log10: (f64, f64),
    pub momentum: (f64, f64),
    pub multiplier: (f64, f64),
}

impl Default for InitRanges {
    fn default() -> Self {
        Self {
            lr_log10: (-6.0, -1.0),
            wd_log10: (-7.0, -2.0),
            momentum: (0.0, 1.0),
            multiplier: (0.995, 1.001),
        }
    }
}

impl InitRanges {
    fn validate(&self) -> Result<(), HarnessError> {
        for (name, (lo, hi)) in [
            ("lr_log10", self.lr_log10),
            ("wd_log10", self.wd_log10),
            ("momentum", self.momentum),
            ("multiplier", self.multiplier),
        ] {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(HarnessError::Config(format!(
                    "range {name} must satisfy min < max, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }
}

/// Whether the target column is a continuous value or a class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

/// Full description of one experiment. Defaults describe the building-energy
/// protocol: 4000 full-batch epochs with a hyperparameter update every 10
/// steps looking back 5 steps.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// `"synthetic-energy"` or a path to a CSV file.
    pub dataset: String,
    /// `"last"` or a header column name.
    pub target: String,
    pub task: Task,
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub setting: Setting,
    pub epochs: usize,
    /// 0 selects full-batch training.
    pub batch_size: usize,
    /// Weight updates per hyperparameter update.
    pub t: usize,
    /// Look-back distance: series terms beyond the zeroth for the truncated
    /// engine, window length for exact unrolling.
    pub i: usize,
    pub n_trials: usize,
    pub master_seed: u64,
    pub fractions: (f64, f64, f64),
    pub ranges: InitRanges,
    /// Update intervals swept by the sensitivity grid.
    pub grid_t: Vec<usize>,
    /// Look-back distances swept by the sensitivity grid.
    pub grid_i: Vec<usize>,
    /// Hyperparameter updates per grid cell; each cell runs `grid_updates * t`
    /// weight updates.
    pub grid_updates: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "synthetic-energy".into(),
            target: "last".into(),
            task: Task::Regression,
            hidden: vec![50],
            setting: Setting::Random,
            epochs: 4000,
            batch_size: 0,
            t: 10,
            i: 5,
            n_trials: 20,
            master_seed: 77,
            fractions: (0.72, 0.18, 0.10),
            ranges: InitRanges::default(),
            grid_t: vec![1, 10, 50],
            grid_i: vec![1, 5, 20],
            grid_updates: 400,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.t < 1 {
            return Err(HarnessError::Config("t must be at least 1".into()));
        }
        if self.n_trials < 1 {
            return Err(HarnessError::Config("n_trials must be at least 1".into()));
        }
        if self.epochs < 1 {
            return Err(HarnessError::Config("epochs must be at least 1".into()));
        }
        if self.setting == Setting::DiffThroughOpt {
            if self.i < 1 {
                return Err(HarnessError::Config(
                    "diff_through_opt needs a window of at least one update (i >= 1)".into(),
                ));
            }
            if self.i > self.t {
                return Err(HarnessError::Config(format!(
                    "diff_through_opt cannot look back past the last hyperparameter update \
                     (i = {} exceeds t = {})",
                    self.i, self.t
                )));
            }
        }
        self.ranges.validate()
    }

    /// Classification statistics convert clearly-outlying final losses to
    /// NaN; regression statistics never do.
    pub fn outliers_to_nan(&self) -> bool {
        self.task == Task::Classification
    }
}

/// One trial's hyperparameter initialisation. Draws happen in a fixed order
/// from a stream that does not involve the setting, so every setting sees
/// identical draws for a given trial seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitDraw {
    pub lr: f64,
    pub wd: f64,
    pub momentum: f64,
    pub multiplier: f64,
}

impl InitDraw {
    pub fn hyper_vector(&self, lr_width: usize) -> HyperVector {
        HyperVector::with_lr_width(self.lr, self.wd, self.momentum, lr_width)
    }
}

/// Draws learning rate and weight decay log-uniformly, momentum and the
/// learning rate multiplier uniformly in natural space.
pub fn sample_init(ranges: &InitRanges, seed: u64) -> InitDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lr = 10f64.powf(rng.gen_range(ranges.lr_log10.0..ranges.lr_log10.1));
    let wd = 10f64.powf(rng.gen_range(ranges.wd_log10.0..ranges.wd_log10.1));
    let momentum = rng.gen_range(ranges.momentum.0..ranges.momentum.1);
    let multiplier = rng.gen_range(ranges.multiplier.0..ranges.multiplier.1);
    InitDraw { lr, wd, momentum, multiplier }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    DivergedNan,
}

impl TrialStatus {
    pub fn label(self) -> &'static str {
        match self {
            TrialStatus::Ok => "ok",
            TrialStatus::DivergedNan => "diverged_nan",
        }
    }
}

/// State recorded at one block boundary: losses under the hyperparameters
/// that produced them, and the hyperparameters as left in force after the
/// boundary's meta update.
#[derive(Clone, Copy, Debug)]
pub struct Snapshot {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub test_loss: f64,
    pub lr: f64,
    pub wd: f64,
    pub momentum: f64,
}

impl Snapshot {
    fn is_finite(&self) -> bool {
        self.train_loss.is_finite() && self.val_loss.is_finite() && self.test_loss.is_finite()
    }
}

/// Everything one trial produced.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub trial_id: usize,
    pub seed: u64,
    pub init_lr: f64,
    pub init_wd: f64,
    pub init_momentum: f64,
    pub snapshots: Vec<Snapshot>,
    pub final_val_loss: f64,
    pub final_test_loss: f64,
    pub wall_s: f64,
    pub status: TrialStatus,
}

struct StepGraph {
    g: Graph,
    weights: Vec<NodeId>,
    x: NodeId,
    y: NodeId,
    loss: NodeId,
}

impl StepGraph {
    fn new(spec: &MlpSpec, rows: usize) -> Result<Self, HarnessError> {
        let zeros: Vec<Tensor> = spec.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        let (g, weights, parts) = spec.spawn_graph(&zeros, rows)?;
        Ok(Self { g, weights, x: parts.x, y: parts.y, loss: parts.loss })
    }

    fn gradient(
        &mut self,
        params: &[Tensor],
        x: Tensor,
        y: Tensor,
    ) -> Result<(f64, Vec<Tensor>), HarnessError> {
        for (id, w) in self.weights.iter().zip(params) {
            self.g.bind(*id, w.clone())?;
        }
        self.g.bind(self.x, x)?;
        self.g.bind(self.y, y)?;
        self.g.refresh()?;
        let loss = self.g.value(self.loss).item();
        let grads = self.g.grad(self.loss, &self.weights)?;
        Ok((loss, grads))
    }
}

/// Loss evaluation on a fixed portion of the corpus: data bound once,
/// weights rebound per call.
struct PortionEval {
    g: Graph,
    weights: Vec<NodeId>,
    loss: NodeId,
}

impl PortionEval {
    fn new(spec: &MlpSpec, ds: &Dataset, idx: &[usize]) -> Result<Self, HarnessError> {
        let zeros: Vec<Tensor> = spec.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        let (mut g, weights, parts) = spec.spawn_graph(&zeros, idx.len())?;
        let (x, y) = ds.gather(idx);
        g.bind(parts.x, x)?;
        g.bind(parts.y, y)?;
        Ok(Self { g, weights, loss: parts.loss })
    }

    fn loss_at(&mut self, params: &[Tensor]) -> Result<f64, HarnessError> {
        for (id, w) in self.weights.iter().zip(params) {
            self.g.bind(*id, w.clone())?;
        }
        self.g.refresh()?;
        Ok(self.g.value(self.loss).item())
    }
}

fn step_graph_for<'a>(
    cache: &'a mut Vec<(usize, StepGraph)>,
    spec: &MlpSpec,
    rows: usize,
) -> Result<&'a mut StepGraph, HarnessError> {
    if let Some(pos) = cache.iter().position(|(r, _)| *r == rows) {
        return Ok(&mut cache[pos].1);
    }
    cache.push((rows, StepGraph::new(spec, rows)?));
    Ok(&mut cache.last_mut().expect("just pushed").1)
}

fn neumann_engine_for<'a>(
    cache: &'a mut Vec<(usize, NeumannEngine)>,
    spec: &MlpSpec,
    hv: &HyperVector,
    train_rows: usize,
    val_rows: usize,
) -> Result<&'a mut NeumannEngine, HarnessError> {
    if let Some(pos) = cache.iter().position(|(r, _)| *r == train_rows) {
        return Ok(&mut cache[pos].1);
    }
    let engine = NeumannEngine::new(
        hv,
        &spec.param_shapes(),
        |g, w| {
            let parts = spec.attach_loss(g, w, train_rows)?;
            Ok((parts.loss, vec![parts.x, parts.y]))
        },
        |g, w| {
            let parts = spec.attach_loss(g, w, val_rows)?;
            Ok((parts.loss, vec![parts.x, parts.y]))
        },
    )?;
    cache.push((train_rows, engine));
    Ok(&mut cache.last_mut().expect("just pushed").1)
}

/// Cycles through a portion in fixed-size windows, wrapping at the end.
struct ValCycle {
    idx: Vec<usize>,
    size: usize,
    cursor: usize,
}

impl ValCycle {
    fn new(idx: &[usize], size: usize) -> Self {
        Self { idx: idx.to_vec(), size: size.min(idx.len()), cursor: 0 }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.size);
        for _ in 0..self.size {
            out.push(self.idx[self.cursor]);
            self.cursor = (self.cursor + 1) % self.idx.len();
        }
        out
    }
}

/// Runs one trial of `config.setting` and reports its trajectory. On
/// divergence, of the losses or of the hypergradient series, the record ends
/// with a NaN-loss snapshot, its status says so, and remaining steps are
/// skipped.
pub fn run_trial(
    config: &ExperimentConfig,
    spec: &MlpSpec,
    ds: &Dataset,
    split: &Split,
    trial_id: usize,
) -> Result<RunRecord, HarnessError> {
    let started = Instant::now();
    let setting = config.setting;
    let trial_seed = seeds::derive(config.master_seed, trial_id as u64);

    let draws = sample_init(&config.ranges, seeds::derive(trial_seed, STREAM_INIT));
    let lr_width = if setting.per_tensor_lr() { spec.param_shapes().len() } else { 1 };
    let mut hv = draws.hyper_vector(lr_width);

    let mut weight_rng = ChaCha8Rng::seed_from_u64(seeds::derive(trial_seed, STREAM_WEIGHTS));
    let mut params = spec.init_params(&mut weight_rng);
    let mut velocity = SgdState::zeros_like(&params);
    let batch_seed = seeds::derive(trial_seed, STREAM_BATCH);

    let n_train = split.train.len();
    let full_batch = config.batch_size == 0 || config.batch_size >= n_train;
    let batch_size = if full_batch { n_train } else { config.batch_size };
    let steps_per_epoch = n_train.div_ceil(batch_size);
    let total_steps = config.epochs * steps_per_epoch;

    let mut step_graphs: Vec<(usize, StepGraph)> = Vec::new();
    let mut train_eval = PortionEval::new(spec, ds, &split.train)?;
    let mut val_eval = PortionEval::new(spec, ds, &split.val)?;
    let mut test_eval = PortionEval::new(spec, ds, &split.test)?;

    let mask = setting.mask();
    let mask_flags = mask.map(|m| hv.mask_flags(m));
    let mut meta = mask.map(|_| MetaOptimiser::new(hv.dims()));
    let neumann_cfg = NeumannConfig::new(config.t, config.i)?;
    let mut neumann_cache: Vec<(usize, NeumannEngine)> = Vec::new();
    let mut val_cycle = if full_batch {
        None
    } else {
        Some(ValCycle::new(&split.val, batch_size))
    };

    let window = config.i;
    let mut ring: VecDeque<(Vec<Tensor>, Vec<Tensor>, Vec<usize>)> = VecDeque::new();
    let mut grad_prev: Option<Vec<Tensor>> = None;
    let mut grad_last: Option<Vec<Tensor>> = None;

    let mut snapshots: Vec<Snapshot> = Vec::new();
    let mut status = TrialStatus::Ok;
    let mut step = 0usize;

    'training: for epoch in 0..config.epochs {
        for batch in data::batches(&split.train, batch_size, batch_seed, epoch as u64) {
            let (x, y) = ds.gather(&batch);
            let sg = step_graph_for(&mut step_graphs, spec, batch.len())?;
            let (_, grads) = sg.gradient(&params, x, y)?;

            if setting == Setting::DiffThroughOpt {
                if ring.len() == window {
                    ring.pop_front();
                }
                ring.push_back((params.clone(), velocity.velocity.clone(), batch.clone()));
            }
            if setting == Setting::Baydin {
                grad_prev = grad_last.take();
                grad_last = Some(grads.clone());
            }

            sgd_step(&mut params, &grads, &mut velocity, &hv);
            if setting == Setting::RandomXlr {
                hv.multiply_lr(draws.multiplier);
                hv.clip_lr();
            }
            step += 1;

            let boundary = step % config.t == 0;
            if !boundary && step != total_steps {
                continue;
            }

            if !params.iter().all(Tensor::all_finite) {
                snapshots.push(Snapshot {
                    step,
                    train_loss: f64::NAN,
                    val_loss: f64::NAN,
                    test_loss: f64::NAN,
                    lr: hv.export_lr(),
                    wd: hv.weight_decay(),
                    momentum: hv.momentum(),
                });
                status = TrialStatus::DivergedNan;
                break 'training;
            }

            let train_loss = train_eval.loss_at(&params)?;
            let val_loss = val_eval.loss_at(&params)?;
            let test_loss = test_eval.loss_at(&params)?;

            let mut diverged = !train_loss.is_finite()
                || !val_loss.is_finite()
                || !test_loss.is_finite();

            if boundary && !diverged {
                if let (Some(mask), Some(flags), Some(meta)) =
                    (mask, mask_flags.as_ref(), meta.as_mut())
                {
                    let val_idx: Vec<usize> = match val_cycle.as_mut() {
                        None => split.val.clone(),
                        Some(cycle) => cycle.next_batch(),
                    };
                    let (vx, vy) = ds.gather(&val_idx);
                    let result: Result<Hypergradient, HypergradError> = match setting {
                        Setting::Baydin => {
                            let natural = baydin_hypergradient(
                                grad_last.as_deref().expect("at least one step has run"),
                                grad_prev.as_deref(),
                            );
                            Ok(Hypergradient::from_parts(
                                vec![0.0; hv.dims()],
                                baydin_flat(&hv, natural),
                            ))
                        }
                        Setting::DiffThroughOpt => {
                            unroll_hypergradient(spec, ds, &hv, &ring, &[vx, vy], val_idx.len())
                        }
                        _ => {
                            let (bx, by) = ds.gather(&batch);
                            let engine = neumann_engine_for(
                                &mut neumann_cache,
                                spec,
                                &hv,
                                batch.len(),
                                val_idx.len(),
                            )?;
                            if setting == Setting::Lorraine {
                                lorraine_hypergradient(
                                    engine,
                                    &params,
                                    &velocity.velocity,
                                    &hv,
                                    &[bx, by],
                                    &[vx, vy],
                                    &neumann_cfg,
                                )
                            } else {
                                engine.hypergradient(
                                    &params,
                                    &velocity.velocity,
                                    &hv,
                                    &[bx, by],
                                    &[vx, vy],
                                    &neumann_cfg,
                                )
                            }
                        }
                    };
                    match result {
                        Ok(hg) => {
                            meta.step(&mut hv, &hg.total, flags);
                            if mask.lr {
                                hv.clip_lr();
                            }
                            ring.clear();
                        }
                        Err(HypergradError::Diverged(_)) => diverged = true,
                        Err(other) => return Err(other.into()),
                    }
                }
            }

            if diverged {
                snapshots.push(Snapshot {
                    step,
                    train_loss: f64::NAN,
                    val_loss: f64::NAN,
                    test_loss: f64::NAN,
                    lr: hv.export_lr(),
                    wd: hv.weight_decay(),
                    momentum: hv.momentum(),
                });
                status = TrialStatus::DivergedNan;
                break 'training;
            }

            snapshots.push(Snapshot {
                step,
                train_loss,
                val_loss,
                test_loss,
                lr: hv.export_lr(),
                wd: hv.weight_decay(),
                momentum: hv.momentum(),
            });
        }
    }

    let last = snapshots.last().expect("at least one snapshot is always recorded");
    Ok(RunRecord {
        trial_id,
        seed: trial_seed,
        init_lr: draws.lr,
        init_wd: draws.wd,
        init_momentum: draws.momentum,
        final_val_loss: last.val_loss,
        final_test_loss: last.test_loss,
        snapshots,
        wall_s: started.elapsed().as_secs_f64(),
        status,
    })
}

/// Exact differentiation through the ring of recorded update states. The
/// engine is rebuilt per boundary so mixed batch sizes inside a window bind
/// correctly; the window start state enters as a detached leaf.
fn unroll_hypergradient(
    spec: &MlpSpec,
    ds: &Dataset,
    hv: &HyperVector,
    ring: &VecDeque<(Vec<Tensor>, Vec<Tensor>, Vec<usize>)>,
    val_data: &[Tensor],
    val_rows: usize,
) -> Result<Hypergradient, HypergradError> {
    assert!(!ring.is_empty(), "window must contain at least one update");
    let sizes: Vec<usize> = ring.iter().map(|(_, _, batch)| batch.len()).collect();
    let mut next = 0usize;
    let mut engine = UnrollEngine::new(
        hv,
        &spec.param_shapes(),
        ring.len(),
        |g, w| {
            let parts = spec.attach_loss(g, w, sizes[next])?;
            next += 1;
            Ok((parts.loss, vec![parts.x, parts.y]))
        },
        |g, w| {
            let parts = spec.attach_loss(g, w, val_rows)?;
            Ok((parts.loss, vec![parts.x, parts.y]))
        },
    )?;
    let (w0, buf0, _) = ring.front().expect("checked non-empty");
    let step_data: Vec<Vec<Tensor>> = ring
        .iter()
        .map(|(_, _, batch)| {
            let (x, y) = ds.gather(batch);
            vec![x, y]
        })
        .collect();
    engine.hypergradient(w0, buf0, hv, &step_data, val_data)
}

/// One trial's hypergradient comparison at the first update boundary:
/// relative errors of the truncated series against the dense-matrix
/// reference and against exact differentiation through the window, one
/// entry per compared hyperparameter coordinate.
#[derive(Clone, Debug)]
pub struct HypergradProbe {
    pub trial_id: usize,
    pub coords: Vec<String>,
    pub vs_dense: Vec<f64>,
    pub vs_unrolled: Vec<f64>,
}

fn coord_names(hv: &HyperVector) -> Vec<String> {
    let mut names = Vec::with_capacity(hv.dims());
    for k in 0..hv.lr_width() {
        names.push(if hv.lr_width() == 1 { "lr".to_string() } else { format!("lr{k}") });
    }
    names.push("wd".into());
    names.push("momentum".into());
    names
}

/// Runs each trial to its first hyperparameter update and compares the three
/// estimators there: the truncated series, the dense-matrix reference, and
/// exact differentiation through the last `min(max(i, 1), t)` updates.
/// Diverged trials are counted and skipped, not fatal. The dense reference
/// probes one VJP per weight coordinate, so models are capped at 20
/// parameters. The compared coordinates are those the configured setting
/// tunes, or all of them for settings that tune nothing.
pub fn compare_hypergradients(
    exp: &Experiment,
) -> Result<(Vec<HypergradProbe>, usize), HarnessError> {
    let config = exp.config();
    let spec = exp.spec();
    let ds = exp.dataset();
    let split = exp.split();
    if spec.param_count() > 20 {
        return Err(HarnessError::Config(format!(
            "the dense reference probes every weight coordinate and is capped at 20 parameters; \
             this model has {} (shrink `hidden`, e.g. --set hidden=[])",
            spec.param_count()
        )));
    }

    let n_train = split.train.len();
    let full_batch = config.batch_size == 0 || config.batch_size >= n_train;
    let batch_size = if full_batch { n_train } else { config.batch_size };
    let window = config.i.clamp(1, config.t);
    let lr_width = if config.setting.per_tensor_lr() { spec.param_shapes().len() } else { 1 };

    let mut probes = Vec::new();
    let mut diverged = 0usize;

    'trials: for trial in 0..config.n_trials {
        let trial_seed = seeds::derive(config.master_seed, trial as u64);
        let draws = sample_init(&config.ranges, seeds::derive(trial_seed, STREAM_INIT));
        let hv = draws.hyper_vector(lr_width);
        let mut weight_rng =
            ChaCha8Rng::seed_from_u64(seeds::derive(trial_seed, STREAM_WEIGHTS));
        let mut params = spec.init_params(&mut weight_rng);
        let mut velocity = SgdState::zeros_like(&params);
        let batch_seed = seeds::derive(trial_seed, STREAM_BATCH);

        let mut step_graphs: Vec<(usize, StepGraph)> = Vec::new();
        let mut ring: VecDeque<(Vec<Tensor>, Vec<Tensor>, Vec<usize>)> = VecDeque::new();
        let mut last_batch: Vec<usize> = Vec::new();

        let mut step = 0usize;
        'stepping: for epoch in 0u64.. {
            for batch in data::batches(&split.train, batch_size, batch_seed, epoch) {
                let (x, y) = ds.gather(&batch);
                let sg = step_graph_for(&mut step_graphs, spec, batch.len())?;
                let (_, grads) = sg.gradient(&params, x, y)?;
                if ring.len() == window {
                    ring.pop_front();
                }
                ring.push_back((params.clone(), velocity.velocity.clone(), batch.clone()));
                sgd_step(&mut params, &grads, &mut velocity, &hv);
                step += 1;
                if step == config.t {
                    last_batch = batch;
                    break 'stepping;
                }
            }
        }
        if !params.iter().all(Tensor::all_finite) {
            diverged += 1;
            continue 'trials;
        }

        let val_idx: Vec<usize> = if full_batch {
            split.val.clone()
        } else {
            split.val.iter().copied().take(batch_size.min(split.val.len())).collect()
        };
        let (vx, vy) = ds.gather(&val_idx);
        let (bx, by) = ds.gather(&last_batch);
        let cfg = NeumannConfig::new(config.t, config.i)?;

        let mut engine = NeumannEngine::new(
            &hv,
            &spec.param_shapes(),
            |g, w| {
                let parts = spec.attach_loss(g, w, last_batch.len())?;
                Ok((parts.loss, vec![parts.x, parts.y]))
            },
            |g, w| {
                let parts = spec.attach_loss(g, w, val_idx.len())?;
                Ok((parts.loss, vec![parts.x, parts.y]))
            },
        )?;

        let run = |r: Result<Hypergradient, HypergradError>| match r {
            Ok(h) => Ok(Some(h)),
            Err(HypergradError::Diverged(_)) => Ok(None),
            Err(e) => Err(HarnessError::from(e)),
        };
        let neumann = run(engine.hypergradient(
            &params,
            &velocity.velocity,
            &hv,
            &[bx.clone(), by.clone()],
            &[vx.clone(), vy.clone()],
            &cfg,
        ))?;
        let dense = run(dense_reference_hypergradient(
            &mut engine,
            &params,
            &velocity.velocity,
            &hv,
            &[bx, by],
            &[vx.clone(), vy.clone()],
            &cfg,
        ))?;
        let unrolled = run(unroll_hypergradient(spec, ds, &hv, &ring, &[vx, vy], val_idx.len()))?;
        let (Some(neumann), Some(dense), Some(unrolled)) = (neumann, dense, unrolled) else {
            diverged += 1;
            continue 'trials;
        };

        let flags = config
            .setting
            .mask()
            .map(|m| hv.mask_flags(m))
            .unwrap_or_else(|| vec![true; hv.dims()]);
        let vs_dense_all = hypergradient_error(&neumann, &dense);
        let vs_unrolled_all = hypergradient_error(&neumann, &unrolled);
        let mut coords = Vec::new();
        let mut vs_dense = Vec::new();
        let mut vs_unrolled = Vec::new();
        for (k, name) in coord_names(&hv).into_iter().enumerate() {
            if flags[k] {
                coords.push(name);
                vs_dense.push(vs_dense_all[k]);
                vs_unrolled.push(vs_unrolled_all[k]);
            }
        }
        probes.push(HypergradProbe { trial_id: trial, coords, vs_dense, vs_unrolled });
    }
    Ok((probes, diverged))
}

/// A prepared experiment: corpus loaded, split, standardised on the base
/// training portion, and the model dimensioned. The same standardisation is
/// used for every setting so test metrics stay comparable; settings that
/// merge validation into training do so after the statistics are fixed.
pub struct Experiment {
    config: ExperimentConfig,
    spec: MlpSpec,
    ds: Dataset,
    split: Split,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let raw = load_corpus(&config)?;
        Self::with_dataset(config, raw)
    }

    /// Like [`Experiment::new`] with the raw corpus supplied by the caller.
    pub fn with_dataset(config: ExperimentConfig, raw: Dataset) -> Result<Self, HarnessError> {
        config.validate()?;
        let split_seed = seeds::derive(config.master_seed, STREAM_SPLIT);
        let base_split = data::split(&raw, config.fractions, split_seed)?;
        let ds = data::standardise(&raw, &base_split);
        let split = if config.setting.merges_validation() {
            base_split.merge_validation()
        } else {
            base_split
        };
        let layers: Vec<usize> = std::iter::once(ds.features())
            .chain(config.hidden.iter().copied())
            .chain(std::iter::once(ds.output_dim()))
            .collect();
        let loss = match config.task {
            Task::Regression => LossKind::MeanSquaredError,
            Task::Classification => LossKind::CrossEntropy,
        };
        let spec = MlpSpec::new(layers, loss)?;
        Ok(Self { config, spec, ds, split })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.ds
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Seed for the bootstrap resampler, derived from the master seed.
    pub fn bootstrap_seed(&self) -> u64 {
        seeds::derive(self.config.master_seed, STREAM_BOOTSTRAP)
    }

    /// Runs every trial of the configured setting, in parallel when a rayon
    /// pool with more than one thread is installed. The best-of-three
    /// setting executes three times as many trials and keeps one survivor
    /// per consecutive group.
    pub fn run(&self) -> Result<Vec<RunRecord>, HarnessError> {
        let executed = if self.config.setting == Setting::Random3Batched {
            3 * self.config.n_trials
        } else {
            self.config.n_trials
        };
        let records: Result<Vec<RunRecord>, HarnessError> = (0..executed)
            .into_par_iter()
            .map(|trial| run_trial(&self.config, &self.spec, &self.ds, &self.split, trial))
            .collect();
        let records = records?;
        Ok(if self.config.setting == Setting::Random3Batched {
            batch_best_of_k(records, 3)
        } else {
            records
        })
    }
}

/// Loads the corpus the configuration names: the built-in synthetic corpus
/// or a CSV file.
pub fn load_corpus(config: &ExperimentConfig) -> Result<Dataset, HarnessError> {
    if config.dataset == "synthetic-energy" {
        return Ok(data::synthetic_energy(SYNTHETIC_CORPUS_SEED));
    }
    let target = if config.target == "last" {
        TargetColumn::Last
    } else {
        TargetColumn::Named(config.target.clone())
    };
    let parse = match config.task {
        Task::Regression => TargetParse::Continuous,
        Task::Classification => TargetParse::ClassIndex,
    };
    Ok(data::load_csv(Path::new(&config.dataset), &target, parse)?)
}

/// From each consecutive group of `k` records, keeps the one with the lowest
/// final validation loss, treating NaN as positive infinity. A trailing
/// partial group is judged on its own.
pub fn batch_best_of_k(records: Vec<RunRecord>, k: usize) -> Vec<RunRecord> {
    assert!(k >= 1);
    let key = |r: &RunRecord| {
        if r.final_val_loss.is_finite() {
            r.final_val_loss
        } else {
            f64::INFINITY
        }
    };
    let mut out = Vec::with_capacity(records.len().div_ceil(k));
    let mut group: Vec<RunRecord> = Vec::with_capacity(k);
    for record in records {
        group.push(record);
        if group.len() == k {
            let best = group
                .drain(..)
                .reduce(|best, r| if key(&r) < key(&best) { r } else { best })
                .expect("group is non-empty");
            out.push(best);
        }
    }
    if let Some(best) = group
        .into_iter()
        .reduce(|best, r| if key(&r) < key(&best) { r } else { best })
    {
        out.push(best);
    }
    out
}

/// Bootstrap statistics over final losses. Non-finite values are excluded
/// before resampling and reported through `nan_count`; when nothing finite
/// remains every statistic is NaN.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct BootstrapStats {
    pub mean: f64,
    pub mean_se: f64,
    pub median: f64,
    pub median_se: f64,
    pub best: f64,
    pub nan_count: usize,
}

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Resamples the finite values `n_boot` times; the standard errors are the
/// standard deviations of the bootstrap distributions of the mean and the
/// median.
pub fn bootstrap_stats(values: &[f64], n_boot: usize, seed: u64) -> BootstrapStats {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let nan_count = values.len() - finite.len();
    if finite.is_empty() {
        return BootstrapStats {
            mean: f64::NAN,
            mean_se: f64::NAN,
            median: f64::NAN,
            median_se: f64::NAN,
            best: f64::NAN,
            nan_count,
        };
    }
    let n = finite.len();
    let mean = finite.iter().sum::<f64>() / n as f64;
    let mut sorted = finite.clone();
    sorted.sort_by(f64::total_cmp);
    let median = median_of_sorted(&sorted);
    let best = sorted[0];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(n_boot);
    let mut medians = Vec::with_capacity(n_boot);
    let mut resample = vec![0.0; n];
    for _ in 0..n_boot {
        for slot in &mut resample {
            *slot = finite[rng.gen_range(0..n)];
        }
        means.push(resample.iter().sum::<f64>() / n as f64);
        resample.sort_by(f64::total_cmp);
        medians.push(median_of_sorted(&resample));
    }

    BootstrapStats {
        mean,
        mean_se: population_std(&means),
        median,
        median_se: population_std(&medians),
        best,
        nan_count,
    }
}

/// Final test losses as the statistics see them: optionally converting
/// clear outliers to NaN without touching the records.
pub fn final_losses_for_stats(records: &[RunRecord], outliers_to_nan: bool) -> Vec<f64> {
    records
        .iter()
        .map(|r| {
            let v = r.final_test_loss;
            if outliers_to_nan && v.is_finite() && v > OUTLIER_LOSS {
                f64::NAN
            } else {
                v
            }
        })
        .collect()
}

/// Per-setting summary written to the summary JSON. Raw-unit entries are the
/// standardised statistics mapped back through the target scaling and are
/// present for regression targets only.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SettingSummary {
    pub mean: f64,
    pub mean_se: f64,
    pub median: f64,
    pub median_se: f64,
    pub best: f64,
    pub nan_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_raw: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_raw: Option<f64>,
    pub mean_runtime_s: f64,
    pub median_runtime_s: f64,
}

/// Bootstrap statistics plus plain runtime averages for one setting's
/// records. `raw_scale` carries the target standardisation when raw-unit
/// equivalents should be exported.
pub fn summarise(
    records: &[RunRecord],
    outliers_to_nan: bool,
    bootstrap_seed: u64,
    raw_scale: Option<&data::ColumnStats>,
) -> SettingSummary {
    let stats = bootstrap_stats(&final_losses_for_stats(records, outliers_to_nan), 1000, bootstrap_seed);
    let mut runtimes: Vec<f64> = records.iter().map(|r| r.wall_s).collect();
    runtimes.sort_by(f64::total_cmp);
    let mean_runtime_s = runtimes.iter().sum::<f64>() / runtimes.len().max(1) as f64;
    SettingSummary {
        mean: stats.mean,
        mean_se: stats.mean_se,
        median: stats.median,
        median_se: stats.median_se,
        best: stats.best,
        nan_count: stats.nan_count,
        mean_raw: raw_scale.map(|s| s.mse_to_raw(stats.mean)),
        median_raw: raw_scale.map(|s| s.mse_to_raw(stats.median)),
        mean_runtime_s,
        median_runtime_s: median_of_sorted(&runtimes),
    }
}

/// One sensitivity grid cell: the NaN-aware median of final test losses for
/// a given update interval and look-back distance.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct GridCell {
    pub t: usize,
    pub i: usize,
    pub median: f64,
    pub nan_count: usize,
}

/// Sweeps update interval against look-back distance, holding the number of
/// hyperparameter updates fixed, so each cell performs `grid_updates * t`
/// weight updates (rounded up to whole epochs).
pub fn sensitivity_grid(base: &ExperimentConfig, raw: &Dataset) -> Result<Vec<GridCell>, HarnessError> {
    if base.grid_t.is_empty() || base.grid_i.is_empty() {
        return Err(HarnessError::Config("grid_t and grid_i must be non-empty".into()));
    }
    let mut cells = Vec::with_capacity(base.grid_t.len() * base.grid_i.len());
    for &t in &base.grid_t {
        for &i in &base.grid_i {
            let mut cfg = base.clone();
            cfg.t = t;
            cfg.i = i;
            let mut experiment = Experiment::with_dataset(cfg, raw.clone())?;
            let n_train = experiment.split.train.len();
            let batch = if experiment.config.batch_size == 0
                || experiment.config.batch_size >= n_train
            {
                n_train
            } else {
                experiment.config.batch_size
            };
            let steps_per_epoch = n_train.div_ceil(batch);
            experiment.config.epochs = (base.grid_updates * t).div_ceil(steps_per_epoch);
            let records = experiment.run()?;
            let finals = final_losses_for_stats(&records, experiment.config.outliers_to_nan());
            let mut finite: Vec<f64> = finals.iter().copied().filter(|v| v.is_finite()).collect();
            finite.sort_by(f64::total_cmp);
            cells.push(GridCell {
                t,
                i,
                median: median_of_sorted(&finite),
                nan_count: finals.len() - finite.len(),
            });
        }
    }
    Ok(cells)
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|source| HarnessError::Io {
                path: parent.display().to_string(),
                source,
            })?;
        }
    }
    fs::write(path, contents).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes one trajectory CSV per record into `dir`, named by setting and
/// trial. Row status reflects whether that row's losses are finite.
pub fn export_trajectories(
    records: &[RunRecord],
    setting: Setting,
    dir: &Path,
) -> Result<(), HarnessError> {
    for record in records {
        let mut text = String::from("step,train_loss,val_loss,test_loss,lr,wd,momentum,status\n");
        for snap in &record.snapshots {
            let row_status = if snap.is_finite() {
                TrialStatus::Ok
            } else {
                TrialStatus::DivergedNan
            };
            text.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                snap.step,
                snap.train_loss,
                snap.val_loss,
                snap.test_loss,
                snap.lr,
                snap.wd,
                snap.momentum,
                row_status.label()
            ));
        }
        let path = dir.join(format!("{}_trial{:03}.csv", setting.name(), record.trial_id));
        write_file(&path, &text)?;
    }
    Ok(())
}

/// Writes the per-setting summary JSON. Settings appear in the order given.
pub fn export_summary(
    summaries: &[(Setting, SettingSummary)],
    path: &Path,
) -> Result<(), HarnessError> {
    let map: Vec<(String, &SettingSummary)> = summaries
        .iter()
        .map(|(setting, summary)| (setting.name().to_string(), summary))
        .collect();
    let mut ordered = serde_json::Map::new();
    for (name, summary) in map {
        ordered.insert(
            name,
            serde_json::to_value(summary).expect("summary serialises"),
        );
    }
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(ordered))
        .expect("summary serialises");
    write_file(path, &text)
}

/// Writes the long-format empirical CDF of final test losses. The cumulative
/// fraction is normalised by the total number of trials including NaNs, so
/// curves from settings with diverged runs plateau below one.
pub fn export_cdf(
    finals: &[(Setting, Vec<f64>)],
    path: &Path,
) -> Result<(), HarnessError> {
    let mut text = String::from("setting,loss,cum_fraction\n");
    for (setting, values) in finals {
        let total = values.len();
        let mut finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        finite.sort_by(f64::total_cmp);
        for (k, loss) in finite.iter().enumerate() {
            let fraction = (k + 1) as f64 / total as f64;
            text.push_str(&format!("{},{},{}\n", setting.name(), loss, fraction));
        }
    }
    write_file(path, &text)
}

/// Writes sensitivity grid cells as CSV.
pub fn export_grid(cells: &[GridCell], path: &Path) -> Result<(), HarnessError> {
    let mut text = String::from("t,i,median,nan_count\n");
    for cell in cells {
        text.push_str(&format!("{},{},{},{}\n", cell.t, cell.i, cell.median, cell.nan_count));
    }
    write_file(path, &text)
}
