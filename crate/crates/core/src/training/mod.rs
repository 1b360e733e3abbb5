//! Seeded initialization, the RMSProp training loop, threshold tuning and
//! evaluation at voxel and point level.

pub mod backward;
pub mod loss;
pub mod metrics;
pub mod optim;

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{voxel_samples, Dataset, Scene, VoxelSample};
use crate::error::{Error, Result};
use crate::grid::{parse_shape, Grid3, Shape3};
use crate::kernels::{ArrowParams, CylinderParams, GeneoParams, KernelKind, NegSphereParams};
use crate::model::{predict, threshold, CompiledObserver, GeneoObserver, ProbGrid, SceneNetParams};
use crate::pointcloud::{devoxelize, VoxelLabelGrid};

use backward::data_gradient;
use loss::{data_loss, observer_penalty, observer_penalty_grad, LossConfig};
use metrics::Metrics;
use optim::RmsProp;

/// Default detection threshold before tuning.
pub const DEFAULT_TAU: f64 = 0.5;
/// Number of intervals of the threshold sweep over `[0, 1]`.
pub const TAU_STEPS: usize = 100;
/// Entries more negative than this are reported after training.
pub const NEGATIVE_TOLERANCE: f64 = 1e-6;

const LAMBDA_STREAM: u64 = 1 << 20;
const SHUFFLE_STREAM: u64 = 1 << 21;

fn kind_slot(kind: KernelKind) -> u64 {
    KernelKind::ALL.iter().position(|&k| k == kind).unwrap() as u64
}

/// Draw one operator. Each `(kind, instance)` pair has its own random
/// stream, so observers that share a prefix of operators start identically.
pub fn init_operator(kind: KernelKind, seed: u64, instance: usize, kernel_shape: Shape3) -> GeneoParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind_slot(kind) * 1024 + instance as u64);
    let r_max = (kernel_shape[1].min(kernel_shape[2]) as f64 / 2.0).max(0.5);
    let r = rng.gen_range(0.5..=r_max);
    match kind {
        KernelKind::Cylinder => GeneoParams::Cylinder(CylinderParams {
            r,
            sigma: rng.gen_range(1.0..=10.0),
        }),
        KernelKind::Arrow => {
            let r_c = rng.gen_range(0.5..=r_max);
            let kz = kernel_shape[0];
            let h = ((0.7 * kz as f64).round() as usize).clamp(1, kz.saturating_sub(1).max(1));
            GeneoParams::Arrow(ArrowParams {
                r,
                sigma: rng.gen_range(1.0..=10.0),
                h: h as f64,
                r_c,
                beta: rng.gen_range(0.05..=0.4),
            })
        }
        KernelKind::NegSphere => GeneoParams::NegSphere(NegSphereParams {
            r,
            sigma: rng.gen_range(1.0..=10.0),
            omega: rng.gen_range(0.1..=0.9),
        }),
    }
}

/// Observer with `counts[i]` operators of `KernelKind::ALL[i]`, in that
/// order. With `K` operators the `K − 1` free weights are drawn from
/// `[0, 2/(K − 1)]`.
pub fn init_observer(seed: u64, counts: [usize; 3], kernel_shape: Shape3) -> Result<GeneoObserver> {
    if kernel_shape[0] < 2 {
        return Err(Error::config("kernel needs at least 2 vertical cells"));
    }
    let mut ops = Vec::new();
    for (kind, &n) in KernelKind::ALL.iter().zip(&counts) {
        ops.extend((0..n).map(|i| init_operator(*kind, seed, i, kernel_shape)));
    }
    let k = ops.len();
    if k == 0 {
        return Err(Error::config("observer needs at least one operator"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(LAMBDA_STREAM);
    let hi = if k > 1 { 2.0 / (k - 1) as f64 } else { 0.0 };
    let free = (0..k - 1).map(|_| rng.gen_range(0.0..=hi)).collect();
    GeneoObserver::new(ops, free, kernel_shape)
}

/// Seeded initial production parameters. `n_operators` sets the weight range
/// `[0, 2/(n − 1)]` of the two free weights.
pub fn init_params(seed: u64, n_operators: usize, kernel_shape: Shape3) -> Result<SceneNetParams> {
    if n_operators < 2 {
        return Err(Error::config("n_operators must be at least 2"));
    }
    let mut obs = init_observer(seed, [1, 1, 1], kernel_shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(LAMBDA_STREAM);
    let hi = 2.0 / (n_operators - 1) as f64;
    obs.free_lambdas = vec![rng.gen_range(0.0..=hi), rng.gen_range(0.0..=hi)];
    SceneNetParams::from_observer(&obs, DEFAULT_TAU)
}

/// What the threshold sweep maximizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdCriterion {
    Iou,
    Precision,
    FBeta(f64),
}

impl ThresholdCriterion {
    pub fn score(&self, m: &Metrics) -> f64 {
        match self {
            ThresholdCriterion::Iou => m.iou(),
            ThresholdCriterion::Precision => m.precision(),
            ThresholdCriterion::FBeta(b) => m.f_beta(*b),
        }
    }
}

impl FromStr for ThresholdCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iou" => Ok(Self::Iou),
            "precision" => Ok(Self::Precision),
            _ => match s.strip_prefix("f") {
                Some(b) => b
                    .parse::<f64>()
                    .ok()
                    .filter(|b| *b > 0.0 && b.is_finite())
                    .map(Self::FBeta)
                    .ok_or_else(|| Error::config(format!("bad criterion `{s}`"))),
                None => Err(Error::config(format!(
                    "unknown criterion `{s}` (iou, precision, f<beta>)"
                ))),
            },
        }
    }
}

pub fn tau_grid() -> Vec<f64> {
    (0..=TAU_STEPS).map(|k| k as f64 / TAU_STEPS as f64).collect()
}

/// Confusion counts at every grid threshold, accumulated in one pass.
#[derive(Clone, Debug)]
pub struct ThresholdSweep {
    /// Positives / negatives whose largest reached grid threshold is `k`.
    pos: Vec<u64>,
    neg: Vec<u64>,
    pos_total: u64,
    neg_total: u64,
}

impl Default for ThresholdSweep {
    fn default() -> Self {
        Self {
            pos: vec![0; TAU_STEPS + 1],
            neg: vec![0; TAU_STEPS + 1],
            pos_total: 0,
            neg_total: 0,
        }
    }
}

impl ThresholdSweep {
    /// Largest grid index `k` with `p ≥ k/100`, or `None` below the grid.
    fn bucket(p: f64) -> Option<usize> {
        if !(p >= 0.0) {
            return None;
        }
        let n = TAU_STEPS as f64;
        let mut k = ((p * n).floor() as usize).min(TAU_STEPS);
        while k < TAU_STEPS && p >= (k + 1) as f64 / n {
            k += 1;
        }
        while k > 0 && p < k as f64 / n {
            k -= 1;
        }
        Some(k)
    }

    /// Accumulate the occupied voxels of one scene.
    pub fn add(&mut self, prob: &ProbGrid, labels: &VoxelLabelGrid, occupancy: &Grid3<f64>) -> Result<()> {
        labels.ensure_shape(prob.shape())?;
        occupancy.ensure_shape(prob.shape())?;
        for ((&p, &y), _) in prob
            .as_slice()
            .iter()
            .zip(labels.as_slice())
            .zip(occupancy.as_slice())
            .filter(|(_, &o)| o != 0.0)
        {
            let (hist, total) = if y != 0 {
                (&mut self.pos, &mut self.pos_total)
            } else {
                (&mut self.neg, &mut self.neg_total)
            };
            *total += 1;
            if let Some(k) = Self::bucket(p) {
                hist[k] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ThresholdSweep) {
        for (a, b) in [(&mut self.pos, &other.pos), (&mut self.neg, &other.neg)] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.pos_total += other.pos_total;
        self.neg_total += other.neg_total;
    }

    /// Counts for the mask `p ≥ tau_grid()[k]`.
    pub fn metrics_at(&self, k: usize) -> Metrics {
        let tp: u64 = self.pos[k..=TAU_STEPS].iter().sum();
        let fp: u64 = self.neg[k..=TAU_STEPS].iter().sum();
        Metrics::from_counts(tp, fp, self.pos_total - tp, self.neg_total - fp)
    }

    /// Best grid threshold; ties go to the larger threshold.
    pub fn best(&self, criterion: ThresholdCriterion) -> (f64, Metrics) {
        let mut best = (0.0, self.metrics_at(0), f64::NEG_INFINITY);
        for (k, tau) in tau_grid().into_iter().enumerate() {
            let m = self.metrics_at(k);
            let s = criterion.score(&m);
            if s >= best.2 {
                best = (tau, m, s);
            }
        }
        (best.0, best.1)
    }
}

/// Threshold sweep of any observer over the occupied voxels of `samples`.
pub fn sweep_observer(compiled: &CompiledObserver, samples: &[VoxelSample]) -> Result<ThresholdSweep> {
    let parts = samples
        .par_iter()
        .map(|s| {
            let prob = compiled.forward(&s.grid)?;
            let mut sw = ThresholdSweep::default();
            sw.add(&prob, &s.labels, &s.grid.values)?;
            Ok(sw)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ThresholdSweep::default();
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

/// Threshold on the 101-point grid maximizing `criterion` over the occupied
/// voxels of `samples`.
pub fn tune_threshold(
    params: &SceneNetParams,
    samples: &[VoxelSample],
    criterion: ThresholdCriterion,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("validation"));
    }
    Ok(sweep_observer(&params.compile()?, samples)?.best(criterion).0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalLevel {
    Voxel,
    Point,
}

impl FromStr for EvalLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voxel" => Ok(Self::Voxel),
            "point" => Ok(Self::Point),
            other => Err(Error::config(format!("unknown level `{other}` (voxel, point)"))),
        }
    }
}

/// Confusion counts of one scene.
pub fn evaluate_scene(
    params: &SceneNetParams,
    scene: &Scene,
    grid_shape: Shape3,
    target_label: u8,
    level: EvalLevel,
) -> Result<Metrics> {
    let v = scene.voxelize(grid_shape, target_label)?;
    let mask = predict(&v.grid, params)?;
    match level {
        EvalLevel::Voxel => {
            Metrics::from_occupied(mask.as_slice(), v.labels.as_slice(), v.grid.values.as_slice())
        }
        EvalLevel::Point => {
            let pred = devoxelize(&mask, &v.map, &scene.cloud)?;
            let truth: Vec<u8> = scene
                .cloud
                .labels
                .iter()
                .map(|&l| u8::from(l == target_label))
                .collect();
            Metrics::from_masks(&pred, &truth)
        }
    }
}

pub fn evaluate_per_scene(
    params: &SceneNetParams,
    scenes: &[Scene],
    grid_shape: Shape3,
    target_label: u8,
    level: EvalLevel,
) -> Result<Vec<Metrics>> {
    scenes
        .par_iter()
        .map(|s| evaluate_scene(params, s, grid_shape, target_label, level))
        .collect()
}

/// Pooled confusion counts over `scenes`.
pub fn evaluate(
    params: &SceneNetParams,
    scenes: &[Scene],
    grid_shape: Shape3,
    target_label: u8,
    level: EvalLevel,
) -> Result<Metrics> {
    if scenes.is_empty() {
        return Err(Error::EmptyDataset("evaluation"));
    }
    Ok(evaluate_per_scene(params, scenes, grid_shape, target_label, level)?
        .into_iter()
        .sum())
}

/// Pooled counts over occupied voxels of a mask predicted at `params.tau`.
pub fn evaluate_samples(params: &SceneNetParams, samples: &[VoxelSample]) -> Result<Metrics> {
    let compiled = params.compile()?;
    let parts = samples
        .par_iter()
        .map(|s| {
            let mask = threshold(&compiled.forward(&s.grid)?, params.tau);
            Metrics::from_occupied(mask.as_slice(), s.labels.as_slice(), s.grid.values.as_slice())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub stabilizer: f64,
    pub loss: LossConfig,
    pub kernel_shape: Shape3,
    pub grid_shape: Shape3,
    /// Criterion for picking `τ` after training.
    pub criterion: ThresholdCriterion,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            learning_rate: 0.001,
            decay: 0.9,
            stabilizer: 1e-8,
            loss: LossConfig::default(),
            kernel_shape: [9, 9, 9],
            grid_shape: [64, 64, 64],
            criterion: ThresholdCriterion::Iou,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::config(format!("bad boolean `{other}` for `{key}`"))),
    }
}

/// Read a flat `key = value` file. Blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("config line {}: expected `key = value`", i + 1))
        })?;
        out.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    pub const KEYS: [&'static str; 17] = [
        "epochs",
        "batch",
        "lr",
        "decay",
        "stabilizer",
        "alpha",
        "epsilon",
        "rho_l",
        "rho_t",
        "tversky",
        "tversky_alpha",
        "tversky_beta",
        "tversky_delta",
        "tversky_mix",
        "kernel",
        "grid",
        "criterion",
    ];

    /// Apply one setting by name; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        match key.as_str() {
            "epochs" => self.epochs = parse_num(&key, value)?,
            "batch" | "batch_size" => self.batch_size = parse_num(&key, value)?,
            "lr" | "learning_rate" => self.learning_rate = parse_num(&key, value)?,
            "decay" => self.decay = parse_num(&key, value)?,
            "stabilizer" => self.stabilizer = parse_num(&key, value)?,
            "alpha" => self.loss.alpha = parse_num(&key, value)?,
            "epsilon" => self.loss.epsilon = parse_num(&key, value)?,
            "rho_l" => self.loss.rho_l = parse_num(&key, value)?,
            "rho_t" => self.loss.rho_t = parse_num(&key, value)?,
            "tversky" => self.loss.tversky_enabled = parse_bool(&key, value)?,
            "tversky_alpha" => self.loss.tversky_alpha = parse_num(&key, value)?,
            "tversky_beta" => self.loss.tversky_beta = parse_num(&key, value)?,
            "tversky_delta" => self.loss.tversky_delta = parse_num(&key, value)?,
            "tversky_mix" => self.loss.tversky_mix = parse_num(&key, value)?,
            "kernel" => self.kernel_shape = parse_shape(value)?,
            "grid" => self.grid_shape = parse_shape(value)?,
            "criterion" => self.criterion = value.trim().parse()?,
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::config(format!("decay must lie in [0, 1), got {}", self.decay)));
        }
        if !(self.stabilizer.is_finite() && self.stabilizer > 0.0) {
            return Err(Error::config("stabilizer must be > 0"));
        }
        if self.kernel_shape[0] < 2 {
            return Err(Error::config("kernel needs at least 2 vertical cells"));
        }
        for a in 0..3 {
            if self.kernel_shape[a] > self.grid_shape[a] {
                return Err(Error::KernelTooLarge {
                    kernel: self.kernel_shape,
                    grid: self.grid_shape,
                });
            }
        }
        self.loss.validate()
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation counts at the IoU-optimal grid threshold.
    pub val_metrics: Metrics,
    pub val_tau: f64,
    pub wall_seconds: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,val_precision,val_recall,val_iou,wall_seconds";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let _ = writeln!(
            s,
            "{},{:.8},{:.8},{:.6},{:.6},{:.6},{:.3}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_metrics.precision(),
            r.val_metrics.recall(),
            r.val_metrics.iou(),
            r.wall_seconds
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct ObserverRun {
    /// Observer with the best validation IoU (the initial one if no epoch ran).
    pub best: GeneoObserver,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

/// Mean total loss (data term per scene, plus penalty) of an observer.
pub fn mean_loss(obs: &GeneoObserver, samples: &[VoxelSample], config: &LossConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("loss"));
    }
    let compiled = obs.compile()?;
    let losses = samples
        .par_iter()
        .map(|s| data_loss(&compiled.forward(&s.grid)?, &s.labels, config))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64
        + observer_penalty(obs, config.rho_l, config.rho_t))
}

fn validate_observer(
    obs: &GeneoObserver,
    val: &[VoxelSample],
    config: &LossConfig,
) -> Result<(f64, f64, Metrics)> {
    let compiled = obs.compile()?;
    let parts = val
        .par_iter()
        .map(|s| {
            let prob = compiled.forward(&s.grid)?;
            let l = data_loss(&prob, &s.labels, config)?;
            let mut sw = ThresholdSweep::default();
            sw.add(&prob, &s.labels, &s.grid.values)?;
            Ok((l, sw))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sweep = ThresholdSweep::default();
    let mut loss = 0.0;
    for (l, sw) in &parts {
        loss += l;
        sweep.merge(sw);
    }
    let loss = loss / val.len() as f64 + observer_penalty(obs, config.rho_l, config.rho_t);
    let (tau, m) = sweep.best(ThresholdCriterion::Iou);
    Ok((loss, tau, m))
}

/// Train any observer with RMSProp on mini-batches of scenes. Batches are
/// reshuffled every epoch from `seed`; per-scene gradients are reduced in a
/// fixed order so runs are reproducible regardless of thread count.
pub fn train_observer(
    initial: GeneoObserver,
    train: &[VoxelSample],
    val: &[VoxelSample],
    config: &TrainConfig,
    seed: u64,
) -> Result<ObserverRun> {
    config.validate()?;
    if config.epochs == 0 {
        return Ok(ObserverRun {
            best: initial,
            best_epoch: None,
            history: Vec::new(),
        });
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset("training"));
    }
    if val.is_empty() {
        return Err(Error::EmptyDataset("validation"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM);
    let names = initial.trainable_names();
    let n = initial.n_trainable();
    let mut opt = RmsProp::new(n, config.learning_rate);
    opt.decay = config.decay;
    opt.stabilizer = config.stabilizer;
    let mut obs = initial.clone();
    let mut best = (initial, None, f64::NEG_INFINITY);
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let (compiled, kgrads) = obs.compile_with_gradients()?;
            let parts = batch
                .par_iter()
                .map(|&i| data_gradient(&obs, &compiled, &kgrads, &train[i].grid, &train[i].labels, &config.loss))
                .collect::<Result<Vec<_>>>()?;
            let m = batch.len() as f64;
            let mut grad = observer_penalty_grad(&obs, config.loss.rho_l, config.loss.rho_t);
            let mut loss = observer_penalty(&obs, config.loss.rho_l, config.loss.rho_t);
            for p in &parts {
                loss += p.loss / m;
                for (g, d) in grad.iter_mut().zip(&p.grad) {
                    *g += d / m;
                }
            }
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss is {loss} at epoch {epoch}, batch {}",
                    b + 1
                )));
            }
            loss_sum += loss * m;
            let mut theta = obs.trainable();
            opt.step(&mut theta, &grad, &names)
                .map_err(|e| Error::Numerical(format!("epoch {epoch}, batch {}: {e}", b + 1)))?;
            obs.set_trainable(&theta);
        }
        let (val_loss, val_tau, val_metrics) = validate_observer(&obs, val, &config.loss)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("validation loss is {val_loss} at epoch {epoch}")));
        }
        if val_metrics.iou() > best.2 {
            best = (obs.clone(), Some(epoch), val_metrics.iou());
        }
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_metrics,
            val_tau,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(ObserverRun {
        best: best.0,
        best_epoch: best.1,
        history,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub initial: SceneNetParams,
    /// Best-validation parameters with `τ` tuned on the validation split
    /// (left at the default when no epoch ran).
    pub params: SceneNetParams,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
    /// Trainable values (or the derived weight) that ended up negative.
    pub negative: Vec<(&'static str, f64)>,
}

/// Train the production model on a dataset's train split, selecting on val.
pub fn train(dataset: &Dataset, config: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    let initial = init_params(seed, 3, config.kernel_shape)?;
    train_from(initial, dataset, config, seed)
}

pub fn train_from(
    initial: SceneNetParams,
    dataset: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    let tr = voxel_samples(&dataset.train, config.grid_shape, dataset.target_label)?;
    let va = voxel_samples(&dataset.val, config.grid_shape, dataset.target_label)?;
    let run = train_observer(initial.observer()?, &tr, &va, config, seed)?;
    let mut params = SceneNetParams::from_observer(&run.best, initial.tau)?;
    if run.best_epoch.is_some() {
        params.tau = tune_threshold(&params, &va, config.criterion)?;
    }
    let negative = params.negative_entries(NEGATIVE_TOLERANCE);
    Ok(TrainOutcome {
        initial,
        params,
        best_epoch: run.best_epoch,
        history: run.history,
        negative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_valid() {
        let a = init_params(7, 3, [9, 9, 9]).unwrap();
        let b = init_params(7, 3, [9, 9, 9]).unwrap();
        let c = init_params(8, 3, [9, 9, 9]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.trainable(), c.trainable());
        a.validate().unwrap();
        assert_eq!(a.arrow.h, 6.0);
        assert!(a.negative_entries(0.0).iter().all(|(n, _)| *n == "lambda_ns"));
    }

    #[test]
    fn shared_operator_prefix() {
        let small = init_observer(3, [1, 1, 1], [9, 9, 9]).unwrap();
        let big = init_observer(3, [2, 2, 2], [9, 9, 9]).unwrap();
        assert_eq!(small.operators[0], big.operators[0]);
        assert_eq!(small.operators[1], big.operators[2]);
        assert_eq!(small.operators[2], big.operators[4]);
        let single = init_observer(3, [1, 0, 0], [9, 9, 9]).unwrap();
        assert!(single.free_lambdas.is_empty());
    }

    #[test]
    fn bucket_matches_comparison() {
        for p in [0.0, 0.005, 0.01, 0.29, 0.3, 0.57, 0.999, 1.0] {
            let k = ThresholdSweep::bucket(p).unwrap();
            let grid = tau_grid();
            assert!(p >= grid[k]);
            assert!(k == TAU_STEPS || p < grid[k + 1]);
        }
    }

    #[test]
    fn criterion_names() {
        assert_eq!("iou".parse::<ThresholdCriterion>().unwrap(), ThresholdCriterion::Iou);
        assert_eq!("f0.5".parse::<ThresholdCriterion>().unwrap(), ThresholdCriterion::FBeta(0.5));
        assert!("fx".parse::<ThresholdCriterion>().is_err());
    }

    #[test]
    fn config_file_overrides() {
        let kv = parse_config_text("# comment\nepochs = 3\nkernel = 12,5,5 # trailing\nrho-l=2\n").unwrap();
        let mut c = TrainConfig::default();
        for (k, v) in &kv {
            c.set(k, v).unwrap();
        }
        assert_eq!((c.epochs, c.kernel_shape, c.loss.rho_l), (3, [12, 5, 5], 2.0));
        assert!(c.set("bogus", "1").is_err());
        assert!(parse_config_text("no equals sign").is_err());
    }

    #[test]
    fn history_has_header() {
        let csv = history_csv(&[]);
        assert_eq!(csv.trim(), HISTORY_HEADER);
    }
}
