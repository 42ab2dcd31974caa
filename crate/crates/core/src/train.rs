//! Optimizers, learning-rate schedules, noise injection and the training loops.

use std::collections::HashMap;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{positional_encoding, MaskBank, PeMode};
use crate::error::{Error, Result};
use crate::features::{frame_features, Normalizer};
use crate::graph::{Graph, NodeFeatures};
use crate::model::{forward_on_tape, param_count, training_flops, Model, ModelConfig, WeightVars};
use crate::ndiff::{Tape, Tensor};
use crate::par;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::rollout::{TargetKind, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: OptimizerKind::AdamW, beta1: 0.9, beta2: 0.95, weight_decay: 1e-4, eps: 1e-8 }
    }
}

/// First and second moment estimates, one pair per parameter array.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update; in AdamW mode the weights are first
/// shrunk by `1 - lr * weight_decay`.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", format!("{:?} vs {:?}", p.shape(), g.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let decay = match cfg.kind {
        OptimizerKind::AdamW => 1.0 - lr * cfg.weight_decay,
        OptimizerKind::Adam => 1.0,
    };
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((w, &gi), mi), vi) in
            p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let update = (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
            *w = *w * decay - lr * update;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// Linear warmup from 0 to `lr_max`, then cosine decay to `lr_min` at `total_iters`.
    WarmupCosine { lr_max: f64, lr_min: f64, warmup_iters: usize, total_iters: usize },
    /// Flat at `lr_flat` for `flat_fraction` of the run, then exponential decay
    /// reaching `decay_to` at `total_iters`.
    ExponentialTail { lr_flat: f64, decay_to: f64, flat_fraction: f64, total_iters: usize },
    Constant { lr: f64, total_iters: usize },
}

impl Schedule {
    pub fn total_iters(&self) -> usize {
        match *self {
            Schedule::WarmupCosine { total_iters, .. }
            | Schedule::ExponentialTail { total_iters, .. }
            | Schedule::Constant { total_iters, .. } => total_iters,
        }
    }

    pub fn with_total_iters(self, total: usize) -> Schedule {
        match self {
            Schedule::WarmupCosine { lr_max, lr_min, warmup_iters, .. } => Schedule::WarmupCosine {
                lr_max,
                lr_min,
                warmup_iters: warmup_iters.min(total),
                total_iters: total,
            },
            Schedule::ExponentialTail { lr_flat, decay_to, flat_fraction, .. } => {
                Schedule::ExponentialTail { lr_flat, decay_to, flat_fraction, total_iters: total }
            }
            Schedule::Constant { lr, .. } => Schedule::Constant { lr, total_iters: total },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        match *self {
            Schedule::WarmupCosine { lr_max, lr_min, warmup_iters, total_iters } => {
                if !(lr_max >= lr_min && lr_min > 0.0) {
                    return bad("warmup-cosine needs lr_max >= lr_min > 0");
                }
                if warmup_iters > total_iters {
                    return bad("warmup_iters exceeds total_iters");
                }
            }
            Schedule::ExponentialTail { lr_flat, decay_to, flat_fraction, .. } => {
                if !(lr_flat > 0.0 && decay_to > 0.0 && (0.0..=1.0).contains(&flat_fraction)) {
                    return bad("exponential tail needs positive rates and flat_fraction in [0, 1]");
                }
            }
            Schedule::Constant { lr, .. } => {
                if lr < 0.0 {
                    return bad("negative learning rate");
                }
            }
        }
        Ok(())
    }
}

pub fn lr_at(schedule: &Schedule, step: usize) -> Result<f64> {
    let total = schedule.total_iters();
    if step > total {
        return Err(Error::StepOutOfRange { step, total });
    }
    Ok(match *schedule {
        Schedule::WarmupCosine { lr_max, lr_min, warmup_iters, total_iters } => {
            if step < warmup_iters {
                lr_max * step as f64 / warmup_iters as f64
            } else if total_iters == warmup_iters {
                lr_max
            } else {
                let progress = (step - warmup_iters) as f64 / (total_iters - warmup_iters) as f64;
                lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
        Schedule::ExponentialTail { lr_flat, decay_to, flat_fraction, total_iters } => {
            let flat_end = flat_fraction * total_iters as f64;
            let s = step as f64;
            if s <= flat_end || total_iters as f64 <= flat_end {
                lr_flat
            } else {
                let progress = (s - flat_end) / (total_iters as f64 - flat_end);
                lr_flat * (decay_to / lr_flat).powf(progress)
            }
        }
        Schedule::Constant { lr, .. } => lr,
    })
}

/// Learning-rate defaults per model size: peak 1e-3 (1e-4 for the largest),
/// 1k warmup steps for small models and 5k for large ones, cosine to 1e-6
/// (1e-7 for the largest).
pub fn default_schedule(cfg: &ModelConfig, total_iters: usize) -> Schedule {
    use crate::model::Preset;
    let (lr_max, lr_min, warmup) = match cfg.preset {
        Preset::XL => (1e-4, 1e-7, 5000),
        Preset::L => (1e-3, 1e-6, 5000),
        _ => (1e-3, 1e-6, 1000),
    };
    Schedule::WarmupCosine { lr_max, lr_min, warmup_iters: warmup.min(total_iters), total_iters }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    /// One standard deviation per dynamic field.
    pub noise_sigmas: Vec<f64>,
    /// Samples per optimizer step (gradient accumulation).
    pub batch: usize,
    /// Passes over the samples; when set, overrides the schedule's `total_iters`.
    pub epochs: Option<usize>,
    pub seed: u64,
    pub log_every: usize,
    pub target_kind: TargetKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            schedule: Schedule::WarmupCosine { lr_max: 1e-3, lr_min: 1e-6, warmup_iters: 100, total_iters: 1000 },
            noise_sigmas: Vec::new(),
            batch: 1,
            epochs: None,
            seed: 0,
            log_every: 10,
            target_kind: TargetKind::Delta,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch must be at least 1".into()));
        }
        if self.noise_sigmas.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::InvalidConfig("noise sigmas must be non-negative".into()));
        }
        Ok(())
    }

    /// The schedule with `total_iters` derived from `epochs` when that is set.
    pub fn resolved_schedule(&self, num_samples: usize) -> Schedule {
        match self.epochs {
            Some(e) => self.schedule.with_total_iters((e * num_samples).div_ceil(self.batch.max(1))),
            None => self.schedule,
        }
    }
}

/// Adds i.i.d. Gaussian noise to the dynamic columns; other columns are copied bitwise.
pub fn add_noise(x: &NodeFeatures, sigmas: &[f64], seed: u64) -> Result<NodeFeatures> {
    let dynamic = x.dynamic_columns();
    if sigmas.len() != dynamic.len() {
        return Err(Error::shape(
            "add_noise",
            format!("{} sigmas for {} dynamic columns", sigmas.len(), dynamic.len()),
        ));
    }
    let mut out = x.clone();
    if sigmas.iter().all(|&s| s == 0.0) {
        return Ok(out);
    }
    let mut rng = stream_rng(seed, Stream::Noise, 0);
    let normals: Vec<Option<Normal<f64>>> =
        sigmas.iter().map(|&s| (s > 0.0).then(|| Normal::new(0.0, s).expect("finite sigma"))).collect();
    for i in 0..out.num_nodes() {
        for (k, &c) in dynamic.iter().enumerate() {
            if let Some(n) = &normals[k] {
                let v = out.values.get(i, c) + n.sample(&mut rng);
                out.values.set(i, c, v);
            }
        }
    }
    Ok(out)
}

/// Mean squared error over all entries.
pub fn l2_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("l2_loss", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let n = pred.len().max(1) as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// One supervised example. When `delta_of` is set, the regression target is
/// `target - noisy_input[:, delta_of]`, so the absolute next state stays clean.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub features: NodeFeatures,
    pub target: Tensor,
    pub delta_of: Option<Vec<usize>>,
}

/// Indexed collection of training examples over a small set of graphs.
pub trait SampleSource: Sync {
    fn num_samples(&self) -> usize;
    /// Identifier of the graph used by sample `index`; samples sharing an id share masks.
    fn graph_id(&self, index: usize) -> usize;
    fn graph(&self, index: usize) -> &Graph;
    fn sample(&self, index: usize) -> Result<TrainSample>;
}

/// Next-step samples `(trajectory, t)` from a set of trajectories.
pub struct TrajectoryDataset {
    pub trajectories: Vec<Trajectory>,
    pub kind: TargetKind,
    index: Vec<(usize, usize)>,
}

impl TrajectoryDataset {
    pub fn new(trajectories: Vec<Trajectory>, kind: TargetKind) -> Result<TrajectoryDataset> {
        let mut index = Vec::new();
        for (k, traj) in trajectories.iter().enumerate() {
            if traj.num_frames < 2 {
                return Err(Error::TooShort { len: traj.num_frames, min: 2 });
            }
            for t in traj.history_depth..traj.num_frames - 1 {
                index.push((k, t));
            }
        }
        if index.is_empty() {
            return Err(Error::InvalidConfig("dataset has no samples".into()));
        }
        Ok(TrajectoryDataset { trajectories, kind, index })
    }

    /// Mean node count per sample.
    pub fn mean_nodes(&self) -> f64 {
        self.index.iter().map(|&(k, _)| self.trajectories[k].num_nodes()).sum::<usize>() as f64
            / self.index.len() as f64
    }
}

impl SampleSource for TrajectoryDataset {
    fn num_samples(&self) -> usize {
        self.index.len()
    }

    fn graph_id(&self, index: usize) -> usize {
        self.index[index].0
    }

    fn graph(&self, index: usize) -> &Graph {
        &self.trajectories[self.index[index].0].graph
    }

    fn sample(&self, index: usize) -> Result<TrainSample> {
        let (k, t) = self.index[index];
        let traj = &self.trajectories[k];
        let prev = (traj.history_depth > 0 && t > 0).then(|| traj.frame(t - 1));
        let features = frame_features(traj, traj.frame(t), prev)?;
        let target = traj.dynamic_frame(t + 1);
        let delta_of = match self.kind {
            TargetKind::Absolute => None,
            TargetKind::Delta => Some(features.dynamic_columns()),
        };
        Ok(TrainSample { features, target, delta_of })
    }
}

fn resolve_target(sample: &TrainSample, inputs: &NodeFeatures) -> Tensor {
    match &sample.delta_of {
        None => sample.target.clone(),
        Some(cols) => {
            let base = inputs.values.select_cols(cols);
            let mut t = sample.target.clone();
            for (v, b) in t.data_mut().iter_mut().zip(base.data()) {
                *v -= b;
            }
            t
        }
    }
}

fn pe_for(g: &Graph, mode: PeMode) -> Result<Option<Tensor>> {
    Ok(match mode {
        PeMode::None => None,
        m => Some(positional_encoding(g, m)?.values),
    })
}

fn join_pe(x: &Tensor, pe: &Option<Tensor>) -> Result<Tensor> {
    match pe {
        Some(pe) => Tensor::hcat(&[x, pe]),
        None => Ok(x.clone()),
    }
}

/// Fits input/output statistics on up to `max_samples` evenly spaced clean samples.
pub fn fit_normalizer(source: &dyn SampleSource, pe_mode: PeMode, max_samples: usize) -> Result<Normalizer> {
    let n = source.num_samples();
    let stride = (n / max_samples.max(1)).max(1);
    let mut pe_cache: HashMap<usize, Option<Tensor>> = HashMap::new();
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    for index in (0..n).step_by(stride) {
        let s = source.sample(index)?;
        let gid = source.graph_id(index);
        if let std::collections::hash_map::Entry::Vacant(e) = pe_cache.entry(gid) {
            e.insert(pe_for(source.graph(index), pe_mode)?);
        }
        inputs.push(join_pe(&s.features.values, &pe_cache[&gid])?);
        outputs.push(resolve_target(&s, &s.features));
    }
    Normalizer::fit(&inputs, &outputs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Writes a `step,lr,loss` CSV.
pub fn write_loss_csv(path: &std::path::Path, curve: &[LossPoint]) -> Result<()> {
    let to_err = |e: csv::Error| Error::InvalidConfig(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    for p in curve {
        w.serialize(p).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Bookkeeping for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub flop_budget: f64,
    pub param_count: usize,
    pub training_nodes: u64,
    pub final_loss: f64,
    pub final_all_rollout_metric: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub curve: Vec<LossPoint>,
    /// Loss of every optimizer step.
    pub step_losses: Vec<f64>,
}

/// Mean loss over the last 5% of steps (at least one).
pub fn tail_mean(losses: &[f64]) -> f64 {
    let k = (losses.len() / 20).max(1).min(losses.len().max(1));
    let tail = &losses[losses.len().saturating_sub(k)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

struct GraphCache<'a> {
    cfg: &'a ModelConfig,
    seed: u64,
    entries: HashMap<usize, (MaskBank, Option<Tensor>)>,
}

impl<'a> GraphCache<'a> {
    fn new(cfg: &'a ModelConfig, seed: u64) -> Self {
        GraphCache { cfg, seed, entries: HashMap::new() }
    }

    fn ensure(&mut self, source: &dyn SampleSource, index: usize) -> Result<usize> {
        let gid = source.graph_id(index);
        if !self.entries.contains_key(&gid) {
            let g = source.graph(index);
            let c = self.cfg;
            let bank = MaskBank::new(g, &c.augment, c.layers, c.heads, c.self_loops, self.seed)?;
            self.entries.insert(gid, (bank, pe_for(g, c.pe_mode)?));
        }
        Ok(gid)
    }
}

fn non_finite_at(e: Error, step: usize, lr: f64) -> Error {
    match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { step, loss: f64::NAN, lr },
        other => other,
    }
}

/// Next-step training with noise injection, per-step mask redraws and AdamW.
pub fn train_steps(
    model: &mut Model,
    source: &dyn SampleSource,
    normalizer: &Normalizer,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let schedule = cfg.resolved_schedule(source.num_samples());
    let total = schedule.total_iters();
    let mut state = AdamState::new(&model.weights.tensors());
    let mut cache = GraphCache::new(&model.cfg, cfg.seed);
    let mut sampler = stream_rng(cfg.seed, Stream::Sampling, 0);
    let mut nodes: u64 = 0;
    let mut curve = Vec::new();
    let mut step_losses = Vec::with_capacity(total);

    for step in 0..total {
        let lr = lr_at(&schedule, step)?;
        let picks: Vec<usize> = (0..cfg.batch).map(|_| sampler.random_range(0..source.num_samples())).collect();
        let mut gids = Vec::with_capacity(picks.len());
        for &p in &picks {
            gids.push(cache.ensure(source, p)?);
        }
        let model_ref = &*model;
        let cache_ref = &cache;
        let results = par::map_range(picks.len(), |b| -> Result<(f64, Vec<Tensor>, usize)> {
            let draw = (step * cfg.batch + b) as u64;
            let sample = source.sample(picks[b])?;
            let (bank, pe) = &cache_ref.entries[&gids[b]];
            let plan = bank.plan(derive_seed(cfg.seed, Stream::RandomEdges, draw))?;
            let noisy = if cfg.noise_sigmas.is_empty() {
                sample.features.clone()
            } else {
                add_noise(&sample.features, &cfg.noise_sigmas, derive_seed(cfg.seed, Stream::Noise, draw))?
            };
            let target = normalizer.normalize_outputs(&resolve_target(&sample, &noisy))?;
            let x = normalizer.normalize_inputs(&join_pe(&noisy.values, pe)?)?;
            let mut tape = Tape::new();
            let w = WeightVars::record(&mut tape, &model_ref.weights);
            let xv = tape.leaf(x);
            let y = forward_on_tape(&mut tape, &model_ref.cfg, &w, xv, &plan)?;
            let loss = tape.mse(y, &target, None)?;
            let grads = tape.backward(loss)?;
            let g = w.all.iter().zip(model_ref.weights.tensors()).map(|(&v, p)| grads.get_or_zeros(v, p)).collect();
            Ok((tape.value(loss).item(), g, sample.features.num_nodes()))
        });
        let mut loss_sum = 0.0;
        let mut grad_sum: Option<Vec<Tensor>> = None;
        for r in results {
            let (loss, grads, n) = r.map_err(|e| non_finite_at(e, step, lr))?;
            loss_sum += loss;
            nodes += n as u64;
            match &mut grad_sum {
                None => grad_sum = Some(grads),
                Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        let loss = loss_sum / cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss, lr });
        }
        let mut grads = grad_sum.expect("batch is non-empty");
        if cfg.batch > 1 {
            let inv = 1.0 / cfg.batch as f64;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
        }
        adamw_step(&mut model.weights.tensors_mut(), &grads, &mut state, lr, &cfg.optimizer)?;
        step_losses.push(loss);
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == total) {
            curve.push(LossPoint { step, lr, loss });
        }
    }

    let params = param_count(&model.cfg);
    let record = RunRecord {
        flop_budget: training_flops(params, nodes),
        param_count: params,
        training_nodes: nodes,
        final_loss: tail_mean(&step_losses),
        final_all_rollout_metric: None,
    };
    Ok(TrainOutcome { record, curve, step_losses })
}

/// Result of masked-node pretraining.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub encoder: Model,
    pub decoder: Model,
    pub mask_token: Tensor,
    pub curve: Vec<LossPoint>,
    pub step_losses: Vec<f64>,
}

/// Masked-node reconstruction pretraining of two stacked networks.
///
/// Each step hides the dynamic inputs of a random `mask_fraction` of nodes
/// behind a learned token, runs `encoder` then `decoder`, and regresses the
/// hidden (normalized) values on the masked nodes only. The encoder output
/// width must equal the decoder input width; the decoder outputs one value per
/// dynamic column.
pub fn mask_pretrain(
    encoder_cfg: &ModelConfig,
    decoder_cfg: &ModelConfig,
    source: &dyn SampleSource,
    normalizer: &Normalizer,
    mask_fraction: f64,
    cfg: &TrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if !(mask_fraction > 0.0 && mask_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("mask fraction {mask_fraction} outside (0, 1)")));
    }
    if decoder_cfg.input_width() != encoder_cfg.p_out || decoder_cfg.pe_mode != PeMode::None {
        return Err(Error::InvalidConfig(
            "decoder must take the encoder output as its only input".into(),
        ));
    }
    let mut encoder = Model::new(encoder_cfg.clone(), derive_seed(cfg.seed, Stream::Init, 1))?;
    let mut decoder = Model::new(decoder_cfg.clone(), derive_seed(cfg.seed, Stream::Init, 2))?;
    let probe = source.sample(0)?;
    let dyn_cols = probe.features.dynamic_columns();
    if decoder_cfg.p_out != dyn_cols.len() {
        return Err(Error::InvalidConfig(format!(
            "decoder outputs {} values for {} dynamic columns",
            decoder_cfg.p_out,
            dyn_cols.len()
        )));
    }
    let mut token = Tensor::zeros(&[dyn_cols.len()]);
    let mut state = {
        let mut all = encoder.weights.tensors();
        all.extend(decoder.weights.tensors());
        all.push(&token);
        AdamState::new(&all)
    };
    let mut enc_cache = GraphCache::new(encoder_cfg, cfg.seed);
    let mut dec_cache = GraphCache::new(decoder_cfg, cfg.seed);
    let mut sampler = stream_rng(cfg.seed, Stream::Sampling, 0);
    let schedule = cfg.resolved_schedule(source.num_samples());
    let total = schedule.total_iters();
    let mut curve = Vec::new();
    let mut step_losses = Vec::with_capacity(total);

    for step in 0..total {
        let lr = lr_at(&schedule, step)?;
        let index = sampler.random_range(0..source.num_samples());
        let gid = enc_cache.ensure(source, index)?;
        dec_cache.ensure(source, index)?;
        let sample = source.sample(index)?;
        let n = sample.features.num_nodes();
        let count = (mask_fraction * n as f64).round() as usize;
        if count == 0 {
            return Err(Error::NoMaskedNodes);
        }
        let mut mask_rng = stream_rng(cfg.seed, Stream::Mask, step as u64);
        let mut rows = sample_indices(&mut mask_rng, n, count).into_vec();
        rows.sort_unstable();

        let (enc_bank, enc_pe) = &enc_cache.entries[&gid];
        let (dec_bank, _) = &dec_cache.entries[&gid];
        let edge_seed = derive_seed(cfg.seed, Stream::RandomEdges, step as u64);
        let x = normalizer.normalize_inputs(&join_pe(&sample.features.values, enc_pe)?)?;
        let target = x.select_cols(&dyn_cols);

        let pass = || -> Result<(f64, Vec<Tensor>)> {
            let mut tape = Tape::new();
            let ew = WeightVars::record(&mut tape, &encoder.weights);
            let dw = WeightVars::record(&mut tape, &decoder.weights);
            let tv = tape.leaf(token.clone());
            let xv = tape.leaf(x);
            let masked = tape.replace_entries(xv, tv, &rows, &dyn_cols)?;
            let latent = forward_on_tape(&mut tape, encoder_cfg, &ew, masked, &enc_bank.plan(edge_seed)?)?;
            let recon = forward_on_tape(&mut tape, decoder_cfg, &dw, latent, &dec_bank.plan(edge_seed ^ 1)?)?;
            let loss_var = tape.mse(recon, &target, Some(&rows))?;
            let grads = tape.backward(loss_var)?;
            let mut g: Vec<Tensor> =
                ew.all.iter().zip(encoder.weights.tensors()).map(|(&v, p)| grads.get_or_zeros(v, p)).collect();
            g.extend(dw.all.iter().zip(decoder.weights.tensors()).map(|(&v, p)| grads.get_or_zeros(v, p)));
            g.push(grads.get_or_zeros(tv, &token));
            Ok((tape.value(loss_var).item(), g))
        };
        let (loss, g) = pass().map_err(|e| non_finite_at(e, step, lr))?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss, lr });
        }
        {
            let mut params = encoder.weights.tensors_mut();
            params.extend(decoder.weights.tensors_mut());
            params.push(&mut token);
            adamw_step(&mut params, &g, &mut state, lr, &cfg.optimizer)?;
        }
        step_losses.push(loss);
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == total) {
            curve.push(LossPoint { step, lr, loss });
        }
    }
    Ok(PretrainOutcome { encoder, decoder, mask_token: token, curve, step_losses })
}

/// Mean masked-node reconstruction error of a pretrained pair over every
/// sample of `source`, with masks and augmentation draws fixed by `seed`.
pub fn reconstruction_loss(
    out: &PretrainOutcome,
    source: &dyn SampleSource,
    normalizer: &Normalizer,
    mask_fraction: f64,
    seed: u64,
) -> Result<f64> {
    let (enc, dec) = (&out.encoder, &out.decoder);
    let mut enc_cache = GraphCache::new(&enc.cfg, seed);
    let mut dec_cache = GraphCache::new(&dec.cfg, seed);
    let mut total = 0.0;
    for index in 0..source.num_samples() {
        let gid = enc_cache.ensure(source, index)?;
        dec_cache.ensure(source, index)?;
        let sample = source.sample(index)?;
        let n = sample.features.num_nodes();
        let count = (mask_fraction * n as f64).round() as usize;
        if count == 0 {
            return Err(Error::NoMaskedNodes);
        }
        let rows = sample_indices(&mut stream_rng(seed, Stream::Mask, index as u64), n, count).into_vec();
        let dyn_cols = sample.features.dynamic_columns();
        let (enc_bank, pe) = &enc_cache.entries[&gid];
        let (dec_bank, _) = &dec_cache.entries[&gid];
        let x = normalizer.normalize_inputs(&join_pe(&sample.features.values, pe)?)?;
        let mut masked = x.clone();
        for &r in &rows {
            for (k, &c) in dyn_cols.iter().enumerate() {
                masked.set(r, c, out.mask_token.data()[k]);
            }
        }
        let edge_seed = derive_seed(seed, Stream::RandomEdges, index as u64);
        let latent = enc.predict(&masked, &enc_bank.plan(edge_seed)?)?;
        let recon = dec.predict(&latent, &dec_bank.plan(edge_seed ^ 1)?)?;
        let mut err = 0.0;
        for &r in &rows {
            for (k, &c) in dyn_cols.iter().enumerate() {
                err += (recon.get(r, k) - x.get(r, c)).powi(2);
            }
        }
        total += err / (rows.len() * dyn_cols.len()) as f64;
    }
    Ok(total / source.num_samples() as f64)
}

/// A downstream model whose encoder MLP and blocks start from a pretrained
/// encoder; the decoder MLP is freshly initialized.
pub fn finetune_init(cfg: &ModelConfig, pretrained: &Model, seed: u64) -> Result<Model> {
    let mut model = Model::new(cfg.clone(), seed)?;
    let copied = model.weights.transfer_trunk(&pretrained.weights);
    if copied == 0 {
        return Err(Error::InvalidConfig("pretrained encoder shares no weight shapes".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_cosine_endpoints_and_midpoint() {
        let s = Schedule::WarmupCosine { lr_max: 1e-3, lr_min: 1e-5, warmup_iters: 100, total_iters: 1100 };
        assert_eq!(lr_at(&s, 0).unwrap(), 0.0);
        assert_eq!(lr_at(&s, 100).unwrap(), 1e-3);
        assert!((lr_at(&s, 1100).unwrap() - 1e-5).abs() < 1e-18);
        assert!((lr_at(&s, 600).unwrap() - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert!(matches!(lr_at(&s, 1101), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn exponential_tail_endpoints() {
        let s = Schedule::ExponentialTail { lr_flat: 1e-3, decay_to: 1e-6, flat_fraction: 0.75, total_iters: 1000 };
        assert_eq!(lr_at(&s, 0).unwrap(), 1e-3);
        assert_eq!(lr_at(&s, 750).unwrap(), 1e-3);
        assert!((lr_at(&s, 1000).unwrap() - 1e-6).abs() < 1e-12);
        // constant decay rate: equal ratios over equal intervals
        let r1 = lr_at(&s, 800).unwrap() / lr_at(&s, 750).unwrap();
        let r2 = lr_at(&s, 850).unwrap() / lr_at(&s, 800).unwrap();
        assert!((r1 - r2).abs() < 1e-12);
        assert!((r1 - (1e-3f64).powf(50.0 / 250.0)).abs() < 1e-12);
    }

    #[test]
    fn schedule_validation() {
        let s = Schedule::WarmupCosine { lr_max: 1e-5, lr_min: 1e-3, warmup_iters: 1, total_iters: 2 };
        assert!(s.validate().is_err());
        let s = Schedule::WarmupCosine { lr_max: 1e-3, lr_min: 1e-5, warmup_iters: 3, total_iters: 2 };
        assert!(s.validate().is_err());
    }

    #[test]
    fn adam_zero_gradient_no_decay() {
        let mut w = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = w.clone();
        let mut st = AdamState::new(&[&w]);
        let cfg = OptimizerConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut [&mut w], &[Tensor::zeros(&[3])], &mut st, 1e-2, &cfg).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let g = -0.37;
        let lr = 1e-3;
        let cfg = OptimizerConfig { weight_decay: 0.0, ..Default::default() };
        let mut w = Tensor::scalar(2.0);
        let mut st = AdamState::new(&[&w]);
        adamw_step(&mut [&mut w], &[Tensor::scalar(g)], &mut st, lr, &cfg).unwrap();
        let expected = 2.0 - lr * g / (g.abs() + cfg.eps);
        assert!((w.item() - expected).abs() < 1e-15);
        assert!(((w.item() - 2.0).abs() - lr).abs() < 1e-10);
    }

    #[test]
    fn adamw_decay_only() {
        let cfg = OptimizerConfig { weight_decay: 0.1, ..Default::default() };
        let mut w = Tensor::scalar(3.0);
        let mut st = AdamState::new(&[&w]);
        adamw_step(&mut [&mut w], &[Tensor::scalar(0.0)], &mut st, 0.5, &cfg).unwrap();
        assert!((w.item() - 3.0 * (1.0 - 0.5 * 0.1)).abs() < 1e-15);
        let adam = OptimizerConfig { kind: OptimizerKind::Adam, ..cfg };
        let mut w = Tensor::scalar(3.0);
        let mut st = AdamState::new(&[&w]);
        adamw_step(&mut [&mut w], &[Tensor::scalar(0.0)], &mut st, 0.5, &adam).unwrap();
        assert_eq!(w.item(), 3.0);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut w = Tensor::zeros(&[2]);
        let mut st = AdamState::new(&[&w]);
        let err = adamw_step(&mut [&mut w], &[Tensor::zeros(&[3])], &mut st, 0.1, &OptimizerConfig::default());
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    fn features(n: usize) -> NodeFeatures {
        let values = Tensor::from_fn(n, 3, |i, j| (i * 3 + j) as f64);
        NodeFeatures::new(values, vec!["type".into(), "u".into(), "x".into()], vec![false, true, false]).unwrap()
    }

    #[test]
    fn zero_sigma_is_identity() {
        let x = features(5);
        assert_eq!(add_noise(&x, &[0.0], 3).unwrap(), x);
        assert!(add_noise(&x, &[0.1, 0.2], 3).is_err());
    }

    #[test]
    fn noise_statistics_and_static_columns() {
        let n = 100_000;
        let x = features(n);
        let sigma = 0.3;
        let y = add_noise(&x, &[sigma], 17).unwrap();
        let diffs: Vec<f64> = (0..n).map(|i| y.values.get(i, 1) - x.values.get(i, 1)).collect();
        let mean = diffs.iter().sum::<f64>() / n as f64;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma / (n as f64).sqrt(), "mean {mean}");
        assert!((std / sigma - 1.0).abs() < 0.02, "std {std}");
        for i in 0..n {
            assert_eq!(y.values.get(i, 0).to_bits(), x.values.get(i, 0).to_bits());
            assert_eq!(y.values.get(i, 2).to_bits(), x.values.get(i, 2).to_bits());
        }
        assert_eq!(add_noise(&x, &[sigma], 17).unwrap(), y);
    }

    #[test]
    fn l2_loss_cases() {
        let a = Tensor::from_fn(3, 2, |i, j| i as f64 - j as f64);
        assert_eq!(l2_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.25);
        assert!((l2_loss(&a, &b).unwrap() - 0.0625).abs() < 1e-15);
        assert!(l2_loss(&a, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn tail_mean_uses_last_five_percent() {
        let losses: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(tail_mean(&losses), (95..100).sum::<usize>() as f64 / 5.0);
        assert_eq!(tail_mean(&[4.0]), 4.0);
    }
}
