//! Trajectories, autoregressive rollout and the 1-step / all-rollout metrics.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::augment::MaskBank;
use crate::error::{Error, Result};
use crate::features::{frame_features, Normalizer};
use crate::graph::{Graph, NodeType};
use crate::model::{with_positional_encoding, Model};
use crate::ndiff::Tensor;
use crate::par;
use crate::rng::{derive_seed, Stream};

/// `T` frames of per-node fields over a fixed graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub graph: Graph,
    /// Row-major `[T, N, F]`.
    pub fields: Vec<f64>,
    pub num_frames: usize,
    pub dt: f64,
    pub field_names: Vec<String>,
    pub dynamic_mask: Vec<bool>,
    /// 0: current frame only; 1: also first differences of dynamic fields.
    pub history_depth: usize,
}

impl Trajectory {
    pub fn new(
        graph: Graph,
        fields: Vec<f64>,
        num_frames: usize,
        dt: f64,
        field_names: Vec<String>,
        dynamic_mask: Vec<bool>,
        history_depth: usize,
    ) -> Result<Trajectory> {
        let f = field_names.len();
        if dynamic_mask.len() != f {
            return Err(Error::shape("Trajectory", "dynamic mask length differs from field count"));
        }
        if fields.len() != num_frames * graph.num_nodes() * f {
            return Err(Error::shape(
                "Trajectory",
                format!("{} values for T={num_frames}, N={}, F={f}", fields.len(), graph.num_nodes()),
            ));
        }
        if history_depth > 1 {
            return Err(Error::InvalidConfig(format!("history depth {history_depth} unsupported")));
        }
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("trajectory contains non-finite values".into()));
        }
        Ok(Trajectory { graph, fields, num_frames, dt, field_names, dynamic_mask, history_depth })
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn num_fields(&self) -> usize {
        self.field_names.len()
    }

    pub fn frame_len(&self) -> usize {
        self.num_nodes() * self.num_fields()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let len = self.frame_len();
        &self.fields[t * len..(t + 1) * len]
    }

    pub fn dynamic_fields(&self) -> Vec<usize> {
        self.dynamic_mask.iter().enumerate().filter(|(_, &d)| d).map(|(c, _)| c).collect()
    }

    /// Dynamic fields of frame `t` as an `N x F_dyn` tensor.
    pub fn dynamic_frame(&self, t: usize) -> Tensor {
        let frame = Tensor::new(&[self.num_nodes(), self.num_fields()], self.frame(t).to_vec())
            .expect("frame shape");
        frame.select_cols(&self.dynamic_fields())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Absolute,
    #[default]
    Delta,
}

/// Anything that maps the current state to a next-step prediction of the
/// dynamic fields (`N x F_dyn`, row-major).
pub trait StepModel: Sync {
    fn target_kind(&self) -> TargetKind;

    /// `t` is the trajectory index of `current`.
    fn predict(
        &self,
        traj: &Trajectory,
        t: usize,
        current: &[f64],
        previous: Option<&[f64]>,
    ) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutOptions {
    /// Nodes of these types take every field from the ground truth at each step.
    pub forced_node_types: Vec<NodeType>,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions { forced_node_types: vec![NodeType::Inflow] }
    }
}

/// Applies one model step to `current`, returning the next frame. Static
/// fields and forced nodes come from the ground-truth frame `t + 1`.
fn advance(
    model: &dyn StepModel,
    traj: &Trajectory,
    t: usize,
    current: &[f64],
    previous: Option<&[f64]>,
    opts: &RolloutOptions,
) -> Result<Vec<f64>> {
    let dynamic = traj.dynamic_fields();
    let (n, f) = (traj.num_nodes(), traj.num_fields());
    let pred = model.predict(traj, t, current, previous)?;
    if pred.len() != n * dynamic.len() {
        return Err(Error::shape(
            "rollout",
            format!("model returned {} values, expected {}", pred.len(), n * dynamic.len()),
        ));
    }
    let mut next = traj.frame(t + 1).to_vec();
    let kind = model.target_kind();
    for (i, ty) in traj.graph.node_types().iter().enumerate() {
        if opts.forced_node_types.contains(ty) {
            continue;
        }
        for (k, &c) in dynamic.iter().enumerate() {
            let p = pred[i * dynamic.len() + k];
            next[i * f + c] = match kind {
                TargetKind::Absolute => p,
                TargetKind::Delta => current[i * f + c] + p,
            };
        }
    }
    Ok(next)
}

/// Frames `start_t ..= start_t + steps`, the first copied from the data and
/// the rest produced autoregressively. Returns a row-major `[steps+1, N, F]` buffer.
pub fn rollout(
    model: &dyn StepModel,
    traj: &Trajectory,
    start_t: usize,
    steps: usize,
    opts: &RolloutOptions,
) -> Result<Vec<f64>> {
    if start_t + steps >= traj.num_frames {
        return Err(Error::HorizonExceeded { start: start_t, steps, len: traj.num_frames });
    }
    let len = traj.frame_len();
    let mut out = Vec::with_capacity((steps + 1) * len);
    out.extend_from_slice(traj.frame(start_t));
    let mut previous: Option<Vec<f64>> = (start_t > 0).then(|| traj.frame(start_t - 1).to_vec());
    for s in 0..steps {
        let t = start_t + s;
        let current = out[s * len..(s + 1) * len].to_vec();
        let next = advance(model, traj, t, &current, previous.as_deref(), opts)?;
        out.extend_from_slice(&next);
        previous = Some(current);
    }
    Ok(out)
}

fn squared_dynamic_error(traj: &Trajectory, truth: &[f64], pred: &[f64]) -> f64 {
    let f = traj.num_fields();
    let dynamic = traj.dynamic_fields();
    (0..traj.num_nodes())
        .map(|i| {
            dynamic
                .iter()
                .map(|&c| {
                    let e = truth[i * f + c] - pred[i * f + c];
                    e * e
                })
                .sum::<f64>()
        })
        .sum()
}

/// `1/(T N) Σ_t Σ_i (G_t - f(G_{t-1}))_i^2` over the `T = frames - 1` predicted
/// steps, with squared errors summed over dynamic fields.
pub fn one_step_metric(model: &dyn StepModel, traj: &Trajectory, opts: &RolloutOptions) -> Result<f64> {
    if traj.num_frames < 2 {
        return Err(Error::TooShort { len: traj.num_frames, min: 2 });
    }
    let steps = traj.num_frames - 1;
    let mut total = 0.0;
    for t in 1..=steps {
        let prev = (t >= 2).then(|| traj.frame(t - 2));
        let pred = advance(model, traj, t - 1, traj.frame(t - 1), prev, opts)?;
        total += squared_dynamic_error(traj, traj.frame(t), &pred);
    }
    Ok(total / (steps * traj.num_nodes()) as f64)
}

/// `1/(T N) Σ_t Σ_i (G_t - f^t(G_0))_i^2` from a single rollout starting at frame 0.
pub fn all_rollout_metric(model: &dyn StepModel, traj: &Trajectory, opts: &RolloutOptions) -> Result<f64> {
    if traj.num_frames < 2 {
        return Err(Error::TooShort { len: traj.num_frames, min: 2 });
    }
    let steps = traj.num_frames - 1;
    let frames = rollout(model, traj, 0, steps, opts)?;
    let len = traj.frame_len();
    let total: f64 = (1..=steps)
        .map(|t| squared_dynamic_error(traj, traj.frame(t), &frames[t * len..(t + 1) * len]))
        .sum();
    Ok(total / (steps * traj.num_nodes()) as f64)
}

/// Delta model that never changes the state.
pub struct Persistence;

impl StepModel for Persistence {
    fn target_kind(&self) -> TargetKind {
        TargetKind::Delta
    }

    fn predict(&self, traj: &Trajectory, _: usize, _: &[f64], _: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(vec![0.0; traj.num_nodes() * traj.dynamic_fields().len()])
    }
}

/// Absolute model that returns the ground-truth next frame.
pub struct GroundTruth;

impl StepModel for GroundTruth {
    fn target_kind(&self) -> TargetKind {
        TargetKind::Absolute
    }

    fn predict(&self, traj: &Trajectory, t: usize, _: &[f64], _: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(traj.dynamic_frame(t + 1).into_data())
    }
}

struct Prepared {
    bank: MaskBank,
    pe: Option<Tensor>,
}

/// A trained network wrapped as a [`StepModel`]: assembles features, applies
/// normalization, draws per-step masks and undoes the output scaling.
pub struct Surrogate {
    pub model: Model,
    pub normalizer: Normalizer,
    pub kind: TargetKind,
    pub seed: u64,
    cache: Mutex<HashMap<u64, Arc<Prepared>>>,
}

fn graph_key(g: &Graph) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    g.num_nodes().hash(&mut h);
    g.edges().hash(&mut h);
    for c in g.coords() {
        c.to_bits().hash(&mut h);
    }
    h.finish()
}

impl Surrogate {
    pub fn new(model: Model, normalizer: Normalizer, kind: TargetKind, seed: u64) -> Surrogate {
        Surrogate { model, normalizer, kind, seed, cache: Mutex::new(HashMap::new()) }
    }

    fn prepared(&self, g: &Graph) -> Result<Arc<Prepared>> {
        let key = graph_key(g);
        if let Some(p) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(p.clone());
        }
        let cfg = &self.model.cfg;
        let bank = MaskBank::new(g, &cfg.augment, cfg.layers, cfg.heads, cfg.self_loops, self.seed)?;
        let pe = match cfg.pe_mode {
            crate::augment::PeMode::None => None,
            mode => Some(crate::augment::positional_encoding(g, mode)?.values),
        };
        let p = Arc::new(Prepared { bank, pe });
        self.cache.lock().expect("cache lock").insert(key, p.clone());
        Ok(p)
    }
}

impl StepModel for Surrogate {
    fn target_kind(&self) -> TargetKind {
        self.kind
    }

    fn predict(&self, traj: &Trajectory, t: usize, current: &[f64], previous: Option<&[f64]>) -> Result<Vec<f64>> {
        let prep = self.prepared(&traj.graph)?;
        let features = frame_features(traj, current, previous)?;
        let x = match &prep.pe {
            Some(pe) => Tensor::hcat(&[&features.values, pe])?,
            None => features.values,
        };
        let x = self.normalizer.normalize_inputs(&x)?;
        let plan = prep.bank.plan(derive_seed(self.seed, Stream::RandomEdges, t as u64))?;
        let y = self.model.predict(&x, &plan)?;
        Ok(self.normalizer.denormalize_outputs(&y)?.into_data())
    }
}

/// Full input matrix for a model, used outside the [`Surrogate`] path.
pub fn model_input(model: &Model, traj: &Trajectory, current: &[f64], previous: Option<&[f64]>) -> Result<Tensor> {
    let features = frame_features(traj, current, previous)?;
    with_positional_encoding(&traj.graph, &features.values, model.cfg.pe_mode)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricPair {
    pub one_step: f64,
    pub all_rollout: f64,
    /// Same values ×10³.
    pub one_step_e3: f64,
    pub all_rollout_e3: f64,
    pub one_step_root: f64,
    pub all_rollout_root: f64,
}

impl MetricPair {
    fn new(one_step: f64, all_rollout: f64) -> MetricPair {
        MetricPair {
            one_step,
            all_rollout,
            one_step_e3: one_step * 1e3,
            all_rollout_e3: all_rollout * 1e3,
            one_step_root: one_step.sqrt(),
            all_rollout_root: all_rollout.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_trajectory: Vec<MetricPair>,
    pub mean: MetricPair,
}

/// Metrics for every trajectory (evaluated in parallel) and their mean.
pub fn evaluate(model: &dyn StepModel, trajs: &[Trajectory], opts: &RolloutOptions) -> Result<EvalReport> {
    let results = par::map_slice(trajs, |traj| -> Result<MetricPair> {
        Ok(MetricPair::new(one_step_metric(model, traj, opts)?, all_rollout_metric(model, traj, opts)?))
    });
    let per_trajectory = results.into_iter().collect::<Result<Vec<_>>>()?;
    let count = per_trajectory.len().max(1) as f64;
    let mean = MetricPair::new(
        per_trajectory.iter().map(|m| m.one_step).sum::<f64>() / count,
        per_trajectory.iter().map(|m| m.all_rollout).sum::<f64>() / count,
    );
    Ok(EvalReport { per_trajectory, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;

    pub(crate) fn ramp_trajectory(frames: usize) -> Trajectory {
        let n = 4;
        let coords: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, 0.0]).collect();
        let types = [NodeType::Inflow, NodeType::Normal, NodeType::Normal, NodeType::Wall];
        let g = build_graph(&coords, &types, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let mut fields = Vec::new();
        for t in 0..frames {
            for i in 0..n {
                fields.push((t * 10 + i) as f64 * 0.1); // dynamic
                fields.push(i as f64); // static
            }
        }
        Trajectory::new(g, fields, frames, 0.1, vec!["u".into(), "s".into()], vec![true, false], 0).unwrap()
    }

    #[test]
    fn zero_steps_returns_start() {
        let traj = ramp_trajectory(5);
        let out = rollout(&Persistence, &traj, 2, 0, &RolloutOptions::default()).unwrap();
        assert_eq!(out, traj.frame(2));
    }

    #[test]
    fn ground_truth_closure() {
        let traj = ramp_trajectory(6);
        let out = rollout(&GroundTruth, &traj, 0, 5, &RolloutOptions::default()).unwrap();
        assert_eq!(out, traj.fields);
        let opts = RolloutOptions::default();
        assert_eq!(one_step_metric(&GroundTruth, &traj, &opts).unwrap(), 0.0);
        assert_eq!(all_rollout_metric(&GroundTruth, &traj, &opts).unwrap(), 0.0);
    }

    #[test]
    fn persistence_is_constant_except_forced() {
        let traj = ramp_trajectory(4);
        let out = rollout(&Persistence, &traj, 0, 3, &RolloutOptions::default()).unwrap();
        let len = traj.frame_len();
        for t in 1..4 {
            let frame = &out[t * len..(t + 1) * len];
            // node 0 is an inflow node and follows the data
            assert_eq!(frame[0], traj.frame(t)[0]);
            for i in 1..4 {
                assert_eq!(frame[i * 2], traj.frame(0)[i * 2]);
                assert_eq!(frame[i * 2 + 1], traj.frame(t)[i * 2 + 1]);
            }
        }
    }

    #[test]
    fn horizon_and_length_errors() {
        let traj = ramp_trajectory(3);
        let opts = RolloutOptions::default();
        assert!(matches!(rollout(&Persistence, &traj, 1, 2, &opts), Err(Error::HorizonExceeded { .. })));
        let short = ramp_trajectory(1);
        assert!(matches!(one_step_metric(&Persistence, &short, &opts), Err(Error::TooShort { .. })));
        assert!(matches!(all_rollout_metric(&Persistence, &short, &opts), Err(Error::TooShort { .. })));
    }

    #[test]
    fn persistence_on_constant_trajectory() {
        let mut traj = ramp_trajectory(4);
        let first = traj.frame(0).to_vec();
        for t in 1..4 {
            let len = traj.frame_len();
            traj.fields[t * len..(t + 1) * len].copy_from_slice(&first);
        }
        assert_eq!(one_step_metric(&Persistence, &traj, &RolloutOptions::default()).unwrap(), 0.0);
    }
}
