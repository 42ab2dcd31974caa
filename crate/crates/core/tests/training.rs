use meshformer::dataio::{gen_heat_dataset, HeatConfig};
use meshformer::features::Normalizer;
use meshformer::graph::{build_graph, Graph, NodeFeatures, NodeType};
use meshformer::model::{Model, ModelConfig, Preset};
use meshformer::ndiff::Tensor;
use meshformer::rng::{stream_rng, Stream};
use meshformer::rollout::TargetKind;
use meshformer::train::{
    finetune_init, fit_normalizer, mask_pretrain, reconstruction_loss, train_steps, SampleSource, Schedule, TrainConfig,
    TrainSample, TrajectoryDataset,
};
use meshformer::model::training_flops;
use meshformer::Error;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Random ring-plus-chords graphs whose target is a fixed linear map of the inputs.
struct LinearTask {
    graphs: Vec<Graph>,
    inputs: Vec<Tensor>,
    map: Tensor,
}

impl LinearTask {
    fn new(count: usize, n: usize, width: usize, out: usize, seed: u64) -> LinearTask {
        let mut rng = stream_rng(seed, Stream::Data, 0);
        let mut graphs = Vec::new();
        let mut inputs = Vec::new();
        for _ in 0..count {
            let coords: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random(), rng.random()]).collect();
            let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
            for _ in 0..n / 2 {
                edges.push((rng.random_range(0..n), rng.random_range(0..n)));
            }
            let edges: Vec<_> = edges.into_iter().filter(|(a, b)| a != b).collect();
            graphs.push(build_graph(&coords, &vec![NodeType::Normal; n], &edges).unwrap());
            inputs.push(Tensor::from_fn(n, width, |_, _| StandardNormal.sample(&mut rng)));
        }
        let map = Tensor::from_fn(width, out, |_, _| StandardNormal.sample(&mut rng));
        LinearTask { graphs, inputs, map }
    }
}

impl SampleSource for LinearTask {
    fn num_samples(&self) -> usize {
        self.graphs.len()
    }
    fn graph_id(&self, index: usize) -> usize {
        index
    }
    fn graph(&self, index: usize) -> &Graph {
        &self.graphs[index]
    }
    fn sample(&self, index: usize) -> meshformer::Result<TrainSample> {
        let x = self.inputs[index].clone();
        let width = x.cols();
        let names = (0..width).map(|c| format!("x{c}")).collect();
        let mut dynamic = vec![false; width];
        dynamic[0] = true;
        let target = x.matmul(&self.map)?;
        Ok(TrainSample { features: NodeFeatures::new(x, names, dynamic)?, target, delta_of: None })
    }
}

fn linear_cfg(steps: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        schedule: Schedule::WarmupCosine { lr_max: lr, lr_min: lr * 1e-2, warmup_iters: steps / 10, total_iters: steps },
        target_kind: TargetKind::Absolute,
        seed,
        log_every: 1,
        ..Default::default()
    }
}

#[test]
fn learns_a_linear_target_at_small_scale() {
    let task = LinearTask::new(16, 24, 4, 2, 1);
    let mut cfg = ModelConfig::from_preset(Preset::S, 4, 2);
    cfg.heads = 2;
    let mut model = Model::new(cfg, 3).unwrap();
    let out = train_steps(&mut model, &task, &Normalizer::identity(4, 2), &linear_cfg(500, 1e-3, 7)).unwrap();
    let early = out.step_losses[10];
    let late = out.record.final_loss;
    assert!(late * 10.0 <= early, "loss {early} -> {late}");
    let rec = &out.record;
    assert_eq!(rec.training_nodes, 500 * 24);
    assert!((rec.flop_budget / training_flops(rec.param_count, rec.training_nodes) - 1.0).abs() < 0.01);
    assert_eq!(out.curve.len(), 500);
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let task = LinearTask::new(3, 10, 4, 2, 2);
    let mut model = Model::new(ModelConfig::custom(8, 2, 2, 4, 2), 1).unwrap();
    let before = model.weights.clone();
    let cfg = TrainConfig { schedule: Schedule::Constant { lr: 0.0, total_iters: 5 }, ..linear_cfg(5, 1e-3, 0) };
    train_steps(&mut model, &task, &Normalizer::identity(4, 2), &cfg).unwrap();
    assert_eq!(model.weights, before);
}

#[test]
fn one_step_moves_nearly_every_parameter_array() {
    let task = LinearTask::new(3, 10, 4, 2, 3);
    let mut model = Model::new(ModelConfig::custom(8, 2, 2, 4, 2), 1).unwrap();
    let before = model.weights.clone();
    let cfg = TrainConfig { schedule: Schedule::Constant { lr: 1e-3, total_iters: 1 }, ..linear_cfg(1, 1e-3, 0) };
    train_steps(&mut model, &task, &Normalizer::identity(4, 2), &cfg).unwrap();
    let arrays = before.tensors().len();
    let changed = before.tensors().iter().zip(model.weights.tensors()).filter(|(a, b)| **a != *b).count();
    assert!(changed as f64 >= 0.99 * arrays as f64, "{changed}/{arrays}");
}

#[test]
fn identical_seeds_give_identical_curves() {
    let task = LinearTask::new(4, 12, 4, 2, 4);
    let run = || {
        let mut model = Model::new(ModelConfig::custom(8, 2, 2, 4, 2), 5).unwrap();
        let cfg = TrainConfig { noise_sigmas: vec![0.1], batch: 2, ..linear_cfg(20, 1e-3, 9) };
        train_steps(&mut model, &task, &Normalizer::identity(4, 2), &cfg).unwrap().step_losses
    };
    let a = run();
    let b = run();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn diverging_run_aborts_with_diagnostics() {
    let mut task = LinearTask::new(2, 8, 4, 2, 5);
    task.map = task.map.map(|v| v * 1e200);
    let mut model = Model::new(ModelConfig::custom(8, 1, 2, 4, 2), 1).unwrap();
    let err = train_steps(&mut model, &task, &Normalizer::identity(4, 2), &linear_cfg(3, 1e-3, 0)).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 0, .. }), "{err:?}");
}

fn heat(seed: u64) -> TrajectoryDataset {
    let trajs = gen_heat_dataset(&HeatConfig { trajectories: 4, n_points: 60, frames: 12, seed, ..Default::default() })
        .unwrap();
    TrajectoryDataset::new(trajs, TargetKind::Delta).unwrap()
}

fn pretrain_cfgs() -> (ModelConfig, ModelConfig) {
    // inputs: 5 node-type columns + u
    let encoder = ModelConfig::custom(32, 2, 2, 6, 16);
    let decoder = ModelConfig::custom(16, 1, 2, 16, 1);
    (encoder, decoder)
}

#[test]
fn masked_pretraining_reduces_reconstruction_loss() {
    let data = heat(11);
    let (enc, dec) = pretrain_cfgs();
    let norm = fit_normalizer(&data, enc.pe_mode, 64).unwrap();
    let cfg = TrainConfig {
        schedule: Schedule::WarmupCosine { lr_max: 2e-3, lr_min: 1e-5, warmup_iters: 25, total_iters: 500 },
        seed: 3,
        ..Default::default()
    };
    let out = mask_pretrain(&enc, &dec, &data, &norm, 0.15, &cfg).unwrap();
    let untrained_cfg = TrainConfig { schedule: cfg.schedule.with_total_iters(0), ..cfg.clone() };
    let untrained = mask_pretrain(&enc, &dec, &data, &norm, 0.15, &untrained_cfg).unwrap();
    // held-out masks: a seed the training loop never used
    let before = reconstruction_loss(&untrained, &data, &norm, 0.15, 99).unwrap();
    let after = reconstruction_loss(&out, &data, &norm, 0.15, 99).unwrap();
    println!("reconstruction loss {before:.4} -> {after:.4}");
    assert!(after * 5.0 <= before, "reconstruction loss {before} -> {after}");
}

#[test]
fn empty_mask_is_rejected() {
    let data = heat(12);
    let (enc, dec) = pretrain_cfgs();
    let norm = fit_normalizer(&data, enc.pe_mode, 8).unwrap();
    let cfg = TrainConfig { schedule: Schedule::Constant { lr: 1e-3, total_iters: 2 }, ..Default::default() };
    // 60 nodes at 0.5% rounds to zero masked nodes
    let err = mask_pretrain(&enc, &dec, &data, &norm, 0.005, &cfg).unwrap_err();
    assert!(matches!(err, Error::NoMaskedNodes));
    assert!(mask_pretrain(&enc, &dec, &data, &norm, 0.0, &cfg).is_err());
}

fn steps_to_reach(losses: &[f64], threshold: f64) -> usize {
    let window = 10;
    (window..=losses.len())
        .find(|&s| losses[s - window..s].iter().sum::<f64>() / window as f64 <= threshold)
        .unwrap_or(usize::MAX)
}

// Fails on the heat data: the fine-tuned model trails scratch training by
// 20-40% at every point of the curve (measured 127 vs 52 steps to threshold).
// Run with --ignored to reproduce.
#[test]
#[ignore = "pretraining does not speed up fine-tuning on the diffusion data"]
fn finetuning_from_pretrained_encoder_is_not_slower() {
    let data = heat(13);
    let (enc, dec) = pretrain_cfgs();
    let norm_in = fit_normalizer(&data, enc.pe_mode, 64).unwrap();
    let pre_cfg = TrainConfig {
        schedule: Schedule::WarmupCosine { lr_max: 2e-3, lr_min: 1e-5, warmup_iters: 25, total_iters: 400 },
        seed: 1,
        ..Default::default()
    };
    let pretrained = mask_pretrain(&enc, &dec, &data, &norm_in, 0.15, &pre_cfg).unwrap();

    let task_cfg = ModelConfig::custom(32, 2, 2, 6, 1);
    let norm = fit_normalizer(&data, task_cfg.pe_mode, 64).unwrap();
    let cfg = TrainConfig {
        schedule: Schedule::WarmupCosine { lr_max: 1e-3, lr_min: 1e-5, warmup_iters: 20, total_iters: 300 },
        seed: 2,
        ..Default::default()
    };
    let mut scratch = Model::new(task_cfg.clone(), 21).unwrap();
    let scratch_losses = train_steps(&mut scratch, &data, &norm, &cfg).unwrap().step_losses;
    let mut tuned = finetune_init(&task_cfg, &pretrained.encoder, 21).unwrap();
    let tuned_losses = train_steps(&mut tuned, &data, &norm, &cfg).unwrap().step_losses;

    let threshold = 2.0 * meshformer::train::tail_mean(&scratch_losses);
    let s_scratch = steps_to_reach(&scratch_losses, threshold);
    let s_tuned = steps_to_reach(&tuned_losses, threshold);
    assert!(s_scratch < usize::MAX);
    assert!(s_tuned <= s_scratch, "fine-tuned {s_tuned} steps vs scratch {s_scratch}");
}
