//! Command-line front end: data generation, training, rollout, evaluation,
//! FLOP tables and scaling-law sweeps.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use meshformer::augment::{
    add_random_edges, connect_global, dilate, khop_union, select_global_nodes, AugmentSpec, RandomEdgeCount,
};
use meshformer::dataio::{
    gen_heat_dataset, load_checkpoint, load_dataset, save_checkpoint, save_dataset, save_mgf, Checkpoint,
    HeatConfig,
};
use meshformer::features::input_width;
use meshformer::graph::{adjacency_mask, degree_stats, SparseMask};
use meshformer::model::{flops_estimate, param_count, Model, ModelConfig, Preset};
use meshformer::rng::{derive_seed, Stream};
use meshformer::rollout::{evaluate, rollout, Persistence, RolloutOptions, Surrogate, Trajectory};
use meshformer::scaling::{group_rows, read_rows_csv, summarize, sweep_on_dataset, write_rows_csv};
use meshformer::train::{
    finetune_init, fit_normalizer, mask_pretrain, train_steps, write_loss_csv, TrainConfig, TrajectoryDataset,
};
use serde_json::json;

use config::{copy_config, read_json, write_json, RunConfig, SweepConfig};

#[derive(Parser)]
#[command(name = "meshformer", version, about = "Masked graph transformer for mesh physics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic heat-diffusion dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        trajectories: usize,
        #[arg(long, default_value_t = 200)]
        nodes: usize,
        /// Frames per trajectory.
        #[arg(long, default_value_t = 30)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        kappa: f64,
        #[arg(long, default_value_t = 6)]
        k_neighbors: usize,
    },
    /// Train a next-step model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-node pretraining of an encoder.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0.15)]
        mask_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll a checkpoint out on every trajectory of a dataset.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// One-step and all-rollout metrics of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FLOP accounting for a model config or the named presets.
    Flops {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// S, M, L, XL or all.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 9)]
        p_in: usize,
        #[arg(long, default_value_t = 2)]
        p_out: usize,
        #[arg(long)]
        json: bool,
    },
    /// Fit the compute-optimal power law to sweep results.
    ScalingFit {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        refine: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model grid at several FLOP budgets and fit the result.
    ScalingSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Mask sizes and degrees after each augmentation stage.
    AugmentPreview {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(1)
        }
    }
}

fn error_json(e: &anyhow::Error) -> serde_json::Value {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<meshformer::Error>())
        .map(|m| {
            let debug = format!("{m:?}");
            debug.split([' ', '(', '{']).next().unwrap_or("Error").to_string()
        })
        .unwrap_or_else(|| "Runtime".to_string());
    json!({ "error": format!("{e:#}"), "kind": kind })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { out, trajectories, nodes, steps, seed, kappa, k_neighbors } => {
            let cfg = HeatConfig { trajectories, n_points: nodes, frames: steps, kappa, k_neighbors, seed, ..Default::default() };
            gen_data(&cfg, &out)
        }
        Command::Train { config, out } => train(&config, &out),
        Command::Pretrain { config, mask_fraction, out } => pretrain(&config, mask_fraction, &out),
        Command::Rollout { checkpoint, data, steps, start, out } => rollout_cmd(&checkpoint, &data, start, steps, &out),
        Command::Eval { checkpoint, data, out } => eval(&checkpoint, &data, out.as_deref()),
        Command::Flops { config, preset, p_in, p_out, json } => flops(config.as_deref(), preset.as_deref(), p_in, p_out, json),
        Command::ScalingFit { runs, refine, out } => scaling_fit(&runs, refine, out.as_deref()),
        Command::ScalingSweep { config, out, workers } => scaling_sweep(&config, &out, workers),
        Command::AugmentPreview { data, spec, seed } => augment_preview(&data, &spec, seed),
    }
}

fn gen_data(cfg: &HeatConfig, out: &Path) -> Result<()> {
    let trajs = gen_heat_dataset(cfg)?;
    save_dataset(&trajs, out)?;
    write_json(&out.join("gen_config.json"), cfg)?;
    println!("{}", json!({ "trajectories": trajs.len(), "nodes": cfg.n_points, "frames": cfg.frames, "out": out }));
    Ok(())
}

/// Model config with input and output widths matched to the dataset.
fn fit_widths(mut model: ModelConfig, trajs: &[Trajectory], augment: Option<&AugmentSpec>) -> Result<ModelConfig> {
    let first = trajs.first().context("dataset is empty")?;
    let dynamic = first.dynamic_fields().len();
    model.p_in = input_width(first.num_fields(), dynamic, first.history_depth);
    model.p_out = dynamic;
    model.spatial_dim = first.graph.dim();
    if let Some(spec) = augment {
        model.augment = spec.clone();
    }
    model.validate()?;
    Ok(model)
}

fn surrogate(ck: Checkpoint) -> Surrogate {
    Surrogate::new(ck.model, ck.normalizer, ck.target_kind, ck.seed)
}

fn train(config_path: &Path, out: &Path) -> Result<()> {
    let cfg: RunConfig = read_json(config_path)?;
    copy_config(config_path, out, "config.json")?;
    let seed = cfg.seed();
    let trajs = load_dataset(&cfg.data)?;
    let model_cfg = fit_widths(cfg.model.clone(), &trajs, cfg.augment.as_ref())?;
    let tc = TrainConfig { seed, ..cfg.train.clone() };
    let dataset = TrajectoryDataset::new(trajs, tc.target_kind)?;
    let init_seed = derive_seed(seed, Stream::Init, 0);
    let mut model = match &cfg.init_from {
        Some(path) => finetune_init(&model_cfg, &load_checkpoint(path)?.model, init_seed)?,
        None => Model::new(model_cfg.clone(), init_seed)?,
    };
    let normalizer = fit_normalizer(&dataset, model_cfg.pe_mode, cfg.normalizer_samples)?;
    let outcome = train_steps(&mut model, &dataset, &normalizer, &tc)?;
    let ck = Checkpoint { model, normalizer, target_kind: tc.target_kind, seed };
    save_checkpoint(&ck, &out.join("checkpoint"))?;
    write_loss_csv(&out.join("loss.csv"), &outcome.curve)?;
    let mut record = outcome.record;
    if let Some(path) = &cfg.eval_data {
        let eval_trajs = load_dataset(path)?;
        let report = evaluate(&surrogate(ck), &eval_trajs, &RolloutOptions::default())?;
        record.final_all_rollout_metric = Some(report.mean.all_rollout);
    }
    write_json(&out.join("run_record.json"), &record)?;
    println!("{}", serde_json::to_string(&record)?);
    Ok(())
}

fn pretrain(config_path: &Path, mask_fraction: f64, out: &Path) -> Result<()> {
    let cfg: RunConfig = read_json(config_path)?;
    copy_config(config_path, out, "config.json")?;
    let seed = cfg.seed();
    let trajs = load_dataset(&cfg.data)?;
    let task_cfg = fit_widths(cfg.model.clone(), &trajs, cfg.augment.as_ref())?;
    let latent = task_cfg.d;
    let encoder_cfg = ModelConfig { p_out: latent, ..task_cfg.clone() };
    let decoder_cfg = ModelConfig {
        preset: Preset::Custom,
        layers: 1,
        p_in: latent,
        pe_mode: Default::default(),
        ..task_cfg.clone()
    };
    let tc = TrainConfig { seed, ..cfg.train.clone() };
    let dataset = TrajectoryDataset::new(trajs, tc.target_kind)?;
    let normalizer = fit_normalizer(&dataset, task_cfg.pe_mode, cfg.normalizer_samples)?;
    let outcome = mask_pretrain(&encoder_cfg, &decoder_cfg, &dataset, &normalizer, mask_fraction, &tc)?;
    write_loss_csv(&out.join("loss.csv"), &outcome.curve)?;
    write_json(&out.join("mask_token.json"), &outcome.mask_token.data())?;
    let ck = Checkpoint { model: outcome.encoder, normalizer, target_kind: tc.target_kind, seed };
    save_checkpoint(&ck, &out.join("encoder"))?;
    let last = outcome.step_losses.last().copied().unwrap_or(f64::NAN);
    println!("{}", json!({ "steps": outcome.step_losses.len(), "final_loss": last, "encoder": out.join("encoder") }));
    Ok(())
}

fn rollout_cmd(checkpoint: &Path, data: &Path, start: usize, steps: usize, out: &Path) -> Result<()> {
    let model = surrogate(load_checkpoint(checkpoint)?);
    let trajs = load_dataset(data)?;
    let opts = RolloutOptions::default();
    for (k, traj) in trajs.iter().enumerate() {
        let frames = rollout(&model, traj, start, steps, &opts).with_context(|| format!("trajectory {k}"))?;
        let predicted = Trajectory::new(
            traj.graph.clone(),
            frames,
            steps + 1,
            traj.dt,
            traj.field_names.clone(),
            traj.dynamic_mask.clone(),
            traj.history_depth,
        )?;
        save_mgf(&predicted, &out.join(format!("traj_{k:04}")))?;
    }
    println!("{}", json!({ "trajectories": trajs.len(), "steps": steps, "out": out }));
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let model = surrogate(load_checkpoint(checkpoint)?);
    let trajs = load_dataset(data)?;
    let opts = RolloutOptions::default();
    let report = evaluate(&model, &trajs, &opts)?;
    let baseline = evaluate(&Persistence, &trajs, &opts)?;
    let value = json!({ "model": report, "persistence": baseline.mean });
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("metrics.json"), &value)?;
    }
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn model_from_file(path: &Path) -> Result<ModelConfig> {
    let raw: serde_json::Value = read_json(path)?;
    let model = match raw.get("model") {
        Some(m) => m.clone(),
        None => raw,
    };
    let cfg: ModelConfig = serde_json::from_value(model).with_context(|| format!("invalid model config {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn flops(config: Option<&Path>, preset: Option<&str>, p_in: usize, p_out: usize, as_json: bool) -> Result<()> {
    let configs: Vec<(String, ModelConfig)> = match (config, preset) {
        (Some(path), _) => vec![(path.display().to_string(), model_from_file(path)?)],
        (None, Some(name)) => {
            let presets: Vec<Preset> = match name.to_ascii_uppercase().as_str() {
                "S" => vec![Preset::S],
                "M" => vec![Preset::M],
                "L" => vec![Preset::L],
                "XL" => vec![Preset::XL],
                "ALL" => vec![Preset::S, Preset::M, Preset::L, Preset::XL],
                other => bail!("unknown preset {other}; expected S, M, L, XL or all"),
            };
            presets.into_iter().map(|p| (format!("{p:?}"), ModelConfig::from_preset(p, p_in, p_out))).collect()
        }
        (None, None) => bail!("give --config or --preset"),
    };
    let rows: Vec<serde_json::Value> = configs
        .iter()
        .map(|(name, cfg)| {
            let f = flops_estimate(cfg);
            json!({
                "name": name, "d": cfg.d, "layers": cfg.layers, "params": param_count(cfg),
                "transformer_per_node": f.transformer_per_node, "mps_per_node": f.mps_per_node,
                "two_p": f.two_p, "ratio_transformer": f.ratio_transformer, "ratio_mps": f.ratio_mps,
            })
        })
        .collect();
    if as_json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
        return Ok(());
    }
    println!("{:<8} {:>5} {:>3} {:>12} {:>14} {:>14} {:>14} {:>9} {:>9}", "model", "d", "L", "params", "transformer", "mps", "2P", "tr/2P", "mps/2P");
    for (name, cfg) in &configs {
        let f = flops_estimate(cfg);
        println!(
            "{:<8} {:>5} {:>3} {:>12} {:>14.4e} {:>14.4e} {:>14.4e} {:>9.3} {:>9.3}",
            name, cfg.d, cfg.layers, param_count(cfg), f.transformer_per_node, f.mps_per_node, f.two_p,
            f.ratio_transformer, f.ratio_mps
        );
    }
    Ok(())
}

fn scaling_fit(runs: &Path, refine: bool, out: Option<&Path>) -> Result<()> {
    let rows = read_rows_csv(runs)?;
    let summary = summarize(&group_rows(&rows)?, refine)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("fit.json"), &summary)?;
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn scaling_sweep(config_path: &Path, out: &Path, workers: usize) -> Result<()> {
    let cfg: SweepConfig = read_json(config_path)?;
    copy_config(config_path, out, "config.json")?;
    let trajs = load_dataset(&cfg.data)?;
    let base = fit_widths(cfg.model.clone(), &trajs, None)?;
    let grid: Vec<ModelConfig> = cfg
        .grid
        .iter()
        .map(|g| {
            let c = ModelConfig { preset: Preset::Custom, d: g.d, layers: g.layers, heads: g.heads, ..base.clone() };
            c.validate().map(|_| c)
        })
        .collect::<meshformer::Result<_>>()?;
    let tc = TrainConfig { seed: cfg.seed.unwrap_or(cfg.train.seed), ..cfg.train.clone() };
    let eval_trajs = cfg.eval_data.as_deref().map(load_dataset).transpose()?;
    let dataset = TrajectoryDataset::new(trajs, tc.target_kind)?;
    let rows = sweep_on_dataset(&cfg.budgets, &grid, &dataset, &tc, eval_trajs.as_deref(), workers)?;
    write_rows_csv(&out.join("runs.csv"), &rows)?;
    let groups = group_rows(&rows)?;
    let summary = summarize(&groups, cfg.refine)?;
    write_json(&out.join("fit.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn stage_line(name: &str, m: &SparseMask) -> Result<()> {
    let (max_deg, mean_deg) = degree_stats(m)?;
    println!("{:<22} {:>10} {:>8} {:>10.3}", name, m.nnz(), max_deg, mean_deg);
    Ok(())
}

fn augment_preview(data: &Path, spec_path: &Path, seed: u64) -> Result<()> {
    let spec: AugmentSpec = read_json(spec_path)?;
    spec.validate()?;
    let trajs = load_dataset(data)?;
    for (k, traj) in trajs.iter().enumerate() {
        let g = &traj.graph;
        println!("trajectory {k}: {} nodes", g.num_nodes());
        println!("{:<22} {:>10} {:>8} {:>10}", "stage", "nnz", "max_deg", "mean_deg");
        let adjacency = adjacency_mask(g, false);
        stage_line("adjacency", &adjacency)?;
        let base = khop_union(&adjacency, spec.khop)?;
        stage_line(&format!("khop union ({})", spec.khop), &base)?;
        let globals = select_global_nodes(g, &spec.global, seed);
        let with_global = connect_global(&base, &globals, false)?;
        stage_line(&format!("+ global ({})", globals.len()), &with_global)?;
        let pairs = (spec.random_edge_fraction * adjacency.undirected_edge_count() as f64).round() as usize;
        let with_random = add_random_edges(&with_global, RandomEdgeCount::Pairs(pairs), derive_seed(seed, Stream::RandomEdges, 0))?;
        stage_line(&format!("+ random ({pairs} pairs)"), &with_random)?;
        for power in [2, 3] {
            stage_line(&format!("dilation A^{power}"), &dilate(&adjacency, power)?)?;
        }
    }
    Ok(())
}
