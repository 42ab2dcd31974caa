//! On-disk trajectory format, weight checkpoints and the synthetic heat dataset.
//!
//! A trajectory directory holds `meta.json` and four little-endian blobs:
//! `coords.f32` `[N, D]`, `edges.u32` `[E, 2]`, `node_type.u32` `[N]` and
//! `fields.f32` `[T, N, F]`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Normalizer;
use crate::graph::{Graph, NodeType};
use crate::model::{Model, ModelConfig, Weights};
use crate::ndiff::Tensor;
use crate::par;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::rollout::{TargetKind, Trajectory};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MgfMeta {
    pub format_version: u32,
    #[serde(rename = "N")]
    pub num_nodes: usize,
    #[serde(rename = "T")]
    pub num_frames: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "F")]
    pub num_fields: usize,
    #[serde(rename = "E")]
    pub num_edges: usize,
    pub dt: f64,
    pub field_names: Vec<String>,
    pub dynamic_mask: Vec<bool>,
    #[serde(default)]
    pub history_depth: usize,
    pub node_type_encoding: Vec<(NodeType, u32)>,
    pub blobs: Vec<BlobEntry>,
}

fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn u32_bytes(values: impl Iterator<Item = u32>) -> Vec<u8> {
    values.flat_map(u32::to_le_bytes).collect()
}

fn write_blob(dir: &Path, name: &str, bytes: &[u8]) -> Result<BlobEntry> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(BlobEntry { name: name.to_string(), bytes: bytes.len() as u64 })
}

fn read_blob(dir: &Path, entry: &BlobEntry, expected: u64) -> Result<Vec<u8>> {
    let path = dir.join(&entry.name);
    let corrupt = |reason: String| Error::CorruptMeta { path: path.to_path_buf(), reason };
    if entry.bytes != expected {
        return Err(corrupt(format!("declares {} bytes, layout implies {expected}", entry.bytes)));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() as u64 != expected {
        return Err(Error::LengthMismatch { path: path.to_path_buf(), expected, found: bytes.len() as u64 });
    }
    Ok(bytes)
}

fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect()
}

fn decode_u32(bytes: &[u8]) -> Vec<u32> {
    bytes.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_meta<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<T> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptMeta { path: path.to_path_buf(), reason: e.to_string() })?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    match version {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(Error::UnsupportedVersion { found: v as u32, supported: FORMAT_VERSION }),
        None => {
            return Err(Error::CorruptMeta {
                path: path.to_path_buf(),
                reason: "missing format_version".into(),
            })
        }
    }
    serde_json::from_value(raw).map_err(|e| Error::CorruptMeta { path: path.to_path_buf(), reason: e.to_string() })
}

/// Writes a trajectory directory, creating it if needed. Values are stored as f32.
pub fn save_mgf(traj: &Trajectory, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = &traj.graph;
    let blobs = vec![
        write_blob(dir, "coords.f32", &f32_bytes(g.coords()))?,
        write_blob(dir, "edges.u32", &u32_bytes(g.edges().iter().flat_map(|&(a, b)| [a as u32, b as u32])))?,
        write_blob(dir, "node_type.u32", &u32_bytes(g.node_types().iter().map(|t| t.code())))?,
        write_blob(dir, "fields.f32", &f32_bytes(&traj.fields))?,
    ];
    let meta = MgfMeta {
        format_version: FORMAT_VERSION,
        num_nodes: g.num_nodes(),
        num_frames: traj.num_frames,
        dim: g.dim(),
        num_fields: traj.num_fields(),
        num_edges: g.edges().len(),
        dt: traj.dt,
        field_names: traj.field_names.clone(),
        dynamic_mask: traj.dynamic_mask.clone(),
        history_depth: traj.history_depth,
        node_type_encoding: NodeType::ALL.iter().map(|&t| (t, t.code())).collect(),
        blobs,
    };
    write_json(&dir.join("meta.json"), &meta)
}

pub fn load_mgf(dir: &Path) -> Result<Trajectory> {
    let meta: MgfMeta = read_meta(dir)?;
    let meta_path = dir.join("meta.json");
    let corrupt = |reason: &str| Error::CorruptMeta { path: meta_path.to_path_buf(), reason: reason.into() };
    if meta.field_names.len() != meta.num_fields || meta.dynamic_mask.len() != meta.num_fields {
        return Err(corrupt("field_names/dynamic_mask disagree with F"));
    }
    let blob = |name: &str| meta.blobs.iter().find(|b| b.name == name).ok_or_else(|| corrupt(&format!("missing blob {name}")));
    let (n, t, d, f, e) = (meta.num_nodes, meta.num_frames, meta.dim, meta.num_fields, meta.num_edges);
    let coords = decode_f32(&read_blob(dir, blob("coords.f32")?, (n * d * 4) as u64)?);
    let edges = decode_u32(&read_blob(dir, blob("edges.u32")?, (e * 8) as u64)?);
    let types = decode_u32(&read_blob(dir, blob("node_type.u32")?, (n * 4) as u64)?);
    let fields = decode_f32(&read_blob(dir, blob("fields.f32")?, (t * n * f * 4) as u64)?);

    let mut node_type = Vec::with_capacity(n);
    for code in types {
        let ty = meta
            .node_type_encoding
            .iter()
            .find(|(_, c)| *c == code)
            .map(|(ty, _)| *ty)
            .ok_or_else(|| corrupt(&format!("unknown node type code {code}")))?;
        node_type.push(ty);
    }
    let pairs: Vec<(usize, usize)> = edges.chunks_exact(2).map(|p| (p[0] as usize, p[1] as usize)).collect();
    let graph = Graph::from_flat(d, coords, node_type, &pairs)?;
    Trajectory::new(graph, fields, t, meta.dt, meta.field_names, meta.dynamic_mask, meta.history_depth)
}

fn traj_dir(root: &Path, k: usize) -> PathBuf {
    root.join(format!("traj_{k:04}"))
}

/// Writes `root/traj_0000`, `root/traj_0001`, ...
pub fn save_dataset(trajs: &[Trajectory], root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    par::map_range(trajs.len(), |k| save_mgf(&trajs[k], &traj_dir(root, k))).into_iter().collect()
}

/// Loads every `traj_*` subdirectory in name order; a directory that is itself
/// a trajectory loads as a single-element dataset.
pub fn load_dataset(root: &Path) -> Result<Vec<Trajectory>> {
    if root.join("meta.json").exists() {
        return Ok(vec![load_mgf(root)?]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("traj_")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::CorruptMeta { path: root.to_path_buf(), reason: "no trajectories found".into() });
    }
    par::map_slice(&dirs, |d: &PathBuf| load_mgf(d)).into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    format_version: u32,
    config: ModelConfig,
    normalizer: Normalizer,
    target_kind: TargetKind,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

/// A trained model with everything needed to run it on new trajectories.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub normalizer: Normalizer,
    pub target_kind: TargetKind,
    /// Seed of the mask draws (global nodes, random pairs) used in training.
    pub seed: u64,
}

/// Writes `meta.json` plus one `<name>.f32` blob per parameter array.
pub fn save_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (name, t) in ck.model.weights.names().into_iter().zip(ck.model.weights.tensors()) {
        let entry = write_blob(dir, &format!("{name}.f32"), &f32_bytes(t.data()))?;
        tensors.push(TensorEntry { name, shape: t.shape().to_vec(), bytes: entry.bytes });
    }
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        config: ck.model.cfg.clone(),
        normalizer: ck.normalizer.clone(),
        target_kind: ck.target_kind,
        seed: ck.seed,
        tensors,
    };
    write_json(&dir.join("meta.json"), &meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta: CheckpointMeta = read_meta(dir)?;
    let mut tensors = Vec::with_capacity(meta.tensors.len());
    for entry in &meta.tensors {
        let count: usize = entry.shape.iter().product();
        let blob = BlobEntry { name: format!("{}.f32", entry.name), bytes: entry.bytes };
        let data = decode_f32(&read_blob(dir, &blob, (count * 4) as u64)?);
        tensors.push(Tensor::new(&entry.shape, data)?);
    }
    let weights = Weights::from_tensors(&meta.config, tensors)?;
    let expected = weights.names();
    let declared: Vec<&str> = meta.tensors.iter().map(|t| t.name.as_str()).collect();
    if declared != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::CorruptMeta {
            path: dir.join("meta.json").to_path_buf(),
            reason: "tensor names do not match the model layout".into(),
        });
    }
    Ok(Checkpoint {
        model: Model::from_weights(meta.config, weights)?,
        normalizer: meta.normalizer,
        target_kind: meta.target_kind,
        seed: meta.seed,
    })
}

/// Parameters of the synthetic diffusion dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatConfig {
    pub trajectories: usize,
    pub n_points: usize,
    pub frames: usize,
    pub kappa: f64,
    pub k_neighbors: usize,
    /// `dt = stability / (kappa * deg_max)`; must stay below 0.5.
    pub stability: f64,
    pub seed: u64,
    pub max_attempts: usize,
}

impl Default for HeatConfig {
    fn default() -> Self {
        HeatConfig {
            trajectories: 20,
            n_points: 200,
            frames: 30,
            kappa: 1.0,
            k_neighbors: 6,
            stability: 0.4,
            seed: 0,
            max_attempts: 16,
        }
    }
}

/// Symmetrized k-nearest-neighbour edge list.
pub fn knn_edges(points: &[[f64; 2]], k: usize) -> Vec<(usize, usize)> {
    let n = points.len();
    let lists = par::map_range(n, |i| {
        let mut d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let dx = points[i][0] - points[j][0];
                let dy = points[i][1] - points[j][1];
                (dx * dx + dy * dy, j)
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().take(k).map(|(_, j)| j).collect::<Vec<_>>()
    });
    let mut edges = Vec::new();
    for (i, nbrs) in lists.into_iter().enumerate() {
        for j in nbrs {
            edges.push((i, j));
            edges.push((j, i));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Indices of convex-hull vertices (monotone chain; collinear points excluded).
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]).then(points[a][1].total_cmp(&points[b][1])));
    if idx.len() < 3 {
        return idx;
    }
    let cross = |o: usize, a: usize, b: usize| {
        (points[a][0] - points[o][0]) * (points[b][1] - points[o][1])
            - (points[a][1] - points[o][1]) * (points[b][0] - points[o][0])
    };
    let mut hull: Vec<usize> = Vec::with_capacity(2 * idx.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &usize>> =
            if pass == 0 { Box::new(idx.iter()) } else { Box::new(idx.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull.sort_unstable();
    hull.dedup();
    hull
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// One explicit-Euler step of `du/dt = -kappa * L u` with the combinatorial Laplacian.
pub fn heat_step(u: &[f64], neighbors: &[Vec<usize>], dt_kappa: f64) -> Vec<f64> {
    (0..u.len())
        .map(|i| {
            let lu: f64 = neighbors[i].iter().map(|&j| u[i] - u[j]).sum();
            u[i] - dt_kappa * lu
        })
        .collect()
}

fn heat_trajectory(cfg: &HeatConfig, seed: u64) -> Result<Trajectory> {
    let mut attempt = 0;
    let (points, edges) = loop {
        if attempt >= cfg.max_attempts {
            return Err(Error::DegenerateGeometry { attempts: attempt });
        }
        let mut rng = stream_rng(seed, Stream::Data, attempt as u64);
        let points: Vec<[f64; 2]> =
            (0..cfg.n_points).map(|_| [round_f32(rng.random::<f64>()), round_f32(rng.random::<f64>())]).collect();
        let edges = knn_edges(&points, cfg.k_neighbors);
        let probe = Graph::from_flat(2, points.iter().flatten().copied().collect(), vec![NodeType::Normal; cfg.n_points], &edges)?;
        attempt += 1;
        if probe.is_connected() {
            break (points, edges);
        }
    };
    let n = cfg.n_points;
    let mut node_type = vec![NodeType::Normal; n];
    for i in convex_hull(&points) {
        node_type[i] = NodeType::Wall;
    }
    let graph = Graph::from_flat(2, points.iter().flatten().copied().collect(), node_type, &edges)?;
    let mut neighbors = vec![Vec::new(); n];
    for &(a, b) in graph.edges() {
        if a != b {
            neighbors[a].push(b);
        }
    }
    let deg_max = neighbors.iter().map(Vec::len).max().unwrap_or(0) as f64;
    let dt = if cfg.kappa > 0.0 && deg_max > 0.0 { cfg.stability / (cfg.kappa * deg_max) } else { 1.0 };
    if !(dt * cfg.kappa * deg_max < 0.5) || !(dt > 0.0) {
        return Err(Error::UnstableTimestep { value: dt * cfg.kappa * deg_max });
    }

    let mut rng = stream_rng(seed, Stream::Data, u64::MAX);
    let bumps = rng.random_range(1..=3);
    let params: Vec<(f64, f64, f64, f64)> = (0..bumps)
        .map(|_| (rng.random_range(0.5..1.5), rng.random::<f64>(), rng.random::<f64>(), rng.random_range(0.05..0.2)))
        .collect();
    let mut u: Vec<f64> = points
        .iter()
        .map(|p| {
            params
                .iter()
                .map(|&(a, cx, cy, s)| a * (-((p[0] - cx).powi(2) + (p[1] - cy).powi(2)) / (2.0 * s * s)).exp())
                .sum()
        })
        .collect();
    let mut fields = Vec::with_capacity(cfg.frames * n);
    for t in 0..cfg.frames {
        if t > 0 {
            u = heat_step(&u, &neighbors, dt * cfg.kappa);
        }
        fields.extend(u.iter().map(|&v| round_f32(v)));
    }
    Trajectory::new(graph, fields, cfg.frames, dt, vec!["u".into()], vec![true], 0)
}

/// Diffusion on random k-NN point clouds in the unit square, one geometry per trajectory.
pub fn gen_heat_dataset(cfg: &HeatConfig) -> Result<Vec<Trajectory>> {
    if cfg.n_points < cfg.k_neighbors + 1 || cfg.k_neighbors == 0 {
        return Err(Error::InvalidConfig(format!(
            "{} points cannot have {} neighbours each",
            cfg.n_points, cfg.k_neighbors
        )));
    }
    if cfg.frames < 2 {
        return Err(Error::TooShort { len: cfg.frames, min: 2 });
    }
    if !(cfg.kappa >= 0.0) {
        return Err(Error::InvalidConfig("diffusivity must be non-negative".into()));
    }
    if !(cfg.stability > 0.0 && cfg.stability < 0.5) {
        return Err(Error::UnstableTimestep { value: cfg.stability });
    }
    par::map_range(cfg.trajectories, |k| heat_trajectory(cfg, derive_seed(cfg.seed, Stream::Data, k as u64)))
        .into_iter()
        .collect()
}
