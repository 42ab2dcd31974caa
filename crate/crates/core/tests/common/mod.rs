//! Graph generators and dense reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

use meshformer::graph::{build_graph, Graph, NodeType, SparseMask};
use meshformer::rollout::{StepModel, TargetKind, Trajectory};
use meshformer::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Dense = Vec<Vec<bool>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Erdos-Renyi style graph with random 2-D coordinates and node types.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, p_edge: f64) -> Graph {
    let coords: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random(), rng.random()]).collect();
    let types: Vec<NodeType> = (0..n).map(|_| NodeType::ALL[rng.random_range(0..NodeType::COUNT)]).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p_edge) {
                edges.push((i, j));
            }
        }
    }
    build_graph(&coords, &types, &edges).unwrap()
}

/// Random graph with a spanning path added, so it is connected.
pub fn connected_graph(rng: &mut ChaCha8Rng, n: usize, p_edge: f64) -> Graph {
    let (coords, types, mut edges) = random_graph(rng, n, p_edge).decompose();
    edges.extend((1..n).map(|i| (i - 1, i)));
    build_graph(&coords, &types, &edges).unwrap()
}

pub fn path_graph(n: usize) -> Graph {
    let coords: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, 0.0]).collect();
    let edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
    build_graph(&coords, &vec![NodeType::Normal; n], &edges).unwrap()
}

pub fn dense_product(a: &Dense, b: &Dense) -> Dense {
    let n = a.len();
    (0..n).map(|i| (0..n).map(|j| (0..n).any(|k| a[i][k] && b[k][j])).collect()).collect()
}

pub fn dense_power(a: &Dense, k: usize) -> Dense {
    let n = a.len();
    let mut out: Dense = (0..n).map(|i| (0..n).map(|j| i == j).collect()).collect();
    for _ in 0..k {
        out = dense_product(&out, a);
    }
    out
}

pub fn dense_union(a: &Dense, b: &Dense) -> Dense {
    a.iter().zip(b).map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| *x || *y).collect()).collect()
}

#[allow(clippy::needless_range_loop)]
pub fn dense_global(a: &Dense, nodes: &[usize], self_loops: bool) -> Dense {
    let n = a.len();
    let mut out = a.clone();
    for &u in nodes {
        for j in 0..n {
            if j != u || self_loops {
                out[u][j] = true;
                out[j][u] = true;
            }
        }
    }
    out
}

/// Softmax attention with non-neighbor scores set to negative infinity.
/// Rows without any neighbor produce zeros.
pub fn dense_masked_attention(q: &[f64], k: &[f64], v: &[f64], dh: usize, mask: &Dense) -> Vec<f64> {
    let n = mask.len();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * dh];
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| {
                if mask[i][j] {
                    (0..dh).map(|c| q[i * dh + c] * k[j * dh + c]).sum::<f64>() * scale
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for j in 0..n {
            for c in 0..dh {
                out[i * dh + c] += exps[j] / total * v[j * dh + c];
            }
        }
    }
    out
}

/// Softmax over the whole row, then multiplied by the mask.
pub fn dense_literal_attention(q: &[f64], k: &[f64], v: &[f64], dh: usize, mask: &Dense) -> Vec<f64> {
    let n = mask.len();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * dh];
    for i in 0..n {
        let scores: Vec<f64> =
            (0..n).map(|j| (0..dh).map(|c| q[i * dh + c] * k[j * dh + c]).sum::<f64>() * scale).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for j in (0..n).filter(|&j| mask[i][j]) {
            for c in 0..dh {
                out[i * dh + c] += exps[j] / total * v[j * dh + c];
            }
        }
    }
    out
}

pub fn mask_to_dense(m: &SparseMask) -> Dense {
    m.to_dense()
}

/// Trajectory with one dynamic field `u` and one static field `s`.
pub fn two_field_trajectory(g: Graph, frames: usize, u: impl Fn(usize, usize) -> f64) -> Trajectory {
    let n = g.num_nodes();
    let mut fields = Vec::with_capacity(frames * n * 2);
    for t in 0..frames {
        for i in 0..n {
            fields.push(u(t, i));
            fields.push(10.0 + i as f64);
        }
    }
    Trajectory::new(g, fields, frames, 0.1, vec!["u".into(), "s".into()], vec![true, false], 0).unwrap()
}

/// Delta model `u -> u - rate * u + bias`.
pub struct Relax {
    pub rate: f64,
    pub bias: f64,
}

impl StepModel for Relax {
    fn target_kind(&self) -> TargetKind {
        TargetKind::Delta
    }

    fn predict(&self, traj: &Trajectory, _: usize, current: &[f64], _: Option<&[f64]>) -> Result<Vec<f64>> {
        let f = traj.num_fields();
        let dynamic = traj.dynamic_fields();
        Ok((0..traj.num_nodes())
            .flat_map(|i| dynamic.iter().map(move |&c| (i, c)))
            .map(|(i, c)| -self.rate * current[i * f + c] + self.bias)
            .collect())
    }
}

/// Absolute model that returns the true next frame plus `offset`.
pub struct OffsetTruth {
    pub offset: f64,
}

impl StepModel for OffsetTruth {
    fn target_kind(&self) -> TargetKind {
        TargetKind::Absolute
    }

    fn predict(&self, traj: &Trajectory, t: usize, _: &[f64], _: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(traj.dynamic_frame(t + 1).data().iter().map(|v| v + self.offset).collect())
    }
}
