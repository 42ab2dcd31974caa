//! Node feature assembly from trajectory frames, and input/output normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeFeatures, NodeType};
use crate::ndiff::Tensor;
use crate::rollout::Trajectory;

/// Width of the per-node input (before positional encoding) for a trajectory
/// layout: node-type one-hot, every field, then first differences of the
/// dynamic fields when history is on.
pub fn input_width(num_fields: usize, num_dynamic: usize, history_depth: usize) -> usize {
    NodeType::COUNT + num_fields + if history_depth > 0 { num_dynamic } else { 0 }
}

pub fn node_type_one_hot(g: &Graph) -> Tensor {
    let mut t = Tensor::zeros(&[g.num_nodes(), NodeType::COUNT]);
    for (i, ty) in g.node_types().iter().enumerate() {
        t.set(i, ty.code() as usize, 1.0);
    }
    t
}

/// Input features for one step. With history on and no `previous` frame the
/// difference columns are zero.
pub fn frame_features(traj: &Trajectory, frame: &[f64], previous: Option<&[f64]>) -> Result<NodeFeatures> {
    let n = traj.num_nodes();
    let f = traj.num_fields();
    if frame.len() != n * f {
        return Err(Error::shape("frame_features", format!("frame has {} values, expected {}", frame.len(), n * f)));
    }
    let dynamic = traj.dynamic_fields();
    let history = traj.history_depth > 0;
    let width = input_width(f, dynamic.len(), traj.history_depth);
    let mut values = Tensor::zeros(&[n, width]);
    let one_hot = node_type_one_hot(&traj.graph);
    for i in 0..n {
        let row = values.row_mut(i);
        row[..NodeType::COUNT].copy_from_slice(one_hot.row(i));
        row[NodeType::COUNT..NodeType::COUNT + f].copy_from_slice(&frame[i * f..(i + 1) * f]);
        if history {
            // no previous frame: zero differences
            let prev = previous.unwrap_or(frame);
            for (k, &c) in dynamic.iter().enumerate() {
                row[NodeType::COUNT + f + k] = frame[i * f + c] - prev[i * f + c];
            }
        }
    }
    let mut names: Vec<String> = NodeType::ALL.iter().map(|t| format!("type_{t:?}").to_lowercase()).collect();
    names.extend(traj.field_names.iter().cloned());
    let mut dynamic_mask = vec![false; NodeType::COUNT];
    dynamic_mask.extend(traj.dynamic_mask.iter().copied());
    if history {
        names.extend(dynamic.iter().map(|&c| format!("d_{}", traj.field_names[c])));
        dynamic_mask.extend(std::iter::repeat_n(false, dynamic.len()));
    }
    NodeFeatures::new(values, names, dynamic_mask)
}

/// Per-column affine normalization of model inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
}

const MIN_STD: f64 = 1e-8;

fn column_stats(samples: &[Tensor], width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; width];
    let mut sq = vec![0.0; width];
    let mut count = 0usize;
    for t in samples {
        for i in 0..t.rows() {
            for (c, &v) in t.row(i).iter().enumerate() {
                sum[c] += v;
                sq[c] += v * v;
            }
            count += 1;
        }
    }
    let count = count.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let var = (s / count - m * m).max(0.0);
            let sd = var.sqrt();
            if sd < MIN_STD { 1.0 } else { sd }
        })
        .collect();
    (mean, std)
}

impl Normalizer {
    pub fn identity(input_width: usize, output_width: usize) -> Normalizer {
        Normalizer {
            input_mean: vec![0.0; input_width],
            input_std: vec![1.0; input_width],
            output_mean: vec![0.0; output_width],
            output_std: vec![1.0; output_width],
        }
    }

    /// Column statistics over stacked samples. Constant columns get unit scale.
    pub fn fit(inputs: &[Tensor], outputs: &[Tensor]) -> Result<Normalizer> {
        let (Some(i0), Some(o0)) = (inputs.first(), outputs.first()) else {
            return Err(Error::InvalidConfig("cannot fit a normalizer without samples".into()));
        };
        let (input_mean, input_std) = column_stats(inputs, i0.cols());
        let (output_mean, output_std) = column_stats(outputs, o0.cols());
        Ok(Normalizer { input_mean, input_std, output_mean, output_std })
    }

    fn apply(t: &Tensor, mean: &[f64], std: &[f64], op: &'static str) -> Result<Tensor> {
        if t.cols() != mean.len() {
            return Err(Error::shape(op, format!("{} columns, normalizer has {}", t.cols(), mean.len())));
        }
        let mut out = t.clone();
        for i in 0..out.rows() {
            for (c, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[c]) / std[c];
            }
        }
        Ok(out)
    }

    pub fn normalize_inputs(&self, x: &Tensor) -> Result<Tensor> {
        Self::apply(x, &self.input_mean, &self.input_std, "normalize_inputs")
    }

    pub fn normalize_outputs(&self, y: &Tensor) -> Result<Tensor> {
        Self::apply(y, &self.output_mean, &self.output_std, "normalize_outputs")
    }

    pub fn denormalize_outputs(&self, y: &Tensor) -> Result<Tensor> {
        if y.cols() != self.output_mean.len() {
            return Err(Error::shape("denormalize_outputs", "column count differs"));
        }
        let mut out = y.clone();
        for i in 0..out.rows() {
            for (c, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = *v * self.output_std[c] + self.output_mean[c];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizer_round_trip_and_constant_columns() {
        let x = Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        let y = Tensor::from_rows(&[vec![2.0], vec![4.0]]).unwrap();
        let norm = Normalizer::fit(std::slice::from_ref(&x), std::slice::from_ref(&y)).unwrap();
        assert_eq!(norm.input_std[1], 1.0);
        let nx = norm.normalize_inputs(&x).unwrap();
        assert_eq!(nx.data(), &[-1.0, 0.0, 1.0, 0.0]);
        let ny = norm.normalize_outputs(&y).unwrap();
        assert!(norm.denormalize_outputs(&ny).unwrap().max_abs_diff(&y) < 1e-15);
    }
}
