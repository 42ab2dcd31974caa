//! Operation tape and reverse sweep.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::SparseMask;

use super::attention::{self, AttentionMode};
use super::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, bias: Option<Var> },
    Add(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    Gelu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, mask: Arc<SparseMask>, mode: AttentionMode, weights: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ReplaceEntries { x: Var, token: Var, rows: Vec<usize>, cols: Vec<usize> },
    Mse { pred: Var, target: Tensor, rows: Option<Vec<usize>> },
    SumSquares(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for one reverse sweep. Single writer; build
/// a fresh tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

/// Exact GeLU, `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// `x W + bias`, with the bias broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.rows() {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
        let mut out = vec![0.0; m * n];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.len() != n {
                return Err(Error::shape("linear", format!("bias {:?} for width {n}", bv.shape())));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv.data());
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(m, k, n, xv.data(), false, wv.data(), false, &mut out, beta);
        let value = Tensor::new(&[m, n], out)?;
        self.push("linear", value, Op::Linear { x, w, bias })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape(), data)?;
        self.push("add", value, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push("scale", value, Op::Scale(a, factor))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("hadamard", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape(), data)?;
        self.push("hadamard", value, Op::Hadamard(a, b))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu_scalar);
        self.push("gelu", value, Op::Gelu(x))
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps) * gain`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let d = xv.cols();
        if gv.len() != d || d == 0 {
            return Err(Error::shape("rmsnorm", format!("gain {:?} for width {d}", gv.shape())));
        }
        let mut inv_rms = Vec::with_capacity(xv.rows());
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            for (o, g) in row.iter_mut().zip(gv.data()) {
                *o *= r * g;
            }
        }
        self.push("rmsnorm", out, Op::RmsNorm { x, gain, inv_rms })
    }

    /// Single-head masked attention over `q, k, v` (each `N x d_h`).
    pub fn masked_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Arc<SparseMask>,
        mode: AttentionMode,
    ) -> Result<Var> {
        if !mask.is_square() {
            return Err(Error::NonSquare { rows: mask.num_rows(), cols: mask.num_cols() });
        }
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let n = mask.num_rows();
        let dh = qv.cols();
        for (name, t) in [("q", qv), ("k", kv), ("v", vv)] {
            if t.rows() != n || t.cols() != dh {
                return Err(Error::shape(
                    "masked_attention",
                    format!("{name} is {:?}, expected [{n}, {dh}]", t.shape()),
                ));
            }
        }
        if dh == 0 {
            return Err(Error::shape("masked_attention", "head width is zero"));
        }
        let (out, weights) = match mode {
            AttentionMode::NeighborhoodSoftmax => {
                attention::neighborhood_forward(qv.data(), kv.data(), vv.data(), dh, &mask)
            }
            AttentionMode::DenseLiteral => {
                attention::dense_literal_forward(qv.data(), kv.data(), vv.data(), dh, &mask)
            }
        };
        let value = Tensor::new(&[n, dh], out)?;
        self.push("masked_attention", value, Op::Attention { q, k, v, mask, mode, weights })
    }

    /// Columns `start..start + width` of a rank-2 value.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + width > xv.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{} of width {}", start + width, xv.cols()),
            ));
        }
        let cols: Vec<usize> = (start..start + width).collect();
        let value = xv.select_cols(&cols);
        self.push("slice_cols", value, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::hcat(&values)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()))
    }

    /// Copy of `x` where entries `(r, cols[t])` for every `r` in `rows` take the
    /// value `token[t]`.
    pub fn replace_entries(
        &mut self,
        x: Var,
        token: Var,
        rows: &[usize],
        cols: &[usize],
    ) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(token));
        if tv.len() != cols.len() {
            return Err(Error::shape("replace_entries", "token width differs from column count"));
        }
        if rows.iter().any(|&r| r >= xv.rows()) || cols.iter().any(|&c| c >= xv.cols()) {
            return Err(Error::shape("replace_entries", "row or column out of range"));
        }
        let mut value = xv.clone();
        for &r in rows {
            for (t, &c) in cols.iter().enumerate() {
                value.set(r, c, tv.data()[t]);
            }
        }
        let op = Op::ReplaceEntries { x, token, rows: rows.to_vec(), cols: cols.to_vec() };
        self.push("replace_entries", value, op)
    }

    /// Mean squared error against a constant target, optionally restricted to a
    /// subset of rows.
    pub fn mse(&mut self, pred: Var, target: &Tensor, rows: Option<&[usize]>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::shape(
                "mse",
                format!("prediction {:?} vs target {:?}", pv.shape(), target.shape()),
            ));
        }
        let c = pv.cols();
        let (sum, count) = match rows {
            None => (
                pv.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
                pv.len(),
            ),
            Some(rows) => {
                if rows.is_empty() {
                    return Err(Error::NoMaskedNodes);
                }
                let s = rows
                    .iter()
                    .flat_map(|&r| pv.row(r).iter().zip(target.row(r)))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                (s, rows.len() * c)
            }
        };
        let value = Tensor::scalar(sum / count.max(1) as f64);
        let op = Op::Mse { pred, target: target.clone(), rows: rows.map(<[usize]>::to_vec) };
        self.push("mse", value, op)
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push("sum_squares", Tensor::scalar(s), Op::SumSquares(x))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::shape("backward", "output is not a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::new(self.value(output).shape(), vec![1.0])?);

        for idx in (0..=output.0).rev() {
            let Some(upstream) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, g: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, bias } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                let mut dx = vec![0.0; m * k];
                gemm(m, n, k, dy.data(), false, wv.data(), true, &mut dx, 0.0);
                let mut dw = vec![0.0; k * n];
                gemm(k, m, n, xv.data(), true, dy.data(), false, &mut dw, 0.0);
                acc(*x, Tensor::new(xv.shape(), dx).unwrap());
                acc(*w, Tensor::new(wv.shape(), dw).unwrap());
                if let Some(b) = bias {
                    let mut db = vec![0.0; n];
                    for row in dy.data().chunks(n) {
                        for (a, r) in db.iter_mut().zip(row) {
                            *a += r;
                        }
                    }
                    acc(*b, Tensor::new(self.value(*b).shape(), db).unwrap());
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Scale(a, f) => acc(*a, dy.map(|g| g * f)),
            Op::Hadamard(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = dy.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                let db = dy.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                acc(*a, Tensor::new(av.shape(), da).unwrap());
                acc(*b, Tensor::new(bv.shape(), db).unwrap());
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let dx = dy.data().iter().zip(xv.data()).map(|(g, &v)| g * gelu_grad(v)).collect();
                acc(*x, Tensor::new(xv.shape(), dx).unwrap());
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let d = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; d];
                for (i, &r) in inv_rms.iter().enumerate() {
                    let xr = xv.row(i);
                    let dyr = dy.row(i);
                    let mut dot = 0.0;
                    for c in 0..d {
                        let xhat = xr[c] * r;
                        dg[c] += dyr[c] * xhat;
                        dot += dyr[c] * gv.data()[c] * xhat;
                    }
                    let mean = dot / d as f64;
                    for c in 0..d {
                        let xhat = xr[c] * r;
                        dx[i * d + c] = r * (dyr[c] * gv.data()[c] - xhat * mean);
                    }
                }
                acc(*x, Tensor::new(xv.shape(), dx).unwrap());
                acc(*gain, Tensor::new(gv.shape(), dg).unwrap());
            }
            Op::Attention { q, k, v, mask, mode, weights } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let dh = qv.cols();
                let (dq, dk, dv) = match mode {
                    AttentionMode::NeighborhoodSoftmax => attention::neighborhood_backward(
                        qv.data(),
                        kv.data(),
                        vv.data(),
                        dh,
                        mask,
                        weights,
                        dy.data(),
                    ),
                    AttentionMode::DenseLiteral => attention::dense_literal_backward(
                        qv.data(),
                        kv.data(),
                        vv.data(),
                        dh,
                        mask,
                        weights,
                        dy.data(),
                    ),
                };
                acc(*q, Tensor::new(qv.shape(), dq).unwrap());
                acc(*k, Tensor::new(kv.shape(), dk).unwrap());
                acc(*v, Tensor::new(vv.shape(), dv).unwrap());
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (w, width) = (xv.cols(), dy.cols());
                let mut dx = vec![0.0; xv.len()];
                for i in 0..xv.rows() {
                    dx[i * w + start..i * w + start + width].copy_from_slice(dy.row(i));
                }
                acc(*x, Tensor::new(xv.shape(), dx).unwrap());
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let cols: Vec<usize> = (offset..offset + pv.cols()).collect();
                    offset += pv.cols();
                    acc(p, Tensor::new(pv.shape(), dy.select_cols(&cols).into_data()).unwrap());
                }
            }
            Op::ReplaceEntries { x, token, rows, cols } => {
                let mut dx = dy.clone();
                let mut dt = vec![0.0; cols.len()];
                for &r in rows {
                    for (t, &c) in cols.iter().enumerate() {
                        dt[t] += dy.get(r, c);
                        dx.set(r, c, 0.0);
                    }
                }
                acc(*x, dx);
                acc(*token, Tensor::new(self.value(*token).shape(), dt).unwrap());
            }
            Op::Mse { pred, target, rows } => {
                let pv = self.value(*pred);
                let g = dy.item();
                let mut dp = Tensor::zeros(pv.shape());
                match rows {
                    None => {
                        let f = 2.0 * g / pv.len().max(1) as f64;
                        for ((o, a), b) in dp.data_mut().iter_mut().zip(pv.data()).zip(target.data()) {
                            *o = f * (a - b);
                        }
                    }
                    Some(rows) => {
                        let f = 2.0 * g / (rows.len() * pv.cols()).max(1) as f64;
                        for &r in rows {
                            for c in 0..pv.cols() {
                                dp.set(r, c, f * (pv.get(r, c) - target.get(r, c)));
                            }
                        }
                    }
                }
                acc(*pred, dp);
            }
            Op::SumSquares(x) => {
                let g = dy.item();
                acc(*x, self.value(*x).map(|v| 2.0 * g * v));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_input() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let w = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = t.leaf(Tensor::zeros(&[2]));
        let y = t.linear(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn linear_bias_only() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[3, 2]));
        let w = t.leaf(Tensor::ones(&[2, 2]));
        let b = t.leaf(Tensor::new(&[2], vec![5.0, -1.0]).unwrap());
        let y = t.linear(x, w, Some(b)).unwrap();
        for i in 0..3 {
            assert_eq!(t.value(y).row(i), &[5.0, -1.0]);
        }
    }

    #[test]
    fn linear_shape_mismatch() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[3, 2]));
        let w = t.leaf(Tensor::ones(&[3, 2]));
        assert!(matches!(t.linear(x, w, None), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn rmsnorm_constant_rows() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![1.0; 4], vec![3.5; 4]]).unwrap());
        let g = t.leaf(Tensor::ones(&[4]));
        let y = t.rmsnorm(x, g, 0.0).unwrap();
        for v in t.value(y).data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hadamard_with_ones_and_zeros() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(2, 3, |i, j| i as f64 - j as f64 * 0.5));
        let ones = t.leaf(Tensor::ones(&[2, 3]));
        let zeros = t.leaf(Tensor::zeros(&[2, 3]));
        let a = t.hadamard(x, ones).unwrap();
        let b = t.hadamard(x, zeros).unwrap();
        assert_eq!(t.value(a), t.value(x));
        assert!(t.value(b).data().iter().all(|&v| v == 0.0));
        let bad = t.leaf(Tensor::ones(&[3, 2]));
        assert!(t.hadamard(x, bad).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.5));
        let y = t.add(x, x).unwrap();
        let grads = t.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn mse_empty_rows_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.mse(x, &Tensor::zeros(&[2, 2]), Some(&[])), Err(Error::NoMaskedNodes)));
    }

    #[test]
    fn non_square_mask_rejected() {
        let mut t = Tape::new();
        let q = t.leaf(Tensor::zeros(&[2, 2]));
        let mask = SparseMask::from_rows(3, vec![vec![0], vec![1]]).unwrap();
        let err = t.masked_attention(q, q, q, Arc::new(mask), AttentionMode::NeighborhoodSoftmax);
        assert!(matches!(err, Err(Error::NonSquare { rows: 2, cols: 3 })));
    }
}
