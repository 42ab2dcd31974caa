//! Masked attention kernels.
//!
//! `neighborhood_*` restricts the softmax to each row's mask support and costs
//! `O(nnz * d_h)`. `dense_literal_*` evaluates the full-row softmax first and
//! multiplies by the mask afterwards, which costs `O(N^2 * d_h)` and is kept
//! for comparison only.
//!
//! Every row of the forward pass and of the query gradient is independent, so
//! both have `_seq` and `_par` variants. The unsuffixed functions pick the
//! parallel one when the `parallel` feature is on.

use serde::{Deserialize, Serialize};

use crate::graph::SparseMask;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    NeighborhoodSoftmax,
    DenseLiteral,
}

/// Softmax weights over row `i`'s support, written into `weights`.
fn row_weights(
    i: usize,
    q: &[f64],
    k: &[f64],
    dh: usize,
    cols: &[usize],
    scale: f64,
    weights: &mut [f64],
) {
    let qi = &q[i * dh..(i + 1) * dh];
    let mut max = f64::NEG_INFINITY;
    for (w, &j) in weights.iter_mut().zip(cols) {
        let kj = &k[j * dh..(j + 1) * dh];
        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
        *w = s;
        max = max.max(s);
    }
    let mut total = 0.0;
    for w in weights.iter_mut() {
        *w = (*w - max).exp();
        total += *w;
    }
    for w in weights.iter_mut() {
        *w /= total;
    }
}

fn row_output(v: &[f64], dh: usize, cols: &[usize], weights: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (&w, &j) in weights.iter().zip(cols) {
        let vj = &v[j * dh..(j + 1) * dh];
        for (o, x) in out.iter_mut().zip(vj) {
            *o += w * x;
        }
    }
}

/// Output and per-entry softmax weights (aligned with `mask.col_indices()`).
pub fn neighborhood_forward_seq(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dh: usize,
    mask: &SparseMask,
) -> (Vec<f64>, Vec<f64>) {
    let n = mask.num_rows();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut weights = vec![0.0; mask.nnz()];
    let mut out = vec![0.0; n * dh];
    let offsets = mask.row_offsets();
    for i in 0..n {
        let cols = mask.row(i);
        let w = &mut weights[offsets[i]..offsets[i + 1]];
        row_weights(i, q, k, dh, cols, scale, w);
        row_output(v, dh, cols, w, &mut out[i * dh..(i + 1) * dh]);
    }
    (out, weights)
}

#[cfg(feature = "parallel")]
pub fn neighborhood_forward_par(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dh: usize,
    mask: &SparseMask,
) -> (Vec<f64>, Vec<f64>) {
    use rayon::prelude::*;
    let n = mask.num_rows();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut weights = vec![0.0; mask.nnz()];
    let mut out = vec![0.0; n * dh];
    let mut rest = weights.as_mut_slice();
    let mut row_weights_mut = Vec::with_capacity(n);
    for i in 0..n {
        let (head, tail) = rest.split_at_mut(mask.row_len(i));
        row_weights_mut.push(head);
        rest = tail;
    }
    out.par_chunks_mut(dh.max(1)).zip(row_weights_mut).enumerate().for_each(|(i, (o, w))| {
        let cols = mask.row(i);
        row_weights(i, q, k, dh, cols, scale, w);
        row_output(v, dh, cols, w, o);
    });
    (out, weights)
}

pub fn neighborhood_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dh: usize,
    mask: &SparseMask,
) -> (Vec<f64>, Vec<f64>) {
    #[cfg(feature = "parallel")]
    {
        neighborhood_forward_par(q, k, v, dh, mask)
    }
    #[cfg(not(feature = "parallel"))]
    {
        neighborhood_forward_seq(q, k, v, dh, mask)
    }
}

/// Gradients `(dq, dk, dv)` of the neighborhood kernel given upstream `dout`.
pub fn neighborhood_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dh: usize,
    mask: &SparseMask,
    weights: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = mask.num_rows();
    let scale = 1.0 / (dh as f64).sqrt();
    let offsets = mask.row_offsets();

    // dS_ij = w_ij (dP_ij - sum_j w_ij dP_ij) with dP_ij = dout_i . v_j
    let ds_rows: Vec<Vec<f64>> = par::map_range(n, |i| {
        let cols = mask.row(i);
        let w = &weights[offsets[i]..offsets[i + 1]];
        let doi = &dout[i * dh..(i + 1) * dh];
        let dp: Vec<f64> = cols
            .iter()
            .map(|&j| doi.iter().zip(&v[j * dh..(j + 1) * dh]).map(|(a, b)| a * b).sum())
            .collect();
        let centre: f64 = w.iter().zip(&dp).map(|(a, b)| a * b).sum();
        w.iter().zip(&dp).map(|(wij, dpij)| wij * (dpij - centre)).collect()
    });
    let ds: Vec<f64> = ds_rows.into_iter().flatten().collect();

    let mut dq = vec![0.0; n * dh];
    par::for_each_row(&mut dq, dh, |i, row| {
        for (p, &j) in (offsets[i]..offsets[i + 1]).zip(mask.row(i)) {
            let kj = &k[j * dh..(j + 1) * dh];
            for (r, x) in row.iter_mut().zip(kj) {
                *r += scale * ds[p] * x;
            }
        }
    });

    // Column sums go through the transpose so each output row has one writer.
    let (t_offsets, source, t_rows) = mask.transpose_index();
    let n_cols = mask.num_cols();
    let mut dk = vec![0.0; n_cols * dh];
    let mut dv = vec![0.0; n_cols * dh];
    par::for_each_row(&mut dk, dh, |j, row| {
        for slot in t_offsets[j]..t_offsets[j + 1] {
            let (p, i) = (source[slot], t_rows[slot]);
            let qi = &q[i * dh..(i + 1) * dh];
            for (r, x) in row.iter_mut().zip(qi) {
                *r += scale * ds[p] * x;
            }
        }
    });
    par::for_each_row(&mut dv, dh, |j, row| {
        for slot in t_offsets[j]..t_offsets[j + 1] {
            let (p, i) = (source[slot], t_rows[slot]);
            let doi = &dout[i * dh..(i + 1) * dh];
            for (r, x) in row.iter_mut().zip(doi) {
                *r += weights[p] * x;
            }
        }
    });
    (dq, dk, dv)
}

/// Literal `(A ⊙ softmax(QK^T / sqrt(d_h))) V`. Returns the output and the
/// full `N x N` softmax matrix.
pub fn dense_literal_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dh: usize,
    mask: &SparseMask,
) -> (Vec<f64>, Vec<f64>) {
    let n = mask.num_rows();
    let m = mask.num_cols();
    let scale = 1.0 / (dh as f64).sqrt();
    let all: Vec<usize> = (0..m).collect();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(n, |i| {
        let mut p = vec![0.0; m];
        row_weights(i, q, k, dh, &all, scale, &mut p);
        let cols = mask.row(i);
        let masked: Vec<f64> = cols.iter().map(|&j| p[j]).collect();
        let mut o = vec![0.0; dh];
        row_output(v, dh, cols, &masked, &mut o);
        (o, p)
    });
    let mut out = Vec::with_capacity(n * dh);
    let mut probs = Vec::with_capacity(n * m);
    for (o, p) in rows {
        out.extend(o);
        probs.extend(p);
    }
    (out, probs)
}

pub fn dense_literal_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dh: usize,
    mask: &SparseMask,
    probs: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = mask.num_rows();
    let m = mask.num_cols();
    let scale = 1.0 / (dh as f64).sqrt();
    let ds_rows: Vec<Vec<f64>> = par::map_range(n, |i| {
        let p = &probs[i * m..(i + 1) * m];
        let doi = &dout[i * dh..(i + 1) * dh];
        let mut dp = vec![0.0; m];
        for &j in mask.row(i) {
            dp[j] = doi.iter().zip(&v[j * dh..(j + 1) * dh]).map(|(a, b)| a * b).sum();
        }
        let centre: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
        p.iter().zip(&dp).map(|(pij, dpij)| pij * (dpij - centre)).collect()
    });
    let mut dq = vec![0.0; n * dh];
    let mut dk = vec![0.0; m * dh];
    let mut dv = vec![0.0; m * dh];
    for i in 0..n {
        let qi = &q[i * dh..(i + 1) * dh];
        let doi = &dout[i * dh..(i + 1) * dh];
        for j in 0..m {
            let s = ds_rows[i][j] * scale;
            for c in 0..dh {
                dq[i * dh + c] += s * k[j * dh + c];
                dk[j * dh + c] += s * qi[c];
            }
        }
        for &j in mask.row(i) {
            let p = probs[i * m + j];
            for c in 0..dh {
                dv[j * dh + c] += p * doi[c];
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_mask_returns_values() {
        let n = 4;
        let dh = 3;
        let q: Vec<f64> = (0..n * dh).map(|x| x as f64 * 0.1).collect();
        let k: Vec<f64> = (0..n * dh).map(|x| (x as f64).sin()).collect();
        let v: Vec<f64> = (0..n * dh).map(|x| (x as f64).cos()).collect();
        let (out, _) = neighborhood_forward(&q, &k, &v, dh, &SparseMask::identity(n));
        assert_eq!(out, v);
    }

    #[test]
    fn equal_scores_give_uniform_weights() {
        // zero queries make every score zero
        let n = 5;
        let dh = 2;
        let q = vec![0.0; n * dh];
        let k: Vec<f64> = (0..n * dh).map(|x| x as f64).collect();
        let v = k.clone();
        let mask = SparseMask::from_pairs(n, &[(0, 1), (0, 2), (0, 3), (1, 0)]).unwrap();
        let (_, w) = neighborhood_forward(&q, &k, &v, dh, &mask);
        for &x in &w[..3] {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_rows_output_zero() {
        let mask = SparseMask::from_pairs(3, &[(0, 1)]).unwrap();
        let ones = vec![1.0; 6];
        let (out, _) = neighborhood_forward(&ones, &ones, &ones, 2, &mask);
        assert_eq!(&out[2..], &[0.0; 4]);
        let (dense, _) = dense_literal_forward(&ones, &ones, &ones, 2, &mask);
        assert_eq!(&dense[2..], &[0.0; 4]);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential() {
        let n = 40;
        let dh = 4;
        let q: Vec<f64> = (0..n * dh).map(|x| (x as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..n * dh).map(|x| (x as f64 * 0.11).cos()).collect();
        let v: Vec<f64> = (0..n * dh).map(|x| (x as f64 * 0.07).sin()).collect();
        let pairs: Vec<_> = (0..n).flat_map(|i| [(i, (i + 1) % n), (i, (i + 7) % n)]).collect();
        let mask = SparseMask::from_pairs(n, &pairs).unwrap();
        assert_eq!(
            neighborhood_forward_seq(&q, &k, &v, dh, &mask),
            neighborhood_forward_par(&q, &k, &v, dh, &mask)
        );
    }
}
