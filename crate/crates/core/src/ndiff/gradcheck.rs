//! Central-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Upper bound on sampled coordinates; every coordinate is checked when the
    /// total is smaller.
    pub max_coords: usize,
    /// Magnitudes below this are compared absolutely rather than relatively.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, max_coords: 256, abs_floor: 1e-6, seed: 0 }
    }
}

/// Compares tape gradients of `f` with `(f(θ+h) - f(θ-h)) / 2h` on a random
/// sample of coordinates drawn across all of `params`.
///
/// `f` receives a fresh tape and the parameter leaves (in `params` order) and
/// must return a scalar.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(params)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> =
        vars.iter().zip(params).map(|(&v, p)| grads.get_or_zeros(v, p)).collect();

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let start = *acc;
            *acc += p.len();
            Some(start)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut chosen: Vec<usize> = if total <= opts.max_coords {
        (0..total).collect()
    } else {
        sample(&mut rng, total, opts.max_coords).into_vec()
    };
    chosen.sort_unstable();

    let mut perturbed = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, coords_checked: 0 };
    for flat in chosen {
        let which = offsets.partition_point(|&o| o <= flat) - 1;
        let local = flat - offsets[which];
        let original = params[which].data()[local];

        perturbed[which].data_mut()[local] = original + opts.step;
        let plus = {
            let (t, _, o) = eval(&perturbed)?;
            t.value(o).item()
        };
        perturbed[which].data_mut()[local] = original - opts.step;
        let minus = {
            let (t, _, o) = eval(&perturbed)?;
            t.value(o).item()
        };
        perturbed[which].data_mut()[local] = original;

        let numeric = (plus - minus) / (2.0 * opts.step);
        let exact = analytic[which].data()[local];
        let abs = (numeric - exact).abs();
        let rel = abs / numeric.abs().max(exact.abs()).max(opts.abs_floor);
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.coords_checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let theta = Tensor::from_fn(5, 3, |i, j| (i as f64 - 2.0) * 0.7 + j as f64);
        let report = finite_diff_check(|t, p| t.sum_squares(p[0]), &[theta], Default::default())
            .unwrap();
        assert_eq!(report.coords_checked, 15);
        // truncation error is zero for a quadratic; what remains is f64 round-off over h
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }
}
