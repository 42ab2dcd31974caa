//! isoFLOP aggregation, compute-optimal minima and power-law fits.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{param_count, Model, ModelConfig};
use crate::rng::{derive_seed, Stream};
use crate::rollout::{evaluate, RolloutOptions, Surrogate, Trajectory};
use crate::train::{fit_normalizer, train_steps, TrainConfig, TrajectoryDataset};

/// Runs sharing one FLOPs budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoFlopGroup {
    pub budget: f64,
    /// `(parameter count, final loss)` per run.
    pub runs: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsoFlopMinimum {
    pub budget: f64,
    pub params: f64,
    pub loss: f64,
    /// True when the parabola vertex was used instead of the raw argmin.
    pub refined: bool,
}

pub const MIN_RUNS_PER_GROUP: usize = 3;

/// Lowest-loss run of a group. With `refine`, a parabola in `ln P` through the
/// three lowest-loss runs replaces the argmin when its vertex is a minimum
/// lying inside the sampled parameter range.
pub fn isoflop_minimum(group: &IsoFlopGroup, refine: bool) -> Result<IsoFlopMinimum> {
    if group.runs.len() < MIN_RUNS_PER_GROUP {
        return Err(Error::TooFewRuns { min: MIN_RUNS_PER_GROUP, got: group.runs.len() });
    }
    if group.runs.iter().any(|&(p, l)| !(p > 0.0) || !l.is_finite()) {
        return Err(Error::NonPositiveInput);
    }
    let mut order: Vec<usize> = (0..group.runs.len()).collect();
    order.sort_by(|&a, &b| group.runs[a].1.total_cmp(&group.runs[b].1));
    let (p_best, l_best) = group.runs[order[0]];
    let argmin = IsoFlopMinimum { budget: group.budget, params: p_best, loss: l_best, refined: false };
    if !refine {
        return Ok(argmin);
    }
    let pts: Vec<(f64, f64)> = order[..3].iter().map(|&i| (group.runs[i].0.ln(), group.runs[i].1)).collect();
    let Some((u, y)) = parabola_vertex(&pts) else {
        return Ok(argmin);
    };
    let lo = group.runs.iter().map(|r| r.0.ln()).fold(f64::INFINITY, f64::min);
    let hi = group.runs.iter().map(|r| r.0.ln()).fold(f64::NEG_INFINITY, f64::max);
    if u < lo || u > hi {
        return Ok(argmin);
    }
    Ok(IsoFlopMinimum { budget: group.budget, params: u.exp(), loss: y, refined: true })
}

/// Vertex of the parabola through three points, if it opens upward.
fn parabola_vertex(p: &[(f64, f64)]) -> Option<(f64, f64)> {
    let [(x1, y1), (x2, y2), (x3, y3)] = [p[0], p[1], p[2]];
    let denom = (x1 - x2) * (x1 - x3) * (x2 - x3);
    if denom == 0.0 {
        return None;
    }
    let a = (x3 * (y2 - y1) + x2 * (y1 - y3) + x1 * (y3 - y2)) / denom;
    let b = (x3 * x3 * (y1 - y2) + x2 * x2 * (y3 - y1) + x1 * x1 * (y2 - y3)) / denom;
    let c = (x2 * x3 * (x2 - x3) * y1 + x3 * x1 * (x3 - x1) * y2 + x1 * x2 * (x1 - x2) * y3) / denom;
    if !(a > 0.0) {
        return None;
    }
    let xv = -b / (2.0 * a);
    Some((xv, c - b * b / (4.0 * a)))
}

/// `P = coefficient * C^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub coefficient: f64,
    /// Root-mean-square residual in natural-log space.
    pub residual: f64,
    pub points: usize,
}

impl PowerLawFit {
    pub fn predict(&self, c: f64) -> f64 {
        self.coefficient * c.powf(self.exponent)
    }
}

/// Ordinary least squares on `(ln C, ln P)`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 2 {
        return Err(Error::TooFewRuns { min: 2, got: points.len() });
    }
    if points.iter().any(|&(c, p)| !(c > 0.0 && p > 0.0) || !c.is_finite() || !p.is_finite()) {
        return Err(Error::NonPositiveInput);
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidConfig("all budgets are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let exponent = sxy / sxx;
    let intercept = my - exponent * mx;
    let residual =
        (xs.iter().zip(&ys).map(|(x, y)| (y - intercept - exponent * x).powi(2)).sum::<f64>() / n).sqrt();
    Ok(PowerLawFit { exponent, coefficient: intercept.exp(), residual, points: points.len() })
}

/// One row of a sweep: a trained model at a budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub budget: f64,
    pub d: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "P")]
    pub params: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub all_rollout: Option<f64>,
    /// FLOPs actually spent (6·P·D).
    #[serde(default)]
    pub realized_flops: f64,
}

/// Steps that spend `budget` FLOPs on a model of `params` parameters.
pub fn steps_for_budget(budget: f64, params: usize, nodes_per_step: f64, min_steps: usize) -> Result<usize> {
    let steps = (budget / (6.0 * params as f64 * nodes_per_step)).round();
    if !(steps >= min_steps as f64) {
        return Err(Error::BudgetTooSmall { budget, params, steps: steps.max(0.0) as usize, min: min_steps });
    }
    Ok(steps as usize)
}

pub const MIN_SWEEP_STEPS: usize = 50;

/// Groups rows by budget. Rows whose realized FLOPs stray more than 1% from
/// their budget label are rejected.
pub fn group_rows(rows: &[SweepRow]) -> Result<Vec<IsoFlopGroup>> {
    let mut groups: BTreeMap<u64, IsoFlopGroup> = BTreeMap::new();
    for r in rows {
        if r.realized_flops > 0.0 && ((r.realized_flops - r.budget) / r.budget).abs() > 0.01 {
            return Err(Error::InvalidConfig(format!(
                "run with P={} spent {:.4e} FLOPs against budget {:.4e}",
                r.params, r.realized_flops, r.budget
            )));
        }
        groups
            .entry(r.budget.to_bits())
            .or_insert_with(|| IsoFlopGroup { budget: r.budget, runs: Vec::new() })
            .runs
            .push((r.params as f64, r.final_loss));
    }
    let mut out: Vec<IsoFlopGroup> = groups.into_values().collect();
    out.sort_by(|a, b| a.budget.total_cmp(&b.budget));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSummary {
    pub minima: Vec<IsoFlopMinimum>,
    pub fit: Option<PowerLawFit>,
}

/// Minima per group and, when at least two groups exist, the `P*(C)` fit.
pub fn summarize(groups: &[IsoFlopGroup], refine: bool) -> Result<ScalingSummary> {
    let minima = groups.iter().map(|g| isoflop_minimum(g, refine)).collect::<Result<Vec<_>>>()?;
    let fit = if minima.len() >= 2 {
        Some(fit_power_law(&minima.iter().map(|m| (m.budget, m.params)).collect::<Vec<_>>())?)
    } else {
        None
    };
    Ok(ScalingSummary { minima, fit })
}

pub fn write_rows_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::CorruptMeta { path: path.to_path_buf(), reason: format!("{other:?}") },
    }
}

/// Runs `run` for every (budget, model) pair on `workers` threads and returns
/// the rows in input order.
pub fn sweep_driver<F>(
    budgets: &[f64],
    grid: &[ModelConfig],
    nodes_per_step: f64,
    workers: usize,
    run: F,
) -> Result<Vec<SweepRow>>
where
    F: Fn(usize, &ModelConfig, usize) -> Result<SweepRow> + Sync,
{
    let mut jobs = Vec::new();
    for &budget in budgets {
        for (k, cfg) in grid.iter().enumerate() {
            let steps = steps_for_budget(budget, param_count(cfg), nodes_per_step, MIN_SWEEP_STEPS)?;
            jobs.push((budget, k, steps));
        }
    }
    let work = |&(budget, k, steps): &(f64, usize, usize)| -> Result<SweepRow> {
        let mut row = run(k, &grid[k], steps)?;
        row.budget = budget;
        Ok(row)
    };
    #[cfg(feature = "parallel")]
    let results: Vec<Result<SweepRow>> = {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(work).collect())
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<SweepRow>> = {
        let _ = workers;
        jobs.iter().map(work).collect()
    };
    results.into_iter().collect()
}

/// Sweep that trains every model on `dataset` with the schedule stretched to
/// the budget, and scores it on `eval` when given.
pub fn sweep_on_dataset(
    budgets: &[f64],
    grid: &[ModelConfig],
    dataset: &TrajectoryDataset,
    train_cfg: &TrainConfig,
    eval: Option<&[Trajectory]>,
    workers: usize,
) -> Result<Vec<SweepRow>> {
    let nodes_per_step = dataset.mean_nodes() * train_cfg.batch as f64;
    sweep_driver(budgets, grid, nodes_per_step, workers, |k, cfg, steps| {
        let seed = derive_seed(train_cfg.seed, Stream::Init, k as u64);
        let mut model = Model::new(cfg.clone(), seed)?;
        let normalizer = fit_normalizer(dataset, cfg.pe_mode, 512)?;
        let tc = TrainConfig { schedule: train_cfg.schedule.with_total_iters(steps), ..train_cfg.clone() };
        let outcome = train_steps(&mut model, dataset, &normalizer, &tc)?;
        let all_rollout = match eval {
            Some(trajs) => {
                let surrogate = Surrogate::new(model, normalizer, tc.target_kind, tc.seed);
                Some(evaluate(&surrogate, trajs, &RolloutOptions::default())?.mean.all_rollout)
            }
            None => None,
        };
        Ok(SweepRow {
            budget: 0.0,
            d: cfg.d,
            layers: cfg.layers,
            params: outcome.record.param_count,
            steps,
            final_loss: outcome.record.final_loss,
            all_rollout,
            realized_flops: outcome.record.flop_budget,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(runs: &[(f64, f64)]) -> IsoFlopGroup {
        IsoFlopGroup { budget: 1e12, runs: runs.to_vec() }
    }

    #[test]
    fn argmin_minimum() {
        let m = isoflop_minimum(&group(&[(1e5, 0.5), (1e6, 0.3), (1e7, 0.4)]), false).unwrap();
        assert_eq!(m.params, 1e6);
        assert_eq!(m.loss, 0.3);
        assert!(!m.refined);
    }

    #[test]
    fn refined_vertex_on_symmetric_parabola() {
        let u0 = 1e6f64.ln();
        let runs: Vec<(f64, f64)> = [5.5f64, 6.0, 6.5]
            .iter()
            .map(|e| {
                let p = 10f64.powf(*e);
                (p, 0.2 + 0.7 * (p.ln() - u0).powi(2))
            })
            .collect();
        let m = isoflop_minimum(&group(&runs), true).unwrap();
        assert!(m.refined);
        assert!((m.params / 1e6 - 1.0).abs() < 0.01);
        assert!((m.loss - 0.2).abs() < 1e-9);
    }

    #[test]
    fn refinement_outside_range_falls_back() {
        // monotone decreasing: vertex beyond the largest P
        let runs = [(1e5, 0.9), (1e6, 0.5), (1e7, 0.2)];
        let m = isoflop_minimum(&group(&runs), true).unwrap();
        assert_eq!(m.params, 1e7);
        assert!(!m.refined);
    }

    #[test]
    fn too_few_runs() {
        assert!(matches!(isoflop_minimum(&group(&[(1e5, 0.5)]), false), Err(Error::TooFewRuns { .. })));
    }

    #[test]
    fn exact_power_laws() {
        let pts: Vec<(f64, f64)> = (0..6).map(|i| 10f64.powi(15 + i)).map(|c| (c, c.powf(0.75))).collect();
        let fit = fit_power_law(&pts).unwrap();
        assert!((fit.exponent - 0.75).abs() < 1e-9);
        let pts: Vec<(f64, f64)> = [1e3, 1e4, 1e5].iter().map(|&c: &f64| (c, 2.0 * c.sqrt())).collect();
        let fit = fit_power_law(&pts).unwrap();
        assert!((fit.exponent - 0.5).abs() < 1e-12);
        assert!((fit.coefficient - 2.0).abs() < 1e-9);
        assert!(fit.residual < 1e-12);
    }

    #[test]
    fn power_law_rejects_bad_input() {
        assert!(matches!(fit_power_law(&[(1.0, 1.0), (0.0, 2.0)]), Err(Error::NonPositiveInput)));
        assert!(matches!(fit_power_law(&[(1.0, 1.0)]), Err(Error::TooFewRuns { .. })));
    }

    #[test]
    fn budget_steps() {
        assert_eq!(steps_for_budget(6.0 * 1000.0 * 10.0 * 100.0, 1000, 10.0, 50).unwrap(), 100);
        assert!(matches!(steps_for_budget(1e3, 1000, 10.0, 50), Err(Error::BudgetTooSmall { .. })));
    }

    #[test]
    fn grouping_and_summary() {
        let row = |budget: f64, params: usize, loss: f64| SweepRow {
            budget,
            d: 8,
            layers: 1,
            params,
            steps: 60,
            final_loss: loss,
            all_rollout: None,
            realized_flops: budget,
        };
        let rows = vec![
            row(1e9, 100, 0.5),
            row(1e9, 1000, 0.3),
            row(1e9, 10000, 0.4),
            row(1e10, 100, 0.6),
            row(1e10, 1000, 0.35),
            row(1e10, 10000, 0.2),
        ];
        let groups = group_rows(&rows).unwrap();
        assert_eq!(groups.len(), 2);
        let s = summarize(&groups, false).unwrap();
        assert_eq!(s.minima[0].params, 1000.0);
        assert_eq!(s.minima[1].params, 10000.0);
        assert!((s.fit.unwrap().exponent - 1.0).abs() < 1e-12);

        let mut off = rows.clone();
        off[0].realized_flops = 1.05e9;
        assert!(group_rows(&off).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        let rows = vec![SweepRow {
            budget: 1e9,
            d: 16,
            layers: 2,
            params: 1234,
            steps: 77,
            final_loss: 0.125,
            all_rollout: Some(0.5),
            realized_flops: 1.001e9,
        }];
        write_rows_csv(&path, &rows).unwrap();
        assert_eq!(read_rows_csv(&path).unwrap(), rows);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("budget,d,L,P,steps,final_loss,all_rollout"));
    }
}
