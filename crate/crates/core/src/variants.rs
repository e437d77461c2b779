//! Grouping of linear panel quantile regressions uniformly over a range of
//! quantile levels.
//!
//! Each subject gets a plain quantile regression `(α*(τ), β*(τ))` per level;
//! distances and deviations integrate `‖·‖` over `τ` with the trapezoid rule.
//! The time-varying coefficient case needs no code of its own: build the panel
//! with [`PanelDataset::with_scaled_time`] and run the usual pipeline.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grouping::{agglomerate, ratio_rule, DistanceMatrix, GroupNumberSelection, GroupStructure, OmegaPolicy};
use crate::panelio::{PanelDataset, QuantileSpec};
use crate::qrcore::{solve, DenseDesign, SolveOptions, SolveStatus, WeightedQRProblem};

/// Per-level linear quantile coefficients of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct TauPath {
    pub tau_grid: Vec<f64>,
    pub dim_x: usize,
    /// `grid × d`, row-major.
    pub beta_star: Vec<f64>,
    pub alpha_star: Vec<f64>,
}

impl TauPath {
    pub fn beta_at(&self, k: usize) -> &[f64] {
        &self.beta_star[k * self.dim_x..(k + 1) * self.dim_x]
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["tau".to_string()];
        header.extend((1..=self.dim_x).map(|l| format!("beta_{l}")));
        header.push("alpha".into());
        w.write_record(&header)?;
        for k in 0..self.tau_grid.len() {
            let mut rec = vec![self.tau_grid[k].to_string()];
            rec.extend(self.beta_at(k).iter().map(|v| v.to_string()));
            rec.push(self.alpha_star[k].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fit_one(ds: &PanelDataset, i: usize, grid: &[f64]) -> Result<TauPath> {
    let d = ds.dim_x();
    let t_len = ds.n_times();
    let mut data = Vec::with_capacity(t_len * (d + 1));
    for t in 0..t_len {
        data.push(1.0);
        data.extend_from_slice(ds.x(i, t));
    }
    let design = DenseDesign::new(t_len, d + 1, data)?;
    let opts = SolveOptions::default();
    let mut out = TauPath {
        tau_grid: grid.to_vec(),
        dim_x: d,
        beta_star: Vec::with_capacity(grid.len() * d),
        alpha_star: Vec::with_capacity(grid.len()),
    };
    for &tau in grid {
        let problem = WeightedQRProblem::unweighted(design.clone(), ds.y_row(i).to_vec(), tau)?;
        let sol = solve(&problem, &opts)?;
        if sol.status == SolveStatus::Degenerate {
            return Err(Error::InvalidInput(format!("rank-deficient design at tau = {tau}")));
        }
        out.alpha_star.push(sol.coefficients[0]);
        out.beta_star.extend_from_slice(&sol.coefficients[1..]);
    }
    Ok(out)
}

/// Plain quantile regression of every subject at every level of the grid.
pub fn fit_linear_per_tau(ds: &PanelDataset, spec: &QuantileSpec) -> Result<Vec<TauPath>> {
    spec.validate()?;
    let grid = spec.grid();
    let results: Vec<Result<TauPath>> = (0..ds.n_subjects()).into_par_iter().map(|i| fit_one(ds, i, &grid)).collect();
    let mut paths = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => paths.push(p),
            Err(e) => failures.push((ds.subject_labels()[i].clone(), e)),
        }
    }
    if failures.is_empty() {
        Ok(paths)
    } else {
        Err(Error::SubjectFits { failures })
    }
}

/// Trapezoid rule for samples `f` on increasing nodes `x`.
pub fn trapezoid(x: &[f64], f: &[f64]) -> f64 {
    x.windows(2).zip(f.windows(2)).map(|(xw, fw)| 0.5 * (xw[1] - xw[0]) * (fw[0] + fw[1])).sum()
}

fn check_grids(paths: &[TauPath]) -> Result<()> {
    if let Some(first) = paths.first() {
        if paths.iter().any(|p| p.tau_grid != first.tau_grid || p.dim_x != first.dim_x) {
            return Err(Error::Alignment("tau paths do not share a grid".into()));
        }
    }
    Ok(())
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `∫ ‖β*_j(u) − β*_k(u)‖ du` over the grid range.
pub fn uniform_distance_matrix(paths: &[TauPath]) -> Result<DistanceMatrix> {
    check_grids(paths)?;
    let n = paths.len();
    let mut values = vec![0.0; n * n];
    for j in 0..n {
        for k in 0..j {
            let p = &paths[j];
            let f: Vec<f64> = (0..p.tau_grid.len())
                .map(|g| norm_diff(p.beta_at(g), paths[k].beta_at(g)))
                .collect();
            let v = trapezoid(&p.tau_grid, &f);
            values[j * n + k] = v;
            values[k * n + j] = v;
        }
    }
    DistanceMatrix::new(n, values)
}

/// `D̄(K) = (1/K) Σ_k (1/|G_k|) Σ_{j∈G_k} ∫ ‖β*_j(u) − β̄*_k(u)‖ du`.
pub fn uniform_deviation_score(paths: &[TauPath], assignments: &[usize]) -> Result<f64> {
    check_grids(paths)?;
    if paths.len() != assignments.len() {
        return Err(Error::Alignment("paths and assignments differ in length".into()));
    }
    let Some(first) = paths.first() else {
        return Ok(0.0);
    };
    let (grid, d) = (&first.tau_grid, first.dim_x);
    let r = assignments.iter().copied().max().unwrap_or(0);
    let mut total = 0.0;
    for g in 1..=r {
        let members: Vec<usize> = (0..paths.len()).filter(|&i| assignments[i] == g).collect();
        if members.is_empty() {
            continue;
        }
        let mean: Vec<Vec<f64>> = (0..grid.len())
            .map(|q| {
                let mut m = vec![0.0; d];
                for &j in &members {
                    for (a, b) in m.iter_mut().zip(paths[j].beta_at(q)) {
                        *a += b;
                    }
                }
                m.iter_mut().for_each(|v| *v /= members.len() as f64);
                m
            })
            .collect();
        let s: f64 = members
            .iter()
            .map(|&j| {
                let f: Vec<f64> = (0..grid.len()).map(|q| norm_diff(paths[j].beta_at(q), &mean[q])).collect();
                trapezoid(grid, &f)
            })
            .sum();
        total += s / members.len() as f64;
    }
    Ok(total / r as f64)
}

/// Default threshold for the uniform variant. The nearest-neighbour rule is
/// tuned to pointwise noise of local fits; integrated linear slopes are far
/// less noisy relative to their group spread, so `0.01·D(1)` suffices.
pub const DEFAULT_UNIFORM_OMEGA: OmegaPolicy = OmegaPolicy::Relative(0.01);

/// Ratio rule with the `τ`-integrated deviation.
pub fn select_group_number_uniform(
    paths: &[TauPath],
    r_max: usize,
    omega: OmegaPolicy,
) -> Result<(GroupNumberSelection, GroupStructure, DistanceMatrix)> {
    if r_max < 2 {
        return Err(Error::InvalidInput(format!("R_max must be at least 2, got {r_max}")));
    }
    let dm = uniform_distance_matrix(paths)?;
    let tree = agglomerate(&dm, 1)?;
    let top = r_max.min(paths.len());
    let scores: Vec<f64> = (1..=top)
        .map(|r| uniform_deviation_score(paths, &tree.cut(r)?.assignments))
        .collect::<Result<_>>()?;
    let sel = ratio_rule(&scores, omega.threshold(&scores, &dm))?;
    let gs = tree.cut(sel.r_hat)?;
    Ok((sel, gs, dm))
}
