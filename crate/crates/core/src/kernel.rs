//! Smoothing kernels and cross-validated bandwidth choice.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::panelio::PanelDataset;
use crate::postgroup;
use crate::prelim::{self, SubjectView};
use crate::qrcore::{check_loss, SolveOptions};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelFamily {
    #[default]
    Gaussian,
    Epanechnikov,
}

impl KernelFamily {
    /// The standardized kernel `K(u)`.
    #[inline]
    pub fn density(self, u: f64) -> f64 {
        match self {
            KernelFamily::Gaussian => INV_SQRT_2PI * (-0.5 * u * u).exp(),
            KernelFamily::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Epanechnikov => "epanechnikov",
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(KernelFamily::Gaussian),
            "epanechnikov" | "epa" => Ok(KernelFamily::Epanechnikov),
            other => Err(Error::InvalidInput(format!("unknown kernel family `{other}`"))),
        }
    }
}

/// A kernel family with bandwidth `h` and optional truncation on `|u|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
    pub truncation_radius: Option<f64>,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        let spec = KernelSpec {
            family,
            bandwidth,
            truncation_radius: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, bandwidth)
    }

    pub fn with_truncation(mut self, radius: f64) -> Result<Self> {
        self.truncation_radius = Some(radius);
        self.validate()?;
        Ok(self)
    }

    pub fn with_bandwidth(mut self, bandwidth: f64) -> Result<Self> {
        self.bandwidth = bandwidth;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::InvalidInput(format!("bandwidth must be positive, got {}", self.bandwidth)));
        }
        if let Some(r) = self.truncation_radius {
            if !(r > 0.0) {
                return Err(Error::InvalidInput(format!("truncation radius must be positive, got {r}")));
            }
        }
        Ok(())
    }

    /// `K((z_t − z)/h)`. There is no `1/h` factor.
    #[inline]
    pub fn weight(&self, z_t: f64, z: f64) -> f64 {
        let u = (z_t - z) / self.bandwidth;
        if let Some(r) = self.truncation_radius {
            if u.abs() > r {
                return 0.0;
            }
        }
        self.family.density(u)
    }

    /// `K(0)`, the largest attainable weight.
    pub fn peak(&self) -> f64 {
        self.family.density(0.0)
    }
}

pub fn kernel_weight(spec: &KernelSpec, z_t: f64, z: f64) -> f64 {
    spec.weight(z_t, z)
}

/// `μ₂ = ∫u²K(u)du` and `ν₀ = ∫K(u)²du`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelMoments {
    pub mu2: f64,
    pub nu0: f64,
}

pub fn kernel_moments(spec: &KernelSpec) -> KernelMoments {
    match spec.family {
        KernelFamily::Gaussian => KernelMoments {
            mu2: 1.0,
            nu0: 0.5 / std::f64::consts::PI.sqrt(),
        },
        KernelFamily::Epanechnikov => KernelMoments { mu2: 0.2, nu0: 0.6 },
    }
}

/// Sample standard deviation (divisor `n − 1`).
pub(crate) fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let ss: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// `1.06 · sd(Z) · T^{-1/5}`.
pub fn rule_of_thumb_bandwidth(z: &[f64]) -> f64 {
    1.06 * sample_sd(z) * (z.len() as f64).powf(-0.2)
}

pub const DEFAULT_GRID_FACTORS: [f64; 5] = [0.5, 0.75, 1.0, 1.5, 2.0];

/// Candidates `{0.5, 0.75, 1, 1.5, 2} · h_ROT` built from the index of the
/// given subject (or from all index values when `subject` is `None`).
pub fn default_grid(ds: &PanelDataset, subject: Option<usize>) -> Vec<f64> {
    let h = match subject {
        Some(i) => rule_of_thumb_bandwidth(ds.z_row(i)),
        None => match ds.shared_index() {
            Some(z) => rule_of_thumb_bandwidth(z),
            None => {
                let all: Vec<f64> = (0..ds.n_subjects()).flat_map(|i| ds.z_row(i).to_vec()).collect();
                1.06 * sample_sd(&all) * (ds.n_times() as f64).powf(-0.2)
            }
        },
    };
    DEFAULT_GRID_FACTORS.iter().map(|f| f * h).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CvMode {
    /// One bandwidth per subject, each from that subject's own series.
    #[default]
    PerSubject,
    /// One bandwidth for the pooled fit over all subjects of the panel;
    /// whole time slices are held out together.
    Pooled,
}

pub fn default_folds(n_times: usize) -> usize {
    n_times.min(20)
}

/// Contiguous time blocks: fold `k` holds `⌊kT/K⌋ .. ⌊(k+1)T/K⌋`.
pub fn fold_blocks(n_times: usize, folds: usize) -> Vec<std::ops::Range<usize>> {
    (0..folds)
        .map(|k| (k * n_times / folds)..((k + 1) * n_times / folds))
        .filter(|r| !r.is_empty())
        .collect()
}

/// Chosen bandwidths plus the full score table.
#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub mode: CvMode,
    /// Candidate grid per unit (one unit in pooled mode, `N` in per-subject mode).
    pub grids: Vec<Vec<f64>>,
    /// Held-out check loss per unit and candidate; `+∞` where a fold fit failed.
    pub scores: Vec<Vec<f64>>,
    pub selected: Vec<f64>,
}

impl CvReport {
    /// The single pooled choice, or the first subject's choice.
    pub fn bandwidth(&self) -> f64 {
        self.selected[0]
    }
}

/// Index of the smallest finite score; ties go to the larger candidate.
pub(crate) fn argmin_score(grid: &[f64], scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for k in 0..grid.len() {
        if !scores[k].is_finite() {
            continue;
        }
        best = match best {
            None => Some(k),
            Some(b) if scores[k] < scores[b] || (scores[k] == scores[b] && grid[k] > grid[b]) => Some(k),
            keep => keep,
        };
    }
    best
}

/// Held-out check loss of the local-linear fit of subject `i`.
pub fn cv_score_subject(ds: &PanelDataset, i: usize, tau: f64, kernel: &KernelSpec, folds: usize) -> f64 {
    let view = SubjectView::of(ds, i);
    let opts = SolveOptions::default();
    let t_len = ds.n_times();
    let mut total = 0.0;
    for block in fold_blocks(t_len, folds) {
        let keep = |t: usize| !block.contains(&t);
        for t in block.clone() {
            let z0 = view.z[t];
            match prelim::local_solve(&view, tau, kernel, z0, &keep, None, &opts) {
                Ok(sol) => {
                    let fit = prelim::local_value(&sol.coefficients, view.x_at(t));
                    total += check_loss(view.y[t] - fit, tau);
                }
                Err(_) => return f64::INFINITY,
            }
        }
    }
    total
}

/// Held-out check loss of the pooled fit over every subject of `ds`.
pub fn cv_score_pooled(ds: &PanelDataset, tau: f64, kernel: &KernelSpec, folds: usize) -> f64 {
    let members: Vec<usize> = (0..ds.n_subjects()).collect();
    let opts = SolveOptions::default();
    let mut total = 0.0;
    for block in fold_blocks(ds.n_times(), folds) {
        let keep = |t: usize| !block.contains(&t);
        for t in block.clone() {
            // one solve per distinct index value in the held-out slice
            let mut zs: Vec<f64> = members.iter().map(|&i| ds.z(i, t)).collect();
            zs.sort_by(|a, b| a.total_cmp(b));
            zs.dedup();
            for z0 in zs {
                let sol = match postgroup::pooled_local_solve(ds, &members, tau, kernel, z0, &keep, None, &opts) {
                    Ok(s) => s,
                    Err(_) => return f64::INFINITY,
                };
                let d = ds.dim_x();
                for (m, &i) in members.iter().enumerate() {
                    if ds.z(i, t) != z0 {
                        continue;
                    }
                    let x = ds.x(i, t);
                    let b1 = &sol.coefficients[..d];
                    let a1 = sol.coefficients[2 * d + 2 * m];
                    let fit = a1 + b1.iter().zip(x).map(|(b, x)| b * x).sum::<f64>();
                    total += check_loss(ds.y(i, t) - fit, tau);
                }
            }
        }
    }
    total
}

/// Cross-validated bandwidth choice over `grid` (or the default grid when
/// `grid` is empty).
pub fn select_bandwidth_cv(
    ds: &PanelDataset,
    tau: f64,
    family: KernelFamily,
    grid: &[f64],
    mode: CvMode,
    folds: usize,
) -> Result<CvReport> {
    if folds == 0 || folds > ds.n_times() {
        return Err(Error::InvalidInput(format!(
            "folds must lie in 1..={}, got {folds}",
            ds.n_times()
        )));
    }
    if grid.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
        return Err(Error::InvalidInput("bandwidth candidates must be positive".into()));
    }
    let grid_for = |unit: Option<usize>| -> Vec<f64> {
        if grid.is_empty() {
            default_grid(ds, unit)
        } else {
            grid.to_vec()
        }
    };
    let score_grid = |g: &[f64], unit: Option<usize>| -> Result<Vec<f64>> {
        g.iter()
            .map(|&h| {
                let k = KernelSpec::new(family, h)?;
                Ok(match unit {
                    Some(i) => cv_score_subject(ds, i, tau, &k, folds),
                    None => cv_score_pooled(ds, tau, &k, folds),
                })
            })
            .collect()
    };
    match mode {
        CvMode::Pooled => {
            let g = grid_for(None);
            let scores = score_grid(&g, None)?;
            let k = argmin_score(&g, &scores).ok_or_else(|| {
                Error::BandwidthSelection(format!("every candidate in {g:?} failed for the pooled fit"))
            })?;
            Ok(CvReport {
                mode,
                selected: vec![g[k]],
                grids: vec![g],
                scores: vec![scores],
            })
        }
        CvMode::PerSubject => {
            let per: Vec<Result<(Vec<f64>, Vec<f64>, f64)>> = (0..ds.n_subjects())
                .into_par_iter()
                .map(|i| {
                    let g = grid_for(Some(i));
                    let scores = score_grid(&g, Some(i))?;
                    let k = argmin_score(&g, &scores).ok_or_else(|| {
                        Error::BandwidthSelection(format!(
                            "every candidate in {g:?} failed for subject `{}`",
                            ds.subject_labels()[i]
                        ))
                    })?;
                    let h = g[k];
                    Ok((g, scores, h))
                })
                .collect();
            let mut report = CvReport {
                mode,
                grids: Vec::new(),
                scores: Vec::new(),
                selected: Vec::new(),
            };
            for r in per {
                let (g, s, h) = r?;
                report.grids.push(g);
                report.scores.push(s);
                report.selected.push(h);
            }
            Ok(report)
        }
    }
}
