//! Pooled local-linear quantile fits within a group, with member-specific
//! intercept paths, and point-wise confidence intervals from a sandwich
//! variance estimate.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::kernel::{kernel_moments, KernelFamily, KernelSpec};
use crate::panelio::PanelDataset;
use crate::prelim::{prepare_eval_points, CoefficientPath, LOCAL_WEIGHT_FLOOR};
use crate::qrcore::{solve_warm, PooledDesign, QRSolution, SolveOptions, WeightedQRProblem};

/// Solves the pooled local problem at `z0` over the time points with
/// `keep(t)`. Coefficients are ordered `(b₁, b₂, a_{0,1}, a_{0,2}, a_{1,1}, …)`
/// with `m` indexing `members`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pooled_local_solve(
    ds: &PanelDataset,
    members: &[usize],
    tau: f64,
    kernel: &KernelSpec,
    z0: f64,
    keep: &dyn Fn(usize) -> bool,
    warm: Option<&[f64]>,
    opts: &SolveOptions,
) -> Result<QRSolution> {
    let d = ds.dim_x();
    let g = members.len();
    let floor = LOCAL_WEIGHT_FLOOR * kernel.peak();
    let mut design = PooledDesign::with_capacity(2 * d, g, g * ds.n_times());
    let (mut y, mut w) = (Vec::new(), Vec::new());
    let mut usable_total = 0;
    let mut usable_min = usize::MAX;
    let mut shared = vec![0.0; 2 * d];
    for (m, &i) in members.iter().enumerate() {
        let mut usable = 0;
        for t in 0..ds.n_times() {
            if !keep(t) {
                continue;
            }
            let zt = ds.z(i, t);
            let wt = kernel.weight(zt, z0);
            if wt <= 0.0 {
                continue;
            }
            if wt >= floor {
                usable += 1;
            }
            let dz = zt - z0;
            let x = ds.x(i, t);
            shared[..d].copy_from_slice(x);
            for (s, v) in shared[d..].iter_mut().zip(x) {
                *s = v * dz;
            }
            design.push_row(m, &shared, dz);
            y.push(ds.y(i, t));
            w.push(wt);
        }
        usable_total += usable;
        usable_min = usable_min.min(usable);
    }
    let required = 2 * d + 2 * g;
    if usable_total < required || usable_min < 2 {
        return Err(Error::LocalDesign {
            z: z0,
            context: None,
            available: usable_total,
            required,
        });
    }
    let problem = WeightedQRProblem::new(design, y, w, tau)?;
    solve_warm(&problem, opts, warm)
}

/// Post-grouping estimates of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupFit {
    pub group_id: usize,
    pub members: Vec<usize>,
    pub eval_points: Vec<f64>,
    pub dim_x: usize,
    /// `points × d`, row-major.
    pub gamma: Vec<f64>,
    pub gamma_deriv: Vec<f64>,
    /// `members × points`, row-major.
    pub alphas: Vec<f64>,
    pub alpha_derivs: Vec<f64>,
    pub objective: Vec<f64>,
    pub bandwidth_h1: f64,
    pub tau: f64,
    /// `points × d`; NaN where no interval was produced.
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    /// Bandwidth of the fit the intervals are built from, once computed.
    pub ci_bandwidth: Option<f64>,
    /// Points where inference failed, with the reason.
    pub inference_failures: Vec<(f64, String)>,
}

impl GroupFit {
    pub fn len(&self) -> usize {
        self.eval_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eval_points.is_empty()
    }

    pub fn gamma_at(&self, k: usize) -> &[f64] {
        &self.gamma[k * self.dim_x..(k + 1) * self.dim_x]
    }

    pub fn gamma_deriv_at(&self, k: usize) -> &[f64] {
        &self.gamma_deriv[k * self.dim_x..(k + 1) * self.dim_x]
    }

    /// `α̃_i` of member position `m` at point `k`.
    pub fn alpha_at(&self, m: usize, k: usize) -> f64 {
        self.alphas[m * self.len() + k]
    }

    pub fn position(&self, z: f64) -> Option<usize> {
        self.eval_points.binary_search_by(|p| p.total_cmp(&z)).ok()
    }

    /// The fit seen from member `m`, as a coefficient path.
    pub fn member_path(&self, m: usize) -> CoefficientPath {
        let n = self.len();
        CoefficientPath {
            eval_points: self.eval_points.clone(),
            dim_x: self.dim_x,
            beta: self.gamma.clone(),
            beta_deriv: self.gamma_deriv.clone(),
            alpha: self.alphas[m * n..(m + 1) * n].to_vec(),
            alpha_deriv: self.alpha_derivs[m * n..(m + 1) * n].to_vec(),
            objective: self.objective.clone(),
            bandwidth: self.bandwidth_h1,
            tau: self.tau,
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let d = self.dim_x;
        let mut header = vec!["z".to_string()];
        for prefix in ["gamma", "deriv", "ci_lo", "ci_hi"] {
            header.extend((1..=d).map(|l| format!("{prefix}_{l}")));
        }
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut rec = vec![self.eval_points[k].to_string()];
            for block in [&self.gamma, &self.gamma_deriv, &self.ci_lower, &self.ci_upper] {
                rec.extend(block[k * d..(k + 1) * d].iter().map(|v| v.to_string()));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pooled fit of `members` at every evaluation point, ascending in `z` with
/// warm starts.
pub fn fit_group(
    ds: &PanelDataset,
    group_id: usize,
    members: &[usize],
    tau: f64,
    kernel: &KernelSpec,
    eval_points: &[f64],
) -> Result<GroupFit> {
    if members.is_empty() {
        return Err(Error::InvalidInput(format!("group {group_id} has no members")));
    }
    if members.iter().any(|&i| i >= ds.n_subjects()) {
        return Err(Error::InvalidInput(format!("group {group_id} lists an unknown subject")));
    }
    kernel.validate()?;
    let points = prepare_eval_points(eval_points)?;
    let d = ds.dim_x();
    let g = members.len();
    let n = points.len();
    let opts = SolveOptions::default();
    let mut fit = GroupFit {
        group_id,
        members: members.to_vec(),
        eval_points: points.clone(),
        dim_x: d,
        gamma: Vec::with_capacity(n * d),
        gamma_deriv: Vec::with_capacity(n * d),
        alphas: vec![0.0; g * n],
        alpha_derivs: vec![0.0; g * n],
        objective: Vec::with_capacity(n),
        bandwidth_h1: kernel.bandwidth,
        tau,
        ci_lower: vec![f64::NAN; n * d],
        ci_upper: vec![f64::NAN; n * d],
        ci_bandwidth: None,
        inference_failures: Vec::new(),
    };
    let mut prev: Option<Vec<f64>> = None;
    for (k, &z0) in points.iter().enumerate() {
        let sol = pooled_local_solve(ds, members, tau, kernel, z0, &|_| true, prev.as_deref(), &opts)
            .map_err(|e| e.with_context(format!("group {group_id}")))?;
        let c = &sol.coefficients;
        fit.gamma.extend_from_slice(&c[..d]);
        fit.gamma_deriv.extend_from_slice(&c[d..2 * d]);
        for m in 0..g {
            fit.alphas[m * n + k] = c[2 * d + 2 * m];
            fit.alpha_derivs[m * n + k] = c[2 * d + 2 * m + 1];
        }
        fit.objective.push(sol.objective);
        prev = Some(sol.coefficients);
    }
    Ok(fit)
}

/// Fits every group of a partition (`assignments` in `1..=R`), in parallel.
pub fn fit_groups(
    ds: &PanelDataset,
    assignments: &[usize],
    tau: f64,
    kernels: &[KernelSpec],
    eval_points: &[f64],
) -> Result<Vec<GroupFit>> {
    let r = assignments.iter().copied().max().unwrap_or(0);
    if kernels.len() != r {
        return Err(Error::InvalidInput(format!("{} kernels for {r} groups", kernels.len())));
    }
    (1..=r)
        .into_par_iter()
        .map(|gid| {
            let members: Vec<usize> = (0..assignments.len()).filter(|&i| assignments[i] == gid).collect();
            fit_group(ds, gid, &members, tau, &kernels[gid - 1], eval_points)
        })
        .collect()
}

/// Which fitted values define the residuals entering the conditional density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualSource {
    /// Per-subject preliminary fits.
    #[default]
    Preliminary,
    /// The pooled group fit itself.
    PostGrouping,
}

/// Residuals `Y_it − X_itᵀβ(Z_it) − α_i(Z_it)` of member subjects, one row per
/// member, from paths that contain every observed index value.
pub fn residuals_from_paths(ds: &PanelDataset, members: &[usize], paths: &[&CoefficientPath]) -> Result<Vec<Vec<f64>>> {
    members
        .iter()
        .zip(paths)
        .map(|(&i, path)| {
            (0..ds.n_times())
                .map(|t| {
                    let z = ds.z(i, t);
                    let k = path.position(z).ok_or_else(|| {
                        Error::Alignment(format!(
                            "path of subject `{}` lacks observed index value {z}",
                            ds.subject_labels()[i]
                        ))
                    })?;
                    let x = ds.x(i, t);
                    let fit = path.alpha[k] + path.beta_at(k).iter().zip(x).map(|(b, x)| b * x).sum::<f64>();
                    Ok(ds.y(i, t) - fit)
                })
                .collect()
        })
        .collect()
}

/// Bandwidths of the variance estimate; `None` means rule of thumb.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SandwichBandwidths {
    /// Conditional-density bandwidths, ordered `(residual, x_1..x_d, z)`.
    pub b1: Option<Vec<f64>>,
    /// Index bandwidth for `f̃(z)` and the `Ω̃_i` smoother.
    pub b2: Option<f64>,
}

/// Normal-reference bandwidth `σ (4/((q+2)n))^{1/(q+4)}` for one coordinate of
/// a `q`-dimensional product-kernel estimate.
pub fn silverman_bandwidth(values: &[f64], q: usize) -> f64 {
    let n = values.len() as f64;
    let sd = crate::kernel::sample_sd(values);
    let q = q as f64;
    sd * (4.0 / ((q + 2.0) * n)).powf(1.0 / (q + 4.0))
}

/// Variance ingredients at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct SandwichPieces {
    pub z: f64,
    pub dim_x: usize,
    /// `f̃(z)`.
    pub density: f64,
    /// Per member, `(d+1) × (d+1)` row-major, ordered `(1, X)`.
    pub omega_i: Vec<Vec<f64>>,
    /// `d × d` row-major.
    pub omega_group: Vec<f64>,
    pub lambda_group: Vec<f64>,
    pub sigma_group: Vec<f64>,
}

/// The `z`-free parts of the variance estimate for one group.
#[derive(Debug, Clone)]
pub struct SandwichBasis {
    family: KernelFamily,
    dim_x: usize,
    tau: f64,
    /// `Z` series of each member.
    z: Vec<Vec<f64>>,
    /// `X` block of each member, `T × d`.
    x: Vec<Vec<f64>>,
    /// `f̃_ie(0 | X_it, Z_it)` per member and time.
    cond_density: Vec<Vec<f64>>,
    lambda: Vec<f64>,
    b2: f64,
    all_z: Vec<f64>,
}

impl SandwichBasis {
    pub fn new(
        ds: &PanelDataset,
        members: &[usize],
        residuals: &[Vec<f64>],
        tau: f64,
        family: KernelFamily,
        bw: &SandwichBandwidths,
    ) -> Result<Self> {
        let d = ds.dim_x();
        let t_len = ds.n_times();
        if residuals.len() != members.len() || residuals.iter().any(|r| r.len() != t_len) {
            return Err(Error::InvalidInput("residual rows do not match the group".into()));
        }
        let all_z: Vec<f64> = match ds.shared_index() {
            Some(z) => z.to_vec(),
            None => members.iter().flat_map(|&i| ds.z_row(i).to_vec()).collect(),
        };
        let b2 = bw.b2.unwrap_or_else(|| silverman_bandwidth(&all_z, 1));
        if !(b2 > 0.0) {
            return Err(Error::InvalidInput("index bandwidth must be positive".into()));
        }
        if let Some(b) = &bw.b1 {
            if b.len() != d + 2 || b.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::InvalidInput(format!("b1 needs {} positive entries", d + 2)));
            }
        }
        let mut z = Vec::with_capacity(members.len());
        let mut x = Vec::with_capacity(members.len());
        let mut cond_density = Vec::with_capacity(members.len());
        let mut lambda = vec![0.0; d * d];
        for (m, &i) in members.iter().enumerate() {
            let zi = ds.z_row(i).to_vec();
            let xi = ds.x_block(i).to_vec();
            let e = &residuals[m];
            let b1 = match &bw.b1 {
                Some(b) => b.clone(),
                None => {
                    let q = d + 2;
                    let mut b = vec![silverman_bandwidth(e, q)];
                    for l in 0..d {
                        let col: Vec<f64> = (0..t_len).map(|t| xi[t * d + l]).collect();
                        b.push(silverman_bandwidth(&col, q));
                    }
                    b.push(silverman_bandwidth(&zi, q));
                    b
                }
            };
            cond_density.push(conditional_density_at_zero(family, e, &xi, &zi, d, &b1));
            // sample covariance of X over t (any constant shift leaves it unchanged)
            let mean: Vec<f64> = (0..d).map(|l| (0..t_len).map(|t| xi[t * d + l]).sum::<f64>() / t_len as f64).collect();
            if t_len > 1 {
                for a in 0..d {
                    for b in 0..d {
                        let s: f64 = (0..t_len)
                            .map(|t| (xi[t * d + a] - mean[a]) * (xi[t * d + b] - mean[b]))
                            .sum();
                        lambda[a * d + b] += s / (t_len - 1) as f64;
                    }
                }
            }
            z.push(zi);
            x.push(xi);
        }
        let scale = tau * (1.0 - tau) / members.len() as f64;
        lambda.iter_mut().for_each(|v| *v *= scale);
        Ok(SandwichBasis {
            family,
            dim_x: d,
            tau,
            z,
            x,
            cond_density,
            lambda,
            b2,
            all_z,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// `Λ̃` (`d × d`, row-major).
    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// Pieces at `z` with kernel constant `nu0`.
    pub fn pieces(&self, z: f64, nu0: f64) -> Result<SandwichPieces> {
        let d = self.dim_x;
        let q = d + 1;
        let b2 = self.b2;
        let kz = |v: f64| self.family.density((v - z) / b2);
        let density = self.all_z.iter().map(|&v| kz(v)).sum::<f64>() / (self.all_z.len() as f64 * b2);
        let mut omega_i = Vec::with_capacity(self.z.len());
        let mut omega_group = vec![0.0; d * d];
        for m in 0..self.z.len() {
            let mut om = vec![0.0; q * q];
            let mut wsum = 0.0;
            let mut row = vec![0.0; q];
            for t in 0..self.z[m].len() {
                let w = kz(self.z[m][t]);
                if w == 0.0 {
                    continue;
                }
                wsum += w;
                row[0] = 1.0;
                row[1..].copy_from_slice(&self.x[m][t * d..(t + 1) * d]);
                let c = self.cond_density[m][t] * w;
                for a in 0..q {
                    for b in 0..q {
                        om[a * q + b] += c * row[a] * row[b];
                    }
                }
            }
            if !(wsum > 0.0) {
                return Err(Error::InferenceUnavailable {
                    z,
                    reason: "no index mass near the point".into(),
                });
            }
            om.iter_mut().for_each(|v| *v *= density / wsum);
            let wa = om[0];
            if !(wa > 0.0) {
                return Err(Error::InferenceUnavailable {
                    z,
                    reason: "vanishing conditional density mass".into(),
                });
            }
            for a in 0..d {
                for b in 0..d {
                    omega_group[a * d + b] += om[(a + 1) * q + (b + 1)] - om[(a + 1) * q] * om[b + 1] / wa;
                }
            }
            omega_i.push(om);
        }
        let g = self.z.len() as f64;
        omega_group.iter_mut().for_each(|v| *v /= g);
        let sigma_group = sandwich(&omega_group, &self.lambda, nu0, d).ok_or_else(|| Error::InferenceUnavailable {
            z,
            reason: "group information matrix is numerically singular".into(),
        })?;
        Ok(SandwichPieces {
            z,
            dim_x: d,
            density,
            omega_i,
            omega_group,
            lambda_group: self.lambda.clone(),
            sigma_group,
        })
    }
}

/// `Ω⁻¹ (ν₀Λ) Ω⁻¹`, symmetrized; `None` when `Ω` is not safely invertible.
fn sandwich(omega: &[f64], lambda: &[f64], nu0: f64, d: usize) -> Option<Vec<f64>> {
    let om = DMatrix::from_row_slice(d, d, omega);
    let om = (&om + om.transpose()) * 0.5;
    let eig = om.clone().symmetric_eigenvalues();
    let max = eig.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, v| a.min(*v));
    if !(max > 0.0) || !(min > 1e-12 * max) {
        return None;
    }
    let inv = om.cholesky()?.inverse();
    let lam = DMatrix::from_row_slice(d, d, lambda) * nu0;
    let s = &inv * lam * &inv;
    let s = (&s + s.transpose()) * 0.5;
    Some((0..d).flat_map(|a| (0..d).map(move |b| (a, b))).map(|(a, b)| s[(a, b)]).collect())
}

/// `f̃_ie(0 | X_it, Z_it)` for every `t` by the product-kernel ratio, with
/// bandwidths `(b_e, b_x1..b_xd, b_z)`.
fn conditional_density_at_zero(family: KernelFamily, e: &[f64], x: &[f64], z: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    let t_len = e.len();
    let ke: Vec<f64> = e.iter().map(|v| family.density(v / b[0])).collect();
    (0..t_len)
        .map(|t| {
            let (mut num, mut den) = (0.0, 0.0);
            for s in 0..t_len {
                let mut k = family.density((z[s] - z[t]) / b[d + 1]);
                if k == 0.0 {
                    continue;
                }
                for l in 0..d {
                    k *= family.density((x[s * d + l] - x[t * d + l]) / b[1 + l]);
                }
                num += ke[s] * k;
                den += k;
            }
            if den > 0.0 {
                num / (b[0] * den)
            } else {
                0.0
            }
        })
        .collect()
}

/// Convenience wrapper: sandwich pieces for `fit` at `z`.
pub fn estimate_sandwich(
    ds: &PanelDataset,
    fit: &GroupFit,
    residuals: &[Vec<f64>],
    z: f64,
    family: KernelFamily,
    bw: &SandwichBandwidths,
) -> Result<SandwichPieces> {
    let basis = SandwichBasis::new(ds, &fit.members, residuals, fit.tau, family, bw)?;
    let nu0 = kernel_moments(&KernelSpec::new(family, 1.0)?).nu0;
    basis.pieces(z, nu0)
}

/// `∫ (2√2 K(√2u) − K(u))² du`, the squared-kernel constant of the jackknife
/// combination `2γ̃_{h/√2} − γ̃_h` in units of `h`.
pub fn jackknife_nu0(family: KernelFamily) -> f64 {
    let n = 40_000;
    let (lo, hi) = (-8.0, 8.0);
    let du = (hi - lo) / n as f64;
    let r2 = std::f64::consts::SQRT_2;
    (0..n)
        .map(|k| {
            let u = lo + (k as f64 + 0.5) * du;
            let v = 2.0 * r2 * family.density(r2 * u) - family.density(u);
            v * v * du
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOptions {
    pub alpha: f64,
    /// Refit at `h₁ (N_j T)^{-1/20}` before building intervals.
    pub undersmooth: bool,
    /// Replace `γ̃` by `2γ̃_{h/√2} − γ̃_h`.
    pub jackknife: bool,
    pub residuals: ResidualSource,
    pub bandwidths: SandwichBandwidths,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            alpha: 0.05,
            undersmooth: true,
            jackknife: false,
            residuals: ResidualSource::Preliminary,
            bandwidths: SandwichBandwidths::default(),
        }
    }
}

/// `h₁ (N_j T)^{-1/20}`.
pub fn undersmoothed_bandwidth(h1: f64, n_members: usize, n_times: usize) -> f64 {
    h1 * ((n_members * n_times) as f64).powf(-0.05)
}

/// Fills point-wise intervals for `fit`.
///
/// `prelim` holds the preliminary path of every subject of `ds` (indexed by
/// subject) and is required for [`ResidualSource::Preliminary`]. With
/// undersmoothing or jackknife the returned fit carries the refitted curve.
pub fn confidence_intervals(
    ds: &PanelDataset,
    fit: &GroupFit,
    family: KernelFamily,
    prelim: Option<&[CoefficientPath]>,
    opts: &InferenceOptions,
) -> Result<GroupFit> {
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha = {} outside (0, 1)", opts.alpha)));
    }
    let members = &fit.members;
    let residuals = match opts.residuals {
        ResidualSource::Preliminary => {
            let paths = prelim.ok_or_else(|| {
                Error::InvalidInput("preliminary residuals requested without preliminary paths".into())
            })?;
            let sel: Vec<&CoefficientPath> = members.iter().map(|&i| &paths[i]).collect();
            residuals_from_paths(ds, members, &sel)?
        }
        ResidualSource::PostGrouping => {
            let observed = crate::prelim::observed_eval_points(ds);
            let kernel = KernelSpec::new(family, fit.bandwidth_h1)?;
            let base = if observed.iter().all(|z| fit.position(*z).is_some()) {
                fit.clone()
            } else {
                fit_group(ds, fit.group_id, members, fit.tau, &kernel, &observed)?
            };
            let paths: Vec<CoefficientPath> = (0..members.len()).map(|m| base.member_path(m)).collect();
            let refs: Vec<&CoefficientPath> = paths.iter().collect();
            residuals_from_paths(ds, members, &refs)?
        }
    };
    let basis = SandwichBasis::new(ds, members, &residuals, fit.tau, family, &opts.bandwidths)?;

    let h = if opts.undersmooth {
        undersmoothed_bandwidth(fit.bandwidth_h1, members.len(), ds.n_times())
    } else {
        fit.bandwidth_h1
    };
    let kernel = KernelSpec::new(family, h)?;
    let mut out = if h == fit.bandwidth_h1 {
        fit.clone()
    } else {
        let mut f = fit_group(ds, fit.group_id, members, fit.tau, &kernel, &fit.eval_points)?;
        f.bandwidth_h1 = fit.bandwidth_h1;
        f
    };
    let nu0 = if opts.jackknife {
        let half = fit_group(
            ds,
            fit.group_id,
            members,
            fit.tau,
            &kernel.with_bandwidth(h / std::f64::consts::SQRT_2)?,
            &fit.eval_points,
        )?;
        for (g, gh) in out.gamma.iter_mut().zip(&half.gamma) {
            *g = 2.0 * gh - *g;
        }
        jackknife_nu0(family)
    } else {
        kernel_moments(&kernel).nu0
    };

    let c = Normal::new(0.0, 1.0)
        .map_err(|e| Error::InvalidInput(e.to_string()))?
        .inverse_cdf(1.0 - opts.alpha / 2.0);
    let d = fit.dim_x;
    let scale = (members.len() * ds.n_times()) as f64 * h;
    out.ci_bandwidth = Some(h);
    out.inference_failures.clear();
    for k in 0..out.len() {
        let z = out.eval_points[k];
        match basis.pieces(z, nu0) {
            Ok(p) => {
                for l in 0..d {
                    let var = p.sigma_group[l * d + l].max(0.0);
                    let half = c * (var / scale).sqrt();
                    let g = out.gamma[k * d + l];
                    out.ci_lower[k * d + l] = g - half;
                    out.ci_upper[k * d + l] = g + half;
                }
            }
            Err(e) => out.inference_failures.push((z, e.to_string())),
        }
    }
    Ok(out)
}

/// `c_{1−α/2}` of the standard normal.
pub fn normal_critical_value(alpha: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(1.0 - alpha / 2.0)
}

/// Half-widths `c·sqrt(Σ_ll / (N_j T h))` for given pieces.
pub fn interval_half_widths(pieces: &SandwichPieces, alpha: f64, n_members: usize, n_times: usize, h: f64) -> Vec<f64> {
    let d = pieces.dim_x;
    let c = normal_critical_value(alpha);
    let scale = (n_members * n_times) as f64 * h;
    (0..d)
        .map(|l| c * (pieces.sigma_group[l * d + l].max(0.0) / scale).sqrt())
        .collect()
}

/// Objective of the pooled local problem at `z0` for given coefficients
/// (ordered like [`pooled_local_solve`]).
pub fn pooled_objective(ds: &PanelDataset, members: &[usize], tau: f64, kernel: &KernelSpec, z0: f64, theta: &[f64]) -> f64 {
    let d = ds.dim_x();
    let mut total = 0.0;
    for (m, &i) in members.iter().enumerate() {
        for t in 0..ds.n_times() {
            let zt = ds.z(i, t);
            let w = kernel.weight(zt, z0);
            if w <= 0.0 {
                continue;
            }
            let dz = zt - z0;
            let x = ds.x(i, t);
            let mut fit = theta[2 * d + 2 * m] + dz * theta[2 * d + 2 * m + 1];
            for l in 0..d {
                fit += x[l] * (theta[l] + dz * theta[d + l]);
            }
            total += w * crate::qrcore::check_loss(ds.y(i, t) - fit, tau);
        }
    }
    total
}
