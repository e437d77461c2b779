//! Weighted linear quantile regression.
//!
//! The problem `min_θ Σ_t w_t ρ_τ(y_t − x_tᵀθ)` is solved through its bounded
//! dual linear program
//!
//! ```text
//! max  ỹᵀa   s.t.  X̃ᵀa = (1−τ) X̃ᵀ1,   0 ≤ a ≤ 1,
//! ```
//!
//! where `X̃ = diag(w) X` and `ỹ = w ∘ y` (the check function is positively
//! homogeneous, so weights fold into the rows). A feasible primal-dual
//! interior-point method with a Mehrotra predictor-corrector step walks the
//! dual; the equality multipliers are the regression coefficients. The run is
//! certified by the gap between the check loss at the coefficient iterate and
//! the dual objective, and finished with a vertex purification step that
//! snaps onto the interpolating basis whenever that does not raise the loss.
//!
//! The solver only touches the design through the [`Design`] trait, so the
//! pooled post-grouping problem can supply a block-structured normal-equation
//! solve (see [`PooledDesign`]) instead of a dense `p × p` factorization.

use crate::error::{Error, Result};
use crate::linalg::{cholesky_in_place, cholesky_solve, inv2, lu_solve};

/// The quantile check function `ρ_τ(z) = z (τ − 1{z ≤ 0})`.
#[inline]
pub fn check_loss(z: f64, tau: f64) -> f64 {
    let v = if z > 0.0 { tau * z } else { (tau - 1.0) * z };
    v + 0.0
}

/// Solved normal equations `Xᵀ diag(q) X`.
pub trait NormalFactor {
    fn solve(&self, rhs: &mut [f64]);
}

/// Read access to a regression design matrix.
pub trait Design: Sync + Send {
    type Factor: NormalFactor;

    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// Writes row `i` into `out` (length `ncols`).
    fn row_into(&self, i: usize, out: &mut [f64]);
    /// `out = X coef`
    fn mul_vec(&self, coef: &[f64], out: &mut [f64]);
    /// `out = Xᵀ v`
    fn tmul_vec(&self, v: &[f64], out: &mut [f64]);
    /// Factor `Xᵀ diag(q) X`. With `regularize = false` a numerically singular
    /// matrix yields `None`; with `regularize = true` tiny pivots are lifted.
    fn factor_normal(&self, q: &[f64], regularize: bool) -> Option<Self::Factor>;
    /// The design restricted to the given rows, in order.
    fn select_rows(&self, rows: &[usize]) -> Self
    where
        Self: Sized;
    fn all_finite(&self) -> bool {
        true
    }
}

/// Row-major dense design.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDesign {
    nrows: usize,
    ncols: usize,
    data: Vec<f64>,
}

impl DenseDesign {
    pub fn new(nrows: usize, ncols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nrows * ncols {
            return Err(Error::InvalidInput(format!(
                "design buffer has {} entries, expected {nrows}×{ncols}",
                data.len()
            )));
        }
        Ok(DenseDesign { nrows, ncols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let ncols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != ncols {
                return Err(Error::InvalidInput("ragged design rows".into()));
            }
            data.extend_from_slice(r);
        }
        DenseDesign::new(rows.len(), ncols, data)
    }

    /// Single-column design of ones.
    pub fn intercept(n: usize) -> Self {
        DenseDesign {
            nrows: n,
            ncols: 1,
            data: vec![1.0; n],
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub(crate) fn select_columns(&self, cols: &[usize]) -> DenseDesign {
        let mut data = Vec::with_capacity(self.nrows * cols.len());
        for i in 0..self.nrows {
            let r = self.row(i);
            data.extend(cols.iter().map(|&c| r[c]));
        }
        DenseDesign {
            nrows: self.nrows,
            ncols: cols.len(),
            data,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseFactor {
    p: usize,
    l: Vec<f64>,
}

impl NormalFactor for DenseFactor {
    fn solve(&self, rhs: &mut [f64]) {
        cholesky_solve(&self.l, self.p, rhs);
    }
}

impl Design for DenseDesign {
    type Factor = DenseFactor;

    fn nrows(&self) -> usize {
        self.nrows
    }
    fn ncols(&self) -> usize {
        self.ncols
    }
    fn row_into(&self, i: usize, out: &mut [f64]) {
        out.copy_from_slice(self.row(i));
    }
    fn mul_vec(&self, coef: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).iter().zip(coef).map(|(a, b)| a * b).sum();
        }
    }
    fn tmul_vec(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &vi) in v.iter().enumerate() {
            if vi != 0.0 {
                for (o, x) in out.iter_mut().zip(self.row(i)) {
                    *o += vi * x;
                }
            }
        }
    }
    fn factor_normal(&self, q: &[f64], regularize: bool) -> Option<DenseFactor> {
        let p = self.ncols;
        let mut m = vec![0.0; p * p];
        for (i, &qi) in q.iter().enumerate() {
            if qi == 0.0 {
                continue;
            }
            let r = self.row(i);
            for a in 0..p {
                let ra = qi * r[a];
                if ra == 0.0 {
                    continue;
                }
                for b in 0..=a {
                    m[a * p + b] += ra * r[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                m[b * p + a] = m[a * p + b];
            }
        }
        let floor = if regularize { 1e-14 } else { 1e-11 };
        cholesky_in_place(&mut m, p, floor, regularize).then_some(DenseFactor { p, l: m })
    }
    fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.ncols);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        DenseDesign {
            nrows: rows.len(),
            ncols: self.ncols,
            data,
        }
    }
    fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Design of the pooled local-linear problem: a block of regressors shared by
/// all members plus a private `(intercept, slope)` pair for each member.
///
/// Column order is `[shared_0 .. shared_{k-1}, a_{0,1}, a_{0,2}, a_{1,1}, …]`;
/// a row for member `m` carries `1` and `dz` in that member's pair and zeros
/// in every other pair.
#[derive(Debug, Clone)]
pub struct PooledDesign {
    n_shared: usize,
    n_members: usize,
    shared: Vec<f64>,
    member: Vec<usize>,
    slope: Vec<f64>,
}

impl PooledDesign {
    pub fn new(n_shared: usize, n_members: usize) -> Self {
        PooledDesign {
            n_shared,
            n_members,
            shared: Vec::new(),
            member: Vec::new(),
            slope: Vec::new(),
        }
    }

    pub fn with_capacity(n_shared: usize, n_members: usize, rows: usize) -> Self {
        PooledDesign {
            n_shared,
            n_members,
            shared: Vec::with_capacity(rows * n_shared),
            member: Vec::with_capacity(rows),
            slope: Vec::with_capacity(rows),
        }
    }

    pub fn push_row(&mut self, member: usize, shared: &[f64], dz: f64) {
        debug_assert_eq!(shared.len(), self.n_shared);
        debug_assert!(member < self.n_members);
        self.shared.extend_from_slice(shared);
        self.member.push(member);
        self.slope.push(dz);
    }

    pub fn n_shared(&self) -> usize {
        self.n_shared
    }

    pub fn n_members(&self) -> usize {
        self.n_members
    }

    #[inline]
    fn shared_row(&self, i: usize) -> &[f64] {
        &self.shared[i * self.n_shared..(i + 1) * self.n_shared]
    }
}

#[derive(Debug, Clone)]
pub struct PooledFactor {
    ns: usize,
    binv: Vec<[f64; 4]>,
    cross: Vec<f64>,
    schur: Vec<f64>,
}

impl NormalFactor for PooledFactor {
    fn solve(&self, rhs: &mut [f64]) {
        let ns = self.ns;
        let (f, g) = rhs.split_at_mut(ns);
        let mut rhs_s = f.to_vec();
        for (m, bi) in self.binv.iter().enumerate() {
            let (g0, g1) = (g[2 * m], g[2 * m + 1]);
            let t0 = bi[0] * g0 + bi[1] * g1;
            let t1 = bi[2] * g0 + bi[3] * g1;
            let c = &self.cross[m * ns * 2..(m + 1) * ns * 2];
            for k in 0..ns {
                rhs_s[k] -= c[2 * k] * t0 + c[2 * k + 1] * t1;
            }
        }
        cholesky_solve(&self.schur, ns, &mut rhs_s);
        for (m, bi) in self.binv.iter().enumerate() {
            let c = &self.cross[m * ns * 2..(m + 1) * ns * 2];
            let mut h0 = g[2 * m];
            let mut h1 = g[2 * m + 1];
            for k in 0..ns {
                h0 -= c[2 * k] * rhs_s[k];
                h1 -= c[2 * k + 1] * rhs_s[k];
            }
            g[2 * m] = bi[0] * h0 + bi[1] * h1;
            g[2 * m + 1] = bi[2] * h0 + bi[3] * h1;
        }
        f.copy_from_slice(&rhs_s);
    }
}

impl Design for PooledDesign {
    type Factor = PooledFactor;

    fn nrows(&self) -> usize {
        self.member.len()
    }
    fn ncols(&self) -> usize {
        self.n_shared + 2 * self.n_members
    }
    fn row_into(&self, i: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        out[..self.n_shared].copy_from_slice(self.shared_row(i));
        let base = self.n_shared + 2 * self.member[i];
        out[base] = 1.0;
        out[base + 1] = self.slope[i];
    }
    fn mul_vec(&self, coef: &[f64], out: &mut [f64]) {
        let ns = self.n_shared;
        for (i, o) in out.iter_mut().enumerate() {
            let s: f64 = self.shared_row(i).iter().zip(&coef[..ns]).map(|(a, b)| a * b).sum();
            let base = ns + 2 * self.member[i];
            *o = s + coef[base] + self.slope[i] * coef[base + 1];
        }
    }
    fn tmul_vec(&self, v: &[f64], out: &mut [f64]) {
        let ns = self.n_shared;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &vi) in v.iter().enumerate() {
            let (head, tail) = out.split_at_mut(ns);
            for (o, x) in head.iter_mut().zip(self.shared_row(i)) {
                *o += vi * x;
            }
            let base = 2 * self.member[i];
            tail[base] += vi;
            tail[base + 1] += vi * self.slope[i];
        }
    }
    fn factor_normal(&self, q: &[f64], regularize: bool) -> Option<PooledFactor> {
        let ns = self.n_shared;
        let nm = self.n_members;
        let mut s = vec![0.0; ns * ns];
        let mut cross = vec![0.0; nm * ns * 2];
        let mut b = vec![[0.0; 4]; nm];
        for (i, &qi) in q.iter().enumerate() {
            if qi == 0.0 {
                continue;
            }
            let r = self.shared_row(i);
            let m = self.member[i];
            let dz = self.slope[i];
            for a in 0..ns {
                let ra = qi * r[a];
                for c in 0..=a {
                    s[a * ns + c] += ra * r[c];
                }
                cross[m * ns * 2 + 2 * a] += ra;
                cross[m * ns * 2 + 2 * a + 1] += ra * dz;
            }
            let bm = &mut b[m];
            bm[0] += qi;
            bm[1] += qi * dz;
            bm[3] += qi * dz * dz;
        }
        let mut binv = Vec::with_capacity(nm);
        for bm in b.iter_mut() {
            bm[2] = bm[1];
            let inv = match inv2(*bm) {
                Some(inv) => inv,
                None if regularize => {
                    let lift = 1e-12 * bm[0].abs().max(bm[3].abs()).max(f64::MIN_POSITIVE);
                    inv2([bm[0] + lift, bm[1], bm[2], bm[3] + lift])?
                }
                None => return None,
            };
            binv.push(inv);
        }
        for a in 0..ns {
            for c in 0..a {
                s[c * ns + a] = s[a * ns + c];
            }
        }
        // Schur complement S − Σ_m C_m B_m⁻¹ C_mᵀ
        for (m, bi) in binv.iter().enumerate() {
            let c = &cross[m * ns * 2..(m + 1) * ns * 2];
            for a in 0..ns {
                let t0 = c[2 * a] * bi[0] + c[2 * a + 1] * bi[2];
                let t1 = c[2 * a] * bi[1] + c[2 * a + 1] * bi[3];
                for k in 0..ns {
                    s[a * ns + k] -= t0 * c[2 * k] + t1 * c[2 * k + 1];
                }
            }
        }
        let floor = if regularize { 1e-13 } else { 1e-10 };
        if !cholesky_in_place(&mut s, ns, floor, regularize) {
            return None;
        }
        Some(PooledFactor {
            ns,
            binv,
            cross,
            schur: s,
        })
    }
    fn select_rows(&self, rows: &[usize]) -> Self {
        let mut out = PooledDesign::with_capacity(self.n_shared, self.n_members, rows.len());
        for &i in rows {
            out.push_row(self.member[i], self.shared_row(i), self.slope[i]);
        }
        out
    }
    fn all_finite(&self) -> bool {
        self.shared.iter().chain(&self.slope).all(|v| v.is_finite())
    }
}

/// A weighted linear quantile-regression problem.
#[derive(Debug, Clone)]
pub struct WeightedQRProblem<D = DenseDesign> {
    pub design: D,
    pub response: Vec<f64>,
    pub weights: Vec<f64>,
    pub tau: f64,
}

impl<D: Design> WeightedQRProblem<D> {
    pub fn new(design: D, response: Vec<f64>, weights: Vec<f64>, tau: f64) -> Result<Self> {
        let p = WeightedQRProblem {
            design,
            response,
            weights,
            tau,
        };
        p.validate()?;
        Ok(p)
    }

    /// Unit-weight problem.
    pub fn unweighted(design: D, response: Vec<f64>, tau: f64) -> Result<Self> {
        let n = response.len();
        Self::new(design, response, vec![1.0; n], tau)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.design.nrows();
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidInput(format!("tau = {} outside (0, 1)", self.tau)));
        }
        if n == 0 || self.design.ncols() == 0 {
            return Err(Error::InvalidInput("empty design".into()));
        }
        if self.response.len() != n || self.weights.len() != n {
            return Err(Error::InvalidInput(format!(
                "length mismatch: design {n} rows, response {}, weights {}",
                self.response.len(),
                self.weights.len()
            )));
        }
        if !self.response.iter().all(|v| v.is_finite()) || !self.design.all_finite() {
            return Err(Error::InvalidInput("non-finite entries in problem data".into()));
        }
        if !self.weights.iter().all(|w| w.is_finite() && *w >= 0.0) {
            return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// `Σ_t w_t ρ_τ(y_t − x_tᵀθ)`.
    pub fn objective(&self, coef: &[f64]) -> f64 {
        let mut fit = vec![0.0; self.design.nrows()];
        self.design.mul_vec(coef, &mut fit);
        fit.iter()
            .zip(&self.response)
            .zip(&self.weights)
            .map(|((f, y), w)| if *w > 0.0 { w * check_loss(y - f, self.tau) } else { 0.0 })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Relative duality-gap tolerance: stop once `P − D ≤ tol·(1 + |P|)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    MaxIterations,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QRSolution {
    pub coefficients: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub status: SolveStatus,
}

/// Rows with weight below this fraction of the largest weight are dropped.
pub const WEIGHT_DROP_RATIO: f64 = 1e-12;

/// Solve with the default cold start.
pub fn solve<D: Design>(problem: &WeightedQRProblem<D>, opts: &SolveOptions) -> Result<QRSolution> {
    solve_warm(problem, opts, None)
}

/// Solve, optionally initialising the coefficient iterate from `start`.
pub fn solve_warm<D: Design>(
    problem: &WeightedQRProblem<D>,
    opts: &SolveOptions,
    start: Option<&[f64]>,
) -> Result<QRSolution> {
    problem.validate()?;
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidInput("solver tolerance must be positive".into()));
    }
    let p = problem.design.ncols();
    if let Some(s) = start {
        if s.len() != p {
            return Err(Error::InvalidInput("warm start has wrong length".into()));
        }
    }
    let w_max = problem.weights.iter().copied().fold(0.0_f64, f64::max);
    let active: Vec<usize> = (0..problem.design.nrows())
        .filter(|&i| problem.weights[i] > 0.0 && problem.weights[i] >= WEIGHT_DROP_RATIO * w_max)
        .collect();

    let finish = |coef: Vec<f64>, iterations: usize, status: SolveStatus| {
        let objective = problem.objective(&coef);
        QRSolution {
            coefficients: coef,
            objective,
            iterations,
            status,
        }
    };

    if active.len() < p {
        let coef = degenerate_fit(problem, &active, opts);
        return Ok(finish(coef, 0, SolveStatus::Degenerate));
    }

    let outcome = if active.len() == problem.design.nrows() {
        run_active(&problem.design, &problem.weights, &problem.response, problem.tau, opts, start)
    } else {
        let design = problem.design.select_rows(&active);
        let w: Vec<f64> = active.iter().map(|&i| problem.weights[i]).collect();
        let y: Vec<f64> = active.iter().map(|&i| problem.response[i]).collect();
        run_active(&design, &w, &y, problem.tau, opts, start)
    };

    Ok(match outcome {
        Some((coef, iterations, converged)) => {
            let status = if converged {
                SolveStatus::Optimal
            } else {
                SolveStatus::MaxIterations
            };
            finish(coef, iterations, status)
        }
        None => {
            let coef = degenerate_fit(problem, &active, opts);
            finish(coef, 0, SolveStatus::Degenerate)
        }
    })
}

fn run_active<D: Design>(
    design: &D,
    w: &[f64],
    y: &[f64],
    tau: f64,
    opts: &SolveOptions,
    start: Option<&[f64]>,
) -> Option<(Vec<f64>, usize, bool)> {
    let ipm = interior_point(design, w, y, tau, opts, start)?;
    let mut coef = ipm.coef;
    if let Some(vertex) = vertex_from_residuals(design, w, y, &coef) {
        let current = weighted_loss(design, w, y, tau, &coef);
        let snapped = weighted_loss(design, w, y, tau, &vertex);
        if snapped <= current {
            coef = vertex;
        }
    }
    Some((coef, ipm.iterations, ipm.converged))
}

fn weighted_loss<D: Design>(design: &D, w: &[f64], y: &[f64], tau: f64, coef: &[f64]) -> f64 {
    let mut fit = vec![0.0; design.nrows()];
    design.mul_vec(coef, &mut fit);
    fit.iter()
        .zip(y)
        .zip(w)
        .map(|((f, yi), wi)| wi * check_loss(yi - f, tau))
        .sum()
}

struct IpmOutcome {
    coef: Vec<f64>,
    iterations: usize,
    converged: bool,
}

const STEP_DAMPING: f64 = 0.99995;

fn max_step_box(x: &[f64], upper_slack: &[f64], dx: &[f64]) -> f64 {
    let mut step = f64::INFINITY;
    for ((&xi, &si), &di) in x.iter().zip(upper_slack).zip(dx) {
        if di < 0.0 {
            step = step.min(-xi / di);
        } else if di > 0.0 {
            step = step.min(si / di);
        }
    }
    step
}

fn max_step_pos(x: &[f64], dx: &[f64]) -> f64 {
    x.iter()
        .zip(dx)
        .filter(|(_, d)| **d < 0.0)
        .map(|(xi, di)| -xi / di)
        .fold(f64::INFINITY, f64::min)
}

/// Returns `None` when the (scaled) design is rank deficient.
fn interior_point<D: Design>(
    design: &D,
    s: &[f64],
    y: &[f64],
    tau: f64,
    opts: &SolveOptions,
    start: Option<&[f64]>,
) -> Option<IpmOutcome> {
    let n = design.nrows();
    let p = design.ncols();
    let yw: Vec<f64> = y.iter().zip(s).map(|(a, b)| a * b).collect();
    let s2: Vec<f64> = s.iter().map(|v| v * v).collect();

    // rank check and least-squares start in one factorization
    let ls = design.factor_normal(&s2, false)?;
    let mut theta = match start {
        Some(st) => st.to_vec(),
        None => {
            let wy: Vec<f64> = yw.iter().zip(s).map(|(a, b)| a * b).collect();
            let mut rhs = vec![0.0; p];
            design.tmul_vec(&wy, &mut rhs);
            ls.solve(&mut rhs);
            rhs
        }
    };

    let mut xb = vec![0.0; n];
    let residuals = |theta: &[f64], xb: &mut Vec<f64>| -> Vec<f64> {
        design.mul_vec(theta, xb);
        (0..n).map(|i| yw[i] - s[i] * xb[i]).collect()
    };
    let r = residuals(&theta, &mut xb);
    let mean_abs = r.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let ymax = yw.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let shift = (0.1 * mean_abs).max(1e-10 * (1.0 + ymax));

    let mut a = vec![1.0 - tau; n];
    let mut sl = vec![tau; n];
    let mut upper: Vec<f64> = r.iter().map(|v| v.max(0.0) + shift).collect();
    let mut lower: Vec<f64> = r.iter().map(|v| (-v).max(0.0) + shift).collect();
    let y_sum: f64 = yw.iter().sum();

    let mut best_theta = theta.clone();
    let mut best_obj = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    let mut q = vec![0.0; n];
    let mut qs = vec![0.0; n];
    let mut rho = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut rhs = vec![0.0; p];
    let mut da = vec![0.0; n];
    let mut dz = vec![0.0; n];
    let mut dw = vec![0.0; n];

    loop {
        let r = residuals(&theta, &mut xb);
        let primal: f64 = r.iter().map(|v| check_loss(*v, tau)).sum();
        let dual: f64 = yw.iter().zip(&a).map(|(yv, av)| yv * av).sum::<f64>() - (1.0 - tau) * y_sum;
        if primal < best_obj {
            best_obj = primal;
            best_theta.copy_from_slice(&theta);
        }
        if primal - dual <= opts.tol * (1.0 + primal.abs()) {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;

        for i in 0..n {
            q[i] = 1.0 / (lower[i] / a[i] + upper[i] / sl[i]);
            qs[i] = q[i] * s2[i];
        }
        let factor = match design.factor_normal(&qs, true) {
            Some(f) => f,
            None => break,
        };

        // direction for a given right-hand side (ρ); returns Δθ, fills Δa
        let direction = |rho: &[f64], da: &mut [f64], rhs: &mut [f64], tmp: &mut [f64]| {
            for i in 0..n {
                tmp[i] = s[i] * q[i] * rho[i];
            }
            design.tmul_vec(tmp, rhs);
            factor.solve(rhs);
            design.mul_vec(rhs, tmp);
            for i in 0..n {
                da[i] = q[i] * (rho[i] - s[i] * tmp[i]);
            }
        };

        // affine-scaling predictor
        for i in 0..n {
            rho[i] = upper[i] - lower[i];
        }
        direction(&rho, &mut da, &mut rhs, &mut tmp);
        for i in 0..n {
            dz[i] = -lower[i] - lower[i] * da[i] / a[i];
            dw[i] = -upper[i] + upper[i] * da[i] / sl[i];
        }
        let ap = max_step_box(&a, &sl, &da).min(1.0);
        let ad = max_step_pos(&lower, &dz).min(max_step_pos(&upper, &dw)).min(1.0);
        let mut gap = 0.0;
        let mut mu_aff = 0.0;
        for i in 0..n {
            gap += a[i] * lower[i] + sl[i] * upper[i];
            mu_aff += (a[i] + ap * da[i]) * (lower[i] + ad * dz[i])
                + (sl[i] - ap * da[i]) * (upper[i] + ad * dw[i]);
        }
        let sigma = (mu_aff / gap).clamp(0.0, 1.0).powi(3);
        let mu = sigma * gap / (2.0 * n as f64);

        // corrector
        let mut rxz = vec![0.0; n];
        let mut rsw = vec![0.0; n];
        for i in 0..n {
            rxz[i] = mu - a[i] * lower[i] - da[i] * dz[i];
            rsw[i] = mu - sl[i] * upper[i] + da[i] * dw[i];
            rho[i] = rxz[i] / a[i] - rsw[i] / sl[i];
        }
        direction(&rho, &mut da, &mut rhs, &mut tmp);
        for i in 0..n {
            dz[i] = (rxz[i] - lower[i] * da[i]) / a[i];
            dw[i] = (rsw[i] + upper[i] * da[i]) / sl[i];
        }
        let ap = (STEP_DAMPING * max_step_box(&a, &sl, &da)).min(1.0);
        let ad = (STEP_DAMPING * max_step_pos(&lower, &dz).min(max_step_pos(&upper, &dw))).min(1.0);
        if !(ap.is_finite() && ad.is_finite()) || (ap <= 0.0 && ad <= 0.0) {
            break;
        }
        for i in 0..n {
            a[i] += ap * da[i];
            sl[i] -= ap * da[i];
            lower[i] += ad * dz[i];
            upper[i] += ad * dw[i];
        }
        for (t, d) in theta.iter_mut().zip(&rhs) {
            *t += ad * d;
        }
        if !theta.iter().all(|v| v.is_finite()) {
            break;
        }
    }
    if !converged {
        theta = best_theta;
    }
    Some(IpmOutcome {
        coef: theta,
        iterations,
        converged,
    })
}

/// Interpolating solution through `p` linearly independent rows with the
/// smallest absolute residuals.
fn vertex_from_residuals<D: Design>(design: &D, s: &[f64], y: &[f64], coef: &[f64]) -> Option<Vec<f64>> {
    let n = design.nrows();
    let p = design.ncols();
    let mut fit = vec![0.0; n];
    design.mul_vec(coef, &mut fit);
    let mut order: Vec<(f64, usize)> = (0..n).map(|i| ((s[i] * (y[i] - fit[i])).abs(), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut chosen = Vec::with_capacity(p);
    let mut row = vec![0.0; p];
    for &(_, i) in &order {
        design.row_into(i, &mut row);
        let norm0 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = row.clone();
        for _ in 0..2 {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (vk, bk) in v.iter_mut().zip(b) {
                    *vk -= proj * bk;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 * norm0 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
            chosen.push(i);
            if chosen.len() == p {
                break;
            }
        }
    }
    if chosen.len() < p {
        return None;
    }
    let mut a = vec![0.0; p * p];
    let mut b = vec![0.0; p];
    for (k, &i) in chosen.iter().enumerate() {
        design.row_into(i, &mut row);
        a[k * p..(k + 1) * p].copy_from_slice(&row);
        b[k] = y[i];
    }
    let sol = lu_solve(&a, p, &b, 1e-14)?;
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

/// Minimum-norm optimum for a rank-deficient effective design: solve on a
/// maximal independent column subset, then project onto the row space.
fn degenerate_fit<D: Design>(problem: &WeightedQRProblem<D>, active: &[usize], opts: &SolveOptions) -> Vec<f64> {
    let p = problem.design.ncols();
    if active.is_empty() {
        return vec![0.0; p];
    }
    let mut dense = Vec::with_capacity(active.len() * p);
    let mut row = vec![0.0; p];
    for &i in active {
        problem.design.row_into(i, &mut row);
        dense.extend_from_slice(&row);
    }
    let x = DenseDesign {
        nrows: active.len(),
        ncols: p,
        data: dense,
    };
    let w: Vec<f64> = active.iter().map(|&i| problem.weights[i]).collect();
    let y: Vec<f64> = active.iter().map(|&i| problem.response[i]).collect();

    // independent columns of diag(w) X by modified Gram-Schmidt
    let n = x.nrows;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut cols = Vec::new();
    for c in 0..p {
        let col: Vec<f64> = (0..n).map(|i| w[i] * x.data[i * p + c]).collect();
        let norm0 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = col;
        for _ in 0..2 {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(b).for_each(|(vk, bk)| *vk -= proj * bk);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-9 * norm0 {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
            cols.push(c);
        }
    }
    if cols.is_empty() {
        return vec![0.0; p];
    }
    let reduced = x.select_columns(&cols);
    let reduced_coef = match interior_point(&reduced, &w, &y, problem.tau, opts, None) {
        Some(out) => {
            let mut coef = out.coef;
            if let Some(v) = vertex_from_residuals(&reduced, &w, &y, &coef) {
                if weighted_loss(&reduced, &w, &y, problem.tau, &v)
                    <= weighted_loss(&reduced, &w, &y, problem.tau, &coef)
                {
                    coef = v;
                }
            }
            coef
        }
        None => vec![0.0; cols.len()],
    };
    let mut fitted = vec![0.0; n];
    reduced.mul_vec(&reduced_coef, &mut fitted);
    let xm = nalgebra::DMatrix::from_row_slice(n, p, &x.data);
    let f = nalgebra::DVector::from_vec(fitted);
    match xm.pseudo_inverse(1e-12) {
        Ok(pinv) => (pinv * f).iter().copied().collect(),
        Err(_) => {
            let mut coef = vec![0.0; p];
            for (k, &c) in cols.iter().enumerate() {
                coef[c] = reduced_coef[k];
            }
            coef
        }
    }
}

/// Maximum rows accepted by [`oracle_enumerate`].
pub const ORACLE_MAX_ROWS: usize = 25;
/// Maximum columns accepted by [`oracle_enumerate`].
pub const ORACLE_MAX_COLS: usize = 3;

/// Exact solution by enumerating every interpolating basis of `p` rows.
///
/// Some optimum of the LP interpolates `p` observations, so the best check
/// loss over all nonsingular `p`-row subsets is the optimum.
pub fn oracle_enumerate(problem: &WeightedQRProblem<DenseDesign>) -> Result<QRSolution> {
    problem.validate()?;
    let n = problem.design.nrows();
    let p = problem.design.ncols();
    if n > ORACLE_MAX_ROWS || p > ORACLE_MAX_COLS {
        return Err(Error::InvalidInput(format!(
            "oracle enumeration limited to n ≤ {ORACLE_MAX_ROWS}, p ≤ {ORACLE_MAX_COLS} (got {n}×{p})"
        )));
    }
    let active: Vec<usize> = (0..n).filter(|&i| problem.weights[i] > 0.0).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut subset = Vec::with_capacity(p);
    let mut visited = 0usize;
    enumerate_subsets(&active, p, 0, &mut subset, &mut |rows| {
        visited += 1;
        let mut a = Vec::with_capacity(p * p);
        let mut b = Vec::with_capacity(p);
        for &i in rows {
            a.extend_from_slice(problem.design.row(i));
            b.push(problem.response[i]);
        }
        if let Some(coef) = lu_solve(&a, p, &b, 1e-12) {
            let obj = problem.objective(&coef);
            if best.as_ref().is_none_or(|(o, _)| obj < *o) {
                best = Some((obj, coef));
            }
        }
    });
    Ok(match best {
        Some((objective, coefficients)) => QRSolution {
            coefficients,
            objective,
            iterations: visited,
            status: SolveStatus::Optimal,
        },
        None => QRSolution {
            objective: problem.objective(&vec![0.0; p]),
            coefficients: vec![0.0; p],
            iterations: visited,
            status: SolveStatus::Degenerate,
        },
    })
}

fn enumerate_subsets(
    pool: &[usize],
    k: usize,
    from: usize,
    current: &mut Vec<usize>,
    visit: &mut dyn FnMut(&[usize]),
) {
    if current.len() == k {
        visit(current);
        return;
    }
    let need = k - current.len();
    for idx in from..pool.len() {
        if pool.len() - idx < need {
            break;
        }
        current.push(pool[idx]);
        enumerate_subsets(pool, k, idx + 1, current, visit);
        current.pop();
    }
}
