//! Per-subject local-linear quantile fits of the coefficient functions.
//!
//! At each evaluation point `z` the subject's observations enter with
//! regressor row `(1, X_itᵀ, (Z_t−z), (Z_t−z)X_itᵀ)` and weight
//! `K((Z_t−z)/h)`; the local solution is stored as
//! `(α̂(z), β̂(z), α̂'(z), β̂'(z))`.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::panelio::PanelDataset;
use crate::qrcore::{solve_warm, DenseDesign, QRSolution, SolveOptions, WeightedQRProblem};

/// Weights below this fraction of `K(0)` do not count toward the local sample.
pub const LOCAL_WEIGHT_FLOOR: f64 = 1e-8;

/// Borrowed series of one subject.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SubjectView<'a> {
    pub z: &'a [f64],
    pub y: &'a [f64],
    pub x: &'a [f64],
    pub d: usize,
}

impl<'a> SubjectView<'a> {
    pub fn of(ds: &'a PanelDataset, i: usize) -> Self {
        let t = ds.n_times();
        let d = ds.dim_x();
        SubjectView {
            z: ds.z_row(i),
            y: ds.y_row(i),
            x: ds.x_block(i),
            d,
        }
        .checked(t)
    }

    fn checked(self, t: usize) -> Self {
        debug_assert_eq!(self.x.len(), t * self.d);
        self
    }

    #[inline]
    pub fn x_at(&self, t: usize) -> &'a [f64] {
        &self.x[t * self.d..(t + 1) * self.d]
    }
}

/// `α + βᵀx` for a local coefficient vector ordered `(α, β, α', β')`.
#[inline]
pub(crate) fn local_value(theta: &[f64], x: &[f64]) -> f64 {
    theta[0] + theta[1..=x.len()].iter().zip(x).map(|(b, x)| b * x).sum::<f64>()
}

/// Solves the local problem at `z0` over the rows `t` with `keep(t)`.
pub(crate) fn local_solve(
    view: &SubjectView<'_>,
    tau: f64,
    kernel: &KernelSpec,
    z0: f64,
    keep: &dyn Fn(usize) -> bool,
    warm: Option<&[f64]>,
    opts: &SolveOptions,
) -> Result<QRSolution> {
    let d = view.d;
    let p = 2 * (d + 1);
    let floor = LOCAL_WEIGHT_FLOOR * kernel.peak();
    let (mut data, mut y, mut w) = (Vec::new(), Vec::new(), Vec::new());
    let mut usable = 0;
    for t in 0..view.z.len() {
        if !keep(t) {
            continue;
        }
        let wt = kernel.weight(view.z[t], z0);
        if wt <= 0.0 {
            continue;
        }
        if wt >= floor {
            usable += 1;
        }
        let dz = view.z[t] - z0;
        let x = view.x_at(t);
        data.push(1.0);
        data.extend_from_slice(x);
        data.push(dz);
        data.extend(x.iter().map(|v| v * dz));
        y.push(view.y[t]);
        w.push(wt);
    }
    if usable < p {
        return Err(Error::LocalDesign {
            z: z0,
            context: None,
            available: usable,
            required: p,
        });
    }
    let design = DenseDesign::new(y.len(), p, data)?;
    let problem = WeightedQRProblem::new(design, y, w, tau)?;
    solve_warm(&problem, opts, warm)
}

/// Local-linear estimates of one subject (or group) on a grid of points.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientPath {
    pub eval_points: Vec<f64>,
    pub dim_x: usize,
    /// `points × d`, row-major.
    pub beta: Vec<f64>,
    pub beta_deriv: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_deriv: Vec<f64>,
    /// Optimal local objective at each point.
    pub objective: Vec<f64>,
    pub bandwidth: f64,
    pub tau: f64,
}

impl CoefficientPath {
    pub fn len(&self) -> usize {
        self.eval_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eval_points.is_empty()
    }

    pub fn beta_at(&self, k: usize) -> &[f64] {
        &self.beta[k * self.dim_x..(k + 1) * self.dim_x]
    }

    pub fn beta_deriv_at(&self, k: usize) -> &[f64] {
        &self.beta_deriv[k * self.dim_x..(k + 1) * self.dim_x]
    }

    /// Position of `z` among the evaluation points (exact match).
    pub fn position(&self, z: f64) -> Option<usize> {
        self.eval_points.binary_search_by(|p| p.total_cmp(&z)).ok()
    }

    /// `β̂(z)` at an evaluation point.
    pub fn beta_at_point(&self, z: f64) -> Option<&[f64]> {
        self.position(z).map(|k| self.beta_at(k))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let d = self.dim_x;
        let mut header = vec!["z".to_string()];
        header.extend((1..=d).map(|l| format!("beta_{l}")));
        header.extend((1..=d).map(|l| format!("deriv_{l}")));
        header.push("alpha".into());
        header.push("alpha_deriv".into());
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut rec = vec![self.eval_points[k].to_string()];
            rec.extend(self.beta_at(k).iter().map(|v| v.to_string()));
            rec.extend(self.beta_deriv_at(k).iter().map(|v| v.to_string()));
            rec.push(self.alpha[k].to_string());
            rec.push(self.alpha_deriv[k].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a file written by [`CoefficientPath::write_csv`]; the local
    /// objectives are not stored and come back as NaN.
    pub fn read_csv(path: impl AsRef<Path>, bandwidth: f64, tau: f64) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let width = r.headers()?.len();
        if width < 5 || (width - 3) % 2 != 0 {
            return Err(Error::Schema(format!("unexpected coefficient-path header width {width}")));
        }
        let d = (width - 3) / 2;
        let mut out = CoefficientPath {
            eval_points: Vec::new(),
            dim_x: d,
            beta: Vec::new(),
            beta_deriv: Vec::new(),
            alpha: Vec::new(),
            alpha_deriv: Vec::new(),
            objective: Vec::new(),
            bandwidth,
            tau,
        };
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    s.trim().parse::<f64>().map_err(|e| Error::Data {
                        row: row + 1,
                        column: format!("#{}", c + 1),
                        message: e.to_string(),
                    })
                })
                .collect::<Result<_>>()?;
            out.eval_points.push(vals[0]);
            out.beta.extend_from_slice(&vals[1..=d]);
            out.beta_deriv.extend_from_slice(&vals[d + 1..=2 * d]);
            out.alpha.push(vals[2 * d + 1]);
            out.alpha_deriv.push(vals[2 * d + 2]);
            out.objective.push(f64::NAN);
        }
        Ok(out)
    }
}

/// Sorted distinct index values observed across the whole panel.
pub fn observed_eval_points(ds: &PanelDataset) -> Vec<f64> {
    let mut v: Vec<f64> = match ds.shared_index() {
        Some(z) => z.to_vec(),
        None => (0..ds.n_subjects()).flat_map(|i| ds.z_row(i).to_vec()).collect(),
    };
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    v
}

/// `n` equispaced points on `[0, 1]`.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..n).map(|k| k as f64 / (n - 1) as f64).collect(),
    }
}

pub(crate) fn prepare_eval_points(points: &[f64]) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::InvalidInput("no evaluation points".into()));
    }
    if let Some(z) = points.iter().find(|z| !(**z >= -1e-12 && **z <= 1.0 + 1e-12)) {
        return Err(Error::InvalidInput(format!("evaluation point {z} outside [0, 1]")));
    }
    let mut v = points.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    Ok(v)
}

/// Local-linear fit of subject `i` at every evaluation point, solved in
/// ascending order with each solve warm-started from the previous one.
pub fn fit_subject(
    ds: &PanelDataset,
    subject: usize,
    tau: f64,
    kernel: &KernelSpec,
    eval_points: &[f64],
) -> Result<CoefficientPath> {
    if subject >= ds.n_subjects() {
        return Err(Error::InvalidInput(format!("subject {subject} out of range")));
    }
    kernel.validate()?;
    let points = prepare_eval_points(eval_points)?;
    let view = SubjectView::of(ds, subject);
    let opts = SolveOptions::default();
    let d = ds.dim_x();
    let mut path = CoefficientPath {
        eval_points: points.clone(),
        dim_x: d,
        beta: Vec::with_capacity(points.len() * d),
        beta_deriv: Vec::with_capacity(points.len() * d),
        alpha: Vec::with_capacity(points.len()),
        alpha_deriv: Vec::with_capacity(points.len()),
        objective: Vec::with_capacity(points.len()),
        bandwidth: kernel.bandwidth,
        tau,
    };
    let mut prev: Option<Vec<f64>> = None;
    for &z0 in &points {
        let sol = local_solve(&view, tau, kernel, z0, &|_| true, prev.as_deref(), &opts)?;
        let c = &sol.coefficients;
        path.alpha.push(c[0]);
        path.beta.extend_from_slice(&c[1..=d]);
        path.alpha_deriv.push(c[d + 1]);
        path.beta_deriv.extend_from_slice(&c[d + 2..]);
        path.objective.push(sol.objective);
        prev = Some(sol.coefficients);
    }
    Ok(path)
}

/// Bandwidth assignment for [`fit_all_subjects`].
#[derive(Debug, Clone, PartialEq)]
pub enum SubjectKernels {
    Common(KernelSpec),
    PerSubject(Vec<KernelSpec>),
}

impl SubjectKernels {
    pub fn for_subject(&self, i: usize) -> &KernelSpec {
        match self {
            SubjectKernels::Common(k) => k,
            SubjectKernels::PerSubject(v) => &v[i],
        }
    }
}

/// Independent fits of every subject, in subject order. Failures of any
/// subject are collected and reported together with subject labels.
pub fn fit_all_subjects(
    ds: &PanelDataset,
    tau: f64,
    kernels: &SubjectKernels,
    eval_points: &[f64],
) -> Result<Vec<CoefficientPath>> {
    if let SubjectKernels::PerSubject(v) = kernels {
        if v.len() != ds.n_subjects() {
            return Err(Error::InvalidInput(format!(
                "{} bandwidths supplied for {} subjects",
                v.len(),
                ds.n_subjects()
            )));
        }
    }
    let results: Vec<Result<CoefficientPath>> = (0..ds.n_subjects())
        .into_par_iter()
        .map(|i| fit_subject(ds, i, tau, kernels.for_subject(i), eval_points))
        .collect();
    let mut paths = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => paths.push(p),
            Err(e) => {
                let label = ds.subject_labels()[i].clone();
                failures.push((label.clone(), e.with_context(format!("subject {label}"))));
            }
        }
    }
    if failures.is_empty() {
        Ok(paths)
    } else {
        Err(Error::SubjectFits { failures })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panelio::PanelIndex;

    fn linear_panel(n: usize, t: usize) -> PanelDataset {
        // Y = 1.5 + 2 X1 − X2 exactly, index spread over [0, 1]
        let z: Vec<f64> = (0..t).map(|k| ((k * 7) % t) as f64 / (t - 1) as f64).collect();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            for k in 0..t {
                let x1 = ((i + 3 * k) as f64 * 0.37).sin();
                let x2 = ((2 * i + k) as f64 * 0.11).cos();
                x.push(x1);
                x.push(x2);
                y.push(1.5 + 2.0 * x1 - x2);
            }
        }
        PanelDataset::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            (1..=t).map(|v| v as f64).collect(),
            2,
            y,
            x,
            PanelIndex::Shared(z),
        )
        .unwrap()
    }

    #[test]
    fn exact_linear_model_is_recovered() {
        let ds = linear_panel(1, 30);
        let k = KernelSpec::gaussian(0.15).unwrap();
        let path = fit_subject(&ds, 0, 0.5, &k, &uniform_grid(11)).unwrap();
        for j in 0..path.len() {
            let b = path.beta_at(j);
            assert!((b[0] - 2.0).abs() < 1e-7 && (b[1] + 1.0).abs() < 1e-7, "{b:?}");
            assert!(path.beta_deriv_at(j).iter().all(|v| v.abs() < 1e-6));
            assert!((path.alpha[j] - 1.5).abs() < 1e-7);
            assert!(path.objective[j] < 1e-9);
        }
    }

    #[test]
    fn sparse_local_design_is_reported() {
        let z = vec![0.0, 0.1, 0.5, 0.9, 1.0];
        let ds = PanelDataset::new(
            vec!["a".into()],
            vec![1.0, 2.0, 3.0, 4.0, 5.0],
            2,
            vec![1.0; 5],
            (0..10).map(|v| v as f64).collect(),
            PanelIndex::Shared(z),
        )
        .unwrap();
        let k = KernelSpec::gaussian(0.01).unwrap();
        match fit_subject(&ds, 0, 0.5, &k, &[0.5]) {
            Err(Error::LocalDesign { z, available, required, .. }) => {
                assert_eq!(z, 0.5);
                assert!(available < 6);
                assert_eq!(required, 6);
            }
            other => panic!("expected local-design error, got {other:?}"),
        }
    }

    #[test]
    fn csv_round_trip() {
        let ds = linear_panel(1, 25);
        let k = KernelSpec::gaussian(0.2).unwrap();
        let path = fit_subject(&ds, 0, 0.5, &k, &observed_eval_points(&ds)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("p.csv");
        path.write_csv(&f).unwrap();
        let back = CoefficientPath::read_csv(&f, 0.2, 0.5).unwrap();
        assert_eq!(back.eval_points, path.eval_points);
        assert_eq!(back.beta, path.beta);
        assert_eq!(back.alpha_deriv, path.alpha_deriv);
    }

    #[test]
    fn grid_helpers() {
        assert_eq!(uniform_grid(3), vec![0.0, 0.5, 1.0]);
        assert_eq!(uniform_grid(101).len(), 101);
        assert!(prepare_eval_points(&[1.5]).is_err());
        assert_eq!(prepare_eval_points(&[0.3, 0.1, 0.3]).unwrap(), vec![0.1, 0.3]);
    }
}
