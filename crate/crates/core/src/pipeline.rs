//! The full estimation chain on one panel: bandwidth choice, preliminary
//! fits, distances, group number, clustering, post-grouping fits and
//! (optionally) confidence intervals.

use crate::error::{Error, Result};
use crate::grouping::{self, DistanceMatrix, GroupNumberSelection, GroupStructure, OmegaPolicy};
use crate::kernel::{self, CvMode, CvReport, KernelFamily, KernelSpec};
use crate::panelio::PanelDataset;
use crate::postgroup::{self, GroupFit, InferenceOptions};
use crate::prelim::{self, CoefficientPath, SubjectKernels};

/// How a bandwidth is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum BandwidthPolicy {
    Fixed(f64),
    /// Cross-validation over `grid` (empty: rule-of-thumb multiples).
    Cv { grid: Vec<f64>, folds: Option<usize> },
}

impl Default for BandwidthPolicy {
    fn default() -> Self {
        BandwidthPolicy::Cv {
            grid: Vec::new(),
            folds: None,
        }
    }
}

/// Preliminary cross-validation: a bandwidth per subject, or one bandwidth
/// minimizing the summed per-subject scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PrelimCvMode {
    #[default]
    PerSubject,
    Common,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub tau: f64,
    pub family: KernelFamily,
    pub prelim_bandwidth: BandwidthPolicy,
    /// Per-subject or one common preliminary bandwidth when cross-validating.
    pub prelim_cv_mode: PrelimCvMode,
    pub post_bandwidth: BandwidthPolicy,
    pub r_max: usize,
    pub omega: OmegaPolicy,
    /// Extra uniform points added to the fitted curves for plotting.
    pub plot_grid: usize,
    pub inference: Option<InferenceOptions>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            tau: 0.5,
            family: KernelFamily::Gaussian,
            prelim_bandwidth: BandwidthPolicy::default(),
            prelim_cv_mode: PrelimCvMode::PerSubject,
            post_bandwidth: BandwidthPolicy::default(),
            r_max: 5,
            omega: OmegaPolicy::default(),
            plot_grid: 0,
            inference: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub prelim_cv: Option<CvReport>,
    pub prelim_bandwidths: Vec<f64>,
    pub prelim_paths: Vec<CoefficientPath>,
    /// Points the statistics average over (observed index values, repeats kept).
    pub eval_at: Vec<f64>,
    pub distances: DistanceMatrix,
    pub selection: GroupNumberSelection,
    pub structure: GroupStructure,
    pub post_cv: Vec<Option<CvReport>>,
    pub group_fits: Vec<GroupFit>,
}

impl PipelineResult {
    /// Post-grouping path of every subject (its group's `γ̃`, its own `α̃`).
    pub fn post_paths(&self) -> Vec<CoefficientPath> {
        subject_paths_from_groups(&self.group_fits, self.prelim_paths.len())
    }
}

/// Per-subject view of a set of group fits.
pub fn subject_paths_from_groups(fits: &[GroupFit], n: usize) -> Vec<CoefficientPath> {
    let mut out: Vec<Option<CoefficientPath>> = vec![None; n];
    for f in fits {
        for (m, &i) in f.members.iter().enumerate() {
            out[i] = Some(f.member_path(m));
        }
    }
    out.into_iter().map(|p| p.expect("every subject belongs to a group")).collect()
}

/// Points for the statistics and for the fits. With a shared index the
/// statistics use the observed series; with subject-specific indices the
/// paths are not evaluated at common points, so a 101-point grid is used.
pub fn evaluation_design(ds: &PanelDataset, plot_grid: usize) -> (Vec<f64>, Vec<f64>) {
    let (eval_at, mut points) = match ds.shared_index() {
        Some(z) => (z.to_vec(), prelim::observed_eval_points(ds)),
        None => {
            let g = prelim::uniform_grid(101);
            (g.clone(), g)
        }
    };
    points.extend(prelim::uniform_grid(plot_grid));
    points.sort_by(|a, b| a.total_cmp(b));
    points.dedup();
    (eval_at, points)
}

/// Preliminary bandwidths under `policy`.
pub fn prelim_bandwidths(
    ds: &PanelDataset,
    tau: f64,
    family: KernelFamily,
    policy: &BandwidthPolicy,
    mode: PrelimCvMode,
) -> Result<(Vec<f64>, Option<CvReport>)> {
    match policy {
        BandwidthPolicy::Fixed(h) => Ok((vec![*h; ds.n_subjects()], None)),
        BandwidthPolicy::Cv { grid, folds } => {
            let folds = folds.unwrap_or_else(|| kernel::default_folds(ds.n_times()));
            match mode {
                PrelimCvMode::PerSubject => {
                    let rep = kernel::select_bandwidth_cv(ds, tau, family, grid, CvMode::PerSubject, folds)?;
                    Ok((rep.selected.clone(), Some(rep)))
                }
                PrelimCvMode::Common => {
                    // one bandwidth for all subjects: per-subject scores summed
                    let g = if grid.is_empty() { kernel::default_grid(ds, None) } else { grid.clone() };
                    let rep = kernel::select_bandwidth_cv(ds, tau, family, &g, CvMode::PerSubject, folds)?;
                    let total: Vec<f64> = (0..g.len()).map(|k| rep.scores.iter().map(|s| s[k]).sum()).collect();
                    let k = kernel::argmin_score(&g, &total)
                        .ok_or_else(|| Error::BandwidthSelection("no common preliminary bandwidth".into()))?;
                    Ok((vec![g[k]; ds.n_subjects()], Some(rep)))
                }
            }
        }
    }
}

/// Post-grouping bandwidth of one group under `policy` (pooled CV).
pub fn group_bandwidth(
    ds: &PanelDataset,
    members: &[usize],
    tau: f64,
    family: KernelFamily,
    policy: &BandwidthPolicy,
) -> Result<(f64, Option<CvReport>)> {
    match policy {
        BandwidthPolicy::Fixed(h) => Ok((*h, None)),
        BandwidthPolicy::Cv { grid, folds } => {
            let sub = ds.subset(members)?;
            let folds = folds.unwrap_or_else(|| kernel::default_folds(ds.n_times()));
            let rep = kernel::select_bandwidth_cv(&sub, tau, family, grid, CvMode::Pooled, folds)?;
            Ok((rep.bandwidth(), Some(rep)))
        }
    }
}

/// Bandwidth choice and pooled fit of every group of `structure`.
pub fn fit_partition(
    ds: &PanelDataset,
    structure: &GroupStructure,
    opts: &PipelineOptions,
    points: &[f64],
) -> Result<(Vec<GroupFit>, Vec<Option<CvReport>>)> {
    let mut fits = Vec::with_capacity(structure.n_groups);
    let mut cvs = Vec::with_capacity(structure.n_groups);
    for (g, members) in structure.groups().into_iter().enumerate() {
        let (h, cv) = group_bandwidth(ds, &members, opts.tau, opts.family, &opts.post_bandwidth)?;
        let k = KernelSpec::new(opts.family, h)?;
        fits.push(postgroup::fit_group(ds, g + 1, &members, opts.tau, &k, points)?);
        cvs.push(cv);
    }
    Ok((fits, cvs))
}

/// Bandwidth choice, preliminary fits, distances, `R̂` and the partition;
/// `post_cv` and `group_fits` are left empty.
pub fn run_grouping(ds: &PanelDataset, opts: &PipelineOptions) -> Result<PipelineResult> {
    let (eval_at, points) = evaluation_design(ds, opts.plot_grid);
    let (hs, prelim_cv) = prelim_bandwidths(ds, opts.tau, opts.family, &opts.prelim_bandwidth, opts.prelim_cv_mode)?;
    let kernels = SubjectKernels::PerSubject(
        hs.iter()
            .map(|&h| KernelSpec::new(opts.family, h))
            .collect::<Result<_>>()?,
    );
    let prelim_paths = prelim::fit_all_subjects(ds, opts.tau, &kernels, &points)?;
    let distances = grouping::distance_matrix(&prelim_paths, &eval_at)?;
    let (selection, structure) =
        grouping::select_group_number(&prelim_paths, &distances, opts.r_max, opts.omega, &eval_at)?;
    Ok(PipelineResult {
        prelim_cv,
        prelim_bandwidths: hs,
        prelim_paths,
        eval_at,
        distances,
        selection,
        structure,
        post_cv: Vec::new(),
        group_fits: Vec::new(),
    })
}

/// Runs every stage on `ds`.
pub fn run_pipeline(ds: &PanelDataset, opts: &PipelineOptions) -> Result<PipelineResult> {
    let mut res = run_grouping(ds, opts)?;
    let (_, points) = evaluation_design(ds, opts.plot_grid);
    let (mut group_fits, post_cv) = fit_partition(ds, &res.structure, opts, &points)?;
    if let Some(inf) = &opts.inference {
        group_fits = group_fits
            .iter()
            .map(|f| postgroup::confidence_intervals(ds, f, opts.family, Some(&res.prelim_paths), inf))
            .collect::<Result<_>>()?;
    }
    res.group_fits = group_fits;
    res.post_cv = post_cv;
    Ok(res)
}
