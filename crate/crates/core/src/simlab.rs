//! Seeded simulation designs, the oracle benchmark, RMSE and the replication
//! harness.
//!
//! Every random quantity comes from its own ChaCha8 stream: the generator is
//! seeded with the study seed and switched to stream `256·r + tag`, where `r`
//! is the replication and `tag` names the variable (`Z`, `X`, errors). Draws of
//! one variable therefore never depend on how many draws another consumed,
//! and replications can run in any order.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grouping::{self, GroupStructure};
use crate::panelio::{PanelDataset, PanelIndex};
use crate::pipeline::{self, BandwidthPolicy, PipelineOptions, PrelimCvMode};
use crate::postgroup::GroupFit;
use crate::prelim::CoefficientPath;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dgp {
    /// Three groups with fixed coefficient functions.
    Dgp1,
    /// Quantile-dependent mixtures of the first two groups' functions.
    Dgp2,
}

impl std::str::FromStr for Dgp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dgp1" | "1" => Ok(Dgp::Dgp1),
            "dgp2" | "2" => Ok(Dgp::Dgp2),
            other => Err(Error::InvalidInput(format!("unknown design `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorDist {
    StdNormal,
    /// Student t with 5 degrees of freedom.
    T5,
    /// `0.4 (χ²(3) − 3)`.
    ScaledChi2,
}

impl std::str::FromStr for ErrorDist {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" | "n01" | "std_normal" => Ok(ErrorDist::StdNormal),
            "t5" | "t(5)" => Ok(ErrorDist::T5),
            "chi2" | "chisq" | "scaled_chi2" => Ok(ErrorDist::ScaledChi2),
            other => Err(Error::InvalidInput(format!("unknown error distribution `{other}`"))),
        }
    }
}

impl ErrorDist {
    pub fn name(self) -> &'static str {
        match self {
            ErrorDist::StdNormal => "normal",
            ErrorDist::T5 => "t5",
            ErrorDist::ScaledChi2 => "chi2",
        }
    }

    /// One error draw.
    pub fn draw(self, rng: &mut ChaCha8Rng) -> f64 {
        let mut n = || -> f64 { StandardNormal.sample(rng) };
        match self {
            ErrorDist::StdNormal => n(),
            ErrorDist::T5 => {
                let z = n();
                let chi: f64 = (0..5).map(|_| n().powi(2)).sum();
                z / (chi / 5.0).sqrt()
            }
            ErrorDist::ScaledChi2 => {
                let chi: f64 = (0..3).map(|_| n().powi(2)).sum();
                0.4 * (chi - 3.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgpConfig {
    pub dgp: Dgp,
    pub n: usize,
    pub t: usize,
    pub tau: f64,
    pub error: ErrorDist,
    pub seed: u64,
}

impl DgpConfig {
    pub fn new(dgp: Dgp, n: usize, t: usize, tau: f64, error: ErrorDist, seed: u64) -> Result<Self> {
        let c = DgpConfig {
            dgp,
            n,
            t,
            tau,
            error,
            seed,
        };
        c.validate()?;
        Ok(c)
    }

    /// `(⌊0.3N⌋, ⌊0.3N⌋, remainder)`.
    pub fn group_sizes(&self) -> [usize; 3] {
        let a = (3 * self.n) / 10;
        [a, a, self.n - 2 * a]
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_sizes().contains(&0) {
            return Err(Error::InvalidInput(format!("N = {} leaves an empty group", self.n)));
        }
        if self.t < 2 {
            return Err(Error::InvalidInput("T must be at least 2".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidInput(format!("tau = {} outside (0, 1)", self.tau)));
        }
        Ok(())
    }
}

/// Logistic building block `1/(1 + exp(−(z−ξ)/η))`.
pub fn logistic(z: f64, xi: f64, eta: f64) -> f64 {
    1.0 / (1.0 + (-(z - xi) / eta).exp())
}

/// The base functions `γ_{k,l}(z)` for `k = 1..3`, `l = 1, 2`.
pub fn base_gamma(k: usize, z: f64) -> [f64; 2] {
    let f = logistic;
    let (z2, z3) = (z * z, z * z * z);
    match k {
        1 => [3.0 * f(z, 0.5, 0.1), 3.0 * (2.0 * z - 4.0 * z2 + 2.0 * z3 + f(z, 0.6, 0.1))],
        2 => [
            3.0 * (2.0 * z - 6.0 * z2 + 4.0 * z3 + f(z, 0.7, 0.05)),
            3.0 * (z - 3.0 * z2 + 2.0 * z3 + f(z, 0.7, 0.04)),
        ],
        3 => [
            3.0 * (4.0 * z - 8.0 * z2 + 4.0 * z3 + f(z, 0.6, 0.05)),
            3.0 * (0.5 * z - 0.5 * z2 + f(z, 0.4, 0.07)),
        ],
        _ => panic!("no base function for group {k}"),
    }
}

/// True coefficient functions of a design.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueModel {
    pub dgp: Dgp,
    pub tau: f64,
    /// Design group (1..=3) of each subject.
    pub design_groups: Vec<usize>,
}

impl TrueModel {
    /// `β_i(z)`.
    pub fn beta(&self, i: usize, z: f64) -> [f64; 2] {
        let k = self.design_groups[i];
        match (self.dgp, k) {
            (Dgp::Dgp1, _) | (Dgp::Dgp2, 3) => base_gamma(k, z),
            (Dgp::Dgp2, _) => {
                let (g1, g2) = (base_gamma(1, z), base_gamma(2, z));
                let (a, b) = if k == 1 {
                    (2.0 * self.tau, 2.0 * (1.0 - self.tau))
                } else {
                    (2.0 * (1.0 - self.tau), 2.0 * self.tau)
                };
                [a * g1[0] + b * g2[0], a * g1[1] + b * g2[1]]
            }
        }
    }
}

/// One simulated panel with its truth.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub data: PanelDataset,
    pub truth: GroupStructure,
    pub model: TrueModel,
}

const TAG_Z: u64 = 1;
const TAG_X: u64 = 2;
const TAG_E: u64 = 3;

/// Generator for variable `tag` of replication `rep`.
pub fn stream(seed: u64, rep: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep * 256 + tag);
    rng
}

/// Replication 0 of the design.
pub fn generate(cfg: &DgpConfig) -> Result<Simulated> {
    generate_replication(cfg, 0)
}

pub fn generate_replication(cfg: &DgpConfig, rep: u64) -> Result<Simulated> {
    cfg.validate()?;
    let (n, t_len) = (cfg.n, cfg.t);
    let sizes = cfg.group_sizes();
    let design_groups: Vec<usize> = (0..n)
        .map(|i| {
            if i < sizes[0] {
                1
            } else if i < sizes[0] + sizes[1] {
                2
            } else {
                3
            }
        })
        .collect();
    let model = TrueModel {
        dgp: cfg.dgp,
        tau: cfg.tau,
        design_groups: design_groups.clone(),
    };

    let mut rz = stream(cfg.seed, rep, TAG_Z);
    let unif = Uniform::new(0.0, 1.0).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let z: Vec<f64> = (0..t_len).map(|_| unif.sample(&mut rz)).collect();

    let mut rx = stream(cfg.seed, rep, TAG_X);
    let c = 0.75_f64.sqrt();
    let mut x = Vec::with_capacity(n * t_len * 2);
    for _ in 0..n * t_len {
        let n1: f64 = StandardNormal.sample(&mut rx);
        let n2: f64 = StandardNormal.sample(&mut rx);
        x.push(n1);
        x.push(0.5 * n1 + c * n2);
    }

    let mut re = stream(cfg.seed, rep, TAG_E);
    let mut y = Vec::with_capacity(n * t_len);
    for i in 0..n {
        let base = i * t_len * 2;
        let (mut m1, mut m2) = (0.0, 0.0);
        for t in 0..t_len {
            m1 += x[base + 2 * t];
            m2 += x[base + 2 * t + 1];
        }
        m1 /= t_len as f64;
        m2 /= t_len as f64;
        let alpha = (m1 * m1 + m2 * m2) / 5.0;
        for t in 0..t_len {
            let b = model.beta(i, z[t]);
            let e = cfg.error.draw(&mut re);
            y.push(x[base + 2 * t] * b[0] + x[base + 2 * t + 1] * b[1] + alpha + e);
        }
    }

    let truth_labels: Vec<usize> = match (cfg.dgp, cfg.tau == 0.5) {
        (Dgp::Dgp2, true) => design_groups.iter().map(|&g| if g == 3 { 2 } else { 1 }).collect(),
        _ => design_groups,
    };
    let data = PanelDataset::new(
        (1..=n).map(|i| i.to_string()).collect(),
        (1..=t_len).map(|t| t as f64).collect(),
        2,
        y,
        x,
        PanelIndex::Shared(z),
    )?;
    Ok(Simulated {
        data,
        truth: GroupStructure::from_assignments(&truth_labels)?,
        model,
    })
}

/// `(1/N) Σ_i [(1/T) Σ_t ‖β̂_i(Z_t) − β_i(Z_t)‖²]^{1/2}` with `truth(i, z)`.
pub fn rmse<F>(paths: &[CoefficientPath], eval_at: &[f64], truth: F) -> Result<f64>
where
    F: Fn(usize, f64) -> Vec<f64>,
{
    if paths.is_empty() || eval_at.is_empty() {
        return Err(Error::InvalidInput("rmse needs paths and points".into()));
    }
    let mut total = 0.0;
    for (i, p) in paths.iter().enumerate() {
        let mut ss = 0.0;
        for &z in eval_at {
            let b = p
                .beta_at_point(z)
                .ok_or_else(|| Error::Alignment(format!("path {i} lacks z = {z}")))?;
            let tr = truth(i, z);
            ss += b.iter().zip(&tr).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        total += (ss / eval_at.len() as f64).sqrt();
    }
    Ok(total / paths.len() as f64)
}

/// Pooled fits over the true groups; every subject inherits its group's path.
pub fn oracle_fit(
    ds: &PanelDataset,
    truth: &GroupStructure,
    opts: &PipelineOptions,
) -> Result<(Vec<GroupFit>, Vec<CoefficientPath>)> {
    let (_, points) = pipeline::evaluation_design(ds, opts.plot_grid);
    let (fits, _) = pipeline::fit_partition(ds, truth, opts, &points)?;
    let paths = pipeline::subject_paths_from_groups(&fits, ds.n_subjects());
    Ok((fits, paths))
}

/// Bandwidth scheme of a simulation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StudyBandwidth {
    /// One cross-validation per replication: a common bandwidth minimizing
    /// the summed per-subject scores, reused by the preliminary,
    /// post-grouping and oracle fits.
    #[default]
    OncePerReplication,
    /// Whatever the pipeline options say.
    Pipeline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOptions {
    pub replications: usize,
    pub pipeline: PipelineOptions,
    pub bandwidth: StudyBandwidth,
    /// Cross-validate over a 9-point grid instead of the default 5 points.
    pub full_grid: bool,
}

impl StudyOptions {
    pub fn new(replications: usize, pipeline: PipelineOptions) -> Self {
        StudyOptions {
            replications,
            pipeline,
            bandwidth: StudyBandwidth::default(),
            full_grid: false,
        }
    }
}

pub const FULL_GRID_FACTORS: [f64; 9] = [0.5, 0.625, 0.75, 0.875, 1.0, 1.25, 1.5, 1.75, 2.0];

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub r_hat: usize,
    pub nmi: f64,
    pub purity: f64,
    pub rmse_prelim: f64,
    pub rmse_post: f64,
    pub rmse_oracle: f64,
    pub prelim_bandwidth_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

fn mean_sd(v: &[f64]) -> MeanSd {
    if v.is_empty() {
        return MeanSd {
            mean: f64::NAN,
            sd: f64::NAN,
        };
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanSd { mean, sd }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    pub config: DgpConfig,
    pub r_max: usize,
    pub records: Vec<ReplicationRecord>,
    /// Failed replications with their error message.
    pub failures: Vec<(usize, String)>,
    /// Share of completed replications choosing `R = 1..R̄`.
    pub selection_freq: Vec<f64>,
    pub nmi: MeanSd,
    pub purity: MeanSd,
    pub rmse_prelim: MeanSd,
    pub rmse_post: MeanSd,
    pub rmse_oracle: MeanSd,
}

impl SimulationReport {
    fn from_records(cfg: DgpConfig, r_max: usize, records: Vec<ReplicationRecord>, failures: Vec<(usize, String)>) -> Self {
        let m = records.len().max(1) as f64;
        let mut freq = vec![0.0; r_max];
        for r in &records {
            if r.r_hat >= 1 && r.r_hat <= r_max {
                freq[r.r_hat - 1] += 1.0 / m;
            }
        }
        let col = |f: fn(&ReplicationRecord) -> f64| mean_sd(&records.iter().map(f).collect::<Vec<_>>());
        SimulationReport {
            config: cfg,
            r_max,
            selection_freq: freq,
            nmi: col(|r| r.nmi),
            purity: col(|r| r.purity),
            rmse_prelim: col(|r| r.rmse_prelim),
            rmse_post: col(|r| r.rmse_post),
            rmse_oracle: col(|r| r.rmse_oracle),
            records,
            failures,
        }
    }

    /// Share of completed replications choosing `r`.
    pub fn fraction(&self, r: usize) -> f64 {
        if r == 0 || r > self.r_max {
            0.0
        } else {
            self.selection_freq[r - 1]
        }
    }

    pub fn failure_rate(&self) -> f64 {
        let total = self.records.len() + self.failures.len();
        if total == 0 {
            0.0
        } else {
            self.failures.len() as f64 / total as f64
        }
    }

    pub fn write_records_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "replication",
            "status",
            "r_hat",
            "nmi",
            "purity",
            "rmse_prelim",
            "rmse_post",
            "rmse_oracle",
            "prelim_bandwidth_mean",
            "error",
        ])?;
        let mut rows: Vec<(usize, Vec<String>)> = self
            .records
            .iter()
            .map(|r| {
                (
                    r.replication,
                    vec![
                        r.replication.to_string(),
                        "ok".into(),
                        r.r_hat.to_string(),
                        r.nmi.to_string(),
                        r.purity.to_string(),
                        r.rmse_prelim.to_string(),
                        r.rmse_post.to_string(),
                        r.rmse_oracle.to_string(),
                        r.prelim_bandwidth_mean.to_string(),
                        String::new(),
                    ],
                )
            })
            .collect();
        for (rep, msg) in &self.failures {
            let mut v = vec![rep.to_string(), "failed".into()];
            v.extend(std::iter::repeat_n(String::new(), 7));
            v.push(msg.clone());
            rows.push((*rep, v));
        }
        rows.sort_by_key(|r| r.0);
        for (_, r) in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aggregate table in three blocks: selection shares, membership
    /// accuracy, and RMSEs.
    pub fn write_summary_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["block", "statistic", "value", "sd"])?;
        for (k, f) in self.selection_freq.iter().enumerate() {
            w.write_record(["selection", &format!("R={}", k + 1), &(100.0 * f).to_string(), ""])?;
        }
        for (name, s) in [("nmi", &self.nmi), ("purity", &self.purity)] {
            w.write_record(["membership", name, &s.mean.to_string(), &s.sd.to_string()])?;
        }
        for (name, s) in [
            ("preliminary", &self.rmse_prelim),
            ("post_grouping", &self.rmse_post),
            ("oracle", &self.rmse_oracle),
        ] {
            w.write_record(["rmse", name, &s.mean.to_string(), &s.sd.to_string()])?;
        }
        w.write_record(["run", "completed", &self.records.len().to_string(), ""])?;
        w.write_record(["run", "failed", &self.failures.len().to_string(), ""])?;
        w.flush()?;
        Ok(())
    }

    pub fn summary_text(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:?} N={} T={} tau={} errors={} seed={}: {} completed, {} failed",
            c.dgp,
            c.n,
            c.t,
            c.tau,
            c.error.name(),
            c.seed,
            self.records.len(),
            self.failures.len()
        );
        let shares: Vec<String> = self
            .selection_freq
            .iter()
            .enumerate()
            .map(|(k, f)| format!("R={}: {:.1}%", k + 1, 100.0 * f))
            .collect();
        let _ = writeln!(s, "selection  {}", shares.join("  "));
        let _ = writeln!(
            s,
            "NMI {:.4} ({:.4})  purity {:.4} ({:.4})",
            self.nmi.mean, self.nmi.sd, self.purity.mean, self.purity.sd
        );
        let _ = writeln!(
            s,
            "RMSE preliminary {:.4} ({:.4})  post-grouping {:.4} ({:.4})  oracle {:.4} ({:.4})",
            self.rmse_prelim.mean,
            self.rmse_prelim.sd,
            self.rmse_post.mean,
            self.rmse_post.sd,
            self.rmse_oracle.mean,
            self.rmse_oracle.sd
        );
        s
    }
}

/// Pipeline options for one simulated panel.
fn replication_options(ds: &PanelDataset, tau: f64, opts: &StudyOptions) -> Result<PipelineOptions> {
    let mut p = opts.pipeline.clone();
    p.tau = tau;
    if opts.full_grid {
        let h = crate::kernel::rule_of_thumb_bandwidth(ds.shared_index().unwrap_or(ds.z_row(0)));
        let grid: Vec<f64> = FULL_GRID_FACTORS.iter().map(|f| f * h).collect();
        for policy in [&mut p.prelim_bandwidth, &mut p.post_bandwidth] {
            if let BandwidthPolicy::Cv { grid: g, .. } = policy {
                *g = grid.clone();
            }
        }
    }
    if opts.bandwidth == StudyBandwidth::OncePerReplication {
        let (hs, _) = pipeline::prelim_bandwidths(ds, tau, p.family, &p.prelim_bandwidth, PrelimCvMode::Common)?;
        p.prelim_bandwidth = BandwidthPolicy::Fixed(hs[0]);
        p.post_bandwidth = BandwidthPolicy::Fixed(hs[0]);
    }
    Ok(p)
}

/// One replication: generate, run the pipeline, score against the truth.
pub fn run_replication(cfg: &DgpConfig, rep: usize, opts: &StudyOptions) -> Result<ReplicationRecord> {
    let sim = generate_replication(cfg, rep as u64)?;
    let ds = &sim.data;
    let popts = replication_options(ds, cfg.tau, opts)?;
    let res = pipeline::run_pipeline(ds, &popts)?;
    let truth_fn = |i: usize, z: f64| sim.model.beta(i, z).to_vec();
    let rmse_prelim = rmse(&res.prelim_paths, &res.eval_at, truth_fn)?;
    let post = res.post_paths();
    let rmse_post = rmse(&post, &res.eval_at, truth_fn)?;
    let rmse_oracle = if res.structure.assignments == sim.truth.assignments {
        rmse_post
    } else {
        let (_, oracle) = oracle_fit(ds, &sim.truth, &popts)?;
        rmse(&oracle, &res.eval_at, truth_fn)?
    };
    Ok(ReplicationRecord {
        replication: rep,
        r_hat: res.selection.r_hat,
        nmi: grouping::nmi(&res.structure.assignments, &sim.truth.assignments)?,
        purity: grouping::purity(&res.structure.assignments, &sim.truth.assignments)?,
        rmse_prelim,
        rmse_post,
        rmse_oracle,
        prelim_bandwidth_mean: res.prelim_bandwidths.iter().sum::<f64>() / res.prelim_bandwidths.len() as f64,
    })
}

/// Runs `opts.replications` independent replications (in parallel) and
/// aggregates them in replication order.
pub fn run_study(cfg: &DgpConfig, opts: &StudyOptions) -> Result<SimulationReport> {
    cfg.validate()?;
    if opts.replications == 0 {
        return Err(Error::InvalidInput("at least one replication is required".into()));
    }
    let outcomes: Vec<Result<ReplicationRecord>> = (0..opts.replications)
        .into_par_iter()
        .map(|rep| run_replication(cfg, rep, opts))
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (rep, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(r) => records.push(r),
            Err(e) => failures.push((rep, e.to_string())),
        }
    }
    Ok(SimulationReport::from_records(*cfg, opts.pipeline.r_max, records, failures))
}
