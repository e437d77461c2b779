use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Value};

use panelqr::grouping::{DistanceMatrix, GroupNumberSelection, GroupStructure, OmegaPolicy};
use panelqr::kernel::KernelFamily;
use panelqr::panelio::{self, PanelDataset, QuantileSpec};
use panelqr::pipeline::{self, BandwidthPolicy, PipelineOptions, PrelimCvMode};
use panelqr::postgroup::InferenceOptions;
use panelqr::simlab::{self, DgpConfig, StudyBandwidth, StudyOptions};
use panelqr::variants;

use crate::config::{self, pick, pick_opt, BandwidthArg, ConfigFile, IndexArg};
use crate::{usage, DataArgs, SimArgs};

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Resolution failures are usage errors.
fn u<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| usage(format!("{e:#}")))
}

fn flag(cli: bool, cfg: &ConfigFile, key: &str) -> Result<bool> {
    Ok(cli || u(cfg.flag(key))?)
}

fn tau_list(raw: &str) -> Result<Vec<f64>> {
    let taus = config::parse_list(raw).map_err(usage)?;
    if taus.is_empty() || taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(usage(format!("tau list `{raw}` must hold levels in (0, 1)")));
    }
    Ok(taus)
}

fn policy(b: BandwidthArg, folds: Option<usize>) -> BandwidthPolicy {
    match b {
        BandwidthArg::Cv => BandwidthPolicy::Cv { grid: Vec::new(), folds },
        BandwidthArg::Fixed(h) => BandwidthPolicy::Fixed(h),
    }
}

/// Output directory for level `tau` (a subdirectory when several levels run).
fn level_dir(out: &Path, tau: f64, many: bool) -> Result<PathBuf> {
    let dir = if many { out.join(format!("tau_{tau}")) } else { out.to_path_buf() };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_grouping(
    dir: &Path,
    labels: &[String],
    distances: &DistanceMatrix,
    selection: &GroupNumberSelection,
    structure: &GroupStructure,
) -> Result<()> {
    distances.write_csv(labels, dir.join("distances.csv"))?;
    structure.write_dendrogram_csv(dir.join("dendrogram.csv"))?;
    selection.write_csv(dir.join("group_number.csv"))?;
    structure.write_csv(labels, dir.join("membership.csv"))?;
    Ok(())
}

struct Resolved {
    input: PathBuf,
    out: PathBuf,
    schema_raw: String,
    index: IndexArg,
    taus: Vec<f64>,
    family: KernelFamily,
    bandwidth: BandwidthArg,
    post_bandwidth: BandwidthArg,
    common: bool,
    folds: Option<usize>,
    rmax: usize,
    omega: OmegaPolicy,
    alpha: f64,
    ci: bool,
    jackknife: bool,
    seed: u64,
    plot_grid: usize,
    uniform_tau: bool,
    tau_grid: Option<Vec<f64>>,
}

fn resolve_data(a: &DataArgs, cfg: &ConfigFile) -> Result<Resolved> {
    let input = u(pick_opt(a.input.clone(), cfg, "input"))?.ok_or_else(|| usage("--input is required"))?;
    let index = u(pick(a.index, cfg, "index", IndexArg::Z))?;
    let schema_raw = u(pick(a.schema.clone(), cfg, "schema", "y=y,x=x1,z=z,id=id,t=time".to_string()))?;
    let taus = tau_list(&u(pick(a.tau.clone(), cfg, "tau", "0.5".to_string()))?)?;
    let family: KernelFamily = u(pick(a.kernel.clone(), cfg, "kernel", "gaussian".to_string()))?
        .parse()
        .map_err(|e: panelqr::Error| usage(e.to_string()))?;
    let uniform_tau = flag(a.uniform_tau, cfg, "uniform-tau")?;
    let omega: OmegaPolicy = match u(pick_opt(a.omega.clone(), cfg, "omega"))? {
        Some(s) => s.parse().map_err(|e: panelqr::Error| usage(e.to_string()))?,
        None if uniform_tau => variants::DEFAULT_UNIFORM_OMEGA,
        None => OmegaPolicy::default(),
    };
    let alpha = u(pick(a.alpha, cfg, "alpha", 0.05))?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(usage(format!("alpha = {alpha} outside (0, 1)")));
    }
    let rmax = u(pick(a.rmax, cfg, "rmax", 5))?;
    if rmax < 2 {
        return Err(usage("--rmax must be at least 2"));
    }
    let tau_grid = match u(pick_opt(a.tau_grid.clone(), cfg, "tau-grid"))? {
        Some(s) => Some(config::parse_list(&s).map_err(usage)?),
        None => None,
    };
    Ok(Resolved {
        input,
        out: u(pick(a.out.clone(), cfg, "out", PathBuf::from("panelqr_out")))?,
        schema_raw,
        index,
        taus,
        family,
        bandwidth: u(pick(a.bandwidth, cfg, "bandwidth", BandwidthArg::Cv))?,
        post_bandwidth: u(pick(a.post_bandwidth, cfg, "post-bandwidth", BandwidthArg::Cv))?,
        common: flag(a.common_bandwidth, cfg, "common-bandwidth")?,
        folds: u(pick_opt(a.folds, cfg, "folds"))?,
        rmax,
        omega,
        alpha,
        ci: !flag(a.no_ci, cfg, "no-ci")?,
        jackknife: flag(a.jackknife, cfg, "jackknife")?,
        seed: u(pick(a.seed, cfg, "seed", 0))?,
        plot_grid: u(pick(a.plot_grid, cfg, "plot-grid", 0))?,
        uniform_tau,
        tau_grid,
    })
}

fn load(r: &Resolved) -> Result<PanelDataset> {
    let schema = config::parse_schema(&r.schema_raw, r.index).map_err(usage)?;
    let probe = panelio::load_panel_csv(&r.input, &schema)?;
    // the estimators work on [0, 1]; rescale other index ranges
    let outside = (0..probe.n_subjects())
        .flat_map(|i| probe.z_row(i).iter().copied())
        .any(|z| !(0.0..=1.0).contains(&z));
    if outside {
        return Ok(panelio::normalize_index(&probe)?);
    }
    Ok(probe)
}

fn manifest_base(command: &str, r: &Resolved, ds: &PanelDataset) -> Value {
    let scaling = ds.scaling().map(|s| json!({ "lo": s.lo, "hi": s.hi }));
    json!({
        "command": command,
        "version": VERSION,
        "input": r.input.display().to_string(),
        "schema": r.schema_raw,
        "index": r.index.to_string(),
        "index_scaling": scaling,
        "n_subjects": ds.n_subjects(),
        "n_times": ds.n_times(),
        "dim_x": ds.dim_x(),
        "kernel": r.family.name(),
        "bandwidth": r.bandwidth.to_string(),
        "post_bandwidth": r.post_bandwidth.to_string(),
        "common_bandwidth": r.common,
        "folds": r.folds,
        "rmax": r.rmax,
        "omega": r.omega.to_string(),
        "alpha": r.alpha,
        "intervals": r.ci,
        "jackknife": r.jackknife,
        "seed": r.seed,
        "plot_grid": r.plot_grid,
        "uniform_tau": r.uniform_tau,
    })
}

pub fn estimate(a: &DataArgs, cfg: &ConfigFile, full: bool) -> Result<()> {
    let r = resolve_data(a, cfg)?;
    let ds = load(&r)?;
    let command = if full { "estimate" } else { "group-only" };
    fs::create_dir_all(&r.out).with_context(|| format!("creating {}", r.out.display()))?;
    let mut manifest = manifest_base(command, &r, &ds);
    if r.uniform_tau {
        let out = uniform(&r, &ds)?;
        manifest["results"] = out;
    } else {
        let many = r.taus.len() > 1;
        let mut results = Vec::new();
        for &tau in &r.taus {
            let dir = level_dir(&r.out, tau, many)?;
            let mut v = estimate_level(&r, &ds, tau, &dir, full)?;
            v["directory"] = json!(if many { format!("tau_{tau}") } else { ".".to_string() });
            results.push(v);
        }
        manifest["results"] = Value::Array(results);
    }
    write_json(&r.out.join("manifest.json"), &manifest)
}

fn estimate_level(r: &Resolved, ds: &PanelDataset, tau: f64, dir: &Path, full: bool) -> Result<Value> {
    let opts = PipelineOptions {
        tau,
        family: r.family,
        prelim_bandwidth: policy(r.bandwidth, r.folds),
        prelim_cv_mode: if r.common { PrelimCvMode::Common } else { PrelimCvMode::PerSubject },
        post_bandwidth: policy(r.post_bandwidth, r.folds),
        r_max: r.rmax,
        omega: r.omega,
        plot_grid: r.plot_grid,
        inference: r.ci.then(|| InferenceOptions {
            alpha: r.alpha,
            jackknife: r.jackknife,
            ..InferenceOptions::default()
        }),
    };
    let res = if full {
        pipeline::run_pipeline(ds, &opts)?
    } else {
        pipeline::run_grouping(ds, &opts)?
    };
    let labels = ds.subject_labels();
    let paths_dir = dir.join("paths");
    fs::create_dir_all(&paths_dir)?;
    for (i, p) in res.prelim_paths.iter().enumerate() {
        p.write_csv(paths_dir.join(format!("subject_{:04}.csv", i + 1)))?;
    }
    let mut bw = csv::Writer::from_path(dir.join("bandwidths.csv"))?;
    bw.write_record(["subject_label", "bandwidth"])?;
    for (l, h) in labels.iter().zip(&res.prelim_bandwidths) {
        bw.write_record([l.clone(), h.to_string()])?;
    }
    bw.flush()?;
    write_grouping(dir, labels, &res.distances, &res.selection, &res.structure)?;

    let mut groups = Vec::new();
    if full {
        let gdir = dir.join("groups");
        fs::create_dir_all(&gdir)?;
        for f in &res.group_fits {
            f.write_csv(gdir.join(format!("group_{}.csv", f.group_id)))?;
            let failures: Vec<Value> = f
                .inference_failures
                .iter()
                .map(|(z, why)| json!({ "z": z, "reason": why }))
                .collect();
            groups.push(json!({
                "group": f.group_id,
                "size": f.members.len(),
                "bandwidth_h1": f.bandwidth_h1,
                "interval_bandwidth": f.ci_bandwidth,
                "inference_failures": failures,
            }));
        }
    }
    let mut summary = format!(
        "tau = {tau}\nselected R = {}{}\nD(R): {}\n",
        res.selection.r_hat,
        if res.selection.degenerate { " (all paths coincide)" } else { "" },
        res.selection
            .scores
            .iter()
            .map(|d| format!("{d:.6}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    for (g, members) in res.structure.groups().iter().enumerate() {
        let names: Vec<&str> = members.iter().map(|&i| labels[i].as_str()).collect();
        summary.push_str(&format!("group {}: {}\n", g + 1, names.join(" ")));
    }
    fs::write(dir.join("summary.txt"), summary)?;
    Ok(json!({
        "tau": tau,
        "r_hat": res.selection.r_hat,
        "omega_value": res.selection.omega,
        "degenerate": res.selection.degenerate,
        "groups": groups,
    }))
}

fn uniform(r: &Resolved, ds: &PanelDataset) -> Result<Value> {
    let mut spec = QuantileSpec::new(r.taus[0])?;
    if let Some(g) = &r.tau_grid {
        spec = spec.with_grid(g.clone())?;
    }
    let paths = variants::fit_linear_per_tau(ds, &spec)?;
    let (selection, structure, dm) = variants::select_group_number_uniform(&paths, r.rmax, r.omega)?;
    let labels = ds.subject_labels();
    let pdir = r.out.join("tau_paths");
    fs::create_dir_all(&pdir)?;
    for (i, p) in paths.iter().enumerate() {
        p.write_csv(pdir.join(format!("subject_{:04}.csv", i + 1)))?;
    }
    write_grouping(&r.out, labels, &dm, &selection, &structure)?;
    Ok(json!({
        "tau_grid": spec.grid(),
        "r_hat": selection.r_hat,
        "omega_value": selection.omega,
        "degenerate": selection.degenerate,
    }))
}

pub fn simulate(a: &SimArgs, cfg: &ConfigFile) -> Result<()> {
    let dgp: simlab::Dgp = u(pick(a.dgp.clone(), cfg, "dgp", "dgp1".to_string()))?
        .parse()
        .map_err(|e: panelqr::Error| usage(e.to_string()))?;
    let errors: simlab::ErrorDist = u(pick(a.errors.clone(), cfg, "errors", "normal".to_string()))?
        .parse()
        .map_err(|e: panelqr::Error| usage(e.to_string()))?;
    let family: KernelFamily = u(pick(a.kernel.clone(), cfg, "kernel", "gaussian".to_string()))?
        .parse()
        .map_err(|e: panelqr::Error| usage(e.to_string()))?;
    let omega: OmegaPolicy = match u(pick_opt(a.omega.clone(), cfg, "omega"))? {
        Some(s) => s.parse().map_err(|e: panelqr::Error| usage(e.to_string()))?,
        None => OmegaPolicy::default(),
    };
    let n = u(pick(a.n, cfg, "n", 50))?;
    let t = u(pick(a.t, cfg, "t", 100))?;
    let reps = u(pick(a.reps, cfg, "reps", 200))?;
    let seed = u(pick(a.seed, cfg, "seed", 1))?;
    let rmax = u(pick(a.rmax, cfg, "rmax", 5))?;
    if rmax < 2 {
        return Err(usage("--rmax must be at least 2"));
    }
    if reps == 0 {
        return Err(usage("--reps must be at least 1"));
    }
    let taus = tau_list(&u(pick(a.tau.clone(), cfg, "tau", "0.5".to_string()))?)?;
    let full_grid = flag(a.full_grid, cfg, "full-grid")?;
    let per_stage = flag(a.per_stage_cv, cfg, "per-stage-cv")?;
    let out = u(pick(a.out.clone(), cfg, "out", PathBuf::from("panelqr_sim")))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let many = taus.len() > 1;
    let mut results = Vec::new();
    for &tau in &taus {
        let c = DgpConfig::new(dgp, n, t, tau, errors, seed).map_err(|e| usage(e.to_string()))?;
        let mut opts = StudyOptions::new(
            reps,
            PipelineOptions {
                tau,
                family,
                r_max: rmax,
                omega,
                ..PipelineOptions::default()
            },
        );
        opts.full_grid = full_grid;
        if per_stage {
            opts.bandwidth = StudyBandwidth::Pipeline;
        }
        let report = simlab::run_study(&c, &opts)?;
        let dir = level_dir(&out, tau, many)?;
        report.write_records_csv(dir.join("records.csv"))?;
        report.write_summary_csv(dir.join("summary.csv"))?;
        let text = report.summary_text();
        fs::write(dir.join("summary.txt"), &text)?;
        print!("{text}");
        results.push(json!({
            "tau": tau,
            "completed": report.records.len(),
            "failed": report.failures.len(),
            "selection_freq": report.selection_freq,
        }));
    }
    let manifest = json!({
        "command": "simulate",
        "version": VERSION,
        "dgp": format!("{dgp:?}"),
        "n": n,
        "t": t,
        "errors": errors.name(),
        "reps": reps,
        "seed": seed,
        "rmax": rmax,
        "omega": omega.to_string(),
        "kernel": family.name(),
        "full_grid": full_grid,
        "per_stage_cv": per_stage,
        "results": results,
    });
    write_json(&out.join("manifest.json"), &manifest)
}
