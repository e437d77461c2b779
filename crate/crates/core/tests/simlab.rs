use panelqr::pipeline::{fit_partition, evaluation_design, subject_paths_from_groups, BandwidthPolicy, PipelineOptions};
use panelqr::prelim::CoefficientPath;
use panelqr::simlab::{
    generate, oracle_fit, rmse, run_study, stream, Dgp, DgpConfig, ErrorDist, StudyOptions,
};

fn path(points: &[f64], beta: &[f64]) -> CoefficientPath {
    let n = points.len();
    CoefficientPath {
        eval_points: points.to_vec(),
        dim_x: beta.len() / n,
        beta: beta.to_vec(),
        beta_deriv: vec![0.0; beta.len()],
        alpha: vec![0.0; n],
        alpha_deriv: vec![0.0; n],
        objective: vec![0.0; n],
        bandwidth: 0.1,
        tau: 0.5,
    }
}

fn small_opts() -> PipelineOptions {
    PipelineOptions {
        prelim_bandwidth: BandwidthPolicy::Fixed(0.2),
        post_bandwidth: BandwidthPolicy::Fixed(0.2),
        ..PipelineOptions::default()
    }
}

#[test]
fn rmse_examples() {
    let pts = [0.2, 0.7];
    let truth = |_: usize, z: f64| vec![z, 1.0 - z];
    let exact = [path(&pts, &[0.2, 0.8, 0.7, 0.3]), path(&pts, &[0.2, 0.8, 0.7, 0.3])];
    assert!(rmse(&exact, &pts, truth).unwrap() < 1e-15);

    // error (0.3, 0.4) everywhere has norm 0.5
    let shifted = [path(&pts, &[0.5, 1.2, 1.0, 0.7])];
    assert!((rmse(&shifted, &pts, truth).unwrap() - 0.5).abs() < 1e-12);

    // subject 1 errors (1,0),(0,0): sqrt(1/2); subject 2 errors (0,2),(0,0): sqrt(2)
    let hand = [path(&pts, &[1.2, 0.8, 0.7, 0.3]), path(&pts, &[0.2, 2.8, 0.7, 0.3])];
    let want = 0.5 * (0.5f64.sqrt() + 2f64.sqrt());
    assert!((rmse(&hand, &pts, truth).unwrap() - want).abs() < 1e-12);
}

#[test]
fn error_moments() {
    let m = 200_000;
    for (dist, var) in [(ErrorDist::StdNormal, 1.0), (ErrorDist::T5, 5.0 / 3.0), (ErrorDist::ScaledChi2, 0.96)] {
        let mut rng = stream(7, 0, 9);
        let v: Vec<f64> = (0..m).map(|_| dist.draw(&mut rng)).collect();
        let mean = v.iter().sum::<f64>() / m as f64;
        let s2 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        assert!(mean.abs() < 0.02, "{dist:?} mean {mean}");
        assert!((s2 - var).abs() < 0.05 * var, "{dist:?} variance {s2}");
    }
}

#[test]
fn covariates_are_correlated_one_half() {
    let cfg = DgpConfig::new(Dgp::Dgp1, 50, 100, 0.5, ErrorDist::StdNormal, 3).unwrap();
    let ds = generate(&cfg).unwrap().data;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for i in 0..ds.n_subjects() {
        for t in 0..ds.n_times() {
            a.push(ds.x(i, t)[0]);
            b.push(ds.x(i, t)[1]);
        }
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    let r = cov / (va * vb).sqrt();
    assert!((r - 0.5).abs() < 3.0 / n.sqrt(), "corr {r}");
}

#[test]
fn oracle_on_estimated_partition_is_post_grouping() {
    let cfg = DgpConfig::new(Dgp::Dgp1, 20, 40, 0.5, ErrorDist::StdNormal, 5).unwrap();
    let sim = generate(&cfg).unwrap();
    let opts = small_opts();
    let (_, oracle) = oracle_fit(&sim.data, &sim.truth, &opts).unwrap();
    let (_, points) = evaluation_design(&sim.data, 0);
    let (fits, _) = fit_partition(&sim.data, &sim.truth, &opts, &points).unwrap();
    assert_eq!(oracle, subject_paths_from_groups(&fits, 20));
}

#[test]
fn single_replication_report() {
    let cfg = DgpConfig::new(Dgp::Dgp1, 12, 40, 0.5, ErrorDist::StdNormal, 11).unwrap();
    let mut opts = StudyOptions::new(1, small_opts());
    opts.bandwidth = panelqr::simlab::StudyBandwidth::Pipeline;
    let rep = run_study(&cfg, &opts).unwrap();
    assert_eq!(rep.records.len() + rep.failures.len(), 1);
    if let Some(r) = rep.records.first() {
        assert_eq!(rep.nmi.mean, r.nmi);
        assert_eq!(rep.nmi.sd, 0.0);
        assert_eq!(rep.fraction(r.r_hat), 1.0);
        assert_eq!(rep.selection_freq.iter().sum::<f64>(), 1.0);
    }
}

#[test]
fn studies_are_reproducible() {
    let cfg = DgpConfig::new(Dgp::Dgp2, 12, 40, 0.25, ErrorDist::T5, 13).unwrap();
    let mut opts = StudyOptions::new(3, small_opts());
    opts.bandwidth = panelqr::simlab::StudyBandwidth::Pipeline;
    let a = run_study(&cfg, &opts).unwrap();
    let b = run_study(&cfg, &opts).unwrap();
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    let dir = tempfile::tempdir().unwrap();
    a.write_records_csv(dir.path().join("a.csv")).unwrap();
    b.write_records_csv(dir.path().join("b.csv")).unwrap();
    assert_eq!(std::fs::read(dir.path().join("a.csv")).unwrap(), std::fs::read(dir.path().join("b.csv")).unwrap());
}
