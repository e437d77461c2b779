use panelqr::grouping::{agglomerate, nmi, purity, DistanceMatrix};
use panelqr::kernel::{KernelFamily, KernelSpec};
use panelqr::panelio::{load_panel_csv, normalize_index, write_panel_csv, PanelDataset, PanelIndex, PanelSchema};
use panelqr::qrcore::{oracle_enumerate, solve, DenseDesign, Design, SolveOptions, WeightedQRProblem};
use panelqr::variants::{uniform_distance_matrix, TauPath};
use proptest::prelude::*;

const TAUS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

fn qr_problem() -> impl Strategy<Value = WeightedQRProblem> {
    (3usize..=20, 1usize..=3, 0usize..5).prop_flat_map(|(n, p, k)| {
        let rows = prop::collection::vec(prop::collection::vec(-3.0f64..3.0, p - 1), n);
        let y = prop::collection::vec(-5.0f64..5.0, n);
        let w = prop::collection::vec(0.1f64..2.0, n);
        (rows, y, w).prop_map(move |(rows, y, w)| {
            let full: Vec<Vec<f64>> = rows
                .into_iter()
                .map(|r| std::iter::once(1.0).chain(r).collect())
                .collect();
            WeightedQRProblem::new(DenseDesign::from_rows(&full).unwrap(), y, w, TAUS[k]).unwrap()
        })
    })
}

fn partition(n: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=4, n)
}

/// Random symmetric dissimilarities; continuous draws make ties improbable.
fn distances() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (3usize..=9).prop_flat_map(|n| {
        prop::collection::vec(0.01f64..10.0, n * (n - 1) / 2).prop_map(move |upper| {
            let mut v = vec![0.0; n * n];
            let mut k = 0;
            for j in 0..n {
                for l in j + 1..n {
                    v[j * n + l] = upper[k];
                    v[l * n + j] = upper[k];
                    k += 1;
                }
            }
            (n, v)
        })
    })
}

/// Same partition up to label names.
fn same_partition(a: &[usize], b: &[usize]) -> bool {
    a.len() == b.len()
        && (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn solver_matches_enumeration(prob in qr_problem()) {
        let sol = solve(&prob, &SolveOptions::default()).unwrap();
        let oracle = oracle_enumerate(&prob).unwrap();
        prop_assert!((sol.objective - oracle.objective).abs() <= 1e-6 * (1.0 + oracle.objective),
            "solver {} oracle {}", sol.objective, oracle.objective);
    }

    #[test]
    fn intercept_subgradient_condition(y in prop::collection::vec(-5.0f64..5.0, 1..30),
                                       w in prop::collection::vec(0.1f64..3.0, 30),
                                       k in 0usize..5) {
        let n = y.len();
        let tau = TAUS[k];
        let w = w[..n].to_vec();
        let prob = WeightedQRProblem::new(DenseDesign::intercept(n), y.clone(), w.clone(), tau).unwrap();
        let a = solve(&prob, &SolveOptions::default()).unwrap().coefficients[0];
        let tol = 1e-6;
        let total: f64 = w.iter().sum();
        let below: f64 = y.iter().zip(&w).filter(|(v, _)| **v - a < -tol).map(|(_, w)| w).sum();
        let at: f64 = y.iter().zip(&w).filter(|(v, _)| (**v - a).abs() <= tol).map(|(_, w)| w).sum();
        prop_assert!(below <= tau * total + 1e-6);
        prop_assert!(tau * total <= below + at + 1e-6);
    }

    #[test]
    fn objective_scales_with_response(prob in qr_problem(), c in 0.1f64..10.0) {
        let mut scaled = prob.clone();
        scaled.response.iter_mut().for_each(|v| *v *= c);
        let a = solve(&prob, &SolveOptions::default()).unwrap().objective;
        let b = solve(&scaled, &SolveOptions::default()).unwrap().objective;
        prop_assert!((b - c * a).abs() <= 1e-6 * (1.0 + c * a));
    }

    #[test]
    fn zero_weight_rows_do_not_matter(prob in qr_problem(), extra in prop::collection::vec((-3.0f64..3.0, -5.0f64..5.0), 1..5)) {
        let p = prob.design.ncols();
        let n = prob.design.nrows();
        let mut rows: Vec<Vec<f64>> = (0..n).map(|i| prob.design.row(i).to_vec()).collect();
        let mut y = prob.response.clone();
        let mut w = prob.weights.clone();
        for (x, v) in extra {
            let mut r = vec![1.0; p];
            r.iter_mut().skip(1).for_each(|c| *c = x);
            rows.push(r);
            y.push(v);
            w.push(0.0);
        }
        let padded = WeightedQRProblem::new(DenseDesign::from_rows(&rows).unwrap(), y, w, prob.tau).unwrap();
        let a = solve(&prob, &SolveOptions::default()).unwrap().objective;
        let b = solve(&padded, &SolveOptions::default()).unwrap().objective;
        prop_assert!((a - b).abs() <= 1e-6 * (1.0 + a));
    }

    #[test]
    fn kernel_is_nonnegative_and_symmetric(u in -6.0f64..6.0, h in 0.01f64..2.0, z in 0.0f64..1.0, epa in any::<bool>()) {
        let fam = if epa { KernelFamily::Epanechnikov } else { KernelFamily::Gaussian };
        let k = KernelSpec::new(fam, h).unwrap();
        let a = k.weight(z + u * h, z);
        prop_assert!(a >= 0.0);
        prop_assert!((a - k.weight(z - u * h, z)).abs() < 1e-15);
    }

    #[test]
    fn metric_bounds_and_symmetry((a, b) in (2usize..12).prop_flat_map(|n| (partition(n), partition(n)))) {
        let ab = nmi(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - nmi(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(purity(&a, &b).unwrap() >= 1.0 / a.len() as f64);
        prop_assert!((nmi(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clustering_is_permutation_consistent((n, v) in distances(), seed in any::<u64>(), r in 1usize..4) {
        let r = r.min(n);
        let dm = DistanceMatrix::new(n, v.clone()).unwrap();
        // deterministic shuffle from the seed
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let mut pv = vec![0.0; n * n];
        for j in 0..n {
            for k in 0..n {
                pv[j * n + k] = v[perm[j] * n + perm[k]];
            }
        }
        let base = agglomerate(&dm, r).unwrap();
        let permuted = agglomerate(&DistanceMatrix::new(n, pv).unwrap(), r).unwrap();
        let mapped: Vec<usize> = (0..n).map(|j| base.assignments[perm[j]]).collect();
        prop_assert!(same_partition(&mapped, &permuted.assignments));
        if r > 1 {
            let coarser = base.cut(r - 1).unwrap();
            prop_assert_eq!(coarser.n_groups + 1, base.n_groups);
            // the coarser cut merges exactly two groups of the finer one
            let finer_groups = base.groups();
            let merged = finer_groups
                .iter()
                .filter(|g| g.iter().any(|&i| coarser.members(coarser.assignments[i]).len() > g.len()))
                .count();
            prop_assert_eq!(merged, 2);
        }
    }

    #[test]
    fn uniform_distance_is_a_metric(vals in prop::collection::vec(-2.0f64..2.0, 3 * 5 * 2)) {
        let grid = vec![0.05, 0.2, 0.5, 0.8, 0.95];
        let paths: Vec<TauPath> = vals
            .chunks(10)
            .map(|c| TauPath { tau_grid: grid.clone(), dim_x: 2, beta_star: c.to_vec(), alpha_star: vec![0.0; 5] })
            .collect();
        let dm = uniform_distance_matrix(&paths).unwrap();
        for j in 0..3 {
            prop_assert_eq!(dm.get(j, j), 0.0);
            for k in 0..3 {
                prop_assert_eq!(dm.get(j, k), dm.get(k, j));
                for l in 0..3 {
                    prop_assert!(dm.get(j, l) <= dm.get(j, k) + dm.get(k, l) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn panel_csv_round_trip(n in 1usize..4, t in 2usize..6, vals in prop::collection::vec(-1e6f64..1e6, 4 * 6 * 3)) {
        let d = 2;
        let y = vals[..n * t].to_vec();
        let x = vals[n * t..n * t * 3].to_vec();
        let z: Vec<f64> = (0..t).map(|k| (k as f64 + 0.5) / t as f64).collect();
        let ds = PanelDataset::new(
            (1..=n).map(|i| format!("u{i}")).collect(),
            (1..=t).map(|v| v as f64).collect(),
            d, y, x, PanelIndex::Shared(z),
        ).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        write_panel_csv(&ds, &path).unwrap();
        let back = load_panel_csv(&path, &PanelSchema::canonical(d)).unwrap();
        prop_assert_eq!(&back, &ds);
        let once = normalize_index(&ds).unwrap();
        let twice = normalize_index(&once).unwrap();
        prop_assert_eq!(twice.index(), once.index());
    }
}
