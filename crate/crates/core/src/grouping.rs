//! Distances between coefficient paths, complete-linkage clustering, the
//! ratio rule for the number of groups, and partition-agreement metrics.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::prelim::CoefficientPath;

/// Symmetric nonnegative dissimilarities with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    /// Row-major `n × n` values; checked for symmetry, sign and zero diagonal.
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::InvalidInput(format!("{} values for a {n}×{n} matrix", values.len())));
        }
        for j in 0..n {
            if values[j * n + j] != 0.0 {
                return Err(Error::InvalidInput(format!("nonzero diagonal at {j}")));
            }
            for k in 0..j {
                let v = values[j * n + k];
                if !(v >= 0.0) || !v.is_finite() || v != values[k * n + j] {
                    return Err(Error::InvalidInput(format!("entry ({j}, {k}) is not a symmetric distance")));
                }
            }
        }
        Ok(DistanceMatrix { n, values })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.values[j * self.n + k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn write_csv(&self, labels: &[String], path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["subject".to_string()];
        header.extend(labels.iter().cloned());
        w.write_record(&header)?;
        for j in 0..self.n {
            let mut rec = vec![labels[j].clone()];
            rec.extend((0..self.n).map(|k| self.get(j, k).to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Positions of each `z` in every path; alignment error if any is missing.
fn aligned_positions(paths: &[CoefficientPath], eval_at: &[f64]) -> Result<Vec<Vec<usize>>> {
    let d = paths.first().map(|p| p.dim_x).unwrap_or(0);
    paths
        .iter()
        .enumerate()
        .map(|(j, p)| {
            if p.dim_x != d {
                return Err(Error::Alignment(format!("path {j} has dimension {} instead of {d}", p.dim_x)));
            }
            eval_at
                .iter()
                .map(|&z| {
                    p.position(z)
                        .ok_or_else(|| Error::Alignment(format!("path {j} is not evaluated at z = {z}")))
                })
                .collect()
        })
        .collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `Δ̂(j,k) = (1/T) Σ_t ‖β̂_j(Z_t) − β̂_k(Z_t)‖` over the points in `eval_at`
/// (repeats count with their multiplicity).
pub fn distance_matrix(paths: &[CoefficientPath], eval_at: &[f64]) -> Result<DistanceMatrix> {
    if eval_at.is_empty() {
        return Err(Error::Alignment("no evaluation points for distances".into()));
    }
    let pos = aligned_positions(paths, eval_at)?;
    let n = paths.len();
    let t_len = eval_at.len() as f64;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            (0..n)
                .map(|k| {
                    if j == k {
                        return 0.0;
                    }
                    let (a, b) = if j < k { (j, k) } else { (k, j) };
                    let s: f64 = (0..eval_at.len())
                        .map(|t| euclid(paths[a].beta_at(pos[a][t]), paths[b].beta_at(pos[b][t])))
                        .sum();
                    s / t_len
                })
                .collect()
        })
        .collect();
    DistanceMatrix::new(n, rows.concat())
}

/// One agglomeration step. Clusters are named by their smallest member.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

/// A partition into `1..=n_groups` plus the full dendrogram it was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStructure {
    pub assignments: Vec<usize>,
    pub n_groups: usize,
    pub merge_history: Vec<Merge>,
}

impl GroupStructure {
    /// A partition without merge history (e.g. a known truth).
    pub fn from_assignments(assignments: &[usize]) -> Result<Self> {
        let a = renumber(assignments);
        let r = a.iter().copied().max().unwrap_or(0);
        Ok(GroupStructure {
            assignments: a,
            n_groups: r,
            merge_history: Vec::new(),
        })
    }

    pub fn members(&self, group: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == group).collect()
    }

    pub fn groups(&self) -> Vec<Vec<usize>> {
        (1..=self.n_groups).map(|g| self.members(g)).collect()
    }

    /// Re-cut the stored dendrogram at `r` clusters.
    pub fn cut(&self, r: usize) -> Result<GroupStructure> {
        let n = self.assignments.len();
        if self.merge_history.len() + 1 != n {
            return Err(Error::InvalidInput("no full merge history to cut".into()));
        }
        if r == 0 || r > n {
            return Err(Error::InvalidInput(format!("cannot cut {n} subjects into {r} groups")));
        }
        Ok(GroupStructure {
            assignments: cut_history(n, &self.merge_history, r),
            n_groups: r,
            merge_history: self.merge_history.clone(),
        })
    }

    pub fn write_csv(&self, labels: &[String], path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["subject_label", "group_id"])?;
        for (l, g) in labels.iter().zip(&self.assignments) {
            w.write_record([l.clone(), g.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Merge list with 1-based subject indices naming the clusters.
    pub fn write_dendrogram_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "a", "b", "distance"])?;
        for (s, m) in self.merge_history.iter().enumerate() {
            w.write_record([
                (s + 1).to_string(),
                (m.a + 1).to_string(),
                (m.b + 1).to_string(),
                m.distance.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Relabels arbitrary group ids to `1..=R` ordered by smallest member.
fn renumber(labels: &[usize]) -> Vec<usize> {
    let mut map: Vec<(usize, usize)> = Vec::new();
    labels
        .iter()
        .map(|l| match map.iter().find(|(k, _)| k == l) {
            Some(&(_, v)) => v,
            None => {
                map.push((*l, map.len() + 1));
                map.len()
            }
        })
        .collect()
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn cut_history(n: usize, history: &[Merge], r: usize) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    for m in &history[..n - r] {
        let ra = find(&mut parent, m.a);
        let rb = find(&mut parent, m.b);
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    renumber(&roots)
}

/// Complete-linkage agglomeration from singletons. The full dendrogram is
/// always recorded; the returned partition is its cut at `stop_at` clusters.
/// Equal linkage distances go to the pair with the lexicographically smallest
/// `(min member of a, min member of b)`.
pub fn agglomerate(dm: &DistanceMatrix, stop_at: usize) -> Result<GroupStructure> {
    let n = dm.len();
    if stop_at == 0 || stop_at > n {
        return Err(Error::InvalidInput(format!("cannot form {stop_at} clusters from {n} subjects")));
    }
    // active clusters keyed by smallest member, kept sorted
    let mut active: Vec<usize> = (0..n).collect();
    let mut link = dm.values().to_vec();
    let mut history = Vec::with_capacity(n.saturating_sub(1));
    while active.len() > 1 {
        let mut best: Option<(usize, usize, f64)> = None;
        for (ia, &a) in active.iter().enumerate() {
            for &b in &active[ia + 1..] {
                let v = link[a * n + b];
                if best.is_none_or(|(_, _, bv)| v < bv) {
                    best = Some((a, b, v));
                }
            }
        }
        let (a, b, v) = best.expect("at least two clusters");
        for &c in &active {
            if c != a && c != b {
                let m = link[a * n + c].max(link[b * n + c]);
                link[a * n + c] = m;
                link[c * n + a] = m;
            }
        }
        active.retain(|&c| c != b);
        history.push(Merge { a, b, distance: v });
    }
    Ok(GroupStructure {
        assignments: cut_history(n, &history, stop_at),
        n_groups: stop_at,
        merge_history: history,
    })
}

/// Average within-group deviation
/// `D(R) = (1/(T R)) Σ_r (1/|G_r|) Σ_{j∈G_r} Σ_t ‖β̂_j(Z_t) − β̄_r(Z_t)‖`.
pub fn deviation_score(paths: &[CoefficientPath], assignments: &[usize], eval_at: &[f64]) -> Result<f64> {
    if paths.len() != assignments.len() {
        return Err(Error::Alignment(format!(
            "{} paths but {} assignments",
            paths.len(),
            assignments.len()
        )));
    }
    let pos = aligned_positions(paths, eval_at)?;
    let r = assignments.iter().copied().max().unwrap_or(0);
    let d = paths.first().map(|p| p.dim_x).unwrap_or(0);
    let mut total = 0.0;
    let mut mean = vec![0.0; d];
    for g in 1..=r {
        let members: Vec<usize> = (0..paths.len()).filter(|&i| assignments[i] == g).collect();
        if members.is_empty() {
            continue;
        }
        let mut s = 0.0;
        for t in 0..eval_at.len() {
            mean.iter_mut().for_each(|v| *v = 0.0);
            for &j in &members {
                for (m, b) in mean.iter_mut().zip(paths[j].beta_at(pos[j][t])) {
                    *m += b;
                }
            }
            mean.iter_mut().for_each(|v| *v /= members.len() as f64);
            for &j in &members {
                s += euclid(paths[j].beta_at(pos[j][t]), &mean);
            }
        }
        total += s / members.len() as f64;
    }
    Ok(total / (eval_at.len() as f64 * r as f64))
}

/// Threshold `ω` below which `D(R)` is treated as zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OmegaPolicy {
    /// `ω = factor · D(1)`.
    Relative(f64),
    Absolute(f64),
    /// `ω = factor · median_j Δ̂_(k)(j)`, where `Δ̂_(k)(j)` is the distance
    /// from subject `j` to its `k`-th nearest neighbour and `k = ⌈N/(2R̄)⌉`.
    /// With `k` proportional to `N` this is a fixed within-group quantile of
    /// the preliminary estimation noise, so it does not drift as `N` grows.
    Neighbour(f64),
}

pub const DEFAULT_NEIGHBOUR_FACTOR: f64 = 0.92;

impl Default for OmegaPolicy {
    fn default() -> Self {
        OmegaPolicy::Neighbour(DEFAULT_NEIGHBOUR_FACTOR)
    }
}

impl OmegaPolicy {
    /// Threshold value for scores `D(1..R̄)` computed from `dm`.
    pub fn threshold(&self, scores: &[f64], dm: &DistanceMatrix) -> f64 {
        match *self {
            OmegaPolicy::Relative(f) => f * scores.first().copied().unwrap_or(0.0),
            OmegaPolicy::Absolute(v) => v,
            OmegaPolicy::Neighbour(f) => f * median_kth_nearest_distance(dm, neighbour_rank(dm.len(), scores.len())),
        }
    }
}

/// `⌈n/(2 r_max)⌉`, kept within `1..n`.
pub fn neighbour_rank(n: usize, r_max: usize) -> usize {
    n.div_ceil(2 * r_max.max(1)).clamp(1, n.saturating_sub(1).max(1))
}

/// Median over subjects of the distance to the `k`-th nearest other subject.
pub fn median_kth_nearest_distance(dm: &DistanceMatrix, k: usize) -> f64 {
    let n = dm.len();
    if n < 2 {
        return 0.0;
    }
    let k = k.clamp(1, n - 1);
    let mut nn: Vec<f64> = (0..n)
        .map(|j| {
            let mut d: Vec<f64> = (0..n).filter(|&l| l != j).map(|l| dm.get(j, l)).collect();
            d.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            d[k - 1]
        })
        .collect();
    nn.sort_by(|a, b| a.total_cmp(b));
    if n % 2 == 1 {
        nn[n / 2]
    } else {
        0.5 * (nn[n / 2 - 1] + nn[n / 2])
    }
}

impl std::str::FromStr for OmegaPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("omega policy `{s}` is not rel:<v>, abs:<v> or nn:<v>"));
        let (kind, v) = s.split_once(':').ok_or_else(bad)?;
        let v: f64 = v.trim().parse().map_err(|_| bad())?;
        if !(v >= 0.0) || !v.is_finite() {
            return Err(bad());
        }
        match kind.trim() {
            "rel" => Ok(OmegaPolicy::Relative(v)),
            "abs" => Ok(OmegaPolicy::Absolute(v)),
            "nn" => Ok(OmegaPolicy::Neighbour(v)),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for OmegaPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OmegaPolicy::Relative(v) => write!(f, "rel:{v}"),
            OmegaPolicy::Absolute(v) => write!(f, "abs:{v}"),
            OmegaPolicy::Neighbour(v) => write!(f, "nn:{v}"),
        }
    }
}

/// Outcome of the ratio rule.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNumberSelection {
    pub r_hat: usize,
    /// `D(1..R̄)` as computed.
    pub scores: Vec<f64>,
    /// Scores after zeroing those below `ω`.
    pub thresholded: Vec<f64>,
    /// `D(R)/D(R−1)` for `R = 1..R̄`, with `D(1)/D(0) = 1`.
    pub ratios: Vec<f64>,
    pub omega: f64,
    /// Set when `D(1) = 0`, i.e. all paths coincide.
    pub degenerate: bool,
}

impl GroupNumberSelection {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["R", "D", "D_thresholded", "ratio", "selected"])?;
        for r in 0..self.scores.len() {
            w.write_record([
                (r + 1).to_string(),
                self.scores[r].to_string(),
                self.thresholded[r].to_string(),
                self.ratios[r].to_string(),
                u8::from(r + 1 == self.r_hat).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Applies the ratio rule to `D(1..R̄)`: zero out scores below `om`, set
/// `D(1)/D(0) = 1`, `0/0 = 1`, `x/0 = ∞`, and take the smallest argmin.
pub fn ratio_rule(scores: &[f64], om: f64) -> Result<GroupNumberSelection> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("no deviation scores".into()));
    }
    if !(om >= 0.0) {
        return Err(Error::InvalidInput(format!("threshold {om} is not a nonnegative number")));
    }
    let thresholded: Vec<f64> = scores.iter().map(|&v| if v < om { 0.0 } else { v }).collect();
    let mut ratios = vec![1.0];
    for r in 1..scores.len() {
        let (num, den) = (thresholded[r], thresholded[r - 1]);
        ratios.push(if den == 0.0 {
            if num == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            num / den
        });
    }
    let degenerate = scores[0] == 0.0;
    let mut r_hat = 1;
    if !degenerate {
        for r in 1..ratios.len() {
            if ratios[r] < ratios[r_hat - 1] {
                r_hat = r + 1;
            }
        }
    }
    Ok(GroupNumberSelection {
        r_hat,
        scores: scores.to_vec(),
        thresholded,
        ratios,
        omega: om,
        degenerate,
    })
}

/// `R̂` from dendrogram cuts of `dm` at `R = 1..R̄` (capped at `N`).
pub fn select_group_number(
    paths: &[CoefficientPath],
    dm: &DistanceMatrix,
    r_max: usize,
    omega: OmegaPolicy,
    eval_at: &[f64],
) -> Result<(GroupNumberSelection, GroupStructure)> {
    if r_max < 2 {
        return Err(Error::InvalidInput(format!("R_max must be at least 2, got {r_max}")));
    }
    let n = dm.len();
    if paths.len() != n {
        return Err(Error::Alignment(format!("{} paths for a {n}-subject distance matrix", paths.len())));
    }
    let tree = agglomerate(dm, 1)?;
    let r_top = r_max.min(n);
    let scores: Vec<f64> = (1..=r_top)
        .map(|r| deviation_score(paths, &cut_history(n, &tree.merge_history, r), eval_at))
        .collect::<Result<_>>()?;
    let sel = ratio_rule(&scores, omega.threshold(&scores, dm))?;
    let gs = tree.cut(sel.r_hat)?;
    Ok((sel, gs))
}

fn contingency(a: &[usize], b: &[usize]) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let ra = a.iter().copied().max().unwrap_or(0);
    let rb = b.iter().copied().max().unwrap_or(0);
    let mut table = vec![vec![0.0; rb + 1]; ra + 1];
    for (x, y) in a.iter().zip(b) {
        table[*x][*y] += 1.0;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..=rb).map(|k| table.iter().map(|r| r[k]).sum()).collect();
    (rows, cols, table)
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|c| **c > 0.0)
        .map(|c| {
            let p = c / n;
            -p * p.log2()
        })
        .sum()
}

/// Normalized mutual information `2I/(H(est)+H(truth))`, base-2 logs.
/// Two single-cluster partitions give 1; exactly one gives 0.
pub fn nmi(est: &[usize], truth: &[usize]) -> Result<f64> {
    if est.len() != truth.len() || est.is_empty() {
        return Err(Error::InvalidInput("partitions must cover the same nonempty set".into()));
    }
    let n = est.len() as f64;
    let (rows, cols, table) = contingency(est, truth);
    let (ha, hb) = (entropy(&rows, n), entropy(&cols, n));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (j, row) in table.iter().enumerate() {
        for (k, &c) in row.iter().enumerate() {
            if c > 0.0 {
                mi += (c / n) * (n * c / (rows[j] * cols[k])).log2();
            }
        }
    }
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// `(1/N) Σ_k max_j |G̃_k ∩ G_j|`.
pub fn purity(est: &[usize], truth: &[usize]) -> Result<f64> {
    if est.len() != truth.len() || est.is_empty() {
        return Err(Error::InvalidInput("partitions must cover the same nonempty set".into()));
    }
    let (_, _, table) = contingency(est, truth);
    let s: f64 = table.iter().map(|r| r.iter().copied().fold(0.0, f64::max)).sum();
    Ok(s / est.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(points: &[f64], beta: &[f64], d: usize) -> CoefficientPath {
        let n = points.len();
        CoefficientPath {
            eval_points: points.to_vec(),
            dim_x: d,
            beta: beta.to_vec(),
            beta_deriv: vec![0.0; n * d],
            alpha: vec![0.0; n],
            alpha_deriv: vec![0.0; n],
            objective: vec![0.0; n],
            bandwidth: 0.1,
            tau: 0.5,
        }
    }

    #[test]
    fn renumbering_follows_smallest_member() {
        assert_eq!(renumber(&[7, 3, 7, 9, 3]), vec![1, 2, 1, 3, 2]);
    }

    #[test]
    fn history_cuts_differ_by_one_merge() {
        let dm = DistanceMatrix::new(
            4,
            vec![0.0, 1.0, 6.0, 7.0, 1.0, 0.0, 5.0, 8.0, 6.0, 5.0, 0.0, 2.0, 7.0, 8.0, 2.0, 0.0],
        )
        .unwrap();
        let gs = agglomerate(&dm, 2).unwrap();
        assert_eq!(gs.assignments, vec![1, 1, 2, 2]);
        assert_eq!(gs.merge_history.len(), 3);
        assert_eq!(gs.merge_history[2].distance, 8.0);
        assert_eq!(gs.cut(3).unwrap().assignments, vec![1, 1, 2, 3]);
        assert_eq!(gs.cut(1).unwrap().assignments, vec![1; 4]);
    }

    #[test]
    fn alignment_is_checked() {
        let a = path(&[0.0, 1.0], &[0.0, 0.0], 1);
        let b = path(&[0.0, 0.5], &[0.0, 0.0], 1);
        assert!(matches!(distance_matrix(&[a, b], &[0.0, 1.0]), Err(Error::Alignment(_))));
    }

    #[test]
    fn omega_parsing() {
        assert_eq!("rel:0.01".parse::<OmegaPolicy>().unwrap(), OmegaPolicy::Relative(0.01));
        assert_eq!("abs:2".parse::<OmegaPolicy>().unwrap(), OmegaPolicy::Absolute(2.0));
        assert!("foo".parse::<OmegaPolicy>().is_err());
        let nn: OmegaPolicy = "nn:1.5".parse().unwrap();
        assert_eq!(nn, OmegaPolicy::Neighbour(1.5));
        assert_eq!(nn.to_string().parse::<OmegaPolicy>().unwrap(), nn);
        assert!("nn:-1".parse::<OmegaPolicy>().is_err());
    }

    #[test]
    fn hand_computed_distances() {
        // two eval points, scalar coefficient
        let pts = [0.25, 0.75];
        let paths = [path(&pts, &[0.0, 1.0], 1), path(&pts, &[2.0, 1.0], 1), path(&pts, &[0.0, 4.0], 1)];
        let dm = distance_matrix(&paths, &pts).unwrap();
        let want = [0.0, 1.0, 1.5, 1.0, 0.0, 2.5, 1.5, 2.5, 0.0];
        for (a, b) in dm.values().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        // constant offset (c, 0) in two dimensions
        let a = path(&pts, &[1.0, 2.0, 3.0, 4.0], 2);
        let b = path(&pts, &[1.7, 2.0, 3.7, 4.0], 2);
        assert!((distance_matrix(&[a.clone(), b], &pts).unwrap().get(0, 1) - 0.7).abs() < 1e-12);
        assert_eq!(distance_matrix(&[a.clone(), a], &pts).unwrap().get(0, 1), 0.0);
    }

    #[test]
    fn four_point_complete_linkage() {
        let dm = DistanceMatrix::new(
            4,
            vec![0.0, 1.0, 5.0, 9.0, 1.0, 0.0, 6.0, 5.0, 5.0, 6.0, 0.0, 2.0, 9.0, 5.0, 2.0, 0.0],
        )
        .unwrap();
        assert_eq!(agglomerate(&dm, 2).unwrap().groups(), vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(agglomerate(&dm, 4).unwrap().assignments, vec![1, 2, 3, 4]);
        assert_eq!(agglomerate(&dm, 1).unwrap().assignments, vec![1; 4]);
    }

    #[test]
    fn deviation_of_two_offset_paths() {
        let pts = [0.1, 0.5, 0.9];
        let c = 0.8;
        let a = path(&pts, &[0.3, -1.0, 0.3, -1.0, 0.3, -1.0], 2);
        let b = path(&pts, &[0.3 + c, -1.0, 0.3 + c, -1.0, 0.3 + c, -1.0], 2);
        let paths = [a.clone(), b];
        assert!((deviation_score(&paths, &[1, 1], &pts).unwrap() - c / 2.0).abs() < 1e-12);
        assert_eq!(deviation_score(&paths, &[1, 2], &pts).unwrap(), 0.0);
        assert_eq!(deviation_score(&[a.clone(), a], &[1, 1], &pts).unwrap(), 0.0);
    }

    #[test]
    fn ratio_rule_conventions() {
        let sel = ratio_rule(&[0.5, 0.4, 0.001, 0.0008, 0.0007], 0.01).unwrap();
        assert_eq!(sel.thresholded, vec![0.5, 0.4, 0.0, 0.0, 0.0]);
        assert_eq!(sel.ratios, vec![1.0, 0.8, 0.0, 1.0, 1.0]);
        assert_eq!(sel.r_hat, 3);

        // geometric, nothing thresholded: plain ratios decide
        let sel = ratio_rule(&[1.0, 0.5, 0.1, 0.05, 0.04], 0.001).unwrap();
        assert_eq!(sel.r_hat, 3);
        assert_eq!(sel.thresholded, sel.scores);

        let sel = ratio_rule(&[0.005, 0.004, 0.003], 0.01).unwrap();
        assert_eq!(sel.ratios, vec![1.0, 1.0, 1.0]);
        assert_eq!(sel.r_hat, 1);
        assert!(!sel.degenerate);

        let sel = ratio_rule(&[0.0, 0.0, 0.0], 0.01).unwrap();
        assert_eq!(sel.r_hat, 1);
        assert!(sel.degenerate);
        assert!(ratio_rule(&[1.0], f64::NAN).is_err());
    }

    #[test]
    fn identical_paths_are_degenerate() {
        let pts = [0.0, 0.5, 1.0];
        let paths: Vec<_> = (0..4).map(|_| path(&pts, &[1.0, 2.0, 3.0], 1)).collect();
        let dm = distance_matrix(&paths, &pts).unwrap();
        let (sel, gs) = select_group_number(&paths, &dm, 3, OmegaPolicy::Relative(0.01), &pts).unwrap();
        assert!(sel.degenerate);
        assert_eq!(sel.r_hat, 1);
        assert_eq!(gs.assignments, vec![1; 4]);
    }

    #[test]
    fn kth_neighbour_median() {
        let dm = DistanceMatrix::new(3, vec![0.0, 1.0, 4.0, 1.0, 0.0, 3.0, 4.0, 3.0, 0.0]).unwrap();
        // nearest distances 1, 1, 3; second nearest 4, 3, 4
        assert_eq!(median_kth_nearest_distance(&dm, 1), 1.0);
        assert_eq!(median_kth_nearest_distance(&dm, 2), 4.0);
        assert_eq!(median_kth_nearest_distance(&dm, 7), 4.0);
        assert_eq!(OmegaPolicy::Neighbour(1.2).threshold(&[9.0, 1.0], &dm), 1.2);
        assert_eq!(OmegaPolicy::Relative(0.5).threshold(&[9.0], &dm), 4.5);
        assert_eq!(neighbour_rank(50, 5), 5);
        assert_eq!(neighbour_rank(101, 5), 11);
        assert_eq!(neighbour_rank(4, 5), 1);
        assert_eq!(neighbour_rank(1, 5), 1);
    }

    #[test]
    fn clustering_metrics() {
        assert_eq!(nmi(&[1, 1, 2, 2], &[1, 2, 1, 2]).unwrap(), 0.0);
        assert!((nmi(&[1, 1, 2, 3], &[2, 2, 3, 1]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[1, 1, 1], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(nmi(&[1, 1, 1], &[1, 2, 2]).unwrap(), 0.0);
        assert!((purity(&[1, 1, 1, 2, 2], &[1, 1, 2, 2, 2]).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(purity(&[1, 2, 3, 4, 5], &[1, 1, 2, 2, 2]).unwrap(), 1.0);
        assert_eq!(purity(&[2, 1, 1], &[1, 1, 2]).unwrap(), 2.0 / 3.0);
    }
}
