//! Balanced long-format panel data: loading, validation and index handling.
//!
//! A panel holds responses `Y_it`, `d`-dimensional covariates `X_it` and the
//! smoothing index. The index is either one series `Z_t` shared by every
//! subject, a subject-specific `Z_it`, or the scaled time `t/T` (materialized
//! at construction so downstream code never distinguishes it from `Z_t`).

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Smoothing index values of a panel.
#[derive(Debug, Clone, PartialEq)]
pub enum PanelIndex {
    /// One series `Z_t`, length `T`.
    Shared(Vec<f64>),
    /// `Z_it`, row-major `N × T`.
    SubjectSpecific(Vec<f64>),
    /// `t/T` for `t = 1..T`.
    ScaledTime(Vec<f64>),
}

/// Affine map recorded by [`normalize_index`]: `original = lo + z·(hi − lo)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexScaling {
    pub lo: f64,
    pub hi: f64,
}

impl IndexScaling {
    pub fn to_original(&self, z: f64) -> f64 {
        self.lo + z * (self.hi - self.lo)
    }
}

/// Immutable balanced panel. `y` is `N × T`, `x` is `N × T × d`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    n_subjects: usize,
    n_times: usize,
    dim_x: usize,
    y: Vec<f64>,
    x: Vec<f64>,
    index: PanelIndex,
    subject_labels: Vec<String>,
    times: Vec<f64>,
    scaling: Option<IndexScaling>,
}

impl PanelDataset {
    /// Validating constructor. `times` are the common time stamps (length `T`).
    pub fn new(
        subject_labels: Vec<String>,
        times: Vec<f64>,
        dim_x: usize,
        y: Vec<f64>,
        x: Vec<f64>,
        index: PanelIndex,
    ) -> Result<Self> {
        let n = subject_labels.len();
        let t = times.len();
        if n == 0 || t == 0 || dim_x == 0 {
            return Err(Error::InvalidInput(format!(
                "panel needs N, T, d ≥ 1 (got N={n}, T={t}, d={dim_x})"
            )));
        }
        if y.len() != n * t || x.len() != n * t * dim_x {
            return Err(Error::InvalidInput("panel buffers do not match N, T, d".into()));
        }
        let index_len = match &index {
            PanelIndex::Shared(v) | PanelIndex::ScaledTime(v) => (v.len(), t),
            PanelIndex::SubjectSpecific(v) => (v.len(), n * t),
        };
        if index_len.0 != index_len.1 {
            return Err(Error::InvalidInput("index length does not match panel shape".into()));
        }
        if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data {
                row: pos,
                column: "y".into(),
                message: "non-finite response".into(),
            });
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data {
                row: pos / dim_x,
                column: format!("x{}", pos % dim_x + 1),
                message: "non-finite covariate".into(),
            });
        }
        let idx_vals = match &index {
            PanelIndex::Shared(v) | PanelIndex::ScaledTime(v) | PanelIndex::SubjectSpecific(v) => v,
        };
        if let Some(pos) = idx_vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data {
                row: pos,
                column: "z".into(),
                message: "non-finite index".into(),
            });
        }
        Ok(PanelDataset {
            n_subjects: n,
            n_times: t,
            dim_x,
            y,
            x,
            index,
            subject_labels,
            times,
            scaling: None,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }
    pub fn n_times(&self) -> usize {
        self.n_times
    }
    pub fn dim_x(&self) -> usize {
        self.dim_x
    }
    pub fn subject_labels(&self) -> &[String] {
        &self.subject_labels
    }
    pub fn times(&self) -> &[f64] {
        &self.times
    }
    pub fn index(&self) -> &PanelIndex {
        &self.index
    }
    pub fn scaling(&self) -> Option<IndexScaling> {
        self.scaling
    }

    #[inline]
    pub fn y(&self, i: usize, t: usize) -> f64 {
        self.y[i * self.n_times + t]
    }

    /// Responses of subject `i` over time.
    pub fn y_row(&self, i: usize) -> &[f64] {
        &self.y[i * self.n_times..(i + 1) * self.n_times]
    }

    /// Covariate vector `X_it`.
    #[inline]
    pub fn x(&self, i: usize, t: usize) -> &[f64] {
        let base = (i * self.n_times + t) * self.dim_x;
        &self.x[base..base + self.dim_x]
    }

    /// Covariates of subject `i`, `T × d` row-major.
    pub fn x_block(&self, i: usize) -> &[f64] {
        let w = self.n_times * self.dim_x;
        &self.x[i * w..(i + 1) * w]
    }

    /// Index value seen by subject `i` at time `t`.
    #[inline]
    pub fn z(&self, i: usize, t: usize) -> f64 {
        match &self.index {
            PanelIndex::Shared(v) | PanelIndex::ScaledTime(v) => v[t],
            PanelIndex::SubjectSpecific(v) => v[i * self.n_times + t],
        }
    }

    /// Index series of subject `i`.
    pub fn z_row(&self, i: usize) -> &[f64] {
        match &self.index {
            PanelIndex::Shared(v) | PanelIndex::ScaledTime(v) => v,
            PanelIndex::SubjectSpecific(v) => &v[i * self.n_times..(i + 1) * self.n_times],
        }
    }

    /// The common index series, when every subject shares one.
    pub fn shared_index(&self) -> Option<&[f64]> {
        match &self.index {
            PanelIndex::Shared(v) | PanelIndex::ScaledTime(v) => Some(v),
            PanelIndex::SubjectSpecific(_) => None,
        }
    }

    /// The sub-panel of the listed subjects, in the given order.
    pub fn subset(&self, subjects: &[usize]) -> Result<PanelDataset> {
        if subjects.iter().any(|&i| i >= self.n_subjects) {
            return Err(Error::InvalidInput("subject index out of range".into()));
        }
        let t = self.n_times;
        let d = self.dim_x;
        let y = subjects.iter().flat_map(|&i| self.y_row(i).iter().copied()).collect();
        let x = subjects
            .iter()
            .flat_map(|&i| self.x[i * t * d..(i + 1) * t * d].iter().copied())
            .collect();
        let index = match &self.index {
            PanelIndex::SubjectSpecific(_) => {
                PanelIndex::SubjectSpecific(subjects.iter().flat_map(|&i| self.z_row(i).iter().copied()).collect())
            }
            other => other.clone(),
        };
        Ok(PanelDataset {
            n_subjects: subjects.len(),
            n_times: t,
            dim_x: d,
            y,
            x,
            index,
            subject_labels: subjects.iter().map(|&i| self.subject_labels[i].clone()).collect(),
            times: self.times.clone(),
            scaling: self.scaling,
        })
    }

    /// Copy with the responses of subject `i` replaced.
    pub fn with_subject_response(&self, i: usize, values: &[f64]) -> Result<PanelDataset> {
        if i >= self.n_subjects || values.len() != self.n_times {
            return Err(Error::InvalidInput("response replacement does not fit the panel".into()));
        }
        let mut out = self.clone();
        out.y[i * self.n_times..(i + 1) * self.n_times].copy_from_slice(values);
        Ok(out)
    }

    /// Copy with the index replaced by `t/T`.
    pub fn with_scaled_time(&self) -> PanelDataset {
        let mut out = self.clone();
        out.index = PanelIndex::ScaledTime(scaled_time(self.n_times));
        out.scaling = None;
        out
    }

    fn all_index_values(&self) -> &[f64] {
        match &self.index {
            PanelIndex::Shared(v) | PanelIndex::ScaledTime(v) | PanelIndex::SubjectSpecific(v) => v,
        }
    }
}

/// Whether the smoothing index comes from a column or from scaled time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IndexSource {
    #[default]
    Column,
    ScaledTime,
}

/// Column mapping for long-format panel CSV files.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelSchema {
    pub id: String,
    pub time: String,
    pub y: String,
    pub x: Vec<String>,
    pub z: Option<String>,
    pub index_source: IndexSource,
    /// Affinely rescale the index onto `[0, 1]` after loading.
    pub normalize: bool,
}

impl PanelSchema {
    /// Schema matching the files written by [`write_panel_csv`].
    pub fn canonical(dim_x: usize) -> Self {
        PanelSchema {
            id: "id".into(),
            time: "time".into(),
            y: "y".into(),
            x: (1..=dim_x).map(|k| format!("x{k}")).collect(),
            z: Some("z".into()),
            index_source: IndexSource::Column,
            normalize: false,
        }
    }
}

fn column_position(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
}

fn parse_cell(record: &csv::StringRecord, pos: usize, row: usize, column: &str) -> Result<f64> {
    let raw = record.get(pos).unwrap_or("").trim();
    let data_err = |message: String| Error::Data {
        row,
        column: column.to_string(),
        message,
    };
    let v: f64 = raw.parse().map_err(|_| data_err(format!("cannot parse `{raw}` as a number")))?;
    if !v.is_finite() {
        return Err(data_err(format!("non-finite value `{raw}`")));
    }
    Ok(v)
}

/// Load a long-format (one row per subject and time) panel.
///
/// Rows are 1-based data rows (the header is row 0). Subjects keep the order
/// of first appearance; observations within a subject are sorted by time.
pub fn load_panel_csv(path: impl AsRef<Path>, schema: &PanelSchema) -> Result<PanelDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    if schema.x.is_empty() {
        return Err(Error::Schema("at least one covariate column is required".into()));
    }
    let id_pos = column_position(&headers, &schema.id)?;
    let time_pos = column_position(&headers, &schema.time)?;
    let y_pos = column_position(&headers, &schema.y)?;
    let x_pos = schema
        .x
        .iter()
        .map(|c| column_position(&headers, c))
        .collect::<Result<Vec<_>>>()?;
    let z_pos = match schema.index_source {
        IndexSource::Column => {
            let name = schema
                .z
                .as_deref()
                .ok_or_else(|| Error::Schema("index column required unless scaled time is used".into()))?;
            Some(column_position(&headers, name)?)
        }
        IndexSource::ScaledTime => None,
    };
    let d = schema.x.len();

    struct Obs {
        time: f64,
        y: f64,
        x: Vec<f64>,
        z: f64,
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_subject: HashMap<String, Vec<Obs>> = HashMap::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        let id = rec
            .get(id_pos)
            .ok_or_else(|| Error::Data {
                row,
                column: schema.id.clone(),
                message: "missing subject id".into(),
            })?
            .trim()
            .to_string();
        let time = parse_cell(&rec, time_pos, row, &schema.time)?;
        let y = parse_cell(&rec, y_pos, row, &schema.y)?;
        let x = x_pos
            .iter()
            .zip(&schema.x)
            .map(|(&p, name)| parse_cell(&rec, p, row, name))
            .collect::<Result<Vec<_>>>()?;
        let z = match z_pos {
            Some(p) => parse_cell(&rec, p, row, schema.z.as_deref().unwrap_or("z"))?,
            None => f64::NAN,
        };
        if !by_subject.contains_key(&id) {
            order.push(id.clone());
        }
        by_subject.entry(id).or_default().push(Obs { time, y, x, z });
    }
    if order.is_empty() {
        return Err(Error::Schema("file has no data rows".into()));
    }
    for obs in by_subject.values_mut() {
        obs.sort_by(|a, b| a.time.total_cmp(&b.time));
    }

    // reference time set from the longest subject record
    let reference: Vec<f64> = order
        .iter()
        .map(|id| &by_subject[id])
        .max_by_key(|o| o.len())
        .map(|o| o.iter().map(|ob| ob.time).collect())
        .unwrap_or_default();
    let offending: Vec<String> = order
        .iter()
        .filter(|id| {
            let obs = &by_subject[*id];
            obs.len() != reference.len() || obs.iter().zip(&reference).any(|(o, t)| o.time != *t)
        })
        .cloned()
        .collect();
    if !offending.is_empty() {
        return Err(Error::Balance { subjects: offending });
    }

    let n = order.len();
    let t = reference.len();
    let mut y = Vec::with_capacity(n * t);
    let mut x = Vec::with_capacity(n * t * d);
    let mut z = Vec::with_capacity(n * t);
    for id in &order {
        for ob in &by_subject[id] {
            y.push(ob.y);
            x.extend_from_slice(&ob.x);
            z.push(ob.z);
        }
    }
    let index = match schema.index_source {
        IndexSource::ScaledTime => PanelIndex::ScaledTime(scaled_time(t)),
        IndexSource::Column => {
            let shared = (1..n).all(|i| z[i * t..(i + 1) * t] == z[..t]);
            if shared {
                PanelIndex::Shared(z[..t].to_vec())
            } else {
                PanelIndex::SubjectSpecific(z)
            }
        }
    };
    let ds = PanelDataset::new(order, reference, d, y, x, index)?;
    if schema.normalize && schema.index_source == IndexSource::Column {
        normalize_index(&ds)
    } else {
        Ok(ds)
    }
}

/// Quantile level plus the optional grid used by the uniform-over-τ variant.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileSpec {
    pub tau: f64,
    pub tau_grid: Option<Vec<f64>>,
    pub epsilon: f64,
}

impl QuantileSpec {
    pub const DEFAULT_EPSILON: f64 = 0.05;

    pub fn new(tau: f64) -> Result<Self> {
        let q = QuantileSpec {
            tau,
            tau_grid: None,
            epsilon: Self::DEFAULT_EPSILON,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn with_grid(mut self, grid: Vec<f64>) -> Result<Self> {
        self.tau_grid = Some(grid);
        self.validate()?;
        Ok(self)
    }

    /// `n` equispaced levels on `[ε, 1−ε]`.
    pub fn trimmed_grid(epsilon: f64, n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![0.5];
        }
        (0..n)
            .map(|k| epsilon + (1.0 - 2.0 * epsilon) * k as f64 / (n - 1) as f64)
            .collect()
    }

    /// The stated grid, or 19 levels on `[ε, 1−ε]`.
    pub fn grid(&self) -> Vec<f64> {
        self.tau_grid
            .clone()
            .unwrap_or_else(|| Self::trimmed_grid(self.epsilon, 19))
    }

    /// Grid endpoints may sit on `ε` and `1−ε` (the integration limits).
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidInput(format!("tau = {} outside (0, 1)", self.tau)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::InvalidInput(format!("epsilon = {} outside (0, 0.5)", self.epsilon)));
        }
        if let Some(g) = &self.tau_grid {
            if g.is_empty() {
                return Err(Error::InvalidInput("empty tau grid".into()));
            }
            if g.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::InvalidInput("tau grid must be strictly increasing".into()));
            }
            let tol = 1e-12;
            if g[0] < self.epsilon - tol || g[g.len() - 1] > 1.0 - self.epsilon + tol {
                return Err(Error::InvalidInput(format!(
                    "tau grid must lie within [{}, {}]",
                    self.epsilon,
                    1.0 - self.epsilon
                )));
            }
        }
        Ok(())
    }
}

/// `t/T` for `t = 1..T`.
pub fn scaled_time(n_times: usize) -> Vec<f64> {
    (1..=n_times).map(|t| t as f64 / n_times as f64).collect()
}

/// Affinely map the index onto `[0, 1]` (min → 0, max → 1).
///
/// Composes with any earlier scaling so reports can always map back to the
/// original index units.
pub fn normalize_index(ds: &PanelDataset) -> Result<PanelDataset> {
    let vals = ds.all_index_values();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::DegenerateIndex { value: lo });
    }
    let mut out = ds.clone();
    if lo == 0.0 && hi == 1.0 {
        return Ok(out);
    }
    let width = hi - lo;
    let map = |v: &Vec<f64>| v.iter().map(|z| (z - lo) / width).collect::<Vec<_>>();
    out.index = match &ds.index {
        PanelIndex::Shared(v) => PanelIndex::Shared(map(v)),
        PanelIndex::ScaledTime(v) => PanelIndex::ScaledTime(map(v)),
        PanelIndex::SubjectSpecific(v) => PanelIndex::SubjectSpecific(map(v)),
    };
    out.scaling = Some(match ds.scaling {
        Some(prev) => IndexScaling {
            lo: prev.to_original(lo),
            hi: prev.to_original(hi),
        },
        None => IndexScaling { lo, hi },
    });
    Ok(out)
}

/// Write the panel in the canonical long format (`id,time,y,x1..xd,z`).
///
/// Values are printed with the shortest representation that parses back to
/// the same `f64`, so loading with [`PanelSchema::canonical`] round-trips.
pub fn write_panel_csv(ds: &PanelDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["id".to_string(), "time".into(), "y".into()];
    header.extend((1..=ds.dim_x).map(|k| format!("x{k}")));
    header.push("z".into());
    w.write_record(&header)?;
    for i in 0..ds.n_subjects {
        for t in 0..ds.n_times {
            let mut rec = vec![ds.subject_labels[i].clone(), ds.times[t].to_string(), ds.y(i, t).to_string()];
            rec.extend(ds.x(i, t).iter().map(|v| v.to_string()));
            rec.push(ds.z(i, t).to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn schema() -> PanelSchema {
        PanelSchema {
            id: "id".into(),
            time: "t".into(),
            y: "y".into(),
            x: vec!["x".into()],
            z: Some("z".into()),
            index_source: IndexSource::Column,
            normalize: false,
        }
    }

    #[test]
    fn loads_minimal_panel() {
        let f = write_tmp("id,t,y,x,z\na,1,1.0,0.5,0.1\na,2,2.0,0.5,0.2\na,3,3.0,0.5,0.3\nb,1,1.5,0.1,0.1\nb,3,2.5,0.2,0.3\nb,2,2.0,0.3,0.2\n");
        let ds = load_panel_csv(f.path(), &schema()).unwrap();
        assert_eq!((ds.n_subjects(), ds.n_times(), ds.dim_x()), (2, 3, 1));
        assert_eq!(ds.subject_labels(), &["a".to_string(), "b".to_string()]);
        // sorted by time within subject
        assert_eq!(ds.y_row(1), &[1.5, 2.0, 2.5]);
        assert_eq!(ds.shared_index(), Some(&[0.1, 0.2, 0.3][..]));
    }

    #[test]
    fn nan_cell_is_data_error() {
        let f = write_tmp("id,t,y,x,z\na,1,NaN,0.5,0.1\na,2,2.0,0.5,0.2\n");
        match load_panel_csv(f.path(), &schema()) {
            Err(Error::Data { row, column, .. }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "y");
            }
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn unbalanced_is_balance_error() {
        let f = write_tmp("id,t,y,x,z\na,1,1,0,0.1\na,2,2,0,0.2\na,3,3,0,0.3\nb,1,1,0,0.1\nb,2,1,0,0.2\n");
        match load_panel_csv(f.path(), &schema()) {
            Err(Error::Balance { subjects }) => assert_eq!(subjects, vec!["b".to_string()]),
            other => panic!("expected balance error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let f = write_tmp("id,t,y,w,z\na,1,1,0,0.1\n");
        assert!(matches!(load_panel_csv(f.path(), &schema()), Err(Error::Schema(_))));
    }

    #[test]
    fn subject_specific_index_detected() {
        let f = write_tmp("id,t,y,x,z\na,1,1,0,0.1\na,2,2,0,0.2\nb,1,1,0,0.3\nb,2,1,0,0.2\n");
        let ds = load_panel_csv(f.path(), &schema()).unwrap();
        assert!(matches!(ds.index(), PanelIndex::SubjectSpecific(_)));
        assert_eq!(ds.z(1, 0), 0.3);
    }

    #[test]
    fn scaled_time_materialized() {
        let mut s = schema();
        s.index_source = IndexSource::ScaledTime;
        s.z = None;
        let f = write_tmp("id,t,y,x\na,1,1,0\na,2,2,0\na,3,3,0\na,4,3,0\n");
        let ds = load_panel_csv(f.path(), &s).unwrap();
        assert_eq!(ds.z_row(0), &[0.25, 0.5, 0.75, 1.0]);
    }

    fn shared(vals: &[f64]) -> PanelDataset {
        let t = vals.len();
        PanelDataset::new(vec!["a".into()], (1..=t).map(|v| v as f64).collect(), 1, vec![0.0; t], vec![1.0; t], PanelIndex::Shared(vals.to_vec())).unwrap()
    }

    #[test]
    fn normalize_affine_identity_and_degenerate() {
        let n = normalize_index(&shared(&[2.0, 4.0, 6.0])).unwrap();
        assert_eq!(n.z_row(0), &[0.0, 0.5, 1.0]);
        let s = n.scaling().unwrap();
        assert_eq!((s.lo, s.hi), (2.0, 6.0));
        assert_eq!(s.to_original(0.5), 4.0);

        let already = shared(&[0.0, 0.3, 1.0]);
        assert_eq!(normalize_index(&already).unwrap(), already);

        assert!(matches!(normalize_index(&shared(&[3.0, 3.0, 3.0])), Err(Error::DegenerateIndex { .. })));
    }

    #[test]
    fn normalize_is_idempotent() {
        let once = normalize_index(&shared(&[0.7, -1.3, 5.1, 2.2])).unwrap();
        let twice = normalize_index(&once).unwrap();
        assert_eq!(once, twice);
    }
}
