//! Datasets, row splits, and CSV ingestion.
//!
//! The measurement panel is stored `T x n`: row `t` is a measurement period
//! (or item) and column `i` is a unit. Every per-unit operation indexes columns.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Noisy measurements `X` (T x n) and optional high-rank covariates `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementPanel {
    x: DMatrix<f64>,
    w: Vec<DMatrix<f64>>,
    unit_ids: Vec<String>,
    row_ids: Vec<String>,
}

impl MeasurementPanel {
    pub fn new(
        x: DMatrix<f64>,
        w: Vec<DMatrix<f64>>,
        unit_ids: Vec<String>,
        row_ids: Vec<String>,
    ) -> Result<Self> {
        let (t, n) = x.shape();
        if t < 2 || n < 2 {
            return Err(Error::Size(format!("panel must be at least 2x2, got {t}x{n}")));
        }
        if unit_ids.len() != n || row_ids.len() != t {
            return Err(Error::Size(format!(
                "expected {n} unit ids and {t} row ids, got {} and {}",
                unit_ids.len(),
                row_ids.len()
            )));
        }
        check_finite(&x, "x")?;
        for (l, wl) in w.iter().enumerate() {
            if wl.shape() != (t, n) {
                return Err(Error::Size(format!(
                    "high-rank covariate {l} has shape {:?}, expected {t}x{n}",
                    wl.shape()
                )));
            }
            check_finite(wl, &format!("w{l}"))?;
        }
        Ok(Self {
            x,
            w,
            unit_ids,
            row_ids,
        })
    }

    /// Panel with generated labels (`u0..`, `t0..`) and no high-rank covariates.
    pub fn from_matrix(x: DMatrix<f64>) -> Result<Self> {
        let (t, n) = x.shape();
        Self::new(
            x,
            Vec::new(),
            (0..n).map(|i| format!("u{i}")).collect(),
            (0..t).map(|r| format!("t{r}")).collect(),
        )
    }

    pub fn with_high_rank(mut self, w: Vec<DMatrix<f64>>) -> Result<Self> {
        let (t, n) = self.x.shape();
        for (l, wl) in w.iter().enumerate() {
            if wl.shape() != (t, n) {
                return Err(Error::Size(format!("high-rank covariate {l} shape mismatch")));
            }
            check_finite(wl, &format!("w{l}"))?;
        }
        self.w = w;
        Ok(self)
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn w(&self) -> &[DMatrix<f64>] {
        &self.w
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn n_units(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    /// The submatrix of `x` restricted to `rows`.
    pub fn x_rows(&self, rows: &[usize]) -> DMatrix<f64> {
        select_rows(&self.x, rows)
    }

    /// Replace the measurements, keeping labels and dropping `w`.
    pub fn with_measurements(&self, x: DMatrix<f64>) -> Result<Self> {
        Self::new(x, Vec::new(), self.unit_ids.clone(), self.row_ids.clone())
    }
}

pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

fn check_finite(m: &DMatrix<f64>, name: &str) -> Result<()> {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            if !m[(r, c)].is_finite() {
                return Err(Error::Ingestion {
                    row: c + 1,
                    column: format!("{name}[{r}]"),
                    message: "non-finite value".into(),
                });
            }
        }
    }
    Ok(())
}

/// Outcomes, treatment levels, and low-dimensional controls for `n` units.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentSample {
    y: Vec<f64>,
    s: Vec<usize>,
    z: DMatrix<f64>,
    num_levels: usize,
}

impl TreatmentSample {
    /// `num_levels` is `J + 1`; every label must lie in `0..num_levels`.
    /// `z` is `n x d_z` and may have zero columns.
    pub fn new(y: Vec<f64>, s: Vec<usize>, z: DMatrix<f64>, num_levels: usize) -> Result<Self> {
        let n = y.len();
        if s.len() != n || z.nrows() != n {
            return Err(Error::Size(format!(
                "y has {n} entries, s has {}, z has {} rows",
                s.len(),
                z.nrows()
            )));
        }
        if num_levels == 0 {
            return Err(Error::Domain("at least one treatment level is required".into()));
        }
        for (i, v) in y.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Ingestion {
                    row: i + 1,
                    column: "y".into(),
                    message: "non-finite outcome".into(),
                });
            }
        }
        if let Some((i, &lvl)) = s.iter().enumerate().find(|(_, &lvl)| lvl >= num_levels) {
            return Err(Error::Domain(format!(
                "unit {i} has treatment level {lvl}, outside 0..={}",
                num_levels - 1
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Ingestion {
                row: 0,
                column: "z".into(),
                message: "non-finite control".into(),
            });
        }
        Ok(Self { y, s, z, num_levels })
    }

    /// Sample without controls.
    pub fn without_controls(y: Vec<f64>, s: Vec<usize>, num_levels: usize) -> Result<Self> {
        let n = y.len();
        Self::new(y, s, DMatrix::zeros(n, 0), num_levels)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn s(&self) -> &[usize] {
        &self.s
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn d_z(&self) -> usize {
        self.z.ncols()
    }

    pub fn num_levels(&self) -> usize {
        self.num_levels
    }

    /// `d_i(j) = 1{s_i = j}`.
    pub fn d(&self, i: usize, level: usize) -> bool {
        self.s[i] == level
    }

    pub fn indicator(&self, level: usize) -> Vec<f64> {
        self.s.iter().map(|&s| if s == level { 1.0 } else { 0.0 }).collect()
    }

    pub fn level_count(&self, level: usize) -> usize {
        self.s.iter().filter(|&&s| s == level).count()
    }

    /// `p_j = mean_i d_i(j)`.
    pub fn p_marginal(&self, level: usize) -> f64 {
        self.level_count(level) as f64 / self.n() as f64
    }

    /// Copy with the outcome replaced (same treatment and controls).
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(y, self.s.clone(), self.z.clone(), self.num_levels)
    }

    /// Fails unless every listed level has at least one unit.
    pub fn require_levels(&self, levels: &[usize]) -> Result<()> {
        for &l in levels {
            if l >= self.num_levels {
                return Err(Error::EstimandUndefined(format!(
                    "level {l} requested but treatment takes values 0..={}",
                    self.num_levels - 1
                )));
            }
            if self.level_count(l) == 0 {
                return Err(Error::EstimandUndefined(format!("no units at treatment level {l}")));
            }
        }
        Ok(())
    }
}

/// Partition of the row index set used to separate matching from local PCA.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowSplit {
    /// Rows used for nearest-neighbor matching.
    pub t_dagger: Vec<usize>,
    /// Rows used for local PCA.
    pub t_ddagger: Vec<usize>,
    /// Third portion, present only for the three-fold (high-rank) flow.
    pub t_3: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum SplitScheme {
    Random { seed: u64 },
    ContiguousHalves,
    Thirds { seed: u64 },
}

/// Split `0..t` according to `scheme`. Portion sizes differ by at most one;
/// for thirds, leftover rows go to the last portion first.
pub fn make_row_split(t: usize, scheme: SplitScheme) -> Result<RowSplit> {
    match scheme {
        SplitScheme::ContiguousHalves | SplitScheme::Random { .. } if t < 4 => {
            Err(Error::Size(format!("two-fold split needs T >= 4, got {t}")))
        }
        SplitScheme::Thirds { .. } if t < 6 => {
            Err(Error::Size(format!("three-fold split needs T >= 6, got {t}")))
        }
        SplitScheme::ContiguousHalves => {
            let half = t / 2;
            Ok(RowSplit {
                t_dagger: (0..half).collect(),
                t_ddagger: (half..t).collect(),
                t_3: None,
            })
        }
        SplitScheme::Random { seed } => {
            let perm = shuffled(t, seed);
            let half = t / 2;
            let mut a = perm[..half].to_vec();
            let mut b = perm[half..].to_vec();
            a.sort_unstable();
            b.sort_unstable();
            Ok(RowSplit {
                t_dagger: a,
                t_ddagger: b,
                t_3: None,
            })
        }
        SplitScheme::Thirds { seed } => {
            let perm = shuffled(t, seed);
            let base = t / 3;
            let rem = t % 3;
            let s1 = base;
            let s2 = base + usize::from(rem == 2);
            let mut p1 = perm[..s1].to_vec();
            let mut p2 = perm[s1..s1 + s2].to_vec();
            let mut p3 = perm[s1 + s2..].to_vec();
            p1.sort_unstable();
            p2.sort_unstable();
            p3.sort_unstable();
            Ok(RowSplit {
                t_dagger: p1,
                t_ddagger: p2,
                t_3: Some(p3),
            })
        }
    }
}

fn shuffled(t: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..t).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Column mapping for wide CSV files: one row per unit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(default)]
    pub id: Option<String>,
    pub outcome: String,
    pub treatment: String,
    #[serde(default)]
    pub controls: Vec<String>,
    /// One column per measurement period, in row order of `X`.
    pub measurements: Vec<String>,
    /// One list of columns per high-rank covariate, each the same length as `measurements`.
    #[serde(default)]
    pub high_rank: Vec<Vec<String>>,
    /// Highest treatment label `J`; inferred from the data when absent.
    #[serde(default)]
    pub max_level: Option<usize>,
}

/// Read a wide CSV (header row required) into a validated panel and sample.
pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<(MeasurementPanel, TreatmentSample)> {
    let file = std::fs::File::open(path.as_ref())?;
    read_dataset(file, schema)
}

pub fn read_dataset<R: std::io::Read>(reader: R, schema: &Schema) -> Result<(MeasurementPanel, TreatmentSample)> {
    if schema.measurements.len() < 2 {
        return Err(Error::Schema("at least two measurement columns are required".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let id_col = schema.id.as_deref().map(col).transpose()?;
    let y_col = col(&schema.outcome)?;
    let s_col = col(&schema.treatment)?;
    let z_cols = schema.controls.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let x_cols = schema.measurements.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let mut w_cols = Vec::with_capacity(schema.high_rank.len());
    for group in &schema.high_rank {
        if group.len() != x_cols.len() {
            return Err(Error::Schema(format!(
                "high-rank covariate has {} columns, expected {}",
                group.len(),
                x_cols.len()
            )));
        }
        w_cols.push(group.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?);
    }

    let mut ids = Vec::new();
    let mut y = Vec::new();
    let mut s_raw = Vec::new();
    let mut z = Vec::new();
    let mut x = Vec::new();
    let mut w: Vec<Vec<f64>> = vec![Vec::new(); w_cols.len()];
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let cell = |c: usize| -> Result<f64> {
            let raw = record.get(c).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| Error::Ingestion {
                row,
                column: headers[c].to_string(),
                message: format!("cannot parse `{raw}` as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingestion {
                    row,
                    column: headers[c].to_string(),
                    message: format!("non-finite value `{raw}`"),
                });
            }
            Ok(v)
        };
        ids.push(match id_col {
            Some(c) => record.get(c).unwrap_or("").to_string(),
            None => format!("u{}", r),
        });
        y.push(cell(y_col)?);
        let sv = cell(s_col)?;
        if sv < 0.0 || sv.fract() != 0.0 {
            return Err(Error::Domain(format!(
                "row {row}: treatment `{sv}` is not a nonnegative integer"
            )));
        }
        s_raw.push(sv as usize);
        for &c in &z_cols {
            z.push(cell(c)?);
        }
        for &c in &x_cols {
            x.push(cell(c)?);
        }
        for (l, group) in w_cols.iter().enumerate() {
            for &c in group {
                w[l].push(cell(c)?);
            }
        }
    }
    let n = y.len();
    let t = x_cols.len();
    let max_seen = s_raw.iter().copied().max().unwrap_or(0);
    let max_level = match schema.max_level {
        Some(j) => {
            if max_seen > j {
                return Err(Error::Domain(format!(
                    "treatment label {max_seen} exceeds declared maximum level {j}"
                )));
            }
            j
        }
        None => max_seen,
    };
    // Values were pushed unit by unit, which is column-major for a T x n matrix.
    let x = DMatrix::from_vec(t, n, x);
    let w = w.into_iter().map(|v| DMatrix::from_vec(t, n, v)).collect();
    let z = DMatrix::from_row_slice(n, z_cols.len(), &z);
    let panel = MeasurementPanel::new(x, w, ids, schema.measurements.clone())?;
    let sample = TreatmentSample::new(y, s_raw, z, max_level + 1)?;
    Ok((panel, sample))
}

/// Write a panel and sample back in the wide layout described by `schema`.
/// Numbers use the shortest round-trip decimal representation.
pub fn write_dataset(
    path: impl AsRef<Path>,
    panel: &MeasurementPanel,
    sample: &TreatmentSample,
    schema: &Schema,
) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path.as_ref())?;
    let mut header: Vec<String> = Vec::new();
    if let Some(id) = &schema.id {
        header.push(id.clone());
    }
    header.push(schema.outcome.clone());
    header.push(schema.treatment.clone());
    header.extend(schema.controls.iter().cloned());
    header.extend(schema.measurements.iter().cloned());
    for g in &schema.high_rank {
        header.extend(g.iter().cloned());
    }
    wtr.write_record(&header)?;
    for i in 0..sample.n() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        if schema.id.is_some() {
            rec.push(panel.unit_ids()[i].clone());
        }
        rec.push(format!("{}", sample.y()[i]));
        rec.push(sample.s()[i].to_string());
        for c in 0..sample.d_z() {
            rec.push(format!("{}", sample.z()[(i, c)]));
        }
        for t in 0..panel.n_rows() {
            rec.push(format!("{}", panel.x()[(t, i)]));
        }
        for wl in panel.w() {
            for t in 0..panel.n_rows() {
                rec.push(format!("{}", wl[(t, i)]));
            }
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
