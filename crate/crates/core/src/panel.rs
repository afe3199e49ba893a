//! Return panels, centering and correlations about the origin.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::{pair_count, HalfVec, SymmetricMatrix};

/// `T x N` panel of asset returns. Stored column-major (one contiguous series per asset).
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsPanel {
    n_obs: usize,
    asset_ids: Vec<String>,
    timestamps: Vec<String>,
    columns: Vec<f64>,
}

impl ReturnsPanel {
    /// Builds a panel from row-major observations (`rows[t][i]`).
    pub fn from_rows(
        asset_ids: Vec<String>,
        timestamps: Vec<String>,
        rows: &[Vec<f64>],
    ) -> Result<Self> {
        let n = asset_ids.len();
        if rows.len() != timestamps.len() {
            return Err(Error::Dimension {
                expected: timestamps.len(),
                found: rows.len(),
            });
        }
        let t = rows.len();
        let mut columns = vec![0.0; n * t];
        for (ti, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    found: row.len(),
                });
            }
            for (i, &v) in row.iter().enumerate() {
                columns[i * t + ti] = v;
            }
        }
        Self::from_columns(asset_ids, timestamps, columns)
    }

    /// Builds a panel from column-major storage of length `N * T`.
    pub fn from_columns(
        asset_ids: Vec<String>,
        timestamps: Vec<String>,
        columns: Vec<f64>,
    ) -> Result<Self> {
        let n = asset_ids.len();
        let t = timestamps.len();
        if n < 2 {
            return Err(Error::TooSmall {
                what: "assets",
                required: 2,
                actual: n,
            });
        }
        if t < 2 {
            return Err(Error::TooSmall {
                what: "observations",
                required: 2,
                actual: t,
            });
        }
        if columns.len() != n * t {
            return Err(Error::Dimension {
                expected: n * t,
                found: columns.len(),
            });
        }
        if let Some(pos) = columns.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite return for asset `{}` at row {}",
                asset_ids[pos / t],
                pos % t
            )));
        }
        if let Some(w) = timestamps.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(format!(
                "timestamps not strictly increasing at `{}` -> `{}`",
                timestamps[w],
                timestamps[w + 1]
            )));
        }
        Ok(Self {
            n_obs: t,
            asset_ids,
            timestamps,
            columns,
        })
    }

    /// Panel with generated labels `A1..AN` and `0..T-1` (zero-padded so they sort).
    pub fn unlabeled(n_assets: usize, columns: Vec<f64>) -> Result<Self> {
        let t = if n_assets == 0 {
            0
        } else {
            columns.len() / n_assets
        };
        let ids = (1..=n_assets).map(|i| format!("A{i}")).collect();
        let stamps = (0..t).map(|k| format!("{k:08}")).collect();
        Self::from_columns(ids, stamps, columns)
    }

    #[inline]
    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    #[inline]
    pub fn n_assets(&self) -> usize {
        self.asset_ids.len()
    }

    pub fn asset_ids(&self) -> &[String] {
        &self.asset_ids
    }

    pub fn timestamps(&self) -> &[String] {
        &self.timestamps
    }

    #[inline]
    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.columns[i * self.n_obs + t]
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.columns[i * self.n_obs..(i + 1) * self.n_obs]
    }

    pub fn row(&self, t: usize) -> Vec<f64> {
        (0..self.n_assets()).map(|i| self.get(t, i)).collect()
    }

    /// Rows `start..end` as a new panel.
    pub fn window(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n_obs {
            return Err(Error::InvalidInput(format!(
                "window {start}..{end} outside 0..{}",
                self.n_obs
            )));
        }
        let columns = (0..self.n_assets())
            .flat_map(|i| self.column(i)[start..end].iter().copied())
            .collect();
        Self::from_columns(
            self.asset_ids.clone(),
            self.timestamps[start..end].to_vec(),
            columns,
        )
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv(file)
    }

    /// Reads `date,<asset>,<asset>,...` with one row per period. Missing or
    /// unparseable cells are rejected with 1-based line/column coordinates.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::Parse {
            row: 1,
            col: 1,
            msg: e.to_string(),
        })?;
        if header.get(0) != Some("date") {
            return Err(Error::Parse {
                row: 1,
                col: 1,
                msg: "first header cell must be `date`".into(),
            });
        }
        let asset_ids: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
        let n = asset_ids.len();
        let mut stamps: Vec<String> = Vec::new();
        let mut rows = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let line = k + 2;
            let rec = rec.map_err(|e| Error::Parse {
                row: line,
                col: 1,
                msg: e.to_string(),
            })?;
            if rec.len() != n + 1 {
                return Err(Error::Parse {
                    row: line,
                    col: rec.len().min(n + 1) + 1,
                    msg: format!("expected {} cells, found {}", n + 1, rec.len()),
                });
            }
            let date = &rec[0];
            if date.is_empty() {
                return Err(Error::Parse {
                    row: line,
                    col: 1,
                    msg: "missing date".into(),
                });
            }
            let mut row = Vec::with_capacity(n);
            for (c, cell) in rec.iter().enumerate().skip(1) {
                if cell.is_empty() {
                    return Err(Error::Parse {
                        row: line,
                        col: c + 1,
                        msg: "missing value".into(),
                    });
                }
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    row: line,
                    col: c + 1,
                    msg: format!("`{cell}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row: line,
                        col: c + 1,
                        msg: format!("`{cell}` is not finite"),
                    });
                }
                row.push(v);
            }
            if let Some(prev) = stamps.last() {
                if date <= prev.as_str() {
                    return Err(Error::Parse {
                        row: line,
                        col: 1,
                        msg: format!("date `{date}` does not follow `{prev}`"),
                    });
                }
            }
            stamps.push(date.to_owned());
            rows.push(row);
        }
        Self::from_rows(asset_ids, stamps, &rows)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        let mut header = vec!["date".to_owned()];
        header.extend(self.asset_ids.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for t in 0..self.n_obs {
            let mut rec = vec![self.timestamps[t].clone()];
            rec.extend(self.row(t).iter().map(|v| format!("{v}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// How the location vector is removed before testing.
#[derive(Debug, Clone, PartialEq)]
pub enum Centering {
    KnownLocation(Vec<f64>),
    SampleMean,
}

/// Centered returns `y_t = r_t - mu`, column-major like [`ReturnsPanel`].
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredPanel {
    n_obs: usize,
    asset_ids: Vec<String>,
    location: Vec<f64>,
    centering: Centering,
    columns: Vec<f64>,
}

/// Subtracts either a supplied location vector or the column means.
pub fn center(panel: &ReturnsPanel, mode: &Centering) -> Result<CenteredPanel> {
    let n = panel.n_assets();
    let t = panel.n_obs();
    let location: Vec<f64> = match mode {
        Centering::KnownLocation(mu) => {
            if mu.len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    found: mu.len(),
                });
            }
            mu.clone()
        }
        Centering::SampleMean => (0..n)
            .map(|i| panel.column(i).iter().sum::<f64>() / t as f64)
            .collect(),
    };
    let columns = (0..n)
        .flat_map(|i| {
            let mu = location[i];
            panel.column(i).iter().map(move |r| r - mu)
        })
        .collect();
    Ok(CenteredPanel {
        n_obs: t,
        asset_ids: panel.asset_ids().to_vec(),
        location,
        centering: mode.clone(),
        columns,
    })
}

impl CenteredPanel {
    /// Wraps values that are already centered (e.g. resampled panels in tests).
    pub fn from_centered_columns(n_assets: usize, columns: Vec<f64>) -> Result<Self> {
        if n_assets < 2 {
            return Err(Error::TooSmall {
                what: "assets",
                required: 2,
                actual: n_assets,
            });
        }
        if columns.is_empty() || columns.len() % n_assets != 0 {
            return Err(Error::Dimension {
                expected: n_assets,
                found: columns.len(),
            });
        }
        Ok(Self {
            n_obs: columns.len() / n_assets,
            asset_ids: (1..=n_assets).map(|i| format!("A{i}")).collect(),
            location: vec![0.0; n_assets],
            centering: Centering::KnownLocation(vec![0.0; n_assets]),
            columns,
        })
    }

    #[inline]
    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    #[inline]
    pub fn n_assets(&self) -> usize {
        self.asset_ids.len()
    }

    pub fn asset_ids(&self) -> &[String] {
        &self.asset_ids
    }

    pub fn centering(&self) -> &Centering {
        &self.centering
    }

    pub fn location(&self) -> &[f64] {
        &self.location
    }

    #[inline]
    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.columns[i * self.n_obs + t]
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.columns[i * self.n_obs..(i + 1) * self.n_obs]
    }

    pub(crate) fn raw_columns(&self) -> &[f64] {
        &self.columns
    }

    /// `T^{-1} sum_t y_{i,t}^2` per asset.
    pub fn second_moments(&self) -> Vec<f64> {
        (0..self.n_assets())
            .map(|i| dot(self.column(i), self.column(i)) / self.n_obs as f64)
            .collect()
    }

    /// Second moments, failing on any exactly-zero column.
    pub fn checked_second_moments(&self) -> Result<Vec<f64>> {
        let m = self.second_moments();
        if let Some(i) = m.iter().position(|&v| v <= 0.0) {
            return Err(Error::DegenerateColumn {
                asset: self.asset_ids[i].clone(),
            });
        }
        Ok(m)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const CORR_SLACK: f64 = 1e-12;

/// Off-diagonal correlations about the origin, written into `out` in
/// half-vectorization order. `columns` is column-major `T x N`; `inv_norm[i]`
/// is `1 / sqrt(sum_t y_{i,t}^2)`.
pub(crate) fn origin_correlations_into(
    columns: &[f64],
    n_obs: usize,
    inv_norm: &[f64],
    out: &mut [f64],
) {
    let n = inv_norm.len();
    let mut pos = 0;
    for j in 0..n {
        let cj = &columns[j * n_obs..(j + 1) * n_obs];
        for i in j + 1..n {
            let ci = &columns[i * n_obs..(i + 1) * n_obs];
            let r = dot(ci, cj) * inv_norm[i] * inv_norm[j];
            out[pos] = r.clamp(-1.0, 1.0);
            pos += 1;
        }
    }
}

/// Correlation matrix built from second moments about the origin.
/// No mean is subtracted here; pass an already centered panel.
pub fn correlation_about_origin(panel: &CenteredPanel) -> Result<SymmetricMatrix> {
    Ok(origin_correlation_vechs(panel)?
        .fill()
        .expect("correlations clamped to [-1, 1]"))
}

/// Same as [`correlation_about_origin`] but returns only the half-vector.
pub fn origin_correlation_vechs(panel: &CenteredPanel) -> Result<HalfVec> {
    let n = panel.n_assets();
    let t = panel.n_obs();
    let moments = panel.checked_second_moments()?;
    let inv_norm: Vec<f64> = moments
        .iter()
        .map(|m| 1.0 / (m * t as f64).sqrt())
        .collect();
    let mut out = vec![0.0; pair_count(n)];
    // unclamped pass first so that gross violations are reported, not hidden
    let mut pos = 0;
    for j in 0..n {
        for i in j + 1..n {
            let r = dot(panel.column(i), panel.column(j)) * inv_norm[i] * inv_norm[j];
            if r.abs() > 1.0 + CORR_SLACK {
                return Err(Error::InvalidInput(format!(
                    "correlation ({i}, {j}) = {r} exceeds unit magnitude"
                )));
            }
            out[pos] = r.clamp(-1.0, 1.0);
            pos += 1;
        }
    }
    HalfVec::new(out)
}
