//! Observational samples `(Y, D, Z, X)` with a discrete instrument.
//!
//! The instrument is stored as an index into an ordered [`InstrumentSupport`];
//! raw `Z` labels are mapped to indices by sorted distinct value, so the
//! mapping is order preserving.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: f64,
    pub d: u8,
    pub z_index: usize,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentSupport {
    values: Vec<f64>,
    reference_index: usize,
}

impl InstrumentSupport {
    /// Support with the largest value as the reference point.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let last = values.len().saturating_sub(1);
        Self::with_reference(values, last)
    }

    pub fn with_reference(values: Vec<f64>, reference_index: usize) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::TooFewInstrumentValues(values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite instrument value".into()));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidDataset(
                "instrument support must be strictly increasing".into(),
            ));
        }
        if reference_index >= values.len() {
            return Err(Error::InvalidParameter(format!(
                "reference index {reference_index} out of range for L={}",
                values.len()
            )));
        }
        Ok(Self { values, reference_index })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn reference_index(&self) -> usize {
        self.reference_index
    }

    /// Non-reference instrument indices in increasing order; these index the
    /// `L - 1` contrast components.
    pub fn contrast_indices(&self) -> Vec<usize> {
        (0..self.values.len()).filter(|&z| z != self.reference_index).collect()
    }
}

/// Column names used to read a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub y: String,
    pub d: String,
    pub z: String,
    pub x: Vec<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self { y: "y".into(), d: "d".into(), z: "z".into(), x: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    observations: Vec<Observation>,
    support: InstrumentSupport,
    x_dim: usize,
}

impl Dataset {
    pub fn new(
        observations: Vec<Observation>,
        support: InstrumentSupport,
        x_dim: usize,
    ) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::InvalidDataset("no observations".into()));
        }
        for (i, o) in observations.iter().enumerate() {
            if !o.y.is_finite() {
                return Err(Error::BadRow { row: i + 1, message: "non-finite outcome".into() });
            }
            if o.d > 1 {
                return Err(Error::NonBinaryTreatment { row: i + 1, value: o.d as f64 });
            }
            if o.z_index >= support.len() {
                return Err(Error::BadRow {
                    row: i + 1,
                    message: format!("z_index {} outside support of size {}", o.z_index, support.len()),
                });
            }
            if o.x.len() != x_dim {
                return Err(Error::BadRow {
                    row: i + 1,
                    message: format!("expected {x_dim} covariates, found {}", o.x.len()),
                });
            }
            if o.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::BadRow { row: i + 1, message: "non-finite covariate".into() });
            }
        }
        Ok(Self { observations, support, x_dim })
    }

    /// Builds a dataset from raw instrument labels, mapping them to indices by
    /// sorted distinct value.
    pub fn from_raw(rows: Vec<(f64, u8, f64, Vec<f64>)>, reference: Option<usize>) -> Result<Self> {
        let x_dim = rows.first().map(|r| r.3.len()).unwrap_or(0);
        let mut labels: Vec<f64> = rows.iter().map(|r| r.2).collect();
        if labels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite instrument value".into()));
        }
        labels.sort_by(f64::total_cmp);
        labels.dedup();
        let support = match reference {
            Some(r) => InstrumentSupport::with_reference(labels, r)?,
            None => InstrumentSupport::new(labels)?,
        };
        let observations = rows
            .into_iter()
            .map(|(y, d, z, x)| {
                let z_index = support
                    .values()
                    .binary_search_by(|v| v.total_cmp(&z))
                    .expect("label present in support");
                Observation { y, d, z_index, x }
            })
            .collect();
        Self::new(observations, support, x_dim)
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn support(&self) -> &InstrumentSupport {
        &self.support
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn num_instruments(&self) -> usize {
        self.support.len()
    }

    pub fn cell_counts(&self) -> CellCounts {
        let mut counts = vec![[0usize; 2]; self.support.len()];
        for o in &self.observations {
            counts[o.z_index][o.d as usize] += 1;
        }
        CellCounts { counts }
    }

    /// Cells with fewer than two observations, which estimation rejects.
    pub fn validation_report(&self) -> ValidationReport {
        let counts = self.cell_counts();
        let sparse_cells = counts
            .cells()
            .filter(|&(_, _, n)| n < 2)
            .map(|(d, z, n)| SparseCell { d, z_index: z, count: n })
            .collect();
        ValidationReport { n: self.len(), sparse_cells }
    }

    /// Nonparametric resample of the observations (pairs bootstrap).
    pub fn resample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Dataset {
        let n = self.observations.len();
        let observations = (0..n)
            .map(|_| self.observations[rng.random_range(0..n)].clone())
            .collect();
        Dataset { observations, support: self.support.clone(), x_dim: self.x_dim }
    }

    pub fn outcome_range(&self) -> (f64, f64) {
        self.observations.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), o| {
            (lo.min(o.y), hi.max(o.y))
        })
    }

    /// Reads a headered CSV file. Lines starting with `#` are ignored.
    pub fn load_csv(path: impl AsRef<Path>, columns: &ColumnMap, reference: Option<usize>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file, columns, reference)
    }

    pub fn read_csv<R: Read>(reader: R, columns: &ColumnMap, reference: Option<usize>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let yi = find(&columns.y)?;
        let di = find(&columns.d)?;
        let zi = find(&columns.z)?;
        let xi: Vec<usize> = columns.x.iter().map(|c| find(c)).collect::<Result<_>>()?;

        let mut rows = Vec::new();
        for (k, record) in rdr.records().enumerate() {
            let record = record?;
            let row = k + 1;
            let field = |idx: usize, name: &str| -> Result<f64> {
                let raw = record.get(idx).unwrap_or("");
                if raw.is_empty() {
                    return Err(Error::BadRow { row, message: format!("missing value in `{name}`") });
                }
                raw.parse::<f64>().map_err(|_| Error::BadRow {
                    row,
                    message: format!("cannot parse `{raw}` in `{name}`"),
                })
            };
            let y = field(yi, &columns.y)?;
            if !y.is_finite() {
                return Err(Error::BadRow { row, message: "non-finite outcome".into() });
            }
            let d = field(di, &columns.d)?;
            let d = if d == 0.0 {
                0
            } else if d == 1.0 {
                1
            } else {
                return Err(Error::NonBinaryTreatment { row, value: d });
            };
            let z = field(zi, &columns.z)?;
            let x = xi
                .iter()
                .zip(&columns.x)
                .map(|(&i, name)| field(i, name))
                .collect::<Result<Vec<_>>>()?;
            rows.push((y, d, z, x));
        }
        Self::from_raw(rows, reference)
    }

    /// Writes the dataset as CSV with raw instrument labels; `header` lines are
    /// emitted as `#` comments before the column header.
    pub fn write_csv<W: Write>(&self, mut out: W, header: &[String]) -> Result<()> {
        for line in header {
            writeln!(out, "# {line}")?;
        }
        let mut cols = vec!["y".to_string(), "d".to_string(), "z".to_string()];
        cols.extend((0..self.x_dim).map(|j| format!("x{}", j + 1)));
        writeln!(out, "{}", cols.join(","))?;
        for o in &self.observations {
            write!(out, "{},{},{}", o.y, o.d, self.support.values()[o.z_index])?;
            for v in &o.x {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Column map matching [`Dataset::write_csv`] output.
    pub fn dump_columns(&self) -> ColumnMap {
        ColumnMap {
            x: (0..self.x_dim).map(|j| format!("x{}", j + 1)).collect(),
            ..ColumnMap::default()
        }
    }
}

/// Observation counts per `(d, z)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCounts {
    counts: Vec<[usize; 2]>,
}

impl CellCounts {
    pub fn get(&self, d: u8, z_index: usize) -> usize {
        self.counts[z_index][d as usize]
    }

    pub fn instrument_total(&self, z_index: usize) -> usize {
        self.counts[z_index][0] + self.counts[z_index][1]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|c| c[0] + c[1]).sum()
    }

    /// Iterates `(d, z_index, count)`.
    pub fn cells(&self) -> impl Iterator<Item = (u8, usize, usize)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .flat_map(|(z, c)| [(0u8, z, c[0]), (1u8, z, c[1])])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseCell {
    pub d: u8,
    pub z_index: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n: usize,
    pub sparse_cells: Vec<SparseCell>,
}

impl ValidationReport {
    pub fn is_estimable(&self) -> bool {
        self.sparse_cells.is_empty()
    }
}
