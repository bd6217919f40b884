//! CSV time-series datasets.
//!
//! A header row is required. A column named `t` holds time stamps and a column
//! named `seq` holds integer sequence ids; both are optional. Every other
//! column is an output feature. Without `t`, each sequence is stamped 1, 2, ….

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Result, VgpdsError};

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    /// N×D outputs.
    pub y: DMatrix<f64>,
    pub times: Vec<f64>,
    /// Sequence id per row.
    pub seq: Vec<i64>,
    /// Feature column names, D of them.
    pub columns: Vec<String>,
}

impl TimeSeriesDataset {
    /// Builds and validates a dataset; `times` defaults to 1..n per sequence.
    pub fn new(y: DMatrix<f64>, times: Option<Vec<f64>>, seq: Option<Vec<i64>>, columns: Option<Vec<String>>) -> Result<Self> {
        let n = y.nrows();
        let seq = seq.unwrap_or_else(|| vec![0; n]);
        let times = times.unwrap_or_else(|| default_times(&seq));
        let columns = columns.unwrap_or_else(|| (1..=y.ncols()).map(|j| format!("y{j}")).collect());
        let ds = TimeSeriesDataset { y, times, seq, columns };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.y.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.nrows();
        if self.times.len() != n || self.seq.len() != n || self.columns.len() != self.y.ncols() {
            return Err(VgpdsError::Shape("dataset columns have inconsistent lengths".into()));
        }
        for i in 0..n {
            for j in 0..self.y.ncols() {
                let v = self.y[(i, j)];
                if !v.is_finite() {
                    return Err(VgpdsError::Validation(format!(
                        "non-finite value {v} at row {}, column '{}'",
                        i + 1,
                        self.columns[j]
                    )));
                }
            }
            if !self.times[i].is_finite() {
                return Err(VgpdsError::Validation(format!("non-finite time stamp at row {}", i + 1)));
            }
        }
        let mut last: std::collections::HashMap<i64, f64> = std::collections::HashMap::new();
        for (i, (&s, &t)) in self.seq.iter().zip(&self.times).enumerate() {
            if let Some(&prev) = last.get(&s) {
                if t <= prev {
                    return Err(VgpdsError::Validation(format!(
                        "time stamps of sequence {s} are not strictly increasing at row {}",
                        i + 1
                    )));
                }
            }
            last.insert(s, t);
        }
        Ok(())
    }

    /// Dense group index per row, numbered by first appearance of each sequence id.
    pub fn group_indices(&self) -> Vec<usize> {
        let mut ids: Vec<i64> = Vec::new();
        self.seq
            .iter()
            .map(|s| match ids.iter().position(|x| x == s) {
                Some(p) => p,
                None => {
                    ids.push(*s);
                    ids.len() - 1
                }
            })
            .collect()
    }

    /// Distinct sequence ids in order of first appearance.
    pub fn sequence_ids(&self) -> Vec<i64> {
        let mut ids: Vec<i64> = Vec::new();
        for s in &self.seq {
            if !ids.contains(s) {
                ids.push(*s);
            }
        }
        ids
    }

    /// Rows whose sequence id is in `ids`, in their original order.
    pub fn select_sequences(&self, ids: &[i64]) -> Result<Self> {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| ids.contains(&self.seq[i])).collect();
        TimeSeriesDataset::new(
            crate::linalg::select_rows(&self.y, &rows),
            Some(rows.iter().map(|&i| self.times[i]).collect()),
            Some(rows.iter().map(|&i| self.seq[i]).collect()),
            Some(self.columns.clone()),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| parse_error(&e, 1))?.clone();
        let t_col = headers.iter().position(|h| h == "t");
        let s_col = headers.iter().position(|h| h == "seq");
        let feat: Vec<usize> = (0..headers.len()).filter(|&j| Some(j) != t_col && Some(j) != s_col).collect();
        if feat.is_empty() {
            return Err(VgpdsError::Parse { line: 1, message: "no feature columns in header".into() });
        }
        let columns: Vec<String> = feat.iter().map(|&j| headers[j].to_string()).collect();

        let mut values = Vec::new();
        let mut times = Vec::new();
        let mut seq = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| parse_error(&e, 0))?;
            let line = rec.position().map_or(0, |p| p.line());
            let field = |j: usize| -> Result<f64> {
                rec[j].parse::<f64>().map_err(|_| VgpdsError::Parse {
                    line,
                    message: format!("column '{}': cannot parse '{}' as a number", &headers[j], &rec[j]),
                })
            };
            for &j in &feat {
                let v = field(j)?;
                if !v.is_finite() {
                    return Err(VgpdsError::Validation(format!(
                        "non-finite value at line {line}, column '{}'",
                        &headers[j]
                    )));
                }
                values.push(v);
            }
            if let Some(j) = t_col {
                times.push(field(j)?);
            }
            if let Some(j) = s_col {
                let s = rec[j].parse::<i64>().map_err(|_| VgpdsError::Parse {
                    line,
                    message: format!("sequence id '{}' is not an integer", &rec[j]),
                })?;
                seq.push(s);
            }
        }
        let n = values.len() / feat.len();
        let y = DMatrix::from_row_slice(n, feat.len(), &values);
        TimeSeriesDataset::new(y, t_col.map(|_| times), s_col.map(|_| seq), Some(columns))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_writer(std::fs::File::create(path)?)
    }

    /// Writes `t,seq,<features>`; values use the shortest exact decimal form.
    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string(), "seq".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(csv_io)?;
        for i in 0..self.len() {
            let mut row = vec![self.times[i].to_string(), self.seq[i].to_string()];
            row.extend(self.y.row(i).iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn default_times(seq: &[i64]) -> Vec<f64> {
    let mut counts: std::collections::HashMap<i64, usize> = std::collections::HashMap::new();
    seq.iter()
        .map(|s| {
            let c = counts.entry(*s).or_insert(0);
            *c += 1;
            *c as f64
        })
        .collect()
}

fn parse_error(e: &csv::Error, fallback_line: u64) -> VgpdsError {
    let line = e.position().map_or(fallback_line, |p| p.line());
    VgpdsError::Parse { line, message: e.to_string() }
}

fn csv_io(e: csv::Error) -> VgpdsError {
    VgpdsError::Io(std::io::Error::other(e.to_string()))
}

/// Reads a single-column (optionally headed) list of numbers, e.g. test time stamps.
pub fn load_column(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let cell = line.split(',').next().unwrap_or("").trim();
        if cell.is_empty() {
            continue;
        }
        match cell.parse::<f64>() {
            Ok(v) if v.is_finite() => out.push(v),
            Ok(_) => return Err(VgpdsError::Validation(format!("non-finite value at line {}", i + 1))),
            Err(_) if i == 0 => continue,
            Err(_) => return Err(VgpdsError::Parse { line: i as u64 + 1, message: format!("cannot parse '{cell}'") }),
        }
    }
    Ok(out)
}

/// Writes a matrix as CSV with the given header.
pub fn save_matrix(path: &Path, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record(header).map_err(csv_io)?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}
