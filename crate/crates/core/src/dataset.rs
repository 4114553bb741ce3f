//! Observation matrices with named columns, plus CSV interchange.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Result, SamError};
use crate::tensor::Tensor;

/// n x d matrix of continuous observations plus column names.
#[derive(Clone, Debug)]
pub struct Dataset {
    names: Vec<String>,
    values: Tensor,
}

impl Dataset {
    pub fn new(names: Vec<String>, values: Tensor) -> Result<Self> {
        if names.len() != values.cols() {
            return Err(SamError::contract(format!(
                "{} column names for {} columns",
                names.len(),
                values.cols()
            )));
        }
        if !values.all_finite() {
            return Err(SamError::contract("dataset contains non-finite values"));
        }
        Ok(Dataset { names, values })
    }

    /// Columns named X1..Xd.
    pub fn with_default_names(values: Tensor) -> Self {
        let names = (1..=values.cols()).map(|i| format!("X{i}")).collect();
        Dataset { names, values }
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn d(&self) -> usize {
        self.values.cols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Zero mean, unit variance per column (population moments).
    pub fn standardize(&self) -> Dataset {
        let (n, d) = (self.n(), self.d());
        let mut out = self.values.clone();
        for j in 0..d {
            let col = self.values.column(j);
            let mean = col.mean();
            let var = col.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let std = var.sqrt().max(f64::MIN_POSITIVE);
            for i in 0..n {
                out.set(i, j, (self.values.at(i, j) - mean) / std);
            }
        }
        Dataset {
            names: self.names.clone(),
            values: out,
        }
    }

    pub fn from_csv_path(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        Dataset::from_csv(BufReader::new(file))
    }

    /// Header row of names, then comma-separated decimals. Rows with
    /// non-numeric cells are rejected with their line number.
    pub fn from_csv<R: Read>(reader: R) -> Result<Dataset> {
        let reader = BufReader::new(reader);
        let mut lines = reader.lines();
        let header = match lines.next() {
            Some(line) => line?,
            None => {
                return Err(SamError::Csv {
                    line: 1,
                    message: "empty file".to_string(),
                })
            }
        };
        let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let d = names.len();
        let mut data = Vec::new();
        let mut n = 0usize;
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != d {
                return Err(SamError::Csv {
                    line: line_no,
                    message: format!("expected {d} cells, found {}", cells.len()),
                });
            }
            for cell in &cells {
                let v: f64 = cell.trim().parse().map_err(|_| SamError::Csv {
                    line: line_no,
                    message: format!("non-numeric cell {:?}", cell.trim()),
                })?;
                if !v.is_finite() {
                    return Err(SamError::Csv {
                        line: line_no,
                        message: format!("non-finite cell {:?}", cell.trim()),
                    });
                }
                data.push(v);
            }
            n += 1;
        }
        Dataset::new(names, Tensor::new(vec![n, d], data))
    }

    pub fn to_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.names.join(","))?;
        for i in 0..self.n() {
            let row: Vec<String> = self.values.row(i).iter().map(|v| format_f64(*v)).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn to_csv_path(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.to_csv(std::io::BufWriter::new(file))
    }
}

/// 17 significant digits: enough for exact f64 round-trips.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a named square matrix (scores or adjacency) as CSV.
pub fn write_matrix_csv<W: Write>(mut w: W, names: &[String], m: &Tensor) -> Result<()> {
    writeln!(w, "{}", names.join(","))?;
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format_f64(*v)).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn write_matrix_csv_path(path: &Path, names: &[String], m: &Tensor) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_matrix_csv(std::io::BufWriter::new(file), names, m)
}

/// Reads a named square matrix written by [`write_matrix_csv`].
pub fn read_matrix_csv<R: Read>(reader: R) -> Result<(Vec<String>, Tensor)> {
    let ds = Dataset::from_csv(reader)?;
    let (names, values) = (ds.names.clone(), ds.values);
    if values.rows() != values.cols() {
        return Err(SamError::contract(format!(
            "expected a square matrix, got {} x {}",
            values.rows(),
            values.cols()
        )));
    }
    Ok((names, values))
}

pub fn read_matrix_csv_path(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let file = std::fs::File::open(path)?;
    read_matrix_csv(BufReader::new(file))
}
