//! Feature matrix files: a comma-separated table with a header row of column
//! names, plus a sidecar table of per-row metadata (device id, timestamp,
//! ground-truth label).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Scheme;
use crate::error::{Error, Result};
use crate::ingest::Label;
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMeta {
    pub device_id: String,
    pub timestamp: f64,
    pub label: Label,
}

/// A featurized stream: the numeric matrix with its row metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub scheme: Scheme,
    pub matrix: Matrix,
    pub meta: Vec<RowMeta>,
}

impl FeatureTable {
    /// Restricts to rows whose label is not `attack`.
    pub fn normal_rows(&self) -> Matrix {
        let idx: Vec<usize> = (0..self.meta.len())
            .filter(|&i| self.meta[i].label != Label::Attack)
            .collect();
        self.matrix.select_rows(&idx)
    }
}

/// `features.csv` → `features.labels.csv`.
pub fn sidecar_path(matrix_path: &Path) -> PathBuf {
    let stem = matrix_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    matrix_path.with_file_name(format!("{stem}.labels.csv"))
}

pub fn write_feature_table(path: &Path, table: &FeatureTable) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "{}", table.scheme.column_names().join(",")).map_err(io)?;
    for row in table.matrix.iter_rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)?;

    let side = sidecar_path(path);
    let io = |e| Error::io(&side, e);
    let mut w = BufWriter::new(File::create(&side).map_err(io)?);
    writeln!(w, "row,device_id,timestamp,label").map_err(io)?;
    for (i, m) in table.meta.iter().enumerate() {
        writeln!(w, "{i},{},{},{}", m.device_id, m.timestamp, m.label.as_str()).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::data(format!("{}: {e}", path.display()))
}

pub fn read_feature_table(path: &Path) -> Result<FeatureTable> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    let scheme = Scheme::from_dim(header.len()).ok_or_else(|| {
        Error::data(format!(
            "{}: {} columns does not match any feature scheme",
            path.display(),
            header.len()
        ))
    })?;
    if header != scheme.column_names() {
        return Err(Error::data(format!(
            "{}: header does not match the {scheme} column order",
            path.display()
        )));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::data(format!("{}: bad number `{field}`", path.display())))?;
            data.push(v);
        }
        rows += 1;
    }
    let matrix = Matrix::from_vec(rows, header.len(), data)?;

    let side = sidecar_path(path);
    let mut meta = Vec::with_capacity(rows);
    let mut rdr = csv::Reader::from_path(&side).map_err(|e| csv_err(&side, e))?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(&side, e))?;
        if rec.len() != 4 {
            return Err(Error::data(format!("{}: expected 4 fields", side.display())));
        }
        let timestamp: f64 = rec[2]
            .parse()
            .map_err(|_| Error::data(format!("{}: bad timestamp", side.display())))?;
        meta.push(RowMeta {
            device_id: rec[1].to_owned(),
            timestamp,
            label: Label::parse(&rec[3])?,
        });
    }
    if meta.len() != rows {
        return Err(Error::data(format!(
            "{}: {} label rows for {rows} feature rows",
            side.display(),
            meta.len()
        )));
    }
    Ok(FeatureTable { scheme, matrix, meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dev.csv");
        let scheme = Scheme::ThreeRange;
        let rows = vec![vec![0.25; 27], vec![0.1; 27]];
        let t = FeatureTable {
            scheme,
            matrix: Matrix::from_rows(27, &rows).unwrap(),
            meta: vec![
                RowMeta { device_id: "d0".into(), timestamp: 1.5, label: Label::Normal },
                RowMeta { device_id: "d0".into(), timestamp: 2.0, label: Label::Attack },
            ],
        };
        write_feature_table(&p, &t).unwrap();
        assert!(sidecar_path(&p).ends_with("dev.labels.csv"));
        let back = read_feature_table(&p).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.normal_rows().rows(), 1);
    }
}
