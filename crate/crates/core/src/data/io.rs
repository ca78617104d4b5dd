//! Matrix and table file formats.
//!
//! Matrices travel as headered CSV (row 0 = column names, values printed
//! as shortest round-trip decimals) with a sidecar JSON manifest carrying
//! shape, seed, and producing stage. The round trip is bit-exact for
//! finite values.

use crate::data::{Modality, SplitPart};
use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Sidecar manifest describing one stored matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixMeta {
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    pub stage: String,
}

/// Path of the sidecar manifest belonging to a matrix CSV.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn fmt_value(v: f64) -> String {
    // Display for f64 prints the shortest decimal that parses back to
    // the identical bits, which is exactly the round-trip contract.
    format!("{v}")
}

fn parse_value(s: &str, path: &Path) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Malformed {
        path: path.display().to_string(),
        detail: format!("unparseable value {s:?}"),
    })
}

/// Writes a rectangular matrix plus its sidecar manifest.
pub fn save_matrix(path: &Path, matrix: &Array2<f64>, seed: u64, stage: &str) -> Result<()> {
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("matrix for {}", path.display())));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (0..matrix.ncols()).map(|j| format!("d{j}")).collect();
    w.write_record(&header)?;
    for row in matrix.rows() {
        let rec: Vec<String> = row.iter().map(|&v| fmt_value(v)).collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    let meta = MatrixMeta {
        rows: matrix.nrows(),
        cols: matrix.ncols(),
        seed,
        stage: stage.to_string(),
    };
    let json = serde_json::to_string_pretty(&meta)?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

/// Reads a matrix and checks it against its sidecar manifest.
pub fn load_matrix(path: &Path) -> Result<(Array2<f64>, MatrixMeta)> {
    let meta_path = sidecar_path(path);
    let meta_raw = std::fs::read_to_string(&meta_path).map_err(|_| Error::Malformed {
        path: meta_path.display().to_string(),
        detail: "missing sidecar manifest".into(),
    })?;
    let meta: MatrixMeta = serde_json::from_str(&meta_raw).map_err(|e| Error::Malformed {
        path: meta_path.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut values: Vec<f64> = Vec::with_capacity(meta.rows * meta.cols);
    let mut rows = 0usize;
    for record in r.records() {
        let record = record?;
        if record.len() != meta.cols {
            return Err(Error::Malformed {
                path: path.display().to_string(),
                detail: format!(
                    "row {} has {} columns, manifest says {}",
                    rows,
                    record.len(),
                    meta.cols
                ),
            });
        }
        for field in record.iter() {
            values.push(parse_value(field, path)?);
        }
        rows += 1;
    }
    if rows != meta.rows {
        return Err(Error::Malformed {
            path: path.display().to_string(),
            detail: format!("file has {rows} rows, manifest says {}", meta.rows),
        });
    }
    let matrix = Array2::from_shape_vec((meta.rows, meta.cols), values)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok((matrix, meta))
}

/// One bag-level embedding row with its split/part tags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub patient_id: String,
    pub part: SplitPart,
    pub label: usize,
    pub z: Vec<f64>,
}

/// All embeddings of one modality, ordered by patient id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub modality: Modality,
    pub dim: usize,
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingTable {
    pub fn rows_in(&self, part: SplitPart) -> Vec<&EmbeddingRow> {
        self.rows.iter().filter(|r| r.part == part).collect()
    }
}

/// Writes an embedding table as CSV with tag columns followed by z0..zD.
pub fn save_embeddings(path: &Path, table: &EmbeddingTable) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["patient_id".to_string(), "part".to_string(), "label".to_string()];
    header.extend((0..table.dim).map(|j| format!("z{j}")));
    w.write_record(&header)?;
    for row in &table.rows {
        let mut rec = vec![row.patient_id.clone(), row.part.to_string(), row.label.to_string()];
        rec.extend(row.z.iter().map(|&v| fmt_value(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_embeddings(path: &Path, modality: Modality) -> Result<EmbeddingTable> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = r.headers()?.clone();
    if header.len() < 4 {
        return Err(Error::Malformed {
            path: path.display().to_string(),
            detail: "embedding table needs tag columns plus z columns".into(),
        });
    }
    let dim = header.len() - 3;
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record?;
        let part = match &record[1] {
            "train" => SplitPart::Train,
            "val" => SplitPart::Val,
            "test" => SplitPart::Test,
            other => {
                return Err(Error::Malformed {
                    path: path.display().to_string(),
                    detail: format!("unknown part tag {other:?}"),
                })
            }
        };
        let label: usize = record[2].parse().map_err(|_| Error::Malformed {
            path: path.display().to_string(),
            detail: format!("bad label {:?}", &record[2]),
        })?;
        let mut z = Vec::with_capacity(dim);
        for field in record.iter().skip(3) {
            z.push(parse_value(field, path)?);
        }
        rows.push(EmbeddingRow { patient_id: record[0].to_string(), part, label, z });
    }
    Ok(EmbeddingTable { modality, dim, rows })
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let raw = std::fs::read_to_string(path)?;
    serde_json::from_str(&raw).map_err(|e| Error::Malformed {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}
