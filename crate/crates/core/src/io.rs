//! Matrix files: headerless CSV or the `MNM1` binary layout
//! (magic, u32 version, u64 rows, u64 cols, row-major f64, all little-endian).

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{input, Error, Result};

pub const MAGIC: &[u8; 4] = b"MNM1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Csv,
    Binary,
}

impl MatrixFormat {
    /// `.bin` and `.mnm` select binary; anything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("mnm") => MatrixFormat::Binary,
            _ => MatrixFormat::Csv,
        }
    }
}

pub fn encode_binary(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    out
}

pub fn decode_binary(bytes: &[u8]) -> Result<DMatrix<f64>> {
    if bytes.len() < HEADER_LEN {
        return input(format!(
            "binary matrix: header truncated at byte {} (need {HEADER_LEN})",
            bytes.len()
        ));
    }
    if &bytes[0..4] != MAGIC {
        return input("binary matrix: bad magic at byte 0 (expected \"MNM1\")");
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return input(format!("binary matrix: unsupported version {version} at byte 4"));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN as u64))
        .ok_or_else(|| Error::Input(format!("binary matrix: {rows}×{cols} overflows at byte 8")))?;
    if (bytes.len() as u64) != expected {
        return input(format!(
            "binary matrix: payload ends at byte {}, expected {expected} for {rows}×{cols}",
            bytes.len()
        ));
    }
    if rows == 0 || cols == 0 {
        return input("binary matrix: zero-sized matrix at byte 8");
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let payload = &bytes[HEADER_LEN..];
    Ok(DMatrix::from_fn(rows, cols, |i, j| {
        let o = 8 * (i * cols + j);
        f64::from_le_bytes(payload[o..o + 8].try_into().unwrap())
    }))
}

pub fn encode_csv(m: &DMatrix<f64>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for row in m.row_iter() {
        w.write_record(row.iter().map(|x| format!("{x:?}")))
            .map_err(|e| Error::Input(format!("csv write: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| Error::Input(format!("csv write: {e}")))
}

pub fn decode_csv(bytes: &[u8]) -> Result<DMatrix<f64>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (li, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Input(format!("csv line {}: {e}", li + 1)))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(ci, cell)| {
                cell.trim().parse::<f64>().map_err(|_| {
                    Error::Input(format!(
                        "csv line {}, column {}: non-numeric cell {cell:?}",
                        li + 1,
                        ci + 1
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return input(format!(
                    "csv line {}: {} cells, expected {}",
                    li + 1,
                    row.len(),
                    first.len()
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() || rows[0].is_empty() {
        return input("csv: empty matrix");
    }
    Ok(DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]))
}

/// Read a matrix, detecting binary files by their magic bytes.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let res = if bytes.starts_with(MAGIC) {
        decode_binary(&bytes)
    } else {
        decode_csv(&bytes)
    };
    res.map_err(|e| match e {
        Error::Input(m) => Error::Input(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>, format: MatrixFormat) -> Result<()> {
    let bytes = match format {
        MatrixFormat::Binary => encode_binary(m),
        MatrixFormat::Csv => encode_csv(m)?,
    };
    fs::write(path, bytes)?;
    Ok(())
}
