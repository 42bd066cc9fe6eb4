//! Matrix Market text files and a raw little-endian block format for dense data.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::sparse::{SparseMatrix, TripletBuilder};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Format(String),
}

fn parse<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T, IoError> {
    tok.ok_or_else(|| IoError::Format(format!("missing {what}")))?
        .parse()
        .map_err(|_| IoError::Format(format!("bad {what}")))
}

/// Writes a general real coordinate Matrix Market file (1-based indices).
pub fn write_matrix_market(path: &Path, a: &SparseMatrix) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(w, "{} {} {}", a.nrows(), a.ncols(), a.nnz())?;
    for (i, j, v) in a.iter() {
        writeln!(w, "{} {} {:.17e}", i + 1, j + 1, v)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads coordinate (general or symmetric) Matrix Market files.
pub fn read_matrix_market(path: &Path) -> Result<SparseMatrix, IoError> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines.next().ok_or_else(|| IoError::Format("empty file".into()))??;
    let h = header.to_lowercase();
    if !h.starts_with("%%matrixmarket matrix coordinate real") {
        return Err(IoError::Format(format!("unsupported header: {header}")));
    }
    let symmetric = h.contains("symmetric");
    let mut size_line = None;
    for line in lines.by_ref() {
        let line = line?;
        if !line.trim().is_empty() && !line.starts_with('%') {
            size_line = Some(line);
            break;
        }
    }
    let size_line = size_line.ok_or_else(|| IoError::Format("missing size line".into()))?;
    let mut it = size_line.split_whitespace();
    let nrows: usize = parse(it.next(), "row count")?;
    let ncols: usize = parse(it.next(), "column count")?;
    let nnz: usize = parse(it.next(), "entry count")?;
    let mut b = TripletBuilder::with_capacity(nrows, ncols, nnz);
    let mut count = 0;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('%') {
            continue;
        }
        let mut it = line.split_whitespace();
        let i: usize = parse(it.next(), "row index")?;
        let j: usize = parse(it.next(), "column index")?;
        let v: f64 = parse(it.next(), "value")?;
        if i == 0 || j == 0 || i > nrows || j > ncols {
            return Err(IoError::Format(format!("entry ({i}, {j}) out of range")));
        }
        b.push(i - 1, j - 1, v);
        if symmetric && i != j {
            b.push(j - 1, i - 1, v);
        }
        count += 1;
    }
    if count != nnz {
        return Err(IoError::Format(format!("expected {nnz} entries, read {count}")));
    }
    Ok(b.build())
}

/// Dense column-major Matrix Market array file.
pub fn write_dense_matrix_market(path: &Path, a: &DMatrix<f64>) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "%%MatrixMarket matrix array real general")?;
    writeln!(w, "{} {}", a.nrows(), a.ncols())?;
    for v in a.iter() {
        writeln!(w, "{v:.17e}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dense_matrix_market(path: &Path) -> Result<DMatrix<f64>, IoError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default().to_lowercase();
    if !header.starts_with("%%matrixmarket matrix array real") {
        return Err(IoError::Format(format!("unsupported header: {header}")));
    }
    let mut toks = lines.filter(|l| !l.starts_with('%')).flat_map(str::split_whitespace);
    let nrows: usize = parse(toks.next(), "row count")?;
    let ncols: usize = parse(toks.next(), "column count")?;
    let data = toks
        .map(|t| t.parse::<f64>().map_err(|_| IoError::Format(format!("bad value {t}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if data.len() != nrows * ncols {
        return Err(IoError::Format(format!(
            "expected {} values, read {}",
            nrows * ncols,
            data.len()
        )));
    }
    Ok(DMatrix::from_vec(nrows, ncols, data))
}

const BLOCK_MAGIC: &str = "F64BLOCK";

/// One ASCII header line `F64BLOCK <name> <rows> <cols>` then `rows*cols`
/// little-endian f64, row-major. `name` must not contain whitespace.
pub fn write_block(path: &Path, name: &str, a: &DMatrix<f64>) -> Result<(), IoError> {
    if name.is_empty() || name.contains(char::is_whitespace) {
        return Err(IoError::Format(format!("invalid block name `{name}`")));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{BLOCK_MAGIC} {name} {} {}", a.nrows(), a.ncols())?;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            w.write_all(&a[(i, j)].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Returns the block name and its matrix.
pub fn read_block(path: &Path) -> Result<(String, DMatrix<f64>), IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let mut it = header.split_whitespace();
    if it.next() != Some(BLOCK_MAGIC) {
        return Err(IoError::Format("missing block header".into()));
    }
    let name: String = parse(it.next(), "block name")?;
    let nrows: usize = parse(it.next(), "row count")?;
    let ncols: usize = parse(it.next(), "column count")?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * nrows * ncols {
        return Err(IoError::Format(format!(
            "expected {} bytes of data, found {}",
            8 * nrows * ncols,
            bytes.len()
        )));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((name, DMatrix::from_row_slice(nrows, ncols, &vals)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = TripletBuilder::new(3, 4);
        b.push(0, 0, 1.5);
        b.push(2, 3, -1.0 / 3.0);
        b.push(1, 2, 1e-300);
        let a = b.build();
        let p = dir.path().join("a.mtx");
        write_matrix_market(&p, &a).unwrap();
        let back = read_matrix_market(&p).unwrap();
        assert_eq!(back.to_dense(), a.to_dense());
    }

    #[test]
    fn dense_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = DMatrix::from_fn(3, 2, |i, j| (i as f64 + 0.1) / (j as f64 + 7.0));
        let p = dir.path().join("a.mtx");
        write_dense_matrix_market(&p, &a).unwrap();
        assert_eq!(read_dense_matrix_market(&p).unwrap(), a);
        let q = dir.path().join("a.bin");
        write_block(&q, "A_1", &a).unwrap();
        assert_eq!(read_block(&q).unwrap(), ("A_1".to_string(), a));
    }

    #[test]
    fn truncated_block_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        std::fs::write(&p, "F64BLOCK x 2 2\n\0\0\0\0").unwrap();
        assert!(read_block(&p).is_err());
    }
}
