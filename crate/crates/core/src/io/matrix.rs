//! Plain-text matrices: a `rows cols` header line, then one whitespace
//! separated row per line. Lines starting with `#` are ignored.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::linalg::Matrix2;

pub fn parse_matrix(text: &str, origin: &Path) -> Result<Matrix2> {
    let bad = |reason: String| Error::corrupt(origin, reason);
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| bad("empty matrix file".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| bad(format!("header `{header}`: {e}")))?;
    let [rows, cols] = dims[..] else {
        return Err(bad(format!("header `{header}` must be `rows cols`")));
    };
    let mut data = Vec::with_capacity(rows * cols);
    for (i, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("row {i}: {e}")))?;
        if row.len() != cols {
            return Err(bad(format!("row {i} has {} values, expected {cols}", row.len())));
        }
        data.extend(row);
    }
    if data.len() != rows * cols {
        return Err(bad(format!("{} rows, expected {rows}", data.len() / cols.max(1))));
    }
    Matrix2::from_row_major(rows, cols, &data)
}

pub fn read_matrix(path: &Path) -> Result<Matrix2> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::corrupt(path, e.to_string()))?;
    parse_matrix(&text, path)
}

/// Text with full round-trip precision.
pub fn format_matrix(m: &Matrix2) -> String {
    let mut s = format!("{} {}\n", m.rows(), m.cols());
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            if j > 0 {
                s.push(' ');
            }
            write!(s, "{:e}", m.get(i, j)).expect("writing to a String");
        }
        s.push('\n');
    }
    s
}

pub fn write_matrix(path: &Path, m: &Matrix2) -> Result<()> {
    write_file(path, format_matrix(m).as_bytes())
}

/// `A·B + noise·N` with A (rows×rank), B (rank×cols) and N standard normal.
pub fn plant_low_rank(rows: usize, cols: usize, rank: usize, noise: f64, seed: u64) -> Result<Matrix2> {
    if rows == 0 || cols == 0 || rank > rows.min(cols) {
        return Err(Error::InvalidParameter(format!("rank {rank} for a {rows}x{cols} matrix")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |r: usize, c: usize| Matrix2::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
    let a = draw(rows, rank);
    let b = draw(rank, cols);
    let n = draw(rows, cols);
    let mut m = if rank == 0 { Matrix2::zeros(rows, cols) } else { a.matmul(&b)? };
    for (x, e) in m.as_mut_slice().iter_mut().zip(n.as_slice()) {
        *x += noise * e;
    }
    Ok(m)
}
