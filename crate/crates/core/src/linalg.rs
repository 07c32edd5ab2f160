//! Dense matrix type and the factorizations the decompositions are built on.
//!
//! [`Matrix2`] is column-major, matching the tensor linearization in
//! [`crate::tensor`]. The SVD is a one-sided Jacobi iteration applied to the
//! triangular factor of a Householder QR; it is accurate to a few ulps
//! relative to σ_max and fully deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape(format!(
                "matrix extents must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self::from_fn(rows, cols, |i, j| data[i * cols + j]))
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        Self::from_fn(n, n, |i, j| if i == j { values[i] } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i + self.rows * j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i + self.rows * j] = v;
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.cols).map(|j| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix2 {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// First `k` columns.
    pub fn leading_cols(&self, k: usize) -> Matrix2 {
        assert!(k <= self.cols);
        Self {
            rows: self.rows,
            cols: k,
            data: self.data[..k * self.rows].to_vec(),
        }
    }

    pub fn select_cols(&self, idx: &[usize]) -> Matrix2 {
        let mut data = Vec::with_capacity(idx.len() * self.rows);
        for &j in idx {
            data.extend_from_slice(self.col(j));
        }
        Self {
            rows: self.rows,
            cols: idx.len(),
            data,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scale_cols(&self, s: &[f64]) -> Matrix2 {
        assert_eq!(s.len(), self.cols);
        let mut out = self.clone();
        for (j, &c) in s.iter().enumerate() {
            out.col_mut(j).iter_mut().for_each(|x| *x *= c);
        }
        out
    }

    pub fn hadamard(&self, other: &Matrix2) -> Result<Matrix2> {
        self.check_same(other, "hadamard")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Matrix2) -> Result<Matrix2> {
        self.check_same(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    fn check_same(&self, other: &Matrix2, op: &str) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Matrix2) -> Result<Matrix2> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul: {}x{} · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix2::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            (&self.data, 1, self.rows),
            (&other.data, 1, other.rows),
            &mut out.data,
            (1, self.rows),
        );
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix2) -> Result<Matrix2> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "t_matmul: ({}x{})ᵀ · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix2::zeros(self.cols, other.cols);
        gemm(
            self.cols,
            self.rows,
            other.cols,
            (&self.data, self.rows, 1),
            (&other.data, 1, other.rows),
            &mut out.data,
            (1, self.cols),
        );
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix2) -> Result<Matrix2> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "matmul_t: {}x{} · ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix2::zeros(self.rows, other.rows);
        gemm(
            self.rows,
            self.cols,
            other.rows,
            (&self.data, 1, self.rows),
            (&other.data, other.rows, 1),
            &mut out.data,
            (1, self.rows),
        );
        Ok(out)
    }

    pub fn to_tensor(&self) -> DenseTensor {
        DenseTensor::new(vec![self.rows, self.cols], self.data.clone())
            .expect("matrix extents are positive")
    }
}

/// `c = a · b` for an m×k `a` and k×n `b` given as (data, row stride, col stride).
/// `c` is overwritten.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    c: &mut [f64],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    // SAFETY: callers pass buffers whose extents match (m, k, n) under the
    // given strides; every access stays within those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            0.0,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Thin SVD `m = U·diag(S)·Vᵀ` with k = min(rows, cols) singular triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix2,
    pub s: Vec<f64>,
    pub v: Matrix2,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn truncate(mut self, r: usize) -> SvdResult {
        self.u = self.u.leading_cols(r);
        self.v = self.v.leading_cols(r);
        self.s.truncate(r);
        self
    }

    pub fn reconstruct(&self) -> Matrix2 {
        self.u
            .scale_cols(&self.s)
            .matmul_t(&self.v)
            .expect("svd factors are consistent")
    }
}

/// Thin Householder QR: returns (Q, R) with Q m×k orthonormal columns and R
/// k×n upper triangular, k = min(m, n).
pub fn qr(a: &Matrix2) -> (Matrix2, Matrix2) {
    let (m, n) = (a.rows, a.cols);
    let k = m.min(n);
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let x = &r.col(j)[j..];
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v = x.to_vec();
        if norm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vn = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if vn == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        v.iter_mut().for_each(|t| *t /= vn);
        for c in j..n {
            let col = &mut r.col_mut(c)[j..];
            let p = 2.0 * dot(&v, col);
            col.iter_mut().zip(&v).for_each(|(x, vi)| *x -= p * vi);
        }
        reflectors.push(v);
    }
    let r_out = Matrix2::from_fn(k, n, |i, j| if i <= j { r.get(i, j) } else { 0.0 });
    let mut q = Matrix2::from_fn(m, k, |i, j| if i == j { 1.0 } else { 0.0 });
    for (j, v) in reflectors.iter().enumerate().rev() {
        if v.is_empty() {
            continue;
        }
        for c in 0..k {
            let col = &mut q.col_mut(c)[j..];
            let p = 2.0 * dot(v, col);
            col.iter_mut().zip(v).for_each(|(x, vi)| *x -= p * vi);
        }
    }
    (q, r_out)
}

const JACOBI_TOL: f64 = 1e-15;
const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided Jacobi on the columns of `w` (p×n, p ≥ n). On return the
/// columns of `w` are mutually orthogonal and `v` holds the accumulated
/// rotations.
fn jacobi_orthogonalize(w: &mut Matrix2, v: &mut Matrix2) {
    let n = w.cols;
    let p_rows = w.rows;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let wp = w.col(p);
                    let wq = w.col(q);
                    (dot(wp, wp), dot(wq, wq), dot(wp, wq))
                };
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * alpha.sqrt() * beta.sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + zeta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = c * t;
                rotate_cols(&mut w.data, p_rows, p, q, c, s);
                rotate_cols(&mut v.data, v.rows, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
}

fn rotate_cols(data: &mut [f64], rows: usize, p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = data.split_at_mut(q * rows);
    let cp = &mut lo[p * rows..(p + 1) * rows];
    let cq = &mut hi[..rows];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills columns flagged in `missing` with unit vectors orthogonal to the rest.
fn complete_orthonormal(u: &mut Matrix2, missing: &[bool]) {
    let m = u.rows;
    let mut candidate = 0usize;
    for j in 0..u.cols {
        if !missing[j] {
            continue;
        }
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for k in 0..u.cols {
                    if k == j || (missing[k] && k > j) {
                        continue;
                    }
                    let uk = u.col(k);
                    let p = dot(uk, &e);
                    e.iter_mut().zip(uk).for_each(|(x, y)| *x -= p * y);
                }
            }
            let nrm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nrm > 0.5 {
                e.iter_mut().for_each(|x| *x /= nrm);
                u.col_mut(j).copy_from_slice(&e);
                break;
            }
        }
    }
}

/// SVD of a tall-or-square matrix (rows ≥ cols), before sign fixing.
fn svd_tall(a: &Matrix2) -> SvdResult {
    let n = a.cols;
    let (q, mut w) = if a.rows > n {
        let (q, r) = qr(a);
        (Some(q), r)
    } else {
        (None, a.clone())
    };
    let mut v = Matrix2::identity(n);
    jacobi_orthogonalize(&mut w, &mut v);

    let norms: Vec<f64> = (0..n).map(|j| dot(w.col(j), w.col(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let mut u_small = Matrix2::zeros(w.rows, n);
    let mut missing = vec![false; n];
    for (dst, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        if sigma > f64::MIN_POSITIVE * 1e4 {
            let col = w.col(src);
            u_small
                .col_mut(dst)
                .iter_mut()
                .zip(col)
                .for_each(|(x, y)| *x = y / sigma);
        } else {
            missing[dst] = true;
        }
    }
    if missing.iter().any(|&b| b) {
        complete_orthonormal(&mut u_small, &missing);
    }
    let v = v.select_cols(&order);
    let u = match q {
        Some(q) => q.matmul(&u_small).expect("qr factor shapes"),
        None => u_small,
    };
    SvdResult { u, s, v }
}

/// Flips singular-vector pairs so that the largest-magnitude entry of each
/// U column is positive (first such entry on ties).
fn fix_signs(res: &mut SvdResult) {
    for j in 0..res.s.len() {
        let col = res.u.col(j);
        let mut best = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            res.u.col_mut(j).iter_mut().for_each(|x| *x = -*x);
            res.v.col_mut(j).iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Thin SVD with singular values in non-increasing order and a deterministic
/// sign convention.
pub fn svd(m: &Matrix2) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    let mut res = if m.rows >= m.cols {
        svd_tall(m)
    } else {
        let t = svd_tall(&m.transpose());
        SvdResult {
            u: t.v,
            s: t.s,
            v: t.u,
        }
    };
    fix_signs(&mut res);
    Ok(res)
}

/// Best rank-`r` approximation in the Frobenius norm.
pub fn truncated_svd(m: &Matrix2, r: usize) -> Result<SvdResult> {
    let max = m.rows.min(m.cols);
    if r == 0 || r > max {
        return Err(Error::RankOutOfRange { rank: r, max });
    }
    Ok(svd(m)?.truncate(r))
}

/// Leading `r` left singular vectors.
pub(crate) fn leading_left_vectors(m: &Matrix2, r: usize) -> Result<Matrix2> {
    Ok(truncated_svd(m, r)?.u)
}

const PSEUDO_RANK_CUTOFF: f64 = 1e-12;

/// Minimum-norm least-squares solution of `A·X ≈ B`. Singular values below
/// 1e-12·σ_max are treated as zero.
pub fn solve_least_squares(a: &Matrix2, b: &Matrix2) -> Result<Matrix2> {
    if a.rows != b.rows {
        return Err(Error::ShapeMismatch(format!(
            "least squares: A is {}x{}, B is {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if !b.is_finite() {
        return Err(Error::NonFinite("least-squares right-hand side"));
    }
    let dec = svd(a)?;
    let smax = dec.s.first().copied().unwrap_or(0.0);
    let keep = dec
        .s
        .iter()
        .take_while(|&&s| s > PSEUDO_RANK_CUTOFF * smax && s > 0.0)
        .count();
    if keep == 0 {
        return Ok(Matrix2::zeros(a.cols, b.cols));
    }
    let u = dec.u.leading_cols(keep);
    let v = dec.v.leading_cols(keep);
    let inv: Vec<f64> = dec.s[..keep].iter().map(|s| 1.0 / s).collect();
    let coeffs = u.t_matmul(b)?;
    let scaled = Matrix2::from_fn(keep, b.cols, |i, j| coeffs.get(i, j) * inv[i]);
    v.matmul(&scaled)
}

/// Column-wise Kronecker product: column r holds the outer product of
/// `a[:, r]` and `b[:, r]` linearized with the `a` index varying fastest.
pub fn khatri_rao(a: &Matrix2, b: &Matrix2) -> Result<Matrix2> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch(format!(
            "khatri_rao: {} vs {} columns",
            a.cols, b.cols
        )));
    }
    let (ra, rb) = (a.rows, b.rows);
    let mut out = Matrix2::zeros(ra * rb, a.cols);
    for r in 0..a.cols {
        let (ca, cb) = (a.col(r), b.col(r));
        let dst = out.col_mut(r);
        for (j, &bj) in cb.iter().enumerate() {
            for (i, &ai) in ca.iter().enumerate() {
                dst[i + ra * j] = ai * bj;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::randn;

    fn orthonormality_defect(q: &Matrix2) -> f64 {
        let g = q.t_matmul(q).unwrap();
        g.sub(&Matrix2::identity(q.cols())).unwrap().as_slice().iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    fn rel(a: &Matrix2, b: &Matrix2) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / a.frobenius_norm()
    }

    #[test]
    fn svd_identity_and_diagonal() {
        let s = svd(&Matrix2::identity(4)).unwrap();
        assert!(s.s.iter().all(|&x| (x - 1.0).abs() < 1e-15));

        let d = svd(&Matrix2::diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(d.s, vec![3.0, 2.0, 1.0]);
        let d2 = svd(&Matrix2::diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(d2.s, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn svd_random_reconstructs() {
        for (r, c, seed) in [(50, 30, 1), (30, 50, 2), (17, 17, 3), (1, 9, 4), (9, 1, 5)] {
            let m = randn(r, c, seed);
            let s = svd(&m).unwrap();
            assert!(rel(&m, &s.reconstruct()) <= 1e-10, "{r}x{c}");
            assert!(orthonormality_defect(&s.u) < 1e-10);
            assert!(orthonormality_defect(&s.v) < 1e-10);
            assert!(s.s.windows(2).all(|w| w[0] >= w[1]));
            assert!(s.s.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn svd_is_deterministic_with_sign_convention() {
        let m = randn(40, 25, 9);
        let a = svd(&m).unwrap();
        let b = svd(&m).unwrap();
        assert_eq!(a, b);
        for j in 0..a.rank() {
            let col = a.u.col(j);
            let imax = (0..col.len())
                .max_by(|&x, &y| col[x].abs().total_cmp(&col[y].abs()).then(y.cmp(&x)))
                .unwrap();
            assert!(col[imax] > 0.0);
        }
    }

    #[test]
    fn svd_rank_deficient_keeps_orthonormal_factors() {
        let a = randn(30, 3, 1);
        let b = randn(3, 20, 2);
        let m = a.matmul(&b).unwrap();
        let s = svd(&m).unwrap();
        assert!(orthonormality_defect(&s.u) < 1e-10);
        assert!(orthonormality_defect(&s.v) < 1e-10);
        assert!(s.s[3] < 1e-12 * s.s[0]);
        assert!(rel(&m, &s.reconstruct()) < 1e-12);

        let z = svd(&Matrix2::zeros(5, 3)).unwrap();
        assert!(z.s.iter().all(|&x| x == 0.0));
        assert!(orthonormality_defect(&z.u) < 1e-12);
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut m = Matrix2::zeros(2, 2);
        m.set(0, 1, f64::NAN);
        assert!(matches!(svd(&m), Err(Error::NonFinite(_))));
    }

    #[test]
    fn truncated_svd_cases() {
        let m = randn(12, 8, 3);
        let full = truncated_svd(&m, 8).unwrap();
        assert!(rel(&m, &full.reconstruct()) < 1e-12);

        let d = Matrix2::diag(&[3.0, 2.0, 1.0]);
        let t = truncated_svd(&d, 2).unwrap();
        let err = d.sub(&t.reconstruct()).unwrap().frobenius_norm();
        assert!((err - 1.0).abs() < 1e-14);

        // planted rank 3
        let p = randn(100, 3, 4).matmul(&randn(3, 40, 5)).unwrap();
        let t3 = truncated_svd(&p, 3).unwrap();
        assert!(rel(&p, &t3.reconstruct()) <= 1e-10);

        assert!(truncated_svd(&d, 0).is_err());
        assert!(truncated_svd(&d, 4).is_err());
    }

    #[test]
    fn truncation_error_equals_tail_energy() {
        let m = randn(20, 14, 77);
        let all = svd(&m).unwrap();
        for r in 1..=14 {
            let t = truncated_svd(&m, r).unwrap();
            let err2 = m.sub(&t.reconstruct()).unwrap().frobenius_norm().powi(2);
            let tail: f64 = all.s[r..].iter().map(|s| s * s).sum();
            assert!((err2 - tail).abs() <= 1e-8 * m.frobenius_norm().powi(2));
        }
    }

    #[test]
    fn qr_factors() {
        for (r, c) in [(10, 4), (4, 4), (4, 7)] {
            let a = randn(r, c, 6);
            let (q, rr) = qr(&a);
            assert!(orthonormality_defect(&q) < 1e-12);
            assert!(rel(&a, &q.matmul(&rr).unwrap()) < 1e-13);
            for j in 0..rr.cols() {
                for i in j + 1..rr.rows() {
                    assert_eq!(rr.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn least_squares_identity_and_consistent() {
        let b = randn(5, 3, 1);
        let x = solve_least_squares(&Matrix2::identity(5), &b).unwrap();
        assert!(rel(&b, &x) < 1e-14);

        let a = randn(40, 6, 2);
        let x0 = randn(6, 3, 3);
        let b = a.matmul(&x0).unwrap();
        let x = solve_least_squares(&a, &b).unwrap();
        assert!(rel(&x0, &x) < 1e-10);

        assert!(solve_least_squares(&a, &randn(39, 3, 1)).is_err());
    }

    #[test]
    fn least_squares_rank_deficient_min_norm() {
        // rank-2 A (10×4), oracle: pseudoinverse assembled from the full SVD
        let a = randn(10, 2, 8).matmul(&randn(2, 4, 9)).unwrap();
        let b = randn(10, 2, 10);
        let x = solve_least_squares(&a, &b).unwrap();

        let full = svd(&a).unwrap();
        let mut pinv = Matrix2::zeros(4, 10);
        for k in 0..2 {
            for i in 0..4 {
                for j in 0..10 {
                    let v = pinv.get(i, j) + full.v.get(i, k) * full.u.get(j, k) / full.s[k];
                    pinv.set(i, j, v);
                }
            }
        }
        let x_ref = pinv.matmul(&b).unwrap();
        assert!(rel(&x_ref, &x) < 1e-9);

        // residual matches the projection residual and is orthogonal to range(A)
        let resid = b.sub(&a.matmul(&x).unwrap()).unwrap();
        let u2 = full.u.leading_cols(2);
        let proj = u2.matmul(&u2.t_matmul(&b).unwrap()).unwrap();
        let proj_resid = b.sub(&proj).unwrap();
        assert!(rel(&proj_resid, &resid) < 1e-9);
        let ortho = a.t_matmul(&resid).unwrap();
        assert!(ortho.frobenius_norm() <= 1e-8 * a.frobenius_norm() * b.frobenius_norm());
    }

    #[test]
    fn khatri_rao_cases() {
        let a = Matrix2::from_col_major(2, 1, vec![1.0, 2.0]).unwrap();
        let b = Matrix2::from_col_major(3, 1, vec![3.0, 4.0, 5.0]).unwrap();
        let k = khatri_rao(&a, &b).unwrap();
        assert_eq!(k.as_slice(), &[3.0, 6.0, 4.0, 8.0, 5.0, 10.0]);

        let e = khatri_rao(&Matrix2::identity(2), &Matrix2::identity(2)).unwrap();
        assert_eq!((e.rows(), e.cols()), (4, 2));
        assert_eq!(e.col(0), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(e.col(1), &[0.0, 0.0, 0.0, 1.0]);

        assert!(khatri_rao(&a, &Matrix2::identity(2)).is_err());
    }

    #[test]
    fn khatri_rao_matches_cp_unfolding() {
        use crate::tensor::{unfold, DenseTensor};
        let (fa, fb, fc) = (randn(3, 4, 1), randn(5, 4, 2), randn(2, 4, 3));
        let t = DenseTensor::from_fn(vec![3, 5, 2], |ix| {
            (0..4).map(|r| fa.get(ix[0], r) * fb.get(ix[1], r) * fc.get(ix[2], r)).sum()
        })
        .unwrap();
        let m0 = unfold(&t, 0).unwrap();
        let via = fa.matmul_t(&khatri_rao(&fb, &fc).unwrap()).unwrap();
        assert!(rel(&m0, &via) < 1e-14);
        let m2 = unfold(&t, 2).unwrap();
        let via2 = fc.matmul_t(&khatri_rao(&fa, &fb).unwrap()).unwrap();
        assert!(rel(&m2, &via2) < 1e-14);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = randn(4, 6, 1);
        let b = randn(6, 3, 2);
        let ab = a.matmul(&b).unwrap();
        let naive = Matrix2::from_fn(4, 3, |i, j| (0..6).map(|k| a.get(i, k) * b.get(k, j)).sum());
        assert!(rel(&naive, &ab) < 1e-14);
        assert!(rel(&ab, &a.transpose().t_matmul(&b).unwrap()) < 1e-14);
        assert!(rel(&ab, &a.matmul_t(&b.transpose()).unwrap()) < 1e-14);
    }
}
