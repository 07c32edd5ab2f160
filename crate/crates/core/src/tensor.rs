//! Dense tensors with the unfolding and multilinear-product primitives used
//! by the decompositions.
//!
//! Every tensor is stored in one linearization: the lowest-numbered index
//! varies fastest. Unfoldings order their columns the same way (remaining
//! modes, lower-numbered fastest), so a 2-mode tensor and a [`Matrix2`] share
//! the same column-major layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_extents(&shape)?;
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        check_extents(&shape)?;
        let n = shape.iter().product();
        Ok(Self {
            shape,
            data: vec![0.0; n],
        })
    }

    /// Builds a tensor from a function of the multi-index.
    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        check_extents(&shape)?;
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for (k, i) in idx.iter_mut().enumerate() {
                *i += 1;
                if *i < shape[k] {
                    break;
                }
                *i = 0;
            }
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter()
            .zip(&self.shape)
            .rev()
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.linear_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let li = self.linear_index(idx);
        self.data[li] = v;
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element-preserving reinterpretation under a new shape.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }
}

fn check_extents(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&n| n == 0) {
        return Err(Error::InvalidShape(format!(
            "extents must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

/// Splits `shape` around `mode` into (product before, extent, product after).
fn split_at_mode(shape: &[usize], mode: usize) -> (usize, usize, usize) {
    let left = shape[..mode].iter().product();
    let right = shape[mode + 1..].iter().product();
    (left, shape[mode], right)
}

/// Mode-`mode` unfolding: `shape[mode]` rows, one column per combination of
/// the remaining indices (lower-numbered modes vary fastest).
pub fn unfold(t: &DenseTensor, mode: usize) -> Result<Matrix2> {
    if mode >= t.ndim() {
        return Err(Error::ModeOutOfRange {
            mode,
            ndim: t.ndim(),
        });
    }
    let (left, n, right) = split_at_mode(&t.shape, mode);
    let cols = left * right;
    let mut out = vec![0.0; n * cols];
    for b in 0..right {
        for i in 0..n {
            let src = &t.data[left * (i + n * b)..left * (i + n * b) + left];
            for (a, &v) in src.iter().enumerate() {
                out[i + n * (a + left * b)] = v;
            }
        }
    }
    Matrix2::from_col_major(n, cols, out)
}

/// Inverse of [`unfold`].
pub fn fold(m: &Matrix2, mode: usize, shape: &[usize]) -> Result<DenseTensor> {
    check_extents(shape)?;
    if mode >= shape.len() {
        return Err(Error::ModeOutOfRange {
            mode,
            ndim: shape.len(),
        });
    }
    let (left, n, right) = split_at_mode(shape, mode);
    if m.rows() != n || m.cols() != left * right {
        return Err(Error::ShapeMismatch(format!(
            "cannot fold a {}x{} matrix along mode {mode} into {:?}",
            m.rows(),
            m.cols(),
            shape
        )));
    }
    let src = m.as_slice();
    let mut data = vec![0.0; n * left * right];
    for b in 0..right {
        for i in 0..n {
            let dst = &mut data[left * (i + n * b)..left * (i + n * b) + left];
            for (a, v) in dst.iter_mut().enumerate() {
                *v = src[i + n * (a + left * b)];
            }
        }
    }
    Ok(DenseTensor {
        shape: shape.to_vec(),
        data,
    })
}

/// Mode-n product `t ×_mode m`: contracts mode `mode` of `t` with the columns
/// of `m`, replacing that extent by `m.rows()`.
pub fn mode_product(t: &DenseTensor, m: &Matrix2, mode: usize) -> Result<DenseTensor> {
    if mode >= t.ndim() {
        return Err(Error::ModeOutOfRange {
            mode,
            ndim: t.ndim(),
        });
    }
    let (left, n, right) = split_at_mode(&t.shape, mode);
    if m.cols() != n {
        return Err(Error::ShapeMismatch(format!(
            "mode-{mode} product needs a matrix with {n} columns, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let j_ext = m.rows();
    let mut shape = t.shape.clone();
    shape[mode] = j_ext;
    let mut out = vec![0.0; left * j_ext * right];
    let md = m.as_slice();
    for b in 0..right {
        for i in 0..n {
            let src = &t.data[left * (i + n * b)..left * (i + n * b) + left];
            for j in 0..j_ext {
                let c = md[j + j_ext * i];
                if c == 0.0 {
                    continue;
                }
                let dst = &mut out[left * (j + j_ext * b)..left * (j + j_ext * b) + left];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += c * s;
                }
            }
        }
    }
    Ok(DenseTensor { shape, data: out })
}

/// ‖a − b‖_F / ‖a‖_F. When `a` is zero the result is ‖b‖_F.
pub fn rel_error(a: &DenseTensor, b: &DenseTensor) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch(format!(
            "rel_error between {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let diff: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let na = a.frobenius_norm();
    if na == 0.0 {
        return Ok(b.frobenius_norm());
    }
    Ok(diff.sqrt() / na)
}

/// A conv kernel laid out as d×d×C_out×C_in (h, w, out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel4(DenseTensor);

impl Kernel4 {
    pub fn new(t: DenseTensor) -> Result<Self> {
        if t.ndim() != 4 {
            return Err(Error::InvalidShape(format!(
                "conv kernel needs 4 modes, got {:?}",
                t.shape()
            )));
        }
        if t.shape()[0] != t.shape()[1] {
            return Err(Error::InvalidShape(format!(
                "conv kernel must have a square spatial filter, got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn zeros(d: usize, c_out: usize, c_in: usize) -> Result<Self> {
        Self::new(DenseTensor::zeros(vec![d, d, c_out, c_in])?)
    }

    pub fn d(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn c_in(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn get(&self, h: usize, w: usize, o: usize, i: usize) -> f64 {
        let d = self.d();
        self.0.data()[h + d * (w + d * (o + self.c_out() * i))]
    }

    pub fn tensor(&self) -> &DenseTensor {
        &self.0
    }

    /// Entries in the kernel's linear order; the shape stays fixed.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.0.data_mut()
    }

    pub fn into_tensor(self) -> DenseTensor {
        self.0
    }
}

/// A conv kernel with the spatial modes merged: d²×C_out×C_in.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel3(DenseTensor);

impl Kernel3 {
    pub fn new(t: DenseTensor) -> Result<Self> {
        if t.ndim() != 3 {
            return Err(Error::InvalidShape(format!(
                "reshaped kernel needs 3 modes, got {:?}",
                t.shape()
            )));
        }
        let s = t.shape()[0];
        let d = (s as f64).sqrt().round() as usize;
        if d * d != s {
            return Err(Error::InvalidShape(format!(
                "first extent {s} of a reshaped kernel is not a perfect square"
            )));
        }
        Ok(Self(t))
    }

    pub fn d(&self) -> usize {
        (self.0.shape()[0] as f64).sqrt().round() as usize
    }

    pub fn c_out(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn c_in(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &DenseTensor {
        &self.0
    }

    pub fn into_tensor(self) -> DenseTensor {
        self.0
    }

    /// Splits the spatial mode back into d×d.
    pub fn to_kernel4(&self) -> Kernel4 {
        let d = self.d();
        let t = DenseTensor {
            shape: vec![d, d, self.c_out(), self.c_in()],
            data: self.0.data.clone(),
        };
        Kernel4(t)
    }
}

/// Merges the two spatial modes of `k` (h varies fastest within the merged mode).
pub fn reshape_kernel(k: &Kernel4) -> Kernel3 {
    let d = k.d();
    Kernel3(DenseTensor {
        shape: vec![d * d, k.c_out(), k.c_in()],
        data: k.0.data.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Vec<usize>, seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseTensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn unfold_matrix_mode0_is_identity() {
        let t = DenseTensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = unfold(&t, 0).unwrap();
        assert_eq!(m.as_slice(), t.data());
        assert_eq!((m.rows(), m.cols()), (2, 2));
    }

    #[test]
    fn unfold_shape_arithmetic() {
        let t = random_tensor(vec![2, 3, 4], 1);
        let m = unfold(&t, 1).unwrap();
        assert_eq!((m.rows(), m.cols()), (3, 8));
    }

    #[test]
    fn unfold_column_order_by_enumeration() {
        // entries 1..8, linear index = i + 2j + 4k
        let t = DenseTensor::new(vec![2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
        let m0 = unfold(&t, 0).unwrap();
        // column c = j + 2k holds the fiber t[:, j, k]
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let expected = (1 + i + 2 * j + 4 * k) as f64;
                    assert_eq!(m0.get(i, j + 2 * k), expected);
                }
            }
        }
        assert_eq!(m0.row(0), vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(m0.row(1), vec![2.0, 4.0, 6.0, 8.0]);
        let m1 = unfold(&t, 1).unwrap();
        // columns (i, k) with i fastest
        assert_eq!(m1.row(0), vec![1.0, 2.0, 5.0, 6.0]);
        assert_eq!(m1.row(1), vec![3.0, 4.0, 7.0, 8.0]);
        let m2 = unfold(&t, 2).unwrap();
        assert_eq!(m2.row(0), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn fold_inverts_unfold() {
        let t = random_tensor(vec![3, 4, 5], 7);
        for mode in 0..3 {
            let back = fold(&unfold(&t, mode).unwrap(), mode, t.shape()).unwrap();
            assert_eq!(back, t);
        }
    }

    #[test]
    fn fold_shape_and_errors() {
        let m = Matrix2::zeros(3, 8);
        let t = fold(&m, 1, &[2, 3, 4]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 4]);
        assert!(fold(&m, 0, &[2, 3, 4]).is_err());
        assert!(fold(&m, 3, &[2, 3, 4]).is_err());
        assert!(matches!(
            unfold(&t, 3),
            Err(Error::ModeOutOfRange { mode: 3, ndim: 3 })
        ));
    }

    #[test]
    fn mode_product_identity_and_matmul() {
        let t = random_tensor(vec![2, 3], 3);
        let same = mode_product(&t, &Matrix2::identity(3), 1).unwrap();
        assert_eq!(same, t);

        let a = Matrix2::from_fn(4, 2, |i, j| (i * 2 + j) as f64 - 1.5);
        let p = mode_product(&t, &a, 0).unwrap();
        assert_eq!(p.shape(), &[4, 3]);
        let tm = Matrix2::from_col_major(2, 3, t.data().to_vec()).unwrap();
        let expected = a.matmul(&tm).unwrap();
        for (x, y) in p.data().iter().zip(expected.as_slice()) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!(mode_product(&t, &a, 1).is_err());
    }

    #[test]
    fn mode_products_commute_on_distinct_modes() {
        let t = random_tensor(vec![3, 4, 5], 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Matrix2::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let b = Matrix2::from_fn(2, 5, |_, _| rng.random_range(-1.0..1.0));
        let ab = mode_product(&mode_product(&t, &a, 0).unwrap(), &b, 2).unwrap();
        let ba = mode_product(&mode_product(&t, &b, 2).unwrap(), &a, 0).unwrap();
        assert!(rel_error(&ab, &ba).unwrap() < 1e-12);
    }

    #[test]
    fn mode_product_matches_unfold_definition() {
        let t = random_tensor(vec![3, 4, 2], 2);
        let m = Matrix2::from_fn(5, 4, |i, j| ((i + 1) * (j + 2)) as f64 * 0.1);
        let p = mode_product(&t, &m, 1).unwrap();
        let via = fold(&m.matmul(&unfold(&t, 1).unwrap()).unwrap(), 1, &[3, 5, 2]).unwrap();
        assert!(rel_error(&p, &via).unwrap() < 1e-14);
    }

    #[test]
    fn kernel_reshape() {
        let k = Kernel4::new(random_tensor(vec![3, 3, 64, 32], 4)).unwrap();
        let k3 = reshape_kernel(&k);
        assert_eq!(k3.tensor().shape(), &[9, 64, 32]);
        assert_eq!(k3.to_kernel4(), k);

        let k1 = Kernel4::new(random_tensor(vec![1, 1, 5, 7], 4)).unwrap();
        assert_eq!(reshape_kernel(&k1).tensor().shape(), &[1, 5, 7]);

        assert!(Kernel4::new(random_tensor(vec![3, 2, 4, 4], 1)).is_err());
        assert!(Kernel3::new(random_tensor(vec![8, 2, 2], 1)).is_err());
    }

    #[test]
    fn rel_error_cases() {
        let t = random_tensor(vec![4, 5], 9);
        assert_eq!(rel_error(&t, &t).unwrap(), 0.0);
        let z = DenseTensor::zeros(vec![4, 5]).unwrap();
        assert!((rel_error(&t, &z).unwrap() - 1.0).abs() < 1e-15);

        let a = DenseTensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let b = DenseTensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert_eq!(a.frobenius_norm(), 5.0);
        assert_eq!(rel_error(&a, &b).unwrap(), 1.0);
        // zero reference: reports ‖b‖
        assert_eq!(rel_error(&b, &a).unwrap(), 5.0);
        assert!(rel_error(&a, &t).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(DenseTensor::new(vec![2, 0], vec![]).is_err());
        assert!(DenseTensor::new(vec![2, 2], vec![1.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn fold_unfold_roundtrip(
                shape in prop::collection::vec(1usize..5, 1..5),
                seed in any::<u64>(),
            ) {
                let t = random_tensor(shape.clone(), seed);
                for mode in 0..shape.len() {
                    let back = fold(&unfold(&t, mode).unwrap(), mode, &shape).unwrap();
                    prop_assert_eq!(&back, &t);
                }
            }

            #[test]
            fn norm_equals_singular_energy(
                shape in prop::collection::vec(1usize..6, 2..5),
                seed in any::<u64>(),
            ) {
                let t = random_tensor(shape.clone(), seed);
                let n2 = t.norm_sq();
                for mode in 0..shape.len() {
                    let s = crate::linalg::svd(&unfold(&t, mode).unwrap()).unwrap();
                    let e: f64 = s.s.iter().map(|x| x * x).sum();
                    prop_assert!((e - n2).abs() <= 1e-8 * n2.max(1e-300));
                }
            }
        }
    }
}
