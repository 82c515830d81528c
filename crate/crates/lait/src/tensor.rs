//! Dense row-major matrices and the handful of kernels the encoder needs.
//!
//! Everything is generic over [`Scalar`] so the same code runs in 32-bit for
//! encoding and benchmarking and in 64-bit for gradient verification.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{LaitError, Result};

/// RMS-norm stabilizer.
pub const RMS_EPS: f64 = 1e-6;

pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + DivAssign + 'static
{
    const NAME: &'static str;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
}

#[derive(Clone, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Boolean matrix of allowed query/key pairs.
pub type BoolMatrix = Matrix<bool>;

impl<T: Debug> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", &self.data[r * self.cols..(r + 1) * self.cols])?;
        }
        write!(f, "]")
    }
}

impl<T: Copy> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LaitError::shape(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LaitError::shape("Matrix::from_rows", "ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Rows `[start, end)` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows {
            return Err(LaitError::Range(format!(
                "rows {start}..{end} of a {}-row matrix",
                self.rows
            )));
        }
        Ok(Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    /// Columns `[start, start + width)` as a new matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Self {
        Self::from_fn(self.rows, width, |r, c| self.get(r, start + c))
    }

    /// Writes `block` into columns starting at `start`.
    pub fn write_cols(&mut self, start: usize, block: &Matrix<T>) {
        for r in 0..self.rows {
            let dst = &mut self.data[r * self.cols + start..r * self.cols + start + block.cols];
            dst.copy_from_slice(block.row(r));
        }
    }

    /// Stacks matrices vertically. All parts must share a column count.
    pub fn vstack(parts: &[Matrix<T>]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(LaitError::shape("vstack", "column counts differ"));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self { rows, cols, data })
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LaitError::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Column means, i.e. mean pooling over rows.
    pub fn mean_rows(&self) -> Vec<T> {
        let mut acc = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for (a, v) in acc.iter_mut().zip(self.row(r)) {
                *a += *v;
            }
        }
        let n = T::from_f64(self.rows as f64);
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(LaitError::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (n, p) = (a.rows, b.cols);
    let mut out = vec![T::zero(); n * p];
    for i in 0..n {
        let orow = &mut out[i * p..(i + 1) * p];
        for (k, &aik) in a.row(i).iter().enumerate() {
            for (o, &bkj) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(Matrix {
        rows: n,
        cols: p,
        data: out,
    })
}

/// `a · bᵀ`.
pub fn matmul_bt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(LaitError::shape(
            "matmul_bt",
            format!("{}x{} times ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    Ok(Matrix::from_fn(a.rows, b.rows, |i, j| dot(a.row(i), b.row(j))))
}

/// `aᵀ · b`.
pub fn matmul_at<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(LaitError::shape(
            "matmul_at",
            format!("({}x{})ᵀ times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (n, p) = (a.cols, b.cols);
    let mut out = vec![T::zero(); n * p];
    for k in 0..a.rows {
        let brow = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            for (o, &bkj) in out[i * p..(i + 1) * p].iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    Ok(Matrix {
        rows: n,
        cols: p,
        data: out,
    })
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// Softmax over each row restricted to allowed entries.
///
/// Disallowed scores are treated as −∞, so their output weight is exactly
/// zero. Rows are stabilized by the maximum over allowed entries only.
pub fn row_softmax_masked<T: Scalar>(scores: &Matrix<T>, allowed: &BoolMatrix) -> Result<Matrix<T>> {
    if scores.shape() != allowed.shape() {
        return Err(LaitError::shape(
            "row_softmax_masked",
            format!("scores {:?} vs mask {:?}", scores.shape(), allowed.shape()),
        ));
    }
    let mut out = Matrix::zeros(scores.rows, scores.cols);
    for r in 0..scores.rows {
        let s = scores.row(r);
        let a = allowed.row(r);
        let mut max = T::neg_infinity();
        let mut any = false;
        for (v, &ok) in s.iter().zip(a) {
            if ok {
                any = true;
                if *v > max {
                    max = *v;
                }
            }
        }
        if !any {
            return Err(LaitError::FullyMasked { row: r });
        }
        let o = out.row_mut(r);
        let mut sum = T::zero();
        for ((dst, v), &ok) in o.iter_mut().zip(s).zip(a) {
            if ok {
                let e = (*v - max).exp();
                *dst = e;
                sum += e;
            }
        }
        for (dst, &ok) in o.iter_mut().zip(a) {
            if ok {
                *dst /= sum;
            }
        }
    }
    Ok(out)
}

/// Per-row inverse root-mean-square, `1 / sqrt(mean(x²) + ε)`.
pub fn rms_inv<T: Scalar>(x: &Matrix<T>) -> Vec<T> {
    let eps = T::from_f64(RMS_EPS);
    let n = T::from_f64(x.cols as f64);
    (0..x.rows)
        .map(|r| {
            let ms = x.row(r).iter().map(|v| *v * *v).sum::<T>() / n;
            T::one() / (ms + eps).sqrt()
        })
        .collect()
}

pub fn rms_norm<T: Scalar>(x: &Matrix<T>, gain: &[T]) -> Result<Matrix<T>> {
    if gain.len() != x.cols {
        return Err(LaitError::shape(
            "rms_norm",
            format!("gain of length {} for {} columns", gain.len(), x.cols),
        ));
    }
    let inv = rms_inv(x);
    let mut out = x.clone();
    for (r, s) in inv.into_iter().enumerate() {
        for (v, g) in out.row_mut(r).iter_mut().zip(gain) {
            *v = *v * s * *g;
        }
    }
    Ok(out)
}

pub fn relu<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for v in &mut out.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn triple_loop(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let a = Matrix::from_rows(&[vec![1.0f32, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&a, &Matrix::identity(2)).unwrap(), a);
        let r = Matrix::from_rows(&[vec![1.0f32, 2.0]]).unwrap();
        let c = Matrix::from_rows(&[vec![3.0f32], vec![4.0]]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 7, 5);
        let b = random(&mut rng, 5, 3);
        let fast = matmul(&a.cast::<f32>(), &b.cast::<f32>()).unwrap();
        assert!(fast.cast::<f64>().max_abs_diff(&triple_loop(&a, &b)) < 1e-6);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 4, 6);
        let b = random(&mut rng, 5, 6);
        let c = random(&mut rng, 4, 3);
        assert!(
            matmul_bt(&a, &b)
                .unwrap()
                .max_abs_diff(&triple_loop(&a, &b.transpose()))
                < 1e-12
        );
        assert!(
            matmul_at(&a, &c)
                .unwrap()
                .max_abs_diff(&triple_loop(&a.transpose(), &c))
                < 1e-12
        );
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Matrix::<f32>::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(LaitError::Shape { .. })));
        assert!(matmul_bt(&a, &Matrix::zeros(2, 2)).is_err());
        assert!(matmul_at(&a, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn softmax_examples() {
        let t = |v: Vec<bool>| Matrix::from_rows(&[v]).unwrap();
        let s = Matrix::from_rows(&[vec![0.0f64, 0.0]]).unwrap();
        assert_eq!(
            row_softmax_masked(&s, &t(vec![true, true])).unwrap().data(),
            &[0.5, 0.5]
        );

        let s = Matrix::from_rows(&[vec![5.0f64, 999.0]]).unwrap();
        assert_eq!(
            row_softmax_masked(&s, &t(vec![true, false])).unwrap().data(),
            &[1.0, 0.0]
        );

        let s = Matrix::from_rows(&[vec![0.0f64, 3f64.ln()]]).unwrap();
        let out = row_softmax_masked(&s, &t(vec![true, true])).unwrap();
        assert!((out.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((out.get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let s = Matrix::<f32>::zeros(2, 2);
        let mask = Matrix::from_rows(&[vec![true, false], vec![false, false]]).unwrap();
        assert!(matches!(
            row_softmax_masked(&s, &mask),
            Err(LaitError::FullyMasked { row: 1 })
        ));
    }

    #[test]
    fn rms_norm_examples() {
        let x = Matrix::from_rows(&[vec![2.0f64; 4], vec![0.0; 4]]).unwrap();
        let out = rms_norm(&x, &[1.0; 4]).unwrap();
        for v in out.row(0) {
            assert!((v - 1.0).abs() < 1e-6);
        }
        assert_eq!(out.row(1), &[0.0; 4]);

        let x = Matrix::from_rows(&[vec![3.0f64, 4.0]]).unwrap();
        let out = rms_norm(&x, &[1.0, 1.0]).unwrap();
        assert!((out.get(0, 0) - 0.848_528).abs() < 1e-5);
        assert!((out.get(0, 1) - 1.131_371).abs() < 1e-5);

        assert!(rms_norm(&x, &[1.0]).is_err());
    }

    #[test]
    fn vstack_and_slices() {
        let a = Matrix::from_rows(&[vec![1.0f32, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0f32, 4.0], vec![5.0, 6.0]]).unwrap();
        let s = Matrix::vstack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.slice_rows(0, 1).unwrap(), a);
        assert_eq!(s.slice_rows(1, 3).unwrap(), b);
        assert!(s.slice_rows(2, 4).is_err());
        assert_eq!(s.slice_cols(1, 1).data(), &[2.0, 4.0, 6.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn mat(r: usize, c: usize) -> impl Strategy<Value = Matrix<f64>> {
            proptest::collection::vec(-2.0f64..2.0, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
        }

        proptest! {
            #[test]
            fn associativity(a in mat(3, 4), b in mat(4, 5), c in mat(5, 2)) {
                let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
                let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
                prop_assert!(left.max_abs_diff(&right) < 1e-10);
                let (a, b, c) = (a.cast::<f32>(), b.cast::<f32>(), c.cast::<f32>());
                let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
                let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
                prop_assert!(left.max_abs_diff(&right) < 1e-4);
            }

            #[test]
            fn softmax_rows_are_distributions(
                s in mat(4, 6),
                bits in proptest::collection::vec(any::<bool>(), 24),
            ) {
                let mut mask = Matrix::new(4, 6, bits).unwrap();
                for r in 0..4 { mask.set(r, r, true); }
                let out = row_softmax_masked(&s, &mask).unwrap();
                for r in 0..4 {
                    let sum: f64 = out.row(r).iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-6);
                    for c in 0..6 {
                        prop_assert!(out.get(r, c) >= 0.0);
                        if !mask.get(r, c) { prop_assert_eq!(out.get(r, c), 0.0); }
                    }
                }
            }

            #[test]
            fn rms_norm_unit_rms(x in mat(3, 8)) {
                let out = rms_norm(&x, &[1.0; 8]).unwrap();
                for r in 0..3 {
                    // eps only perturbs rows whose mean square is tiny
                    if x.row(r).iter().map(|v| v * v).sum::<f64>() / 8.0 < 1e-2 { continue; }
                    let rms = (out.row(r).iter().map(|v| v * v).sum::<f64>() / 8.0).sqrt();
                    prop_assert!((rms - 1.0).abs() < 1e-4);
                }
            }
        }
    }
}
