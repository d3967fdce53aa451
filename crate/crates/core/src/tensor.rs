//! Dense row-major tensors.
//!
//! Almost everything in this crate is a matrix, so the helpers here assume
//! rank 2 unless stated otherwise. Tensors are plain values: every operation
//! returns a fresh tensor and never mutates its inputs.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that every extent is positive and that
    /// `data` holds exactly `product(shape)` values.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("from_rows", format!("row {i} has {} values, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("positive extents")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1, 1], data: vec![value] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Self::new(shape, data).expect("positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a matrix; for rank-1 tensors this is 1.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// Matrix product. Each output element accumulates its products in
    /// increasing `k` order, so results are bit-reproducible.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * n..(kk + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul_t")?;
        let (n, k2) = other.dims2("matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("[{m}x{k}] x [{n}x{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (a, b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out[i * n + j] = acc;
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    /// Row-wise softmax with per-row max subtraction. With `causal`, entry
    /// `(i, j)` for `j > i` is masked to zero probability.
    pub fn softmax_rows_masked(&self, causal: bool) -> Result<Tensor> {
        let (m, n) = self.dims2("softmax_rows")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let width = if causal { (i + 1).min(n) } else { n };
            let row = &self.data[i * n..i * n + width];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * n..i * n + width];
            let mut total = 0.0;
            for (o, &x) in o.iter_mut().zip(row) {
                *o = (x - max).exp();
                total += *o;
            }
            for o in o.iter_mut() {
                *o /= total;
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        self.softmax_rows_masked(false)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let cols = first.dims2("concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.dims2("concat_rows")?;
            if c != cols {
                return Err(Error::shape("concat_rows", format!("{c} columns vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Self::matrix(rows, cols, data)
    }

    /// Index of the largest entry in a row; ties go to the lowest index.
    pub fn argmax_row(&self, r: usize) -> usize {
        let mut best = 0;
        for (j, &v) in self.row(r).iter().enumerate() {
            if v > self.row(r)[best] {
                best = j;
            }
        }
        best
    }

    /// FNV-1a over the IEEE bit patterns of shape and data. Two tensors
    /// share a checksum iff they are bit-identical (modulo collisions).
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for &s in &self.shape {
            h.write(&(s as u64).to_le_bytes());
        }
        for v in &self.data {
            h.write(&v.to_bits().to_le_bytes());
        }
        h.finish()
    }
}

/// 64-bit FNV-1a, used for bit-level fingerprints of outputs.
#[derive(Clone, Copy)]
pub struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::new(&[], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_cases() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&Tensor::identity(2)).unwrap(), a);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn scaled_scores_hand_value() {
        // [[1,0]] · I^T / sqrt(2)
        let q = m(&[&[1.0, 0.0]]);
        let k = Tensor::identity(2);
        let s = q.matmul_t(&k).unwrap().scale(1.0 / 2f64.sqrt());
        assert!((s.at(0, 0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(s.at(0, 1), 0.0);
    }

    #[test]
    fn matmul_t_agrees_with_explicit_transpose() {
        let a = m(&[&[1.0, -2.0, 0.5], &[3.0, 4.0, -1.0]]);
        let b = m(&[&[0.2, 0.1, 7.0], &[1.0, 1.0, 1.0], &[-3.0, 2.0, 0.0]]);
        assert_eq!(a.matmul_t(&b).unwrap(), a.matmul(&b.transpose().unwrap()).unwrap());
    }

    #[test]
    fn softmax_examples() {
        let z = Tensor::zeros(&[1, 4]).softmax_rows().unwrap();
        assert_eq!(z.data(), &[0.25; 4]);

        let s = m(&[&[0.7, 0.0]]).softmax_rows().unwrap();
        // direct exp/normalize oracle
        let e = 0.7f64.exp();
        assert!((s.at(0, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((s.at(0, 0) - 0.66819).abs() < 1e-4);
        assert!((s.at(0, 1) - 0.33181).abs() < 1e-4);

        let big = m(&[&[1000.0, 0.0]]).softmax_rows().unwrap();
        assert!(big.is_finite());
        assert!((big.at(0, 0) - 1.0).abs() < 1e-15);
        assert!(big.at(0, 1) < 1e-300);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let s = Tensor::zeros(&[3, 3]).softmax_rows_masked(true).unwrap();
        assert_eq!(s.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(s.row(1), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn argmax_ties_prefer_lowest_index() {
        let t = m(&[&[0.3, 0.7, 0.7, 0.1]]);
        assert_eq!(t.argmax_row(0), 1);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in prop::collection::vec(-50.0f64..50.0, 1..64), cols in 1usize..9) {
            let rows = vals.len() / cols;
            prop_assume!(rows >= 1);
            let t = Tensor::matrix(rows, cols, vals[..rows * cols].to_vec()).unwrap();
            let s = t.softmax_rows().unwrap();
            for r in 0..rows {
                let total: f64 = s.row(r).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(s.row(r).iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn identity_is_exact_on_integers(vals in prop::collection::vec(-1000i32..1000, 12)) {
            let a = Tensor::matrix(3, 4, vals.iter().map(|&v| v as f64).collect()).unwrap();
            prop_assert_eq!(&Tensor::identity(3).matmul(&a).unwrap(), &a);
            prop_assert_eq!(&a.matmul(&Tensor::identity(4)).unwrap(), &a);
        }
    }
}
