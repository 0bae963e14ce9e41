//! Dense row-major `f64` arrays and a seeded, portable random source.
//!
//! The layout is fixed to row-major everywhere, so the raster order of an
//! `H × W × D` feature map is exactly its flat storage order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};

/// A dense array of `f64` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Parameter(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(dim_err("DenseArray::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut out = Self::zeros(&[n, n]);
        for i in 0..n {
            out.data[i * n + i] = 1.0;
        }
        out
    }

    /// Builds an array by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(f).collect(),
        }
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

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for k in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.shape[k + 1];
        }
        strides
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(dim_err("DenseArray::offset", &self.shape, index));
        }
        let mut flat = 0;
        for ((&i, &extent), stride) in index.iter().zip(&self.shape).zip(self.strides()) {
            if i >= extent {
                return Err(Error::Index(format!(
                    "{index:?} outside shape {:?}",
                    self.shape
                )));
            }
            flat += i * stride;
        }
        Ok(flat)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let k = self.offset(index)?;
        self.data[k] = value;
        Ok(())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(dim_err("DenseArray::reshape", &self.shape, shape));
        }
        Self::new(shape.to_vec(), self.data)
    }

    /// Matrix product of two rank-2 arrays.
    ///
    /// Each output row is accumulated in order of the inner index, so the
    /// summation order is fixed.
    pub fn matmul(&self, rhs: &DenseArray) -> Result<DenseArray> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(dim_err("matmul", &self.shape, &rhs.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &rhs.data, &mut out, m, k, n);
        Ok(DenseArray {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax_last(&self) -> Result<DenseArray> {
        let width = *self.shape.last().expect("arrays have rank >= 1");
        let mut out = self.data.clone();
        for row in out.chunks_mut(width) {
            softmax_in_place(row)?;
        }
        Ok(DenseArray {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<DenseArray> {
        if self.shape.len() != 2 {
            return Err(Error::Parameter(format!(
                "transpose needs a matrix, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        Ok(DenseArray::from_fn(&[n, m], |k| {
            let (j, i) = (k / m, k % m);
            self.data[i * n + j]
        }))
    }

    pub fn add(&self, rhs: &DenseArray) -> Result<DenseArray> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &DenseArray) -> Result<DenseArray> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> DenseArray {
        DenseArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    fn zip_with(
        &self,
        rhs: &DenseArray,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<DenseArray> {
        if self.shape != rhs.shape {
            return Err(dim_err(op, &self.shape, &rhs.shape));
        }
        Ok(DenseArray {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Largest absolute entrywise difference between equal-shaped arrays.
    pub fn max_abs_diff(&self, rhs: &DenseArray) -> Result<f64> {
        if self.shape != rhs.shape {
            return Err(dim_err("max_abs_diff", &self.shape, &rhs.shape));
        }
        Ok(max_abs_diff(&self.data, &rhs.data))
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Uniform initialization in `[-scale, scale]`.
    pub fn uniform(rng: &mut SeededRng, shape: &[usize], scale: f64) -> Result<DenseArray> {
        uniform_init(rng, shape, scale)
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`, all row-major. `out` is overwritten.
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Softmax of one slice in place.
pub fn softmax_in_place(row: &mut [f64]) -> Result<()> {
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        if !v.is_finite() {
            return Err(Error::Numeric("softmax"));
        }
        max = max.max(v);
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Entries drawn i.i.d. from `U[-scale, scale]`.
pub fn uniform_init(rng: &mut SeededRng, shape: &[usize], scale: f64) -> Result<DenseArray> {
    if !scale.is_finite() || scale <= 0.0 {
        return Err(Error::Parameter(format!(
            "uniform_init scale must be positive, got {scale}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Parameter(format!(
            "extents must be positive, got {shape:?}"
        )));
    }
    Ok(DenseArray::from_fn(shape, |_| rng.uniform(-scale, scale)))
}

/// Seeded random source backed by ChaCha8, which produces the same stream
/// for a given 64-bit seed on every platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform sample in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u: f64 = self.inner.gen();
        lo + (hi - lo) * u
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int_in(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    pub fn vector(&mut self, len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|_| self.uniform(-scale, scale)).collect()
    }
}
