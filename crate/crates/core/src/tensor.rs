//! Dense matrices, rank-4 activation blocks and the 2D primitives built on
//! them.
//!
//! Convolutions here are cross-correlations (the kernel is not flipped), the
//! usual CNN convention. Every kernel used for fusion is point-symmetric, so
//! the distinction never changes a result.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix2 {
    /// Wraps `data` as a `rows × cols` matrix. Rejects length mismatches and
    /// non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!(
                "matrix {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid!("non-finite value at flat index {}", i));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
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
    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(shape_err!(
                "{}x{} vs {}x{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_vec_unchecked(self.rows, self.cols, data))
    }

    /// Column-wise concatenation `[A | B | ...]`; every block needs the same
    /// row count.
    pub fn concat_cols(blocks: &[&Matrix2]) -> Result<Self> {
        let rows = match blocks.first() {
            Some(b) => b.rows,
            None => return Err(invalid!("nothing to concatenate")),
        };
        if let Some(b) = blocks.iter().find(|b| b.rows != rows) {
            return Err(shape_err!("row count {} vs {}", b.rows, rows));
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(r));
            }
        }
        Ok(Self::from_vec_unchecked(rows, cols, data))
    }

    /// Stacks rows of equal width into a matrix.
    pub fn stack_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err!("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Self::from_vec_unchecked(rows.len(), cols, data))
    }

    pub fn min_max(&self) -> Option<(f64, f64)> {
        let mut it = self.data.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }
}

/// Rank-4 activation block: `height × width × channels × batch`.
///
/// Storage is sample-major and channel-fastest (NHWC), so the flat offset of
/// `(h, w, c, s)` is `((s·height + h)·width + w)·channels + c`. One sample is
/// therefore a contiguous run in height-major, then width, then channel
/// order, which is exactly a row of [`flatten4d`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    height: usize,
    width: usize,
    channels: usize,
    batch: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        batch: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let len = height * width * channels * batch;
        if data.len() != len {
            return Err(shape_err!(
                "tensor {}x{}x{}x{} needs {} values, got {}",
                height,
                width,
                channels,
                batch,
                len,
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid!("non-finite value at flat index {}", i));
        }
        Ok(Self {
            height,
            width,
            channels,
            batch,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize, batch: usize) -> Self {
        Self {
            height,
            width,
            channels,
            batch,
            data: vec![0.0; height * width * channels * batch],
        }
    }

    pub(crate) fn from_vec_unchecked(
        height: usize,
        width: usize,
        channels: usize,
        batch: usize,
        data: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(data.len(), height * width * channels * batch);
        Self {
            height,
            width,
            channels,
            batch,
            data,
        }
    }

    /// Packs single-channel images of identical dims into a batch.
    pub fn from_images(images: &[&Matrix2]) -> Result<Self> {
        let (h, w) = match images.first() {
            Some(m) => m.dims(),
            None => return Err(invalid!("empty image batch")),
        };
        let mut data = Vec::with_capacity(h * w * images.len());
        for m in images {
            if m.dims() != (h, w) {
                return Err(shape_err!("image {}x{} in a {}x{} batch", m.rows, m.cols, h, w));
            }
            data.extend_from_slice(&m.data);
        }
        Ok(Self::from_vec_unchecked(h, w, 1, images.len(), data))
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// `(a, b, n, N)`.
    #[inline]
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.height, self.width, self.channels, self.batch)
    }

    /// Values per sample, `a·b·n`.
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, c: usize, s: usize) -> usize {
        ((s * self.height + h) * self.width + w) * self.channels + c
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, c: usize, s: usize) -> f64 {
        self.data[self.index(h, w, c, s)]
    }

    pub fn sample(&self, s: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[s * n..(s + 1) * n]
    }

    /// Gathers the listed samples, in order, into a new block.
    pub fn select(&self, samples: &[usize]) -> Self {
        let mut data = Vec::with_capacity(samples.len() * self.sample_len());
        for &s in samples {
            data.extend_from_slice(self.sample(s));
        }
        Self::from_vec_unchecked(self.height, self.width, self.channels, samples.len(), data)
    }
}

/// Odd-sized 2D kernel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2 {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
}

impl Kernel2 {
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>) -> Result<Self> {
        if rows % 2 == 0 || cols % 2 == 0 {
            return Err(invalid!("kernel dims must be odd, got {}x{}", rows, cols));
        }
        if weights.len() != rows * cols {
            return Err(shape_err!(
                "kernel {}x{} needs {} weights, got {}",
                rows,
                cols,
                rows * cols,
                weights.len()
            ));
        }
        Ok(Self { rows, cols, weights })
    }

    /// `size × size` kernel with a single 1 at the center.
    pub fn identity(size: usize) -> Result<Self> {
        let mut weights = vec![0.0; size * size];
        if size % 2 == 1 {
            weights[size * size / 2] = 1.0;
        }
        Self::new(size, size, weights)
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
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.weights[r * self.cols + c]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// The kernel rotated by 90° counter-clockwise.
    pub fn rotate90(&self) -> Self {
        let (r, c) = (self.rows, self.cols);
        let mut weights = vec![0.0; r * c];
        // out[i][j] = in[j][c-1-i], out dims c×r
        for i in 0..c {
            for j in 0..r {
                weights[i * r + j] = self.get(j, c - 1 - i);
            }
        }
        Self {
            rows: c,
            cols: r,
            weights,
        }
    }
}

/// Size-preserving convolution with zero padding: taps outside `x` read 0.
pub fn conv2d_same(x: &Matrix2, k: &Kernel2) -> Result<Matrix2> {
    if x.rows == 0 || x.cols == 0 {
        return Err(invalid!("conv2d_same on a {}x{} input", x.rows, x.cols));
    }
    let (hr, hc) = ((k.rows / 2) as isize, (k.cols / 2) as isize);
    let (rows, cols) = (x.rows as isize, x.cols as isize);
    let mut out = Vec::with_capacity(x.data.len());
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for kr in 0..k.rows as isize {
                let xr = r + kr - hr;
                if xr < 0 || xr >= rows {
                    continue;
                }
                let xrow = &x.data[(xr * cols) as usize..((xr + 1) * cols) as usize];
                let krow = &k.weights[(kr as usize) * k.cols..(kr as usize + 1) * k.cols];
                for (kc, &wk) in krow.iter().enumerate() {
                    let xc = c + kc as isize - hc;
                    if xc >= 0 && xc < cols {
                        acc += wk * xrow[xc as usize];
                    }
                }
            }
            out.push(acc);
        }
    }
    Ok(Matrix2::from_vec_unchecked(x.rows, x.cols, out))
}

/// Output extent of a valid window sweep.
#[inline]
pub fn valid_extent(input: usize, window: usize, stride: usize) -> usize {
    (input - window) / stride + 1
}

/// Unpadded convolution; output dims are `floor((in − k)/stride) + 1`.
pub fn conv2d_valid(x: &Matrix2, k: &Kernel2, stride: usize) -> Result<Matrix2> {
    if stride == 0 {
        return Err(invalid!("stride must be positive"));
    }
    if k.rows > x.rows || k.cols > x.cols {
        return Err(invalid!(
            "kernel {}x{} larger than input {}x{}",
            k.rows,
            k.cols,
            x.rows,
            x.cols
        ));
    }
    let out_r = valid_extent(x.rows, k.rows, stride);
    let out_c = valid_extent(x.cols, k.cols, stride);
    let mut out = Vec::with_capacity(out_r * out_c);
    for r in 0..out_r {
        for c in 0..out_c {
            let mut acc = 0.0;
            for kr in 0..k.rows {
                let base = (r * stride + kr) * x.cols + c * stride;
                let xrow = &x.data[base..base + k.cols];
                let krow = &k.weights[kr * k.cols..(kr + 1) * k.cols];
                acc += xrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
            }
            out.push(acc);
        }
    }
    Ok(Matrix2::from_vec_unchecked(out_r, out_c, out))
}

/// Pooling reduction applied over each window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Max,
    Average,
}

/// Windowed pooling; trailing rows/cols that do not fill a window are dropped.
pub fn pool2d(x: &Matrix2, kind: Pooling, size: usize, stride: usize) -> Result<Matrix2> {
    if size == 0 || stride == 0 {
        return Err(invalid!("pool size and stride must be positive"));
    }
    if x.rows < size || x.cols < size {
        return Err(invalid!(
            "pool window {} larger than input {}x{}",
            size,
            x.rows,
            x.cols
        ));
    }
    let out_r = valid_extent(x.rows, size, stride);
    let out_c = valid_extent(x.cols, size, stride);
    let norm = 1.0 / (size * size) as f64;
    let out = Matrix2::from_fn(out_r, out_c, |r, c| {
        let window = (0..size).flat_map(|i| (0..size).map(move |j| (i, j)));
        match kind {
            Pooling::Max => window
                .map(|(i, j)| x.get(r * stride + i, c * stride + j))
                .fold(f64::NEG_INFINITY, f64::max),
            Pooling::Average => {
                window.map(|(i, j)| x.get(r * stride + i, c * stride + j)).sum::<f64>() * norm
            }
        }
    });
    Ok(out)
}

/// Max pooling.
pub fn maxpool(x: &Matrix2, size: usize, stride: usize) -> Result<Matrix2> {
    pool2d(x, Pooling::Max, size, stride)
}

/// Logistic function `1/(1+e^(−z))`, evaluated without overflow for large |z|.
#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Elementwise logistic sigmoid.
pub fn sigmoid(x: &Matrix2) -> Matrix2 {
    x.map(logistic)
}

/// Flattens `a × b × n × N` to `N × (a·b·n)`: one row per sample, columns in
/// height-major, then width, then channel order.
pub fn flatten4d(t: &Tensor4) -> Matrix2 {
    Matrix2::from_vec_unchecked(t.batch, t.sample_len(), t.data.clone())
}

/// Inverse of [`flatten4d`].
pub fn unflatten4d(m: &Matrix2, height: usize, width: usize, channels: usize) -> Result<Tensor4> {
    if height * width * channels != m.cols {
        return Err(shape_err!(
            "{} columns cannot hold {}x{}x{}",
            m.cols,
            height,
            width,
            channels
        ));
    }
    Ok(Tensor4::from_vec_unchecked(
        height,
        width,
        channels,
        m.rows,
        m.data.clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn high_boost() -> Kernel2 {
        let mut w = vec![-1.0; 9];
        w[4] = 9.0;
        Kernel2::new(3, 3, w).unwrap()
    }

    // Direct zero-padded correlation, written independently of conv2d_same.
    fn brute_same(x: &Matrix2, k: &Kernel2) -> Matrix2 {
        let (hr, hc) = (k.rows() as i64 / 2, k.cols() as i64 / 2);
        Matrix2::from_fn(x.rows(), x.cols(), |r, c| {
            let mut s = 0.0;
            for i in 0..k.rows() as i64 {
                for j in 0..k.cols() as i64 {
                    let (xr, xc) = (r as i64 + i - hr, c as i64 + j - hc);
                    if xr >= 0 && xc >= 0 && (xr as usize) < x.rows() && (xc as usize) < x.cols() {
                        s += k.get(i as usize, j as usize) * x.get(xr as usize, xc as usize);
                    }
                }
            }
            s
        })
    }

    fn iota(rows: usize, cols: usize) -> Matrix2 {
        Matrix2::from_fn(rows, cols, |r, c| (r * cols + c + 1) as f64)
    }

    #[test]
    fn matrix_rejects_bad_input() {
        assert!(Matrix2::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix2::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Tensor4::new(1, 1, 1, 2, vec![0.0]).is_err());
        assert!(Kernel2::new(2, 3, vec![0.0; 6]).is_err());
    }

    #[test]
    fn same_identity_kernel() {
        let x = iota(4, 7);
        let y = conv2d_same(&x, &Kernel2::identity(3).unwrap()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn same_rejects_empty() {
        let x = Matrix2::zeros(0, 3);
        assert!(matches!(
            conv2d_same(&x, &high_boost()),
            Err(crate::Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn same_high_boost_on_ones_keeps_interior() {
        let y = conv2d_same(&Matrix2::filled(5, 5, 1.0), &high_boost()).unwrap();
        for r in 1..4 {
            for c in 1..4 {
                assert_eq!(y.get(r, c), 1.0);
            }
        }
        // corner sees 4 taps: 9 - 3
        assert_eq!(y.get(0, 0), 6.0);
        assert_eq!(y, brute_same(&Matrix2::filled(5, 5, 1.0), &high_boost()));
    }

    #[test]
    fn same_high_boost_on_impulse() {
        let mut x = Matrix2::zeros(3, 3);
        x.set(1, 1, 1.0);
        let y = conv2d_same(&x, &high_boost()).unwrap();
        let expected = Matrix2::from_rows(&[
            &[-1.0, -1.0, -1.0],
            &[-1.0, 9.0, -1.0],
            &[-1.0, -1.0, -1.0],
        ]);
        assert_eq!(y, expected);
    }

    #[test]
    fn valid_window_sums() {
        let x = iota(6, 6);
        let k = Kernel2::new(5, 5, vec![1.0; 25]).unwrap();
        let y = conv2d_valid(&x, &k, 1).unwrap();
        assert_eq!(y.dims(), (2, 2));
        for r in 0..2 {
            for c in 0..2 {
                let mut s = 0.0;
                for i in 0..5 {
                    for j in 0..5 {
                        s += x.get(r + i, c + j);
                    }
                }
                assert_eq!(y.get(r, c), s);
            }
        }
        let ones = conv2d_valid(&Matrix2::filled(6, 6, 1.0), &k, 1).unwrap();
        assert_eq!(ones, Matrix2::filled(2, 2, 25.0));
    }

    #[test]
    fn valid_full_overlap_and_stride() {
        let k = Kernel2::new(3, 3, vec![1.0; 9]).unwrap();
        let y = conv2d_valid(&Matrix2::filled(3, 3, 1.0), &k, 1).unwrap();
        assert_eq!(y, Matrix2::from_rows(&[&[9.0]]));

        let x = iota(5, 5);
        let y = conv2d_valid(&x, &Kernel2::identity(1).unwrap(), 2).unwrap();
        assert_eq!(y, Matrix2::from_fn(3, 3, |r, c| x.get(2 * r, 2 * c)));
    }

    #[test]
    fn valid_rejects_large_kernel() {
        let k = Kernel2::new(5, 5, vec![1.0; 25]).unwrap();
        assert!(conv2d_valid(&Matrix2::zeros(4, 6), &k, 1).is_err());
        assert!(conv2d_valid(&Matrix2::zeros(6, 6), &k, 0).is_err());
    }

    #[test]
    fn maxpool_examples() {
        let y = maxpool(&Matrix2::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]), 2, 2).unwrap();
        assert_eq!(y, Matrix2::from_rows(&[&[4.0]]));
        let y = maxpool(&iota(4, 4), 2, 2).unwrap();
        assert_eq!(y, Matrix2::from_rows(&[&[6.0, 8.0], &[14.0, 16.0]]));
        let y = maxpool(&Matrix2::filled(6, 8, 3.5), 2, 2).unwrap();
        assert_eq!(y, Matrix2::filled(3, 4, 3.5));
        // odd trailing row/col dropped
        assert_eq!(maxpool(&iota(5, 7), 2, 2).unwrap().dims(), (2, 3));
        assert!(maxpool(&Matrix2::zeros(1, 4), 2, 2).is_err());
    }

    #[test]
    fn average_pool() {
        let y = pool2d(&iota(4, 4), Pooling::Average, 2, 2).unwrap();
        assert_eq!(y, Matrix2::from_rows(&[&[3.5, 5.5], &[11.5, 13.5]]));
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(logistic(0.0), 0.5);
        assert!((logistic(100.0) - 1.0).abs() < 1e-12);
        assert!(logistic(-1000.0) >= 0.0);
        for &z in &[-30.0, -2.5, -0.1, 0.3, 4.0, 17.0] {
            assert!((logistic(z) + logistic(-z) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn flatten_examples() {
        let t = Tensor4::new(1, 1, 1, 1, vec![4.25]).unwrap();
        assert_eq!(flatten4d(&t), Matrix2::from_rows(&[&[4.25]]));

        let t = Tensor4::new(2, 1, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = flatten4d(&t);
        assert_eq!(m, Matrix2::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    }

    #[test]
    fn flatten_order_is_height_width_channel() {
        let (a, b, n, batch) = (3, 2, 4, 2);
        let t = Tensor4::new(a, b, n, batch, (0..a * b * n * batch).map(|v| v as f64).collect())
            .unwrap();
        let m = flatten4d(&t);
        for s in 0..batch {
            for h in 0..a {
                for w in 0..b {
                    for c in 0..n {
                        assert_eq!(m.get(s, (h * b + w) * n + c), t.get(h, w, c, s));
                    }
                }
            }
        }
    }

    #[test]
    fn kernel_rotation() {
        let k = Kernel2::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let r = k.rotate90();
        assert_eq!((r.rows(), r.cols()), (3, 1));
        assert_eq!(r.weights(), &[3.0, 2.0, 1.0]);
    }

    fn small_matrix() -> impl Strategy<Value = Matrix2> {
        (1usize..7, 1usize..7).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-5.0f64..5.0, r * c)
                .prop_map(move |d| Matrix2::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn same_matches_brute_force(x in small_matrix(), w in proptest::collection::vec(-2.0f64..2.0, 9)) {
            let k = Kernel2::new(3, 3, w).unwrap();
            let a = conv2d_same(&x, &k).unwrap();
            let b = brute_same(&x, &k);
            for (p, q) in a.data().iter().zip(b.data()) {
                prop_assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()));
            }
        }

        #[test]
        fn same_is_linear(
            (x, y) in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| (
                proptest::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| Matrix2::new(r, c, d).unwrap()),
                proptest::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| Matrix2::new(r, c, d).unwrap()),
            )),
            alpha in -4.0f64..4.0,
            beta in -4.0f64..4.0,
        ) {
            let k = high_boost();
            let lhs = conv2d_same(&x.scale(alpha).add(&y.scale(beta)).unwrap(), &k).unwrap();
            let rhs = conv2d_same(&x, &k).unwrap().scale(alpha)
                .add(&conv2d_same(&y, &k).unwrap().scale(beta)).unwrap();
            let norm = lhs.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (p, q) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((p - q).abs() <= 1e-12 * norm);
            }
        }

        #[test]
        fn same_constant_interior(rows in 3usize..8, cols in 3usize..8, v in -10.0f64..10.0) {
            let y = conv2d_same(&Matrix2::filled(rows, cols, v), &high_boost()).unwrap();
            for r in 1..rows - 1 {
                for c in 1..cols - 1 {
                    prop_assert!((y.get(r, c) - v).abs() <= 1e-12 * (1.0 + v.abs()));
                }
            }
        }

        #[test]
        fn flatten_round_trip(a in 1usize..4, b in 1usize..4, n in 1usize..4, batch in 1usize..4, seed in 0u64..1000) {
            let data: Vec<f64> = (0..a * b * n * batch).map(|i| ((i as u64 * 31 + seed) % 97) as f64 - 40.0).collect();
            let t = Tensor4::new(a, b, n, batch, data).unwrap();
            let m = flatten4d(&t);
            prop_assert_eq!(m.dims(), (batch, a * b * n));
            prop_assert_eq!(unflatten4d(&m, a, b, n).unwrap(), t);
        }

        #[test]
        fn maxpool_bounded(x in small_matrix()) {
            prop_assume!(x.rows() >= 2 && x.cols() >= 2);
            let y = maxpool(&x, 2, 2).unwrap();
            let (_, hi) = x.min_max().unwrap();
            for r in 0..y.rows() {
                for c in 0..y.cols() {
                    let window_max = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(i, j)| x.get(2 * r + i, 2 * c + j))
                        .fold(f64::NEG_INFINITY, f64::max);
                    prop_assert_eq!(y.get(r, c), window_max);
                    prop_assert!(y.get(r, c) <= hi);
                }
            }
        }
    }
}
