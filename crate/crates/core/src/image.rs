//! Image and single-channel matrix containers plus the elementary statistics
//! the solvers need (means, luma conversion, spectral norm).
//!
//! Layout: [`Image`] stores samples row-major with channels interleaved
//! (`data[(y * width + x) * channels + c]`), the same order PNG uses.
//! [`ChannelMatrix`] is a dense row-major `rows x cols` matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{sum_f64, Scalar};

/// H x W x C raster. Samples are expected in `[0, 1]` at load and output
/// boundaries; intermediate results may leave that range.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

/// One channel of an image viewed as a dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// RGB to luma weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LumaConvention {
    /// 0.299 R + 0.587 G + 0.114 B (OpenCV/PIL).
    #[default]
    Analog,
    /// 0.2568 R + 0.5041 G + 0.0979 B (MATLAB `rgb2ycbcr` without the offset).
    Digital,
}

impl LumaConvention {
    pub fn weights(self) -> [f64; 3] {
        match self {
            LumaConvention::Analog => [0.299, 0.587, 0.114],
            LumaConvention::Digital => [0.2568, 0.5041, 0.0979],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LumaConvention::Analog => "analog",
            LumaConvention::Digital => "digital",
        }
    }
}

impl std::str::FromStr for LumaConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analog" => Ok(LumaConvention::Analog),
            "digital" => Ok(LumaConvention::Digital),
            other => Err(Error::InvalidParameter(format!(
                "unknown luma convention '{other}' (expected analog|digital)"
            ))),
        }
    }
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Empty);
        }
        if height * width * channels != data.len() {
            return Err(Error::DataLength {
                len: data.len(),
                shape: (height, width, channels),
            });
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds an image from `f(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    /// Reassembles an image from per-channel matrices of identical shape.
    pub fn from_channels(planes: &[ChannelMatrix<T>]) -> Result<Self> {
        let first = planes.first().ok_or(Error::Empty)?;
        let (rows, cols) = (first.rows, first.cols);
        for p in planes {
            if p.rows != rows || p.cols != cols {
                return Err(Error::ShapeMismatch {
                    left: (rows, cols, 1),
                    right: (p.rows, p.cols, 1),
                });
            }
        }
        let channels = planes.len();
        let mut data = Vec::with_capacity(rows * cols * channels);
        for i in 0..rows * cols {
            for p in planes {
                data.push(p.data[i]);
            }
        }
        Image::new(rows, cols, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Copies channel `c` out as a matrix.
    pub fn channel(&self, c: usize) -> ChannelMatrix<T> {
        assert!(c < self.channels, "channel {c} out of range");
        let data = self
            .data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect();
        ChannelMatrix {
            rows: self.height,
            cols: self.width,
            data,
        }
    }

    pub fn channels_iter(&self) -> impl Iterator<Item = ChannelMatrix<T>> + '_ {
        (0..self.channels).map(move |c| self.channel(c))
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp_unit(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// Mean over all samples.
    pub fn mean(&self) -> f64 {
        sum_f64(&self.data) / self.data.len() as f64
    }

    pub fn channel_means(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (a, v) in acc.iter_mut().zip(px) {
                *a += v.as_f64();
            }
        }
        let n = (self.height * self.width) as f64;
        acc.into_iter().map(|a| a / n).collect()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                let v = v.as_f64();
                (lo.min(v), hi.max(v))
            })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn in_unit_range(&self) -> bool {
        self.data
            .iter()
            .all(|v| v.is_finite() && *v >= T::zero() && *v <= T::one())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<T: Scalar> ChannelMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DataLength {
                len: data.len(),
                shape: (rows, cols, 1),
            });
        }
        Ok(ChannelMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        ChannelMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        ChannelMatrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidParameter("ragged rows".into()));
        }
        Ok(ChannelMatrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn cast<U: Scalar>(&self) -> ChannelMatrix<U> {
        ChannelMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        ChannelMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `f(self, other)`; shapes must agree.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        ChannelMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                left: (self.rows, self.cols, 1),
                right: (other.rows, other.cols, 1),
            });
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        sum_f64(&self.data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0, |acc, v| acc + v.as_f64() * v.as_f64())
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0, |acc, v| acc.max(v.as_f64().abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Dense product `self * rhs`, accumulated in `f64`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch {
                left: (self.rows, self.cols, 1),
                right: (rhs.rows, rhs.cols, 1),
            });
        }
        let mut out = vec![0.0f64; self.rows * rhs.cols];
        for i in 0..self.rows {
            let row = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.get(i, k).as_f64();
                if a == 0.0 {
                    continue;
                }
                for (o, b) in row
                    .iter_mut()
                    .zip(&rhs.data[k * rhs.cols..(k + 1) * rhs.cols])
                {
                    *o += a * b.as_f64();
                }
            }
        }
        Ok(ChannelMatrix {
            rows: self.rows,
            cols: rhs.cols,
            data: out.into_iter().map(T::of).collect(),
        })
    }
}

/// Arithmetic mean of all entries.
pub fn mean<T: Scalar>(m: &ChannelMatrix<T>) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::Empty);
    }
    Ok(m.sum() / m.len() as f64)
}

/// Per-pixel luma of a 3-channel image. No offset term is added.
pub fn rgb_to_luma<T: Scalar>(img: &Image<T>, convention: LumaConvention) -> Result<Image<T>> {
    if img.channels() != 3 {
        return Err(Error::ChannelCount {
            expected: 3,
            found: img.channels(),
        });
    }
    let [wr, wg, wb] = convention.weights();
    let data = img
        .data()
        .chunks_exact(3)
        .map(|px| T::of(wr * px[0].as_f64() + wg * px[1].as_f64() + wb * px[2].as_f64()))
        .collect();
    Image::new(img.height(), img.width(), 1, data)
}

/// Luma for 3-channel images; single-channel images are returned as-is.
pub(crate) fn luma_or_gray<T: Scalar>(
    img: &Image<T>,
    convention: LumaConvention,
) -> Result<Image<T>> {
    match img.channels() {
        1 => Ok(img.clone()),
        _ => rgb_to_luma(img, convention),
    }
}

/// Leading singular triplet found by power iteration on `mᵀm`.
#[derive(Clone, Debug)]
pub(crate) struct LeadingTriplet {
    pub sigma: f64,
    /// Unit left vector (length `rows`), zero when `sigma == 0`.
    pub u: Vec<f64>,
    /// Unit right vector (length `cols`), zero when `sigma == 0`.
    pub v: Vec<f64>,
}

const POWER_REL_TOL: f64 = 1e-13;
const POWER_MAX_ITERS: usize = 20_000;

pub(crate) fn leading_triplet<T: Scalar>(m: &ChannelMatrix<T>) -> Result<LeadingTriplet> {
    if m.is_empty() {
        return Err(Error::Empty);
    }
    let (rows, cols) = m.shape();
    let a: Vec<f64> = m.data().iter().map(|v| v.as_f64()).collect();
    if a.iter().all(|&v| v == 0.0) {
        return Ok(LeadingTriplet {
            sigma: 0.0,
            u: vec![0.0; rows],
            v: vec![0.0; cols],
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spectral norm input".into()));
    }

    // Deterministic start vector with no exact symmetry.
    let mut v: Vec<f64> = (0..cols)
        .map(|j| 1.0 + 0.5 * ((j as f64 * 0.618_033_988_75).fract() - 0.5))
        .collect();
    normalize(&mut v);
    let mut u = vec![0.0; rows];
    let mut lambda = 0.0f64;
    for _ in 0..POWER_MAX_ITERS {
        // u = A v
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = a[i * cols..(i + 1) * cols]
                .iter()
                .zip(&v)
                .map(|(x, y)| x * y)
                .sum();
        }
        // w = Aᵀ u
        let mut w = vec![0.0; cols];
        for (i, ui) in u.iter().enumerate() {
            for (wj, x) in w.iter_mut().zip(&a[i * cols..(i + 1) * cols]) {
                *wj += x * ui;
            }
        }
        let next = w.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>();
        let norm = normalize(&mut w);
        v = w;
        if norm == 0.0 {
            // start vector annihilated; cannot happen for a nonzero matrix in exact
            // arithmetic unless v ⟂ row space, so restart from a basis vector.
            v = vec![0.0; cols];
            v[0] = 1.0;
            continue;
        }
        let done = (next - lambda).abs() <= POWER_REL_TOL * next.abs();
        lambda = next;
        if done {
            break;
        }
    }
    for (i, ui) in u.iter_mut().enumerate() {
        *ui = a[i * cols..(i + 1) * cols]
            .iter()
            .zip(&v)
            .map(|(x, y)| x * y)
            .sum();
    }
    let sigma = normalize(&mut u);
    Ok(LeadingTriplet { sigma, u, v })
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Largest singular value. An all-zero matrix yields 0.
pub fn spectral_norm<T: Scalar>(m: &ChannelMatrix<T>) -> Result<f64> {
    Ok(leading_triplet(m)?.sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::close;
    use proptest::prelude::*;

    mod approx_eq {
        pub fn close(a: f64, b: f64, tol: f64) -> bool {
            (a - b).abs() <= tol
        }
    }

    fn lcg_matrix(rows: usize, cols: usize, seed: u64) -> ChannelMatrix<f64> {
        let mut s = seed;
        ChannelMatrix::from_fn(rows, cols, |_, _| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn mean_of_constant_and_small_matrix() {
        let m = ChannelMatrix::filled(4, 3, 0.5f32);
        assert_eq!(mean(&m).unwrap(), 0.5);
        let m = ChannelMatrix::new(2, 2, vec![0.0f64, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(mean(&m).unwrap(), 0.5);
    }

    #[test]
    fn mean_matches_double_loop() {
        let m = lcg_matrix(8, 8, 7);
        let mut acc = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                acc += m.get(i, j);
            }
        }
        assert!(close(mean(&m).unwrap(), acc / 64.0, 1e-12));
    }

    #[test]
    fn mean_of_empty_is_error() {
        let m = ChannelMatrix::<f64>::zeros(0, 3);
        assert!(matches!(mean(&m), Err(Error::Empty)));
    }

    #[test]
    fn luma_anchors() {
        let white = Image::filled(2, 2, 3, 1.0f64);
        let y = rgb_to_luma(&white, LumaConvention::Analog).unwrap();
        assert!(close(y.get(0, 0, 0), 1.0, 1e-12));
        let y = rgb_to_luma(&white, LumaConvention::Digital).unwrap();
        assert!(close(y.get(1, 1, 0), 0.8588, 1e-12));
        let green = Image::from_fn(1, 1, 3, |_, _, c| if c == 1 { 1.0f64 } else { 0.0 });
        let y = rgb_to_luma(&green, LumaConvention::Analog).unwrap();
        assert!(close(y.get(0, 0, 0), 0.587, 1e-12));
    }

    #[test]
    fn luma_rejects_gray_input() {
        let g = Image::filled(2, 2, 1, 0.3f32);
        assert!(matches!(
            rgb_to_luma(&g, LumaConvention::Analog),
            Err(Error::ChannelCount {
                expected: 3,
                found: 1
            })
        ));
    }

    #[test]
    fn spectral_norm_anchors() {
        assert!(close(
            spectral_norm(&ChannelMatrix::<f64>::identity(3)).unwrap(),
            1.0,
            1e-12
        ));
        let d = ChannelMatrix::from_rows(&[&[3.0f64, 0.0], &[0.0, 1.0]]).unwrap();
        assert!(close(spectral_norm(&d).unwrap(), 3.0, 1e-10));
        assert_eq!(
            spectral_norm(&ChannelMatrix::<f32>::zeros(3, 2)).unwrap(),
            0.0
        );
        // start-vector orthogonality trap: leading vector is (1, -1)/√2
        let m = ChannelMatrix::from_rows(&[&[1.0f64, -1.0], &[-1.0, 1.0]]).unwrap();
        assert!(close(spectral_norm(&m).unwrap(), 2.0, 1e-9));
    }

    #[test]
    fn spectral_norm_matches_full_svd() {
        for seed in 0..5 {
            let m = lcg_matrix(6, 6, seed);
            let oracle = nalgebra::DMatrix::from_row_slice(6, 6, m.data())
                .singular_values()
                .max();
            let s = spectral_norm(&m).unwrap();
            assert!((s - oracle).abs() <= 1e-5 * oracle, "{s} vs {oracle}");
        }
    }

    #[test]
    fn channel_round_trip() {
        let img = Image::from_fn(3, 4, 3, |y, x, c| (y * 100 + x * 10 + c) as f32);
        let planes: Vec<_> = img.channels_iter().collect();
        assert_eq!(planes[2].get(1, 3), 132.0);
        assert_eq!(Image::from_channels(&planes).unwrap(), img);
    }

    proptest! {
        #[test]
        fn luma_of_replicated_gray_is_identity(v in 0.0f64..=1.0) {
            let img = Image::filled(1, 1, 3, v);
            let y = rgb_to_luma(&img, LumaConvention::Analog).unwrap();
            prop_assert!((y.get(0, 0, 0) - v).abs() <= 1e-15);
        }

        #[test]
        fn spectral_norm_is_absolutely_homogeneous(seed in 0u64..1000, c in -5.0f64..5.0) {
            let m = lcg_matrix(5, 4, seed);
            let s = spectral_norm(&m).unwrap();
            let sc = spectral_norm(&m.scale(c)).unwrap();
            prop_assert!((sc - c.abs() * s).abs() <= 1e-9 * (c.abs() * s).max(1e-300));
        }

        #[test]
        fn mean_is_permutation_invariant(mut v in proptest::collection::vec(-1.0f64..1.0, 1..64), seed in 0u64..100) {
            let n = v.len();
            let m1 = ChannelMatrix::new(1, n, v.clone()).unwrap();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                v.swap(i, (s >> 33) as usize % (i + 1));
            }
            let m2 = ChannelMatrix::new(1, n, v).unwrap();
            prop_assert!((mean(&m1).unwrap() - mean(&m2).unwrap()).abs() <= 1e-12);
        }
    }
}
