//! Shrinkage operators and the thin SVD behind singular value thresholding.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ChannelMatrix;
use crate::scalar::Scalar;

/// Relative cut-off below which singular values are reported as zero.
pub const SINGULAR_VALUE_FLOOR: f64 = 1e-12;

const SVD_MAX_ITERS: usize = 10_000;

/// Thin SVD `m = u · diag(s) · vt` with `r = min(rows, cols)`.
#[derive(Clone, Debug)]
pub struct SvdResult<T> {
    /// rows x r, orthonormal columns
    pub u: ChannelMatrix<T>,
    /// non-increasing, non-negative
    pub s: Vec<T>,
    /// r x cols, orthonormal rows
    pub vt: ChannelMatrix<T>,
}

impl<T: Scalar> SvdResult<T> {
    /// `u · diag(d) · vt` for an arbitrary spectrum `d` of length r.
    pub fn compose(&self, d: &[T]) -> ChannelMatrix<T> {
        let (rows, r) = self.u.shape();
        let cols = self.vt.cols();
        let mut out = vec![0.0f64; rows * cols];
        for (k, dk) in d.iter().enumerate().take(r) {
            let dk = dk.as_f64();
            if dk == 0.0 {
                continue;
            }
            let vrow = &self.vt.data()[k * cols..(k + 1) * cols];
            for i in 0..rows {
                let uik = self.u.get(i, k).as_f64() * dk;
                if uik == 0.0 {
                    continue;
                }
                for (o, v) in out[i * cols..(i + 1) * cols].iter_mut().zip(vrow) {
                    *o += uik * v.as_f64();
                }
            }
        }
        ChannelMatrix::new(rows, cols, out.into_iter().map(T::of).collect())
            .expect("shape computed from factors")
    }

    pub fn reconstruct(&self) -> ChannelMatrix<T> {
        self.compose(&self.s)
    }
}

/// Which proximal map the low-rank update applies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowRankProx {
    /// Singular value soft-thresholding (nuclear norm).
    #[default]
    Nuclear,
    /// Block soft-thresholding of the whole matrix (Frobenius norm).
    Frobenius,
}

fn check_threshold(alpha: f64) -> Result<()> {
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::NegativeThreshold(alpha));
    }
    Ok(())
}

#[inline]
pub(crate) fn shrink<T: Scalar>(x: T, alpha: T) -> T {
    let mag = x.abs() - alpha;
    if mag > T::zero() {
        mag.copysign(x)
    } else {
        T::zero()
    }
}

/// `sign(x) · max(|x| − alpha, 0)`
pub fn soft_threshold<T: Scalar>(x: T, alpha: T) -> Result<T> {
    check_threshold(alpha.as_f64())?;
    Ok(shrink(x, alpha))
}

/// Elementwise [`soft_threshold`].
pub fn soft_threshold_matrix<T: Scalar>(
    m: &ChannelMatrix<T>,
    alpha: T,
) -> Result<ChannelMatrix<T>> {
    check_threshold(alpha.as_f64())?;
    Ok(m.map(|v| shrink(v, alpha)))
}

/// Thin SVD, sorted, with the first nonzero entry of every `u` column made non-negative.
pub fn svd<T: Scalar>(m: &ChannelMatrix<T>) -> Result<SvdResult<T>> {
    let f = svd_f64(m)?;
    Ok(SvdResult {
        u: f.u.cast(),
        s: f.s.iter().map(|&v| T::of(v)).collect(),
        vt: f.vt.cast(),
    })
}

pub(crate) fn svd_f64<T: Scalar>(m: &ChannelMatrix<T>) -> Result<SvdResult<f64>> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::Empty);
    }
    if !m.all_finite() {
        return Err(Error::NonFinite("SVD input".into()));
    }
    let a = DMatrix::from_iterator(cols, rows, m.data().iter().map(|v| v.as_f64())).transpose();
    let f = thin_svd(a)?;
    let r = f.s.len();
    Ok(SvdResult {
        u: ChannelMatrix::from_fn(rows, r, |i, k| f.u[(i, k)]),
        s: f.s,
        vt: ChannelMatrix::from_fn(r, cols, |k, j| f.v[(j, k)]),
    })
}

/// Column-major thin SVD `a = u · diag(s) · vᵀ`, sorted and sign-normalized.
#[derive(Clone, Debug)]
pub(crate) struct ThinSvd {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub v: DMatrix<f64>,
}

impl ThinSvd {
    /// `u · diag(d) · vᵀ`
    pub fn compose(&self, d: &[f64]) -> DMatrix<f64> {
        let mut ud = self.u.clone();
        for (k, &dk) in d.iter().enumerate() {
            ud.column_mut(k).scale_mut(dk);
        }
        ud * self.v.transpose()
    }
}

pub(crate) fn thin_svd(a: DMatrix<f64>) -> Result<ThinSvd> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::Empty);
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("SVD input".into()));
    }
    let dec = nalgebra::linalg::SVD::try_new(a, true, true, f64::EPSILON, SVD_MAX_ITERS)
        .ok_or(Error::SvdNoConvergence { rows, cols })?;
    let (u, vt) = match (dec.u, dec.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::SvdNoConvergence { rows, cols }),
    };
    let r = rows.min(cols);
    let mut order: Vec<usize> = (0..r).collect();
    // stable sort keeps the result deterministic for tied values
    order.sort_by(|&i, &j| dec.singular_values[j].total_cmp(&dec.singular_values[i]));
    let smax = order.first().map_or(0.0, |&i| dec.singular_values[i]);

    let mut uo = DMatrix::<f64>::zeros(rows, r);
    let mut vo = DMatrix::<f64>::zeros(cols, r);
    let mut s = Vec::with_capacity(r);
    for (k, &src) in order.iter().enumerate() {
        let sv = dec.singular_values[src];
        s.push(if sv < SINGULAR_VALUE_FLOOR * smax {
            0.0
        } else {
            sv
        });
        let first = (0..rows)
            .map(|i| u[(i, src)])
            .find(|v| v.abs() > SINGULAR_VALUE_FLOOR)
            .unwrap_or(0.0);
        let sign = if first < 0.0 { -1.0 } else { 1.0 };
        uo.column_mut(k).copy_from(&(u.column(src) * sign));
        for j in 0..cols {
            vo[(j, k)] = sign * vt[(src, j)];
        }
    }
    Ok(ThinSvd { u: uo, s, v: vo })
}

/// Proximal operator of `beta · ‖·‖_*`: soft-thresholds the singular values.
pub fn singular_value_threshold<T: Scalar>(
    m: &ChannelMatrix<T>,
    beta: T,
) -> Result<ChannelMatrix<T>> {
    svt_impl(m, beta.as_f64())
}

fn to_dmatrix<T: Scalar>(m: &ChannelMatrix<T>) -> DMatrix<f64> {
    // row-major data read as column-major is the transpose
    DMatrix::from_iterator(m.cols(), m.rows(), m.data().iter().map(|v| v.as_f64()))
}

fn svt_impl<T: Scalar>(m: &ChannelMatrix<T>, beta: f64) -> Result<ChannelMatrix<T>> {
    check_threshold(beta)?;
    if m.is_empty() {
        return Err(Error::Empty);
    }
    // SVT commutes with transposition, so the transposed view is thresholded directly.
    let f = thin_svd(to_dmatrix(m))?;
    let shrunk: Vec<f64> = f.s.iter().map(|&s| (s - beta).max(0.0)).collect();
    let out = f.compose(&shrunk);
    ChannelMatrix::new(m.rows(), m.cols(), out.iter().map(|&v| T::of(v)).collect())
}

/// Proximal operator of `beta · ‖·‖_F`: `max(0, 1 − beta/‖m‖_F) · m`.
pub fn frobenius_shrink<T: Scalar>(m: &ChannelMatrix<T>, beta: T) -> Result<ChannelMatrix<T>> {
    check_threshold(beta.as_f64())?;
    let n = m.frobenius_norm();
    if n <= beta.as_f64() {
        return Ok(ChannelMatrix::zeros(m.rows(), m.cols()));
    }
    Ok(m.scale(T::of(1.0 - beta.as_f64() / n)))
}

/// Applies the selected low-rank proximal map.
pub fn low_rank_prox<T: Scalar>(
    m: &ChannelMatrix<T>,
    beta: T,
    kind: LowRankProx,
) -> Result<ChannelMatrix<T>> {
    match kind {
        LowRankProx::Nuclear => singular_value_threshold(m, beta),
        LowRankProx::Frobenius => frobenius_shrink(m, beta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ChannelMatrix<f64> {
        ChannelMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn count_above(m: &ChannelMatrix<f64>, tol: f64) -> usize {
        svd(m).unwrap().s.iter().filter(|&&s| s > tol).count()
    }

    fn nuclear(m: &ChannelMatrix<f64>) -> f64 {
        svd(m).unwrap().s.iter().sum()
    }

    #[test]
    fn soft_threshold_anchors() {
        assert_eq!(soft_threshold(1.0, 0.5).unwrap(), 0.5);
        assert_eq!(soft_threshold(0.3, 0.5).unwrap(), 0.0);
        assert_eq!(soft_threshold(-2.0, 0.5).unwrap(), -1.5);
        assert_eq!(soft_threshold(-0.7f32, 0.0).unwrap(), -0.7);
        assert!(matches!(
            soft_threshold(1.0, -0.1),
            Err(Error::NegativeThreshold(_))
        ));
    }

    #[test]
    fn svd_anchors() {
        let s = svd(&ChannelMatrix::<f64>::identity(2)).unwrap().s;
        assert_eq!(s, vec![1.0, 1.0]);
        let m = ChannelMatrix::from_rows(&[&[0.0f64, 2.0], &[0.0, 0.0]]).unwrap();
        let s = svd(&m).unwrap().s;
        assert!((s[0] - 2.0).abs() < 1e-12 && s[1] == 0.0);
    }

    #[test]
    fn svd_reconstructs_rectangular_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (r, c) in [(20, 15), (15, 20), (1, 9), (9, 1)] {
            let m = random_matrix(&mut rng, r, c);
            let f = svd(&m).unwrap();
            let sn = f.s[0];
            assert!(f.reconstruct().max_abs_diff(&m) <= 1e-5 * sn);
            assert!(f.s.windows(2).all(|w| w[0] >= w[1]));
            let utu = f.u.transpose().matmul(&f.u).unwrap();
            assert!(utu.max_abs_diff(&ChannelMatrix::identity(f.s.len())) < 1e-6);
            let vvt = f.vt.matmul(&f.vt.transpose()).unwrap();
            assert!(vvt.max_abs_diff(&ChannelMatrix::identity(f.s.len())) < 1e-6);
            for k in 0..f.s.len() {
                let first = (0..r)
                    .map(|i| f.u.get(i, k))
                    .find(|v| v.abs() > 1e-12)
                    .unwrap();
                assert!(first >= 0.0);
            }
        }
    }

    #[test]
    fn svd_rejects_non_finite() {
        let m = ChannelMatrix::new(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(svd(&m), Err(Error::NonFinite(_))));
    }

    #[test]
    fn svd_is_deterministic_and_works_in_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_matrix(&mut rng, 12, 8);
        let a = svd(&m).unwrap();
        let b = svd(&m).unwrap();
        assert_eq!(a.u, b.u);
        assert_eq!(a.s, b.s);
        let m32 = m.cast::<f32>();
        let f = svd(&m32).unwrap();
        assert!(f.reconstruct().max_abs_diff(&m32) < 1e-5);
    }

    #[test]
    fn svt_anchors() {
        let d = ChannelMatrix::from_rows(&[&[3.0f64, 0.0], &[0.0, 1.0]]).unwrap();
        let out = singular_value_threshold(&d, 2.0).unwrap();
        let want = ChannelMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap();
        assert!(out.max_abs_diff(&want) < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(&mut rng, 7, 5);
        assert!(singular_value_threshold(&m, 0.0).unwrap().max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn svt_on_rotated_diagonal() {
        let th = 0.7f64;
        let q = ChannelMatrix::from_rows(&[&[th.cos(), -th.sin()], &[th.sin(), th.cos()]]).unwrap();
        let rot = |d: &[f64]| {
            let dm = ChannelMatrix::from_rows(&[&[d[0], 0.0], &[0.0, d[1]]]).unwrap();
            q.matmul(&dm).unwrap().matmul(&q.transpose()).unwrap()
        };
        let out = singular_value_threshold(&rot(&[5.0, 2.0]), 1.0).unwrap();
        assert!(out.max_abs_diff(&rot(&[4.0, 1.0])) < 1e-5);
    }

    #[test]
    fn frobenius_shrink_scales() {
        let m = ChannelMatrix::from_rows(&[&[3.0f64, 4.0]]).unwrap();
        let out = frobenius_shrink(&m, 1.0).unwrap();
        assert!(out.max_abs_diff(&m.scale(0.8)) < 1e-15);
        assert_eq!(frobenius_shrink(&m, 6.0).unwrap().max_abs(), 0.0);
    }

    proptest! {
        #[test]
        fn soft_threshold_is_non_expansive(a in -10.0f64..10.0, b in -10.0f64..10.0, t in 0.0f64..5.0) {
            let d = (soft_threshold(a, t).unwrap() - soft_threshold(b, t).unwrap()).abs();
            prop_assert!(d <= (a - b).abs() + 1e-15);
        }

        #[test]
        fn svt_never_increases_norms(seed in 0u64..500, beta in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, 6, 4);
            let out = singular_value_threshold(&m, beta).unwrap();
            prop_assert!(nuclear(&out) <= nuclear(&m) + 1e-9);
            prop_assert!(svd(&out).unwrap().s[0] <= svd(&m).unwrap().s[0] + 1e-9);
        }

        #[test]
        fn svt_rank_is_non_increasing_in_beta(seed in 0u64..500, b1 in 0.0f64..2.0, db in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, 5, 7);
            let lo = count_above(&singular_value_threshold(&m, b1).unwrap(), 1e-8);
            let hi = count_above(&singular_value_threshold(&m, b1 + db).unwrap(), 1e-8);
            prop_assert!(hi <= lo);
        }
    }
}
