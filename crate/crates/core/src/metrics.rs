//! Full-reference quality metrics.

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::{luma_or_gray, Image, LumaConvention};
use crate::scalar::Scalar;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_pair<T: Scalar>(pred: &Image<T>, gt: &Image<T>) -> Result<()> {
    pred.same_shape(gt)?;
    if pred.is_empty() {
        return Err(Error::Empty);
    }
    if !pred.all_finite() || !gt.all_finite() {
        return Err(Error::NonFinite("metric input".into()));
    }
    Ok(())
}

/// Mean squared error pooled over all samples.
pub fn mse<T: Scalar>(pred: &Image<T>, gt: &Image<T>) -> Result<f64> {
    check_pair(pred, gt)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(s / pred.len() as f64)
}

/// `10·log10(peak²/MSE)`; identical images give `+∞`.
pub fn psnr<T: Scalar>(pred: &Image<T>, gt: &Image<T>, peak: f64) -> Result<f64> {
    if peak.is_nan() || peak <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "peak must be > 0, got {peak}"
        )));
    }
    let m = mse(pred, gt)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / m).log10()
    })
}

/// PSNR on luma. Single-channel inputs are used as they are.
pub fn psnr_y<T: Scalar>(
    pred: &Image<T>,
    gt: &Image<T>,
    convention: LumaConvention,
) -> Result<f64> {
    check_pair(pred, gt)?;
    psnr(
        &luma_or_gray(pred, convention)?,
        &luma_or_gray(gt, convention)?,
        1.0,
    )
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a row-major plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
    };
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, &k);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, &k);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, &k);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Mean SSIM with an 11×11 Gaussian window (σ 1.5) over the luma plane.
pub fn ssim<T: Scalar>(pred: &Image<T>, gt: &Image<T>) -> Result<f64> {
    ssim_with(pred, gt, LumaConvention::default(), 1.0)
}

pub fn ssim_with<T: Scalar>(
    pred: &Image<T>,
    gt: &Image<T>,
    convention: LumaConvention,
    peak: f64,
) -> Result<f64> {
    check_pair(pred, gt)?;
    let (h, w, _) = pred.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            min: SSIM_WINDOW,
        });
    }
    let plane = |img: &Image<T>| -> Result<Vec<f64>> {
        Ok(luma_or_gray(img, convention)?
            .data()
            .iter()
            .map(|v| v.as_f64())
            .collect())
    };
    Ok(ssim_plane(&plane(pred)?, &plane(gt)?, h, w, peak))
}

fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&format_db(*v))
    }
}

fn deserialize_db<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) => match t.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            _ => Err(serde::de::Error::custom(format!("invalid dB value '{t}'"))),
        },
    }
}

/// Text form of a dB value: `inf` for identical images, otherwise fixed 4 decimals.
pub fn format_db(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.4}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(serialize_with = "serialize_db", deserialize_with = "deserialize_db")]
    pub psnr_y: f64,
    #[serde(serialize_with = "serialize_db", deserialize_with = "deserialize_db")]
    pub psnr_c: f64,
    pub ssim_y: f64,
    pub mse: f64,
    pub luma_convention: LumaConvention,
}

impl MetricReport {
    pub fn compute<T: Scalar>(
        pred: &Image<T>,
        gt: &Image<T>,
        convention: LumaConvention,
    ) -> Result<Self> {
        Ok(MetricReport {
            psnr_y: psnr_y(pred, gt, convention)?,
            psnr_c: psnr(pred, gt, 1.0)?,
            ssim_y: ssim_with(pred, gt, convention, 1.0)?,
            mse: mse(pred, gt)?,
            luma_convention: convention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.gen_range(0.0..1.0))
    }

    fn naive_ssim(a: &Image<f64>, b: &Image<f64>) -> f64 {
        let (h, w, _) = a.shape();
        let k = gaussian_kernel(11, 1.5);
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut n = 0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = k[i] * k[j];
                        let (p, q) = (a.get(y + i, x + j, 0), b.get(y + i, x + j, 0));
                        ma += wt * p;
                        mb += wt * q;
                        aa += wt * p * p;
                        bb += wt * q * q;
                        ab += wt * p * q;
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
        total / n as f64
    }

    #[test]
    fn psnr_anchor() {
        let a = Image::filled(4, 4, 3, 0.5f64);
        let b = Image::filled(4, 4, 3, 0.6f64);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!((psnr_y(&a, &b, LumaConvention::Analog).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_size() {
        let a = random_image(16, 20, 3, 1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let small = random_image(10, 20, 1, 2);
        assert!(matches!(ssim(&small, &small), Err(Error::TooSmall { .. })));
    }

    #[test]
    fn ssim_matches_naive_window_sum() {
        let a = random_image(15, 17, 1, 3);
        let b = random_image(15, 17, 1, 4);
        assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn report_serializes_infinite_psnr() {
        let a = random_image(12, 12, 3, 5);
        let r = MetricReport::compute(&a, &a, LumaConvention::Digital).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"psnr_y\":\"inf\""));
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(format_db(20.0), "20.0000");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = random_image(12, 12, 3, 6);
        let b = random_image(12, 13, 3, 6);
        assert!(mse(&a, &b).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn metrics_are_symmetric_and_bounded(seed in 0u64..10_000) {
            let a = random_image(13, 14, 3, seed);
            let b = random_image(13, 14, 3, seed + 1);
            prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
            let s = ssim(&a, &b).unwrap();
            prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
        }
    }
}
