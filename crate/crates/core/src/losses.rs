//! Training objectives: the factor energy-ratio loss and the three
//! zero-reference enhancement losses (color, exposure, smoothness).

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorize::{FactorStack, ParamVector, MEAN_EPS};
use crate::image::{luma_or_gray, Image, LumaConvention};
use crate::scalar::Scalar;

pub const DEFAULT_EXPOSURE_TARGET: f64 = 0.6;
pub const DEFAULT_EXPOSURE_WINDOW: usize = 16;

/// Individual loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub factorization: f64,
    pub color: f64,
    pub exposure: f64,
    pub smooth: f64,
}

/// Weights λ of the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub factorization: f64,
    pub color: f64,
    pub exposure: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            factorization: 1.0,
            color: 1.0,
            exposure: 10.0,
            smooth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for w in [self.factorization, self.color, self.exposure, self.smooth] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "loss weights must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// `λ_f L_f + λ_c L_c + λ_e L_e + λ_s L_s`
pub fn loss_total(parts: &LossParts, weights: &LossWeights) -> f64 {
    weights.factorization * parts.factorization
        + weights.color * parts.color
        + weights.exposure * parts.exposure
        + weights.smooth * parts.smooth
}

/// `mean(Eᵏ)/mean(Xᵏ)` per factor (outer) and channel (inner), using the
/// solver's own `Eᴷ`. A zero-mean input gives a ratio of 0.
pub fn energy_ratios<T: Scalar>(stack: &FactorStack<T>, img: &Image<T>) -> Result<Vec<Vec<f64>>> {
    img.same_shape(&stack.e[0])?;
    let k_factors = stack.k_factors();
    let mut x: Vec<f64> = img.data().iter().map(|v| v.as_f64()).collect();
    let c = img.channels();
    let n = (img.height() * img.width()) as f64;
    let mut out = Vec::with_capacity(k_factors);
    for k in 1..=k_factors {
        let e = stack.pre_absorption(k);
        let mut sx = vec![0.0; c];
        let mut se = vec![0.0; c];
        for (i, (xv, ev)) in x.iter_mut().zip(e.data()).enumerate() {
            sx[i % c] += *xv;
            se[i % c] += ev.as_f64();
            *xv -= ev.as_f64();
        }
        out.push(
            sx.iter()
                .zip(&se)
                .enumerate()
                .map(|(ch, (&sx, &se))| {
                    let mx = sx / n;
                    if mx.abs() <= MEAN_EPS {
                        warn!("factor {k}, channel {ch}: input mean is zero; ratio taken as 0");
                        0.0
                    } else {
                        (se / n) / mx
                    }
                })
                .collect(),
        );
    }
    Ok(out)
}

/// `Σₖ |mean(Eᵏ)/mean(Xᵏ) − νᵏ|`, averaged over channels.
pub fn loss_factorization<T: Scalar>(
    stack: &FactorStack<T>,
    img: &Image<T>,
    params: &ParamVector,
) -> Result<f64> {
    if stack.k_factors() != params.k_factors {
        return Err(Error::InvalidParameter(format!(
            "stack has {} factors, parameters describe {}",
            stack.k_factors(),
            params.k_factors
        )));
    }
    let ratios = energy_ratios(stack, img)?;
    let c = img.channels() as f64;
    Ok(ratios
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let nu = params.nu(i + 1);
            r.iter().map(|v| (v - nu).abs()).sum::<f64>() / c
        })
        .sum())
}

/// Gray-world loss: squared channel-mean differences over (r,g), (g,b), (b,r).
pub fn loss_color<T: Scalar>(o: &Image<T>) -> Result<f64> {
    if o.channels() != 3 {
        return Err(Error::ChannelCount {
            expected: 3,
            found: o.channels(),
        });
    }
    let m = o.channel_means();
    Ok((m[0] - m[1]).powi(2) + (m[1] - m[2]).powi(2) + (m[2] - m[0]).powi(2))
}

/// Mean over `window x window` tiles of `(tile mean luma − target)²`.
/// Edge tiles are averaged over the pixels they contain.
pub fn loss_exposure<T: Scalar>(o: &Image<T>, target: f64, window: usize) -> Result<f64> {
    if window == 0 {
        return Err(Error::InvalidParameter(
            "exposure window must be >= 1".into(),
        ));
    }
    let y = luma_or_gray(o, LumaConvention::Analog)?;
    let (h, w) = (y.height(), y.width());
    let mut total = 0.0;
    let mut tiles = 0usize;
    for ty in (0..h).step_by(window) {
        for tx in (0..w).step_by(window) {
            let (y1, x1) = ((ty + window).min(h), (tx + window).min(w));
            let mut s = 0.0;
            for yy in ty..y1 {
                for xx in tx..x1 {
                    s += y.get(yy, xx, 0).as_f64();
                }
            }
            let m = s / ((y1 - ty) * (x1 - tx)) as f64;
            total += (m - target).powi(2);
            tiles += 1;
        }
    }
    Ok(total / tiles as f64)
}

/// Mean of squared forward differences in x and y (zero past the last
/// column/row) over all channels and pixels.
pub fn loss_smooth<T: Scalar>(o: &Image<T>) -> Result<f64> {
    let (h, w, c) = o.shape();
    if h < 2 || w < 2 {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            min: 2,
        });
    }
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = o.get(y, x, ch).as_f64();
                if x + 1 < w {
                    acc += (o.get(y, x + 1, ch).as_f64() - v).powi(2);
                }
                if y + 1 < h {
                    acc += (o.get(y + 1, x, ch).as_f64() - v).powi(2);
                }
            }
        }
    }
    Ok(acc / (h * w * c) as f64)
}
