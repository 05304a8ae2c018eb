//! Factor fusion: running-average blending, per-factor quadratic curves and
//! the bilateral post-filter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorize::{factorize, FactorStack, ParamVector};
use crate::image::Image;
use crate::scalar::Scalar;

/// Per-factor weight used when no weights are configured.
pub const DEFAULT_FACTOR_WEIGHT: f64 = 4.0;
/// Starting curve coefficient for every factor.
pub const DEFAULT_GAMMA: f64 = -1.0;
/// Curve coefficients are kept in this range so curves map `[0,1]` into itself.
pub const GAMMA_BOUND: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    RunningAverage,
    Curve,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "running_average" => Ok(FusionMode::RunningAverage),
            "curve" => Ok(FusionMode::Curve),
            other => Err(Error::InvalidParameter(format!(
                "unknown fusion mode '{other}' (expected running_average|curve)"
            ))),
        }
    }
}

/// How the per-factor curves combine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveVariant {
    /// `O ← O + rᵏ Mᵏ (O² − O)` applied once per factor in order.
    #[default]
    Iterated,
    /// `O = I + Σₖ rᵏ Mᵏ (I² − I)`, every term evaluated on the input.
    LiteralSum,
}

/// Normalizer of the curve masks `Mᵏ = min(1, wᵏ·|Fᵏ| / n(|Fᵏ|))`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskNorm {
    /// mean magnitude
    #[default]
    Mean,
    /// largest magnitude
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BilateralParams {
    pub window: usize,
    pub sigma_color: f64,
    pub sigma_space: f64,
}

impl Default for BilateralParams {
    fn default() -> Self {
        BilateralParams {
            window: 5,
            sigma_color: 0.5,
            sigma_space: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// `K` weights for `F¹..Fᴷ`, or `K+1` with the input image's weight first.
    pub factor_weights: Vec<f64>,
    /// curve coefficient `rᵏ` per factor
    pub gammas: Vec<f64>,
    #[serde(default)]
    pub bilateral: BilateralParams,
    #[serde(default)]
    pub mode: FusionMode,
    #[serde(default)]
    pub curve_variant: CurveVariant,
    #[serde(default)]
    pub mask_norm: MaskNorm,
}

impl FusionConfig {
    /// Input weight 1, factor weights [`DEFAULT_FACTOR_WEIGHT`], gammas [`DEFAULT_GAMMA`].
    pub fn new(k_factors: usize) -> Self {
        let mut factor_weights = vec![DEFAULT_FACTOR_WEIGHT; k_factors + 1];
        factor_weights[0] = 1.0;
        FusionConfig {
            factor_weights,
            gammas: vec![DEFAULT_GAMMA; k_factors],
            bilateral: BilateralParams::default(),
            mode: FusionMode::default(),
            curve_variant: CurveVariant::default(),
            mask_norm: MaskNorm::default(),
        }
    }

    pub fn k_factors(&self) -> usize {
        self.gammas.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.gammas.len();
        let n = self.factor_weights.len();
        if k == 0 {
            return Err(Error::InvalidParameter(
                "fusion needs at least one gamma".into(),
            ));
        }
        if n != k && n != k + 1 {
            return Err(Error::InvalidParameter(format!(
                "expected {k} or {} factor weights, found {n}",
                k + 1
            )));
        }
        if let Some(w) = self
            .factor_weights
            .iter()
            .find(|w| !(w.is_finite() && **w >= 0.0))
        {
            return Err(Error::InvalidParameter(format!(
                "factor weights must be finite and >= 0, got {w}"
            )));
        }
        if let Some(g) = self.gammas.iter().find(|g| !g.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gamma must be finite, got {g}"
            )));
        }
        let b = &self.bilateral;
        if b.window == 0 || b.window.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "bilateral window must be odd, got {}",
                b.window
            )));
        }
        if !(b.sigma_color > 0.0 && b.sigma_space > 0.0) {
            return Err(Error::InvalidParameter(
                "bilateral sigmas must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// Weight of the input image (1 unless `K+1` weights are given).
    pub fn input_weight(&self) -> f64 {
        if self.factor_weights.len() == self.gammas.len() + 1 {
            self.factor_weights[0]
        } else {
            1.0
        }
    }

    /// Weights of `F¹..Fᴷ`.
    pub fn layer_weights(&self) -> &[f64] {
        let k = self.gammas.len();
        &self.factor_weights[self.factor_weights.len() - k..]
    }

    pub fn clamp_gammas(&mut self) {
        self.gammas
            .iter_mut()
            .for_each(|g| *g = g.clamp(-GAMMA_BOUND, GAMMA_BOUND));
    }
}

fn check_layers<T: Scalar>(img: &Image<T>, layers: &[Image<T>]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Empty);
    }
    layers.iter().try_for_each(|l| img.same_shape(l))
}

/// Normalized running-average weights `wᵏ = mean(Fᵏ)/Σⱼ mean(Fʲ)`, using
/// mean magnitudes when any mean is not positive.
pub fn running_average_weights<T: Scalar>(layers: &[Image<T>]) -> Result<Vec<f64>> {
    let mut means: Vec<f64> = layers.iter().map(|l| l.mean()).collect();
    if means.iter().any(|&m| m <= 0.0) {
        means = layers
            .iter()
            .map(|l| l.data().iter().map(|v| v.as_f64().abs()).sum::<f64>() / l.len() as f64)
            .collect();
    }
    let total: f64 = means.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::DegenerateStack);
    }
    let w: Vec<f64> = means.iter().map(|m| m / total).collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / s).collect())
}

/// Running average before the final clamp: `O⁰ = img`,
/// `Oᵏ⁺¹ = (1−wᵏ)·Oᵏ + wᵏ·Fᵏ`.
pub fn running_average_unclamped<T: Scalar>(
    img: &Image<T>,
    layers: &[Image<T>],
) -> Result<Image<T>> {
    check_layers(img, layers)?;
    let w = running_average_weights(layers)?;
    let mut o: Vec<f64> = img.data().iter().map(|v| v.as_f64()).collect();
    for (wk, layer) in w.iter().zip(layers) {
        for (ov, fv) in o.iter_mut().zip(layer.data()) {
            *ov = (1.0 - wk) * *ov + wk * fv.as_f64();
        }
    }
    let (h, wd, c) = img.shape();
    Image::new(h, wd, c, o.into_iter().map(T::of).collect())
}

/// Running-average fusion of the stack's difference maps, clamped to `[0,1]`.
pub fn fuse_running_average<T: Scalar>(img: &Image<T>, stack: &FactorStack<T>) -> Result<Image<T>> {
    Ok(running_average_unclamped(img, &stack.f)?.clamp_unit())
}

fn curve_mask<T: Scalar>(layer: &Image<T>, weight: f64, norm: MaskNorm) -> Vec<f64> {
    let mags = layer.data().iter().map(|v| v.as_f64().abs());
    let scale = match norm {
        MaskNorm::Mean => mags.sum::<f64>() / layer.len() as f64,
        MaskNorm::Max => mags.fold(0.0, f64::max),
    };
    if scale == 0.0 {
        return vec![0.0; layer.len()];
    }
    let s = weight / scale;
    layer
        .data()
        .iter()
        .map(|v| (v.as_f64().abs() * s).min(1.0))
        .collect()
}

fn curve_layers<T: Scalar>(
    start: &Image<T>,
    layers: &[Image<T>],
    gammas: &[f64],
    weights: &[f64],
    variant: CurveVariant,
    norm: MaskNorm,
) -> Result<Image<T>> {
    check_layers(start, layers)?;
    if gammas.len() != layers.len() || weights.len() != layers.len() {
        return Err(Error::InvalidParameter(format!(
            "{} layers, {} gammas, {} weights",
            layers.len(),
            gammas.len(),
            weights.len()
        )));
    }
    let input: Vec<f64> = start.data().iter().map(|v| v.as_f64()).collect();
    let mut o = input.clone();
    for ((layer, &r), &w) in layers.iter().zip(gammas).zip(weights) {
        if r == 0.0 {
            continue;
        }
        let mask = curve_mask(layer, w, norm);
        match variant {
            CurveVariant::Iterated => {
                for (ov, m) in o.iter_mut().zip(&mask) {
                    *ov += r * m * (*ov * *ov - *ov);
                }
            }
            CurveVariant::LiteralSum => {
                for ((ov, m), iv) in o.iter_mut().zip(&mask).zip(&input) {
                    *ov += r * m * (iv * iv - iv);
                }
            }
        }
    }
    let (h, wd, c) = start.shape();
    Ok(Image::new(h, wd, c, o.into_iter().map(T::of).collect())?.clamp_unit())
}

/// Iterated quadratic curves localized by the factor masks, clamped to `[0,1]`.
pub fn curve_adjust<T: Scalar>(
    img: &Image<T>,
    stack: &FactorStack<T>,
    gammas: &[f64],
) -> Result<Image<T>> {
    let ones = vec![1.0; stack.f.len()];
    curve_layers(
        img,
        &stack.f,
        gammas,
        &ones,
        CurveVariant::Iterated,
        MaskNorm::Mean,
    )
}

/// Edge-preserving smoothing with a Gaussian spatial kernel and a Gaussian
/// range kernel on the Euclidean color distance. Borders replicate.
pub fn bilateral_filter<T: Scalar>(
    img: &Image<T>,
    window: usize,
    sigma_color: f64,
    sigma_space: f64,
) -> Result<Image<T>> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "bilateral window must be odd, got {window}"
        )));
    }
    if !(sigma_color > 0.0 && sigma_space > 0.0) {
        return Err(Error::InvalidParameter(
            "bilateral sigmas must be > 0".into(),
        ));
    }
    if window == 1 {
        return Ok(img.clone());
    }
    let (h, w, c) = img.shape();
    let r = (window / 2) as isize;
    let spatial: Vec<f64> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .map(|(dy, dx)| (-((dy * dy + dx * dx) as f64) / (2.0 * sigma_space * sigma_space)).exp())
        .collect();
    let inv_2sc2 = 1.0 / (2.0 * sigma_color * sigma_color);
    let src: Vec<f64> = img.data().iter().map(|v| v.as_f64()).collect();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0.0f64; src.len()];
    let mut acc = vec![0.0f64; c];
    for y in 0..h {
        for x in 0..w {
            let p = &src[(y * w + x) * c..(y * w + x + 1) * c];
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut norm = 0.0;
            let mut si = 0;
            for dy in -r..=r {
                let yy = clampi(y as isize + dy, h);
                for dx in -r..=r {
                    let xx = clampi(x as isize + dx, w);
                    let q = &src[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                    let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                    let wt = spatial[si] * (-d2 * inv_2sc2).exp();
                    si += 1;
                    norm += wt;
                    for (a, qv) in acc.iter_mut().zip(q) {
                        *a += wt * qv;
                    }
                }
            }
            for (o, a) in out[(y * w + x) * c..(y * w + x + 1) * c]
                .iter_mut()
                .zip(&acc)
            {
                *o = a / norm;
            }
        }
    }
    Image::new(h, w, c, out.into_iter().map(T::of).collect())
}

/// Fusion, bilateral filter and clamp for an already factorized image.
pub fn enhance_from_stack<T: Scalar>(
    img: &Image<T>,
    stack: &FactorStack<T>,
    fcfg: &FusionConfig,
) -> Result<Image<T>> {
    fcfg.validate()?;
    if fcfg.k_factors() != stack.k_factors() {
        return Err(Error::InvalidParameter(format!(
            "fusion configured for {} factors, stack has {}",
            fcfg.k_factors(),
            stack.k_factors()
        )));
    }
    let w0 = fcfg.input_weight();
    let start = if w0 == 1.0 {
        img.clone()
    } else {
        img.map(|v| v * T::of(w0))
    };
    let fused = match fcfg.mode {
        FusionMode::RunningAverage => {
            let layers: Vec<Image<T>> = stack
                .f
                .iter()
                .zip(fcfg.layer_weights())
                .map(|(f, &w)| {
                    if w == 1.0 {
                        f.clone()
                    } else {
                        f.map(|v| v * T::of(w))
                    }
                })
                .collect();
            running_average_unclamped(&start, &layers)?.clamp_unit()
        }
        FusionMode::Curve => curve_layers(
            &start,
            &stack.f,
            &fcfg.gammas,
            fcfg.layer_weights(),
            fcfg.curve_variant,
            fcfg.mask_norm,
        )?,
    };
    let b = fcfg.bilateral;
    Ok(bilateral_filter(&fused, b.window, b.sigma_color, b.sigma_space)?.clamp_unit())
}

/// Factorize, weight, fuse, filter and clamp.
pub fn enhance<T: Scalar>(
    img: &Image<T>,
    params: &ParamVector,
    fcfg: &FusionConfig,
) -> Result<Image<T>> {
    fcfg.validate()?;
    let stack = factorize(img, params)?;
    enhance_from_stack(img, &stack, fcfg)
}
