//! Recursive factorization: `K` unrolled solves, each on what the previous
//! factors left behind.
//!
//! For every channel `X¹ = channel`, `Eᵏ = solve(Xᵏ)`, `Xᵏ⁺¹ = Xᵏ − Eᵏ`. The
//! leftover `Xᴷ⁺¹` is folded into the last factor so the factors sum to the
//! input exactly.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{solve_specular, FactorParams, SolverOptions};
use crate::error::{Error, Result};
use crate::image::{mean, ChannelMatrix, Image};
use crate::io::{write_image, BitDepth};
use crate::scalar::Scalar;

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_T: usize = 3;
pub const MAX_K: usize = 16;
pub const DEFAULT_BLEND: f64 = 0.9;

/// Initial learned values, in the units of [`ThresholdUnits::Normalized`].
pub const INIT_ALPHA: f64 = 0.1;
pub const INIT_BETA: f64 = 0.1;
pub const INIT_MU: f64 = 2.0;

/// Means below this are treated as zero.
pub(crate) const MEAN_EPS: f64 = 1e-12;

/// How learned thresholds relate to pixel values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdUnits {
    /// Each recursion input is divided by its mean magnitude before solving
    /// and the low-rank threshold is multiplied by `√(rows·cols)`, so the
    /// same scalars suit any exposure, resolution and recursion depth.
    #[default]
    Normalized,
    /// Thresholds act on raw pixel values.
    Absolute,
}

fn default_blend() -> f64 {
    DEFAULT_BLEND
}

/// All learned factorization scalars θ plus the fixed operator choices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamVector {
    pub k_factors: usize,
    pub t_iters: usize,
    pub factors: Vec<FactorParams>,
    #[serde(default = "default_blend")]
    pub blend: f64,
    #[serde(default)]
    pub units: ThresholdUnits,
    #[serde(default)]
    pub solver: SolverOptions,
}

impl Default for ParamVector {
    fn default() -> Self {
        ParamVector::new(DEFAULT_K, DEFAULT_T)
    }
}

impl ParamVector {
    /// Every factor starts from the same learned values.
    pub fn new(k_factors: usize, t_iters: usize) -> Self {
        ParamVector {
            k_factors,
            t_iters,
            factors: vec![
                FactorParams::constant(t_iters, INIT_ALPHA, INIT_BETA, INIT_MU);
                k_factors
            ],
            blend: DEFAULT_BLEND,
            units: ThresholdUnits::default(),
            solver: SolverOptions::default(),
        }
    }

    /// `νᵏ = k/K` for `k = 1..=K`.
    pub fn nu(&self, k: usize) -> f64 {
        k as f64 / self.k_factors as f64
    }

    pub fn nu_schedule(&self) -> Vec<f64> {
        (1..=self.k_factors).map(|k| self.nu(k)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_factors == 0 || self.k_factors > MAX_K {
            return Err(Error::InvalidParameter(format!(
                "K must be in 1..={MAX_K}, got {}",
                self.k_factors
            )));
        }
        if self.factors.len() != self.k_factors {
            return Err(Error::InvalidParameter(format!(
                "expected {} factor parameter sets, found {}",
                self.k_factors,
                self.factors.len()
            )));
        }
        for f in &self.factors {
            f.validate()?;
            if f.t_iters() != self.t_iters {
                return Err(Error::InvalidParameter(format!(
                    "expected T = {} entries per factor, found {}",
                    self.t_iters,
                    f.t_iters()
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::InvalidParameter(format!(
                "blend must be in [0, 1], got {}",
                self.blend
            )));
        }
        Ok(())
    }

    /// Number of learned scalars, `3·K·T`.
    pub fn len(&self) -> usize {
        3 * self.k_factors * self.t_iters
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat layout: for each factor, `α₀..α_{T−1}, β₀..β_{T−1}, μ₀..μ_{T−1}`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.factors
            .iter()
            .flat_map(|f| f.alpha.iter().chain(&f.beta).chain(&f.mu).copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len(), "flat parameter length");
        let t = self.t_iters;
        for (f, chunk) in self.factors.iter_mut().zip(flat.chunks_exact(3 * t)) {
            f.alpha.copy_from_slice(&chunk[..t]);
            f.beta.copy_from_slice(&chunk[t..2 * t]);
            f.mu.copy_from_slice(&chunk[2 * t..]);
        }
    }

    /// Name of flat coordinate `i`, e.g. `alpha[2][0]` (factor 2, step 0).
    pub fn coordinate_name(&self, i: usize) -> String {
        let t = self.t_iters;
        // factor and step are both 1-based
        let (k, rest) = (i / (3 * t), i % (3 * t));
        let name = ["alpha", "beta", "mu"][rest / t];
        format!("{name}[{}][{}]", k + 1, rest % t + 1)
    }

    pub fn clamp(&mut self) {
        self.factors.iter_mut().for_each(FactorParams::clamp);
    }

    /// Divisor applied to a recursion input before solving.
    pub(crate) fn input_scale(&self, input_mean: f64) -> f64 {
        match self.units {
            ThresholdUnits::Normalized if input_mean.abs() > MEAN_EPS => input_mean.abs(),
            _ => 1.0,
        }
    }

    /// Multiplier on the low-rank threshold for a `rows x cols` channel.
    pub(crate) fn beta_scale(&self, rows: usize, cols: usize) -> f64 {
        match self.units {
            ThresholdUnits::Normalized => ((rows * cols) as f64).sqrt(),
            ThresholdUnits::Absolute => 1.0,
        }
    }

    /// Thresholds actually used for factor `k` on an input with mean `x_mean`.
    pub(crate) fn effective(
        &self,
        k: usize,
        x_mean: f64,
        rows: usize,
        cols: usize,
    ) -> Result<FactorParams> {
        let mut p =
            init_factor_thresholds(k, self.k_factors, x_mean, &self.factors[k - 1], self.blend)?;
        let bs = self.beta_scale(rows, cols);
        p.beta.iter_mut().for_each(|b| *b *= bs);
        Ok(p)
    }
}

/// Blends learned thresholds with the analytic schedule
/// `α = (1−νᵏ)·x̄`, `β = νᵏ·x̄`. μ is passed through.
pub fn init_factor_thresholds(
    k: usize,
    k_factors: usize,
    x_mean: f64,
    learned: &FactorParams,
    blend: f64,
) -> Result<FactorParams> {
    if k == 0 || k > k_factors {
        return Err(Error::FactorIndex {
            k,
            count: k_factors,
        });
    }
    let nu = k as f64 / k_factors as f64;
    let (a0, b0) = ((1.0 - nu) * x_mean, nu * x_mean);
    let mix = |l: f64, analytic: f64| (blend * l + (1.0 - blend) * analytic).max(0.0);
    Ok(FactorParams {
        alpha: learned.alpha.iter().map(|&a| mix(a, a0)).collect(),
        beta: learned.beta.iter().map(|&b| mix(b, b0)).collect(),
        mu: learned.mu.clone(),
    })
}

/// Factors of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorStack<T> {
    /// `E¹..Eᴷ`; the last one includes the absorbed residual.
    pub e: Vec<Image<T>>,
    /// `F¹ = E¹`, `Fᵏ = Eᵏ − Eᵏ⁻¹`.
    pub f: Vec<Image<T>>,
    /// `Xᴷ⁺¹`, the part of the input no solve claimed.
    pub residual: Image<T>,
    pub residual_absorbed: bool,
    pub source_shape: (usize, usize, usize),
}

impl<T: Scalar> FactorStack<T> {
    /// Builds a stack from given components. With a residual, it is added to
    /// the last component.
    pub fn from_components(mut e: Vec<Image<T>>, residual: Option<Image<T>>) -> Result<Self> {
        let first = e.first().ok_or(Error::Empty)?;
        let shape = first.shape();
        let residual_absorbed = residual.is_some();
        let residual = match residual {
            Some(r) => {
                first.same_shape(&r)?;
                let last = e.last_mut().expect("non-empty");
                for (v, &rv) in last.data_mut().iter_mut().zip(r.data()) {
                    *v = *v + rv;
                }
                r
            }
            None => Image::zeros(shape.0, shape.1, shape.2),
        };
        let f = factor_differences(&e)?;
        Ok(FactorStack {
            e,
            f,
            residual,
            residual_absorbed,
            source_shape: shape,
        })
    }

    pub fn k_factors(&self) -> usize {
        self.e.len()
    }

    /// `Eᵏ` as the solver produced it (1-based `k`), before absorption.
    pub fn pre_absorption(&self, k: usize) -> Image<T> {
        let e = &self.e[k - 1];
        if k == self.e.len() && self.residual_absorbed {
            let mut out = e.clone();
            for (v, &r) in out.data_mut().iter_mut().zip(self.residual.data()) {
                *v = *v - r;
            }
            out
        } else {
            e.clone()
        }
    }

    /// Recursion inputs `X¹..Xᴷ` reconstructed from the factors.
    pub fn recursion_inputs(&self) -> Vec<Image<T>> {
        let (h, w, c) = self.source_shape;
        let mut x = Image::zeros(h, w, c);
        for e in &self.e {
            for (v, &ev) in x.data_mut().iter_mut().zip(e.data()) {
                *v = *v + ev;
            }
        }
        let mut out = Vec::with_capacity(self.e.len());
        for k in 1..=self.e.len() {
            out.push(x.clone());
            let ek = self.pre_absorption(k);
            for (v, &ev) in x.data_mut().iter_mut().zip(ek.data()) {
                *v = *v - ev;
            }
        }
        out
    }

    /// `Σₖ Eᵏ`
    pub fn sum(&self) -> Image<T> {
        let (h, w, c) = self.source_shape;
        let mut acc = vec![0.0f64; h * w * c];
        for e in &self.e {
            for (a, v) in acc.iter_mut().zip(e.data()) {
                *a += v.as_f64();
            }
        }
        Image::new(h, w, c, acc.into_iter().map(T::of).collect()).expect("stack shape")
    }
}

/// One channel's factors in absolute units plus the absorbed residual.
pub(crate) struct ChannelFactors<T> {
    pub e: Vec<ChannelMatrix<T>>,
    pub residual: ChannelMatrix<T>,
}

pub(crate) fn factorize_channel<T: Scalar>(
    ch: &ChannelMatrix<T>,
    params: &ParamVector,
) -> Result<ChannelFactors<T>> {
    let (rows, cols) = ch.shape();
    let mut x = ch.clone();
    let mut e = Vec::with_capacity(params.k_factors);
    let mut residual = ChannelMatrix::zeros(rows, cols);
    for k in 1..=params.k_factors {
        let s = params.input_scale(mean(&x)?);
        let z = x.scale(T::of(1.0 / s));
        let fp = params.effective(k, mean(&z)?, rows, cols)?;
        let abs = solve_specular(&z, &fp, params.solver)?.scale(T::of(s));
        if k < params.k_factors {
            x = x.sub(&abs);
            e.push(abs);
        } else {
            residual = x.sub(&abs);
            e.push(x.clone());
        }
    }
    Ok(ChannelFactors { e, residual })
}

/// Factorizes every channel of `img` with a shared parameter vector.
pub fn factorize<T: Scalar>(img: &Image<T>, params: &ParamVector) -> Result<FactorStack<T>> {
    params.validate()?;
    if !img.all_finite() {
        return Err(Error::NonFinite("input image".into()));
    }
    let per_channel: Vec<ChannelFactors<T>> = (0..img.channels())
        .into_par_iter()
        .map(|c| factorize_channel(&img.channel(c), params))
        .collect::<Result<_>>()?;
    let e = (0..params.k_factors)
        .map(|k| {
            let planes: Vec<_> = per_channel.iter().map(|cf| cf.e[k].clone()).collect();
            Image::from_channels(&planes)
        })
        .collect::<Result<Vec<_>>>()?;
    let residual = Image::from_channels(
        &per_channel
            .iter()
            .map(|cf| cf.residual.clone())
            .collect::<Vec<_>>(),
    )?;
    let f = factor_differences(&e)?;
    Ok(FactorStack {
        e,
        f,
        residual,
        residual_absorbed: true,
        source_shape: img.shape(),
    })
}

/// `F¹ = E¹`, `Fᵏ = Eᵏ − Eᵏ⁻¹`. Values stay signed.
pub fn factor_differences<T: Scalar>(e: &[Image<T>]) -> Result<Vec<Image<T>>> {
    let first = e.first().ok_or(Error::Empty)?;
    let mut out = vec![first.clone()];
    for pair in e.windows(2) {
        pair[0].same_shape(&pair[1])?;
        let mut d = pair[1].clone();
        for (v, &p) in d.data_mut().iter_mut().zip(pair[0].data()) {
            *v = *v - p;
        }
        out.push(d);
    }
    Ok(out)
}

/// Which extra layers [`export_factors`] writes besides `E¹..Eᴷ`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExportOptions {
    pub differences: bool,
    pub residual: bool,
    pub depth: BitDepth,
}

/// Sidecar entry for one exported layer. `value = min + png · (max − min)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub name: String,
    pub file: String,
    pub min: f64,
    pub max: f64,
    /// per channel
    pub means: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportMeta {
    pub stem: String,
    pub k_factors: usize,
    pub shape: [usize; 3],
    pub factors: Vec<LayerMeta>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub differences: Vec<LayerMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<LayerMeta>,
}

/// Min-max rescales a layer into `[0, 1]`; constant layers map to 0.
pub fn rescale_unit<T: Scalar>(img: &Image<T>) -> (Image<T>, f64, f64) {
    let (lo, hi) = img.min_max();
    let span = hi - lo;
    let out = img.map(|v| {
        if span > 0.0 {
            T::of((v.as_f64() - lo) / span)
        } else {
            T::zero()
        }
    });
    (out, lo, hi)
}

fn write_layer<T: Scalar>(
    dir: &Path,
    stem: &str,
    name: &str,
    img: &Image<T>,
    nu: Option<f64>,
    depth: BitDepth,
) -> Result<LayerMeta> {
    let file = format!("{stem}_{name}.png");
    let (scaled, min, max) = rescale_unit(img);
    write_image(&dir.join(&file), &scaled, depth)?;
    Ok(LayerMeta {
        name: name.to_string(),
        file,
        min,
        max,
        means: img.channel_means(),
        nu,
    })
}

/// Writes `<stem>_E1.png … <stem>_EK.png` and `<stem>_meta.json` into `dir`.
pub fn export_factors<T: Scalar>(
    stack: &FactorStack<T>,
    dir: &Path,
    stem: &str,
    opts: ExportOptions,
) -> Result<(PathBuf, ExportMeta)> {
    fs::create_dir_all(dir)?;
    let k_factors = stack.k_factors();
    let nu = |k: usize| Some(k as f64 / k_factors as f64);
    let factors = stack
        .e
        .iter()
        .enumerate()
        .map(|(i, e)| write_layer(dir, stem, &format!("E{}", i + 1), e, nu(i + 1), opts.depth))
        .collect::<Result<Vec<_>>>()?;
    let differences = if opts.differences {
        stack
            .f
            .iter()
            .enumerate()
            .map(|(i, f)| write_layer(dir, stem, &format!("F{}", i + 1), f, nu(i + 1), opts.depth))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let residual = if opts.residual {
        Some(write_layer(
            dir,
            stem,
            "residual",
            &stack.residual,
            None,
            opts.depth,
        )?)
    } else {
        None
    };
    let (h, w, c) = stack.source_shape;
    let meta = ExportMeta {
        stem: stem.to_string(),
        k_factors,
        shape: [h, w, c],
        factors,
        differences,
        residual,
    };
    let path = dir.join(format!("{stem}_meta.json"));
    fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok((path, meta))
}
