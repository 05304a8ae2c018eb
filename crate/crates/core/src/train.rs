//! Two-phase training: the factorization scalars θ against the energy-ratio
//! loss, then, with θ frozen, the fusion curve coefficients against the
//! zero-reference losses.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::factorization_gradient;
use crate::error::{Error, Result};
use crate::factorize::{factorize, FactorStack, ParamVector, DEFAULT_K, DEFAULT_T};
use crate::fusion::{enhance, enhance_from_stack, FusionConfig, FusionMode};
use crate::image::Image;
use crate::losses::{
    loss_color, loss_exposure, loss_factorization, loss_smooth, LossParts, LossWeights,
    DEFAULT_EXPOSURE_TARGET, DEFAULT_EXPOSURE_WINDOW,
};
use crate::metrics::psnr;
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const HISTORY_HEADER: &str = "epoch,phase,L_f,L_c,L_e,L_s,total";

/// What phase 1 minimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase1Objective {
    /// `λ_f·L_f` alone, by its exact gradient.
    #[default]
    Factorization,
    /// `λ_f·L_f` plus the fusion-path losses, whose gradient is taken by
    /// finite differences (about `2·3KT` factorizations per image and step).
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub k_factors: usize,
    pub t_iters: usize,
    pub weights: LossWeights,
    pub learning_rate: f64,
    /// step size for the curve coefficients
    pub fusion_learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub freeze_epoch: usize,
    pub seed: u64,
    pub fd_step: f64,
    pub exposure_target: f64,
    pub exposure_window: usize,
    /// Global gradient-norm limit per step; 0 disables it.
    pub grad_clip: f64,
    pub phase1_objective: Phase1Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k_factors: DEFAULT_K,
            t_iters: DEFAULT_T,
            weights: LossWeights::default(),
            learning_rate: 0.01,
            fusion_learning_rate: 0.01,
            batch_size: 10,
            epochs: 50,
            freeze_epoch: 25,
            seed: 2,
            fd_step: 1e-3,
            exposure_target: DEFAULT_EXPOSURE_TARGET,
            exposure_window: DEFAULT_EXPOSURE_WINDOW,
            grad_clip: 1.0,
            phase1_objective: Phase1Objective::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ParamVector::new(self.k_factors, self.t_iters).validate()?;
        self.weights.validate()?;
        let bad = |what: &str, v: f64| {
            Error::InvalidParameter(format!("{what} must be finite and >= 0, got {v}"))
        };
        for (what, v) in [
            ("learning_rate", self.learning_rate),
            ("fusion_learning_rate", self.fusion_learning_rate),
            ("grad_clip", self.grad_clip),
            ("exposure_target", self.exposure_target),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(what, v));
            }
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "fd_step must be > 0, got {}",
                self.fd_step
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        if self.exposure_window == 0 {
            return Err(Error::InvalidParameter(
                "exposure_window must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Epoch-mean losses. `total` is the objective the phase optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub parts: LossParts,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ParamVector,
    pub fusion: FusionConfig,
    pub history: Vec<EpochRecord>,
}

/// Domain of one coordinate during finite differencing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bound {
    Free,
    /// `x ≥ 0`: the step shrinks to `x`, and at `x = 0` a forward difference is used.
    NonNegative,
    /// `x > 0`: the step shrinks to `x/2`.
    Positive,
}

/// Central-difference gradient of `objective` at `point`. `name` labels
/// coordinates in errors.
pub fn fd_gradient_flat<F, N>(
    objective: F,
    point: &[f64],
    h: f64,
    bounds: &[Bound],
    name: N,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
    N: Fn(usize) -> String + Sync,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "step must be > 0, got {h}"
        )));
    }
    if bounds.len() != point.len() {
        return Err(Error::InvalidParameter(format!(
            "{} bounds for {} coordinates",
            bounds.len(),
            point.len()
        )));
    }
    let eval = |i: usize, x: &[f64]| -> Result<f64> {
        let v = objective(x)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!(
                "objective while probing {}",
                name(i)
            )))
        }
    };
    let needs_base = point
        .iter()
        .zip(bounds)
        .any(|(x, b)| *b == Bound::NonNegative && *x <= 0.0);
    let base = if needs_base {
        Some(objective(point)?)
    } else {
        None
    };
    (0..point.len())
        .into_par_iter()
        .map(|i| {
            let x = point[i];
            let mut probe = point.to_vec();
            match bounds[i] {
                Bound::NonNegative if x <= 0.0 => {
                    probe[i] = x + h;
                    let f0 = base.expect("base evaluated");
                    Ok((eval(i, &probe)? - f0) / h)
                }
                b => {
                    let hi = match b {
                        Bound::Free => h,
                        Bound::NonNegative => h.min(x),
                        Bound::Positive => h.min(x / 2.0),
                    };
                    probe[i] = x + hi;
                    let up = eval(i, &probe)?;
                    probe[i] = x - hi;
                    let down = eval(i, &probe)?;
                    Ok((up - down) / (2.0 * hi))
                }
            }
        })
        .collect()
}

/// Bounds of θ in [`ParamVector::to_flat`] order.
pub fn param_bounds(params: &ParamVector) -> Vec<Bound> {
    let t = params.t_iters;
    (0..params.len())
        .map(|i| {
            if (i % (3 * t)) / t == 2 {
                Bound::Positive
            } else {
                Bound::NonNegative
            }
        })
        .collect()
}

/// Gradient over θ followed by the fusion gammas.
pub fn fd_gradient<F>(
    objective: F,
    params: &ParamVector,
    fusion: &FusionConfig,
    h: f64,
) -> Result<Vec<f64>>
where
    F: Fn(&ParamVector, &FusionConfig) -> Result<f64> + Sync,
{
    let n = params.len();
    let mut point = params.to_flat();
    point.extend_from_slice(&fusion.gammas);
    let mut bounds = param_bounds(params);
    bounds.extend(std::iter::repeat_n(Bound::Free, fusion.gammas.len()));
    fd_gradient_flat(
        |x| {
            let mut p = params.clone();
            p.set_flat(&x[..n]);
            let mut f = fusion.clone();
            f.gammas.copy_from_slice(&x[n..]);
            objective(&p, &f)
        },
        &point,
        h,
        &bounds,
        |i| {
            if i < n {
                params.coordinate_name(i)
            } else {
                format!("gamma[{}]", i - n + 1)
            }
        },
    )
}

fn clip(grad: &mut [f64], limit: f64) {
    if limit <= 0.0 {
        return;
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > limit {
        let s = limit / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// The three enhancement losses of a fused output.
pub fn enhancement_losses(o: &Image<f64>, cfg: &TrainConfig) -> Result<(f64, f64, f64)> {
    let color = if o.channels() == 3 {
        loss_color(o)?
    } else {
        0.0
    };
    Ok((
        color,
        loss_exposure(o, cfg.exposure_target, cfg.exposure_window)?,
        loss_smooth(o)?,
    ))
}

fn enhancement_objective(o: &Image<f64>, cfg: &TrainConfig) -> Result<f64> {
    let (c, e, s) = enhancement_losses(o, cfg)?;
    let w = &cfg.weights;
    Ok(w.color * c + w.exposure * e + w.smooth * s)
}

#[derive(Clone, Copy, Default)]
struct ImageLoss {
    f: f64,
    c: f64,
    e: f64,
    s: f64,
    total: f64,
}

fn epoch_record(epoch: usize, phase: u8, losses: &[ImageLoss]) -> EpochRecord {
    let n = losses.len() as f64;
    let mean = |g: fn(&ImageLoss) -> f64| losses.iter().map(g).sum::<f64>() / n;
    EpochRecord {
        epoch,
        phase,
        parts: LossParts {
            factorization: mean(|l| l.f),
            color: mean(|l| l.c),
            exposure: mean(|l| l.e),
            smooth: mean(|l| l.s),
        },
        total: mean(|l| l.total),
    }
}

fn phase1_batch(
    images: &[Image<f64>],
    batch: &[usize],
    params: &mut ParamVector,
    fusion: &FusionConfig,
    cfg: &TrainConfig,
    losses: &mut [ImageLoss],
) -> Result<()> {
    let w = cfg.weights;
    let results: Vec<(Vec<f64>, ImageLoss)> = batch
        .par_iter()
        .map(|&i| {
            let img = &images[i];
            let g = factorization_gradient(img, params)?;
            let o = enhance_from_stack(img, &g.stack, fusion)?;
            let (c, e, s) = enhancement_losses(&o, cfg)?;
            let mut grad: Vec<f64> = g.grad.iter().map(|v| w.factorization * v).collect();
            let mut total = w.factorization * g.loss;
            if cfg.phase1_objective == Phase1Objective::Full {
                total += w.color * c + w.exposure * e + w.smooth * s;
                let extra = fd_gradient_flat(
                    |x| {
                        let mut p = params.clone();
                        p.set_flat(x);
                        enhancement_objective(&enhance(img, &p, fusion)?, cfg)
                    },
                    &params.to_flat(),
                    cfg.fd_step,
                    &param_bounds(params),
                    |k| params.coordinate_name(k),
                )?;
                grad.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
            }
            Ok((
                grad,
                ImageLoss {
                    f: g.loss,
                    c,
                    e,
                    s,
                    total,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; params.len()];
    for (&i, (g, l)) in batch.iter().zip(results) {
        grad.iter_mut()
            .zip(&g)
            .for_each(|(a, b)| *a += b / batch.len() as f64);
        losses[i] = l;
    }
    clip(&mut grad, cfg.grad_clip);
    let flat: Vec<f64> = params
        .to_flat()
        .iter()
        .zip(&grad)
        .map(|(p, g)| p - cfg.learning_rate * g)
        .collect();
    params.set_flat(&flat);
    params.clamp();
    Ok(())
}

fn phase2_batch(
    images: &[Image<f64>],
    stacks: &[(FactorStack<f64>, f64)],
    batch: &[usize],
    fusion: &mut FusionConfig,
    cfg: &TrainConfig,
    losses: &mut [ImageLoss],
) -> Result<()> {
    let objective = |gammas: &[f64]| -> Result<f64> {
        let mut f = fusion.clone();
        f.gammas.copy_from_slice(gammas);
        let vals: Vec<f64> = batch
            .par_iter()
            .map(|&i| {
                enhancement_objective(&enhance_from_stack(&images[i], &stacks[i].0, &f)?, cfg)
            })
            .collect::<Result<_>>()?;
        Ok(vals.iter().sum::<f64>() / batch.len() as f64)
    };
    let per_image: Vec<ImageLoss> = batch
        .par_iter()
        .map(|&i| {
            let o = enhance_from_stack(&images[i], &stacks[i].0, fusion)?;
            let (c, e, s) = enhancement_losses(&o, cfg)?;
            let w = &cfg.weights;
            Ok(ImageLoss {
                f: stacks[i].1,
                c,
                e,
                s,
                total: w.color * c + w.exposure * e + w.smooth * s,
            })
        })
        .collect::<Result<_>>()?;
    for (&i, l) in batch.iter().zip(per_image) {
        losses[i] = l;
    }
    let bounds = vec![Bound::Free; fusion.gammas.len()];
    let mut grad = fd_gradient_flat(objective, &fusion.gammas, cfg.fd_step, &bounds, |k| {
        format!("gamma[{}]", k + 1)
    })?;
    clip(&mut grad, cfg.grad_clip);
    for (g, d) in fusion.gammas.iter_mut().zip(&grad) {
        *g -= cfg.fusion_learning_rate * d;
    }
    fusion.clamp_gammas();
    Ok(())
}

/// Trains from the default initialization.
pub fn train<T: Scalar>(images: &[Image<T>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut fusion = FusionConfig::new(cfg.k_factors);
    fusion.mode = FusionMode::Curve;
    train_from(
        images,
        cfg,
        ParamVector::new(cfg.k_factors, cfg.t_iters),
        fusion,
    )
}

/// Trains starting from `params` and `fusion`.
pub fn train_from<T: Scalar>(
    images: &[Image<T>],
    cfg: &TrainConfig,
    mut params: ParamVector,
    mut fusion: FusionConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    params.validate()?;
    fusion.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if params.k_factors != cfg.k_factors
        || params.t_iters != cfg.t_iters
        || fusion.k_factors() != cfg.k_factors
    {
        return Err(Error::InvalidParameter(format!(
            "initialization is K={} T={} with {} gammas, config asks for K={} T={}",
            params.k_factors,
            params.t_iters,
            fusion.k_factors(),
            cfg.k_factors,
            cfg.t_iters
        )));
    }
    let images: Vec<Image<f64>> = images.iter().map(|i| i.cast()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut losses = vec![ImageLoss::default(); images.len()];
    let mut stacks: Option<Vec<(FactorStack<f64>, f64)>> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let phase = if epoch < cfg.freeze_epoch { 1 } else { 2 };
        if phase == 2 && stacks.is_none() {
            let cached = images
                .par_iter()
                .map(|img| {
                    let s = factorize(img, &params)?;
                    let lf = loss_factorization(&s, img, &params)?;
                    Ok((s, lf))
                })
                .collect::<Result<Vec<_>>>()?;
            stacks = Some(cached);
        }
        for batch in order.chunks(cfg.batch_size) {
            match &stacks {
                None => phase1_batch(&images, batch, &mut params, &fusion, cfg, &mut losses)?,
                Some(st) => phase2_batch(&images, st, batch, &mut fusion, cfg, &mut losses)?,
            }
        }
        let rec = epoch_record(epoch, phase, &losses);
        info!(
            "epoch {epoch} phase {phase}: L_f {:.5} L_c {:.5} L_e {:.5} L_s {:.6} total {:.5}",
            rec.parts.factorization,
            rec.parts.color,
            rec.parts.exposure,
            rec.parts.smooth,
            rec.total
        );
        history.push(rec);
    }
    Ok(TrainOutcome {
        params,
        fusion,
        history,
    })
}

/// History as CSV text with [`HISTORY_HEADER`].
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let p = &r.parts;
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.phase, p.factorization, p.color, p.exposure, p.smooth, r.total
        ));
    }
    s
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    fs::write(path, history_csv(history))?;
    Ok(())
}

/// Everything needed to enhance with trained values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub k_factors: usize,
    pub t_iters: usize,
    pub params: ParamVector,
    pub fusion: FusionConfig,
    /// configuration the values were trained with, if any
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn new(
        params: ParamVector,
        fusion: FusionConfig,
        train_config: Option<TrainConfig>,
    ) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            k_factors: params.k_factors,
            t_iters: params.t_iters,
            params,
            fusion,
            train_config,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: self.format_version,
            });
        }
        self.params.validate()?;
        self.fusion.validate()?;
        if self.k_factors != self.params.k_factors
            || self.t_iters != self.params.t_iters
            || self.fusion.k_factors() != self.k_factors
        {
            return Err(Error::Format(format!(
                "checkpoint header says K={} T={}, parameters are K={} T={} with {} gammas",
                self.k_factors,
                self.t_iters,
                self.params.k_factors,
                self.params.t_iters,
                self.fusion.k_factors()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses and validates; the version is checked before anything else.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let found = raw
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("checkpoint has no format_version".into()))?;
        if found != CHECKPOINT_VERSION as u64 {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: u32::try_from(found).unwrap_or(u32::MAX),
            });
        }
        let ck: Checkpoint = serde_json::from_value(raw)?;
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_json()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_json(&fs::read_to_string(path)?)
    }
}

/// One loss-weight candidate and its validation score.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub weights: LossWeights,
    /// mean PSNR over the validation pairs
    pub psnr: f64,
    pub outcome: TrainOutcome,
}

/// Trains once per candidate and scores the enhanced validation inputs
/// against their references. Results keep the candidate order.
pub fn grid_search<T: Scalar>(
    train_images: &[Image<T>],
    validation: &[(Image<T>, Image<T>)],
    base: &TrainConfig,
    candidates: &[LossWeights],
) -> Result<Vec<GridPoint>> {
    if validation.is_empty() {
        return Err(Error::InvalidParameter(
            "grid search needs validation pairs".into(),
        ));
    }
    candidates
        .iter()
        .map(|w| {
            let cfg = TrainConfig {
                weights: *w,
                ..base.clone()
            };
            let outcome = train(train_images, &cfg)?;
            let mut total = 0.0;
            for (low, high) in validation {
                let out = enhance(low, &outcome.params, &outcome.fusion)?;
                total += psnr(&out, high, 1.0)?;
            }
            Ok(GridPoint {
                weights: *w,
                psnr: total / validation.len() as f64,
                outcome,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};
    use rand::Rng;

    fn small_set(count: usize, size: usize) -> Vec<Image<f32>> {
        generate(&SynthConfig {
            count,
            height: size,
            width: size,
            seed: 5,
        })
        .unwrap()
        .into_iter()
        .map(|p| p.low)
        .collect()
    }

    fn quick_config(epochs: usize, freeze: usize) -> TrainConfig {
        TrainConfig {
            k_factors: 3,
            t_iters: 2,
            batch_size: 2,
            epochs,
            freeze_epoch: freeze,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn fd_quadratic_and_constant() {
        let sq = |x: &[f64]| Ok(x.iter().map(|v| v * v).sum::<f64>());
        let g =
            fd_gradient_flat(sq, &[1.0, 2.0], 1e-3, &[Bound::Free; 2], |i| i.to_string()).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);
        let g = fd_gradient_flat(
            |_| Ok(3.0),
            &[1.0, 0.0],
            1e-3,
            &[Bound::Free, Bound::NonNegative],
            |i| i.to_string(),
        )
        .unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn fd_respects_bounds() {
        // probes outside the domain would fail
        let f = |x: &[f64]| {
            if x[0] <= 0.0 || x[1] < 0.0 {
                Err(Error::InvalidParameter("out of domain".into()))
            } else {
                Ok(x[0].ln() + x[1] * x[1])
            }
        };
        let g = fd_gradient_flat(
            f,
            &[1e-4, 0.0],
            1e-3,
            &[Bound::Positive, Bound::NonNegative],
            |i| i.to_string(),
        )
        .unwrap();
        // step x/2: (ln 1.5x − ln 0.5x) / x
        assert!((g[0] - 3f64.ln() / 1e-4).abs() < 1e-6);
        assert!((g[1] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn fd_names_non_finite_coordinate() {
        let p = ParamVector::new(2, 2);
        let f = FusionConfig::new(2);
        let err = fd_gradient(
            |p, _| {
                Ok(if p.factors[1].beta[0] > 0.1 {
                    f64::NAN
                } else {
                    0.0
                })
            },
            &p,
            &f,
            1e-3,
        )
        .unwrap_err();
        assert!(err.to_string().contains("beta[2][1]"), "{err}");
    }

    #[test]
    fn fd_matches_adjoint_on_factorization_loss() {
        let img: Image<f64> = small_set(1, 12)[0].cast();
        let p = ParamVector::new(2, 2);
        let f = FusionConfig::new(2);
        let fd = fd_gradient(
            |p, _| loss_factorization(&factorize(&img, p)?, &img, p),
            &p,
            &f,
            1e-5,
        )
        .unwrap();
        let exact = factorization_gradient(&img, &p).unwrap().grad;
        for (a, b) in fd.iter().zip(&exact) {
            assert!((a - b).abs() <= 1e-3 * b.abs().max(1.0), "{a} vs {b}");
        }
        assert!(fd[p.len()..].iter().all(|g| *g == 0.0));
    }

    #[test]
    fn gradient_steps_descend() {
        let mut passed = 0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img: Image<f64> = small_set(1, 10)[0].cast();
            let mut p = ParamVector::new(2, 2);
            let mut flat = p.to_flat();
            flat.iter_mut().for_each(|v| *v *= rng.gen_range(0.5..1.5));
            p.set_flat(&flat);
            let lf = |p: &ParamVector| {
                loss_factorization(&factorize(&img, p).unwrap(), &img, p).unwrap()
            };
            let g = fd_gradient(|p, _| Ok(lf(p)), &p, &FusionConfig::new(2), 1e-3).unwrap();
            let before = lf(&p);
            let stepped: Vec<f64> = flat.iter().zip(&g).map(|(x, d)| x - 0.01 * d).collect();
            p.set_flat(&stepped);
            p.clamp();
            if lf(&p) <= before {
                passed += 1;
            }
        }
        assert!(passed >= 18, "{passed}/20");
    }

    #[test]
    fn training_is_deterministic_and_phased() {
        let imgs = small_set(4, 12);
        let cfg = quick_config(3, 2);
        let a = train(&imgs, &cfg).unwrap();
        let b = train(&imgs, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.history.iter().map(|r| r.phase).collect::<Vec<_>>(),
            vec![1, 1, 2]
        );
        // θ is frozen in phase 2, so L_f stays put
        assert_eq!(a.history[2].parts.factorization, {
            let imgs: Vec<Image<f64>> = imgs.iter().map(|i| i.cast()).collect();
            imgs.iter()
                .map(|i| {
                    loss_factorization(&factorize(i, &a.params).unwrap(), i, &a.params).unwrap()
                })
                .sum::<f64>()
                / 4.0
        });
        assert!(a.fusion.gammas.iter().all(|g| g.abs() <= 1.0));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let imgs = small_set(3, 12);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            fusion_learning_rate: 0.0,
            ..quick_config(4, 2)
        };
        let out = train(&imgs, &cfg).unwrap();
        assert_eq!(out.params, ParamVector::new(3, 2));
        let h = &out.history;
        assert_eq!(h[0].parts, h[1].parts);
        assert_eq!(h[2].parts, h[3].parts);
        assert!((h[0].parts.color - h[2].parts.color).abs() < 1e-9);
    }

    #[test]
    fn zero_epochs_return_initialization() {
        let out = train(&small_set(1, 12), &quick_config(0, 0)).unwrap();
        assert_eq!(out.params, ParamVector::new(3, 2));
        assert!(out.history.is_empty());
    }

    #[test]
    fn empty_set_is_an_error() {
        let none: Vec<Image<f32>> = Vec::new();
        assert!(matches!(
            train(&none, &quick_config(1, 1)),
            Err(Error::EmptyTrainingSet)
        ));
    }

    #[test]
    fn checkpoint_round_trip_and_version() {
        let ck = Checkpoint::new(
            ParamVector::default(),
            FusionConfig::new(5),
            Some(TrainConfig::default()),
        );
        let text = ck.to_json().unwrap();
        assert_eq!(Checkpoint::from_json(&text).unwrap(), ck);
        let bumped = text.replace("\"format_version\": 1", "\"format_version\": 7");
        match Checkpoint::from_json(&bumped) {
            Err(Error::VersionMismatch {
                expected: 1,
                found: 7,
            }) => {}
            other => panic!("{other:?}"),
        }
        let extra = text.replacen('{', "{\"surprise\": 1,", 1);
        assert!(Checkpoint::from_json(&extra).is_err());
    }

    #[test]
    fn history_csv_layout() {
        let rec = EpochRecord {
            epoch: 0,
            phase: 1,
            parts: LossParts {
                factorization: 1.5,
                color: 0.25,
                exposure: 0.125,
                smooth: 0.0,
            },
            total: 1.5,
        };
        assert_eq!(
            history_csv(&[rec]),
            format!("{HISTORY_HEADER}\n0,1,1.5,0.25,0.125,0,1.5\n")
        );
    }

    #[test]
    fn grid_search_scores_candidates_in_order() {
        let pairs = generate(&SynthConfig {
            count: 2,
            height: 12,
            width: 12,
            seed: 9,
        })
        .unwrap();
        let train_set: Vec<Image<f32>> = vec![pairs[0].low.clone()];
        let val = vec![(pairs[1].low.clone(), pairs[1].high.clone())];
        let w1 = LossWeights::default();
        let w2 = LossWeights {
            exposure: 1.0,
            ..w1
        };
        let res = grid_search(&train_set, &val, &quick_config(2, 1), &[w1, w2]).unwrap();
        assert_eq!(res.len(), 2);
        assert_eq!(res[1].weights, w2);
        assert!(res.iter().all(|r| r.psnr.is_finite()));
    }
}
