//! Seeded paired low-light data: well-lit scenes built from a lit gradient,
//! soft-edged discs, a shadow and a specular highlight, and their darkened
//! counterparts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_SYNTH_SIZE: usize = 128;
pub const DARK_MEAN: f64 = 0.05;
/// Accepted range for every channel mean of a dark image.
pub const DARK_CHANNEL_RANGE: (f64, f64) = (0.03, 0.08);
pub const DARK_GAMMA: f64 = 1.5;
pub const DARK_NOISE_STD: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 20,
            height: DEFAULT_SYNTH_SIZE,
            width: DEFAULT_SYNTH_SIZE,
            seed: 2,
        }
    }
}

/// One low/high pair, both quantized to 8 bits.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub low: Image<f32>,
    pub high: Image<f32>,
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn scene(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let n = h.max(w) as f64;
    let base: Vec<f64> = (0..3).map(|_| rng.gen_range(0.35..0.65)).collect();
    let mut img = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                img[(y * w + x) * 3 + c] = base[c] * (0.7 + 0.3 * y as f64 / n);
            }
        }
    }
    for _ in 0..4 {
        let (cx, cy) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let r = 0.1 + 0.25 * rng.gen_range(0.0..1.0);
        let color: Vec<f64> = (0..3).map(|_| rng.gen_range(0.2..0.95)).collect();
        for y in 0..h {
            for x in 0..w {
                let d = ((x as f64 / n - cx).powi(2) + (y as f64 / n - cy).powi(2)).sqrt();
                let m = sigmoid((r - d) * 40.0);
                for c in 0..3 {
                    let v = &mut img[(y * w + x) * 3 + c];
                    *v = *v * (1.0 - m) + m * color[c];
                }
            }
        }
    }
    // soft shadow cast across one side
    let (sx, sy) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    for y in 0..h {
        for x in 0..w {
            let t = (x as f64 / n - sx) * angle.cos() + (y as f64 / n - sy) * angle.sin();
            let s = 1.0 - 0.35 * sigmoid(t * 12.0);
            for c in 0..3 {
                img[(y * w + x) * 3 + c] *= s;
            }
        }
    }
    let (hx, hy) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    for y in 0..h {
        for x in 0..w {
            let g =
                0.6 * (-((x as f64 / n - hx).powi(2) + (y as f64 / n - hy).powi(2)) / 0.005).exp();
            for c in 0..3 {
                img[(y * w + x) * 3 + c] += g;
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

fn darken(rng: &mut ChaCha8Rng, high: &[f64]) -> Vec<f64> {
    let noise = Normal::new(0.0, DARK_NOISE_STD).expect("valid std");
    let d: Vec<f64> = high.iter().map(|v| v.powf(DARK_GAMMA)).collect();
    let m = d.iter().sum::<f64>() / d.len() as f64;
    let gain = if m > 0.0 { DARK_MEAN / m } else { 0.0 };
    d.into_iter()
        .map(|v| v * gain + noise.sample(rng))
        .collect()
}

fn channel_means(v: &[f32]) -> [f64; 3] {
    let mut s = [0.0; 3];
    for px in v.chunks_exact(3) {
        for c in 0..3 {
            s[c] += px[c] as f64;
        }
    }
    s.map(|x| x / (v.len() / 3) as f64)
}

/// Generates `cfg.count` pairs. Scenes whose dark channel means leave
/// [`DARK_CHANNEL_RANGE`] are redrawn.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthPair>> {
    if cfg.count == 0 {
        return Err(Error::InvalidParameter("count must be >= 1".into()));
    }
    if cfg.height < 2 || cfg.width < 2 {
        return Err(Error::TooSmall {
            height: cfg.height,
            width: cfg.width,
            min: 2,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.height, cfg.width);
    let mut out = Vec::with_capacity(cfg.count);
    while out.len() < cfg.count {
        let high = scene(&mut rng, h, w);
        let low: Vec<f32> = darken(&mut rng, &high).into_iter().map(quantize).collect();
        let (lo, hi) = DARK_CHANNEL_RANGE;
        if channel_means(&low).iter().any(|m| *m < lo || *m > hi) {
            continue;
        }
        out.push(SynthPair {
            low: Image::new(h, w, 3, low)?,
            high: Image::new(h, w, 3, high.into_iter().map(quantize).collect())?,
        });
    }
    Ok(out)
}

/// File stem of the `i`-th generated pair.
pub fn pair_stem(i: usize) -> String {
    format!("synth_{i:04}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(count: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            count,
            height: 48,
            width: 40,
            seed,
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        assert_eq!(
            generate(&small(3, 7)).unwrap(),
            generate(&small(3, 7)).unwrap()
        );
        assert_ne!(
            generate(&small(1, 7)).unwrap(),
            generate(&small(1, 8)).unwrap()
        );
    }

    #[test]
    fn dark_images_match_target_brightness() {
        for p in generate(&small(8, 2)).unwrap() {
            for m in p.low.channel_means() {
                assert!((0.03..=0.08).contains(&m), "{m}");
            }
            assert!((p.low.mean() - DARK_MEAN).abs() < 0.01);
            assert!(p.high.mean() > 0.15);
            assert!(p.low.in_unit_range() && p.high.in_unit_range());
            assert_eq!(p.low.shape(), (48, 40, 3));
        }
    }

    #[test]
    fn samples_are_eight_bit() {
        let p = &generate(&small(1, 3)).unwrap()[0];
        for v in p.low.data().iter().chain(p.high.data()) {
            let s = *v as f64 * 255.0;
            assert!((s - s.round()).abs() < 1e-3);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate(&small(0, 1)).is_err());
        assert!(generate(&SynthConfig {
            height: 1,
            ..small(1, 1)
        })
        .is_err());
    }
}
