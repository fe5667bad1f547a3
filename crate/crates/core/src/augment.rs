//! Weak and strong augmentation over (n_mels, n_frames) feature matrices.
//!
//! Pipelines are parsed from comma-separated stage strings ("basic",
//! "spec", "rand", "mix", "identity"). Every stage maps a matrix to a
//! matrix of the same shape except "mix", which is a marker consumed by
//! the loss assembly (it blends two examples and their targets); a
//! pipeline applies its matrix stages and skips the marker.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Circular shift along frames; positive moves content toward later frames.
pub fn roll_frames(x: &Tensor, shift: i64) -> Tensor {
    let (n_mels, n_frames) = (x.shape()[0], x.shape()[1]);
    let t = n_frames as i64;
    let k = ((shift % t) + t) % t;
    let mut out = Tensor::zeros(x.shape());
    let (xv, ov) = (x.data(), out.data_mut());
    for m in 0..n_mels {
        for j in 0..n_frames {
            let dst = (j + k as usize) % n_frames;
            ov[m * n_frames + dst] = xv[m * n_frames + j];
        }
    }
    out
}

/// Linear-interpolation time stretch by `factor`, then crop or zero-pad
/// back to the original frame count. Output frame j samples input j/factor.
pub fn time_stretch(x: &Tensor, factor: f64) -> Tensor {
    debug_assert!(factor > 0.0);
    let (n_mels, n_frames) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(x.shape());
    let (xv, ov) = (x.data(), out.data_mut());
    let last = (n_frames - 1) as f64;
    for j in 0..n_frames {
        let src = j as f64 / factor;
        if src > last {
            continue;
        }
        let i0 = src.floor() as usize;
        let frac = src - i0 as f64;
        let i1 = (i0 + 1).min(n_frames - 1);
        for m in 0..n_mels {
            let a = xv[m * n_frames + i0];
            let b = xv[m * n_frames + i1];
            ov[m * n_frames + j] = (1.0 - frac) * a + frac * b;
        }
    }
    out
}

/// Zero-fill (non-circular) shift along frames.
pub fn translate_frames(x: &Tensor, shift: i64) -> Tensor {
    let (n_mels, n_frames) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(x.shape());
    let (xv, ov) = (x.data(), out.data_mut());
    for m in 0..n_mels {
        for j in 0..n_frames {
            let src = j as i64 - shift;
            if src >= 0 && (src as usize) < n_frames {
                ov[m * n_frames + j] = xv[m * n_frames + src as usize];
            }
        }
    }
    out
}

/// Zero-fill shift along mel bins.
pub fn translate_mels(x: &Tensor, shift: i64) -> Tensor {
    let (n_mels, n_frames) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(x.shape());
    let (xv, ov) = (x.data(), out.data_mut());
    for m in 0..n_mels {
        let src = m as i64 - shift;
        if src >= 0 && (src as usize) < n_mels {
            let s = src as usize;
            ov[m * n_frames..(m + 1) * n_frames]
                .copy_from_slice(&xv[s * n_frames..(s + 1) * n_frames]);
        }
    }
    out
}

/// Additive offset on every cell.
pub fn brightness(x: &Tensor, offset: f64) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += offset;
    }
    out
}

/// Scales every cell's distance from the matrix mean.
pub fn contrast(x: &Tensor, factor: f64) -> Tensor {
    let mean = x.data().iter().sum::<f64>() / x.len() as f64;
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = mean + factor * (*v - mean);
    }
    out
}

/// Zeroes the rectangle of `height` mel rows and `width` frames whose top
/// left corner is (m0, t0), clipped to the matrix.
pub fn cutout(x: &Tensor, m0: usize, t0: usize, height: usize, width: usize) -> Tensor {
    let (n_mels, n_frames) = (x.shape()[0], x.shape()[1]);
    let mut out = x.clone();
    let ov = out.data_mut();
    for m in m0..(m0 + height).min(n_mels) {
        for t in t0..(t0 + width).min(n_frames) {
            ov[m * n_frames + t] = 0.0;
        }
    }
    out
}

/// Zeroes `width` contiguous mel rows starting at `start`.
pub fn freq_mask(x: &Tensor, start: usize, width: usize) -> Tensor {
    let n_frames = x.shape()[1];
    cutout(x, start, 0, width, n_frames)
}

/// Zeroes `width` contiguous frames starting at `start`.
pub fn time_mask(x: &Tensor, start: usize, width: usize) -> Tensor {
    let n_mels = x.shape()[0];
    cutout(x, 0, start, n_mels, width)
}

fn check_matrix(x: &Tensor) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::shape(format!("expected a feature matrix, got shape {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// Circular time shift, linear-interpolation stretch, Gaussian noise.
pub fn basic_augment(
    x: &Tensor,
    shift_max: usize,
    stretch: (f64, f64),
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (_, n_frames) = check_matrix(x)?;
    if shift_max >= n_frames {
        return Err(Error::domain(format!(
            "shift_max={shift_max} must be below n_frames={n_frames}"
        )));
    }
    let (lo, hi) = stretch;
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::domain(format!("bad stretch range ({lo}, {hi})")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::domain(format!("bad noise sigma {noise_sigma}")));
    }
    let s = shift_max as i64;
    let shift = rng.random_range(-s..=s);
    let factor = rng.random_range(lo..=hi);
    let mut out = time_stretch(&roll_frames(x, shift), factor);
    let normal = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
    for v in out.data_mut() {
        *v += noise_sigma * normal.sample(rng);
    }
    Ok(out)
}

/// Zeroes random frequency bands and time spans; widths drawn in
/// [0, f_max] and [0, t_max].
pub fn spec_augment(
    x: &Tensor,
    n_freq_masks: usize,
    f_max: usize,
    n_time_masks: usize,
    t_max: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (n_mels, n_frames) = check_matrix(x)?;
    if f_max > n_mels {
        return Err(Error::domain(format!("f_max={f_max} exceeds n_mels={n_mels}")));
    }
    if t_max > n_frames {
        return Err(Error::domain(format!("t_max={t_max} exceeds n_frames={n_frames}")));
    }
    let mut out = x.clone();
    for _ in 0..n_freq_masks {
        let width = rng.random_range(0..=f_max);
        let start = rng.random_range(0..=n_mels - width);
        out = freq_mask(&out, start, width);
    }
    for _ in 0..n_time_masks {
        let width = rng.random_range(0..=t_max);
        let start = rng.random_range(0..=n_frames - width);
        out = time_mask(&out, start, width);
    }
    Ok(out)
}

/// Applies `n_ops` draws from {translate-x, translate-y, brightness,
/// contrast, cutout}, each scaled by magnitude/30.
pub fn rand_augment_selected(
    x: &Tensor,
    n_ops: usize,
    magnitude: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (n_mels, n_frames) = check_matrix(x)?;
    if n_ops == 0 {
        return Err(Error::domain("n_ops must be at least 1".to_string()));
    }
    if magnitude > 30 {
        return Err(Error::domain(format!("magnitude={magnitude} outside [0, 30]")));
    }
    let scale = magnitude as f64 / 30.0;
    let mut out = x.clone();
    for _ in 0..n_ops {
        let op = rng.random_range(0..5u32);
        let sign: i64 = if rng.random::<bool>() { 1 } else { -1 };
        out = match op {
            0 => {
                let max = (scale * n_frames as f64 / 3.0).round() as i64;
                translate_frames(&out, sign * rng.random_range(0..=max))
            }
            1 => {
                let max = (scale * n_mels as f64 / 3.0).round() as i64;
                translate_mels(&out, sign * rng.random_range(0..=max))
            }
            2 => brightness(&out, sign as f64 * rng.random_range(0.0..=scale)),
            3 => contrast(&out, 1.0 + sign as f64 * rng.random_range(0.0..=0.5 * scale)),
            _ => {
                let h = (scale * n_mels as f64 / 2.0).round() as usize;
                let w = (scale * n_frames as f64 / 2.0).round() as usize;
                let m0 = rng.random_range(0..n_mels);
                let t0 = rng.random_range(0..n_frames);
                cutout(&out, m0, t0, h, w)
            }
        };
    }
    Ok(out)
}

/// Convex combination with a fixed coefficient; targets blend the same way.
pub fn mixup_with_lambda(
    x1: &Tensor,
    x2: &Tensor,
    y1: &[f64],
    y2: &[f64],
    lambda: f64,
) -> Result<(Tensor, Vec<f64>)> {
    if x1.shape() != x2.shape() {
        return Err(Error::shape(format!(
            "mixup inputs {:?} vs {:?}",
            x1.shape(),
            x2.shape()
        )));
    }
    if y1.len() != y2.len() {
        return Err(Error::shape(format!(
            "mixup targets of {} vs {} classes",
            y1.len(),
            y2.len()
        )));
    }
    debug_assert!((0.0..=1.0).contains(&lambda));
    let mut xf = x1.clone();
    for (o, &b) in xf.data_mut().iter_mut().zip(x2.data()) {
        *o = lambda * *o + (1.0 - lambda) * b;
    }
    let yf = y1
        .iter()
        .zip(y2)
        .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Ok((xf, yf))
}

/// Draws lambda from Beta(beta_param, beta_param) folded to [0.5, 1], so
/// the output leans toward the first argument.
pub fn mixup(
    x1: &Tensor,
    x2: &Tensor,
    y1: &[f64],
    y2: &[f64],
    beta_param: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<f64>)> {
    if !(beta_param > 0.0 && beta_param.is_finite()) {
        return Err(Error::domain(format!("beta parameter must be positive, got {beta_param}")));
    }
    let beta = Beta::new(beta_param, beta_param)
        .map_err(|e| Error::domain(format!("bad beta parameter {beta_param}: {e}")))?;
    let raw = beta.sample(rng);
    let lambda = raw.max(1.0 - raw);
    mixup_with_lambda(x1, x2, y1, y2, lambda)
}

pub const DEFAULT_MIX_BETA: f64 = 0.75;

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Identity,
    Basic {
        shift_max: usize,
        stretch: (f64, f64),
        noise_sigma: f64,
    },
    Spec {
        n_freq_masks: usize,
        f_max: usize,
        n_time_masks: usize,
        t_max: usize,
    },
    Rand {
        n_ops: usize,
        magnitude: u32,
    },
    /// Marker: blending happens where two examples and targets meet (loss
    /// assembly), not in the matrix pipeline.
    Mix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPipeline {
    stages: Vec<Stage>,
}

impl AugmentPipeline {
    /// Parses a stage string like "basic,spec,mix" with defaults scaled to
    /// the given geometry. "mix" may only appear last. An empty string is
    /// the identity pipeline.
    pub fn parse(stages: &str, n_mels: usize, n_frames: usize) -> Result<AugmentPipeline> {
        let mut out = Vec::new();
        let trimmed = stages.trim();
        if trimmed.is_empty() {
            return Ok(AugmentPipeline { stages: out });
        }
        let tokens: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        for (i, token) in tokens.iter().enumerate() {
            let stage = match *token {
                "identity" => Stage::Identity,
                "basic" => Stage::Basic {
                    shift_max: n_frames / 10,
                    stretch: (0.9, 1.1),
                    noise_sigma: 0.05,
                },
                "spec" => Stage::Spec {
                    n_freq_masks: 2,
                    f_max: n_mels / 4,
                    n_time_masks: 2,
                    t_max: n_frames / 8,
                },
                "rand" => Stage::Rand {
                    n_ops: 2,
                    magnitude: 10,
                },
                "mix" => {
                    if i + 1 != tokens.len() {
                        return Err(Error::config(
                            "stage \"mix\" must be the last stage".to_string(),
                        ));
                    }
                    Stage::Mix
                }
                other => {
                    return Err(Error::config(format!(
                        "unknown augmentation stage {other:?}"
                    )))
                }
            };
            out.push(stage);
        }
        Ok(AugmentPipeline { stages: out })
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn has_mix(&self) -> bool {
        self.stages.iter().any(|s| matches!(s, Stage::Mix))
    }

    /// Applies the matrix stages to one example.
    pub fn apply(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let mut out = x.clone();
        for stage in &self.stages {
            out = match *stage {
                Stage::Identity | Stage::Mix => out,
                Stage::Basic {
                    shift_max,
                    stretch,
                    noise_sigma,
                } => basic_augment(&out, shift_max, stretch, noise_sigma, rng)?,
                Stage::Spec {
                    n_freq_masks,
                    f_max,
                    n_time_masks,
                    t_max,
                } => spec_augment(&out, n_freq_masks, f_max, n_time_masks, t_max, rng)?,
                Stage::Rand { n_ops, magnitude } => {
                    rand_augment_selected(&out, n_ops, magnitude, rng)?
                }
            };
        }
        Ok(out)
    }

    /// Applies the pipeline example by example over a (B, n_mels,
    /// n_frames) tensor, consuming the rng in batch order.
    pub fn apply_batch(&self, features: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let s = features.shape();
        if s.len() != 3 {
            return Err(Error::shape(format!("expected a feature batch, got {s:?}")));
        }
        let (batch, n_mels, n_frames) = (s[0], s[1], s[2]);
        let per = n_mels * n_frames;
        let mut data = Vec::with_capacity(batch * per);
        for b in 0..batch {
            let x = Tensor::from_vec(
                &[n_mels, n_frames],
                features.data()[b * per..(b + 1) * per].to_vec(),
            )?;
            data.extend_from_slice(self.apply(&x, rng)?.data());
        }
        Tensor::from_vec(s, data)
    }
}
