//! Noise schedule, forward noising, clean-latent prediction and deterministic
//! DDIM stepping.
//!
//! Training timesteps run `1..=t_train`; timestep `0` is the clean sample and
//! carries `alpha_bar = 1` by definition (the empty product).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{VideoClip, CHANNELS};

/// Floor under which `alpha_bar` is treated as degenerate in [`pred_x0`].
pub const ALPHA_BAR_FLOOR: f64 = 1e-8;

/// Dense `f x h x w x c` latent, stored as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl LatentTensor {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n == 0 {
            return Err(Error::InvalidClip(format!("empty latent shape {shape:?}")));
        }
        if data.len() != n {
            return Err(Error::InvalidClip(format!(
                "latent shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidClip("non-finite latent value".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, f: usize, y: usize, x: usize, c: usize) -> usize {
        let [_, h, w, ch] = self.shape;
        ((f * h + y) * w + x) * ch + c
    }

    pub fn ensure_same_shape(&self, other: &LatentTensor, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(context, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn zip_map(
        &self,
        other: &LatentTensor,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<LatentTensor> {
        self.ensure_same_shape(other, context)?;
        LatentTensor::new(
            self.shape,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<LatentTensor> {
        LatentTensor::new(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> Result<f64> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Views a clip as a pixel-space latent (`f x H x W x 3`).
    pub fn from_clip(clip: &VideoClip) -> LatentTensor {
        LatentTensor {
            shape: clip.shape(),
            data: clip.data().iter().map(|&v| v as f64).collect(),
        }
    }

    /// Inverse of [`LatentTensor::from_clip`]; values are rounded to `f32`.
    pub fn to_clip(&self, fps: f32) -> Result<VideoClip> {
        let [f, h, w, c] = self.shape;
        if c != CHANNELS {
            return Err(Error::InvalidClip(format!(
                "latent has {c} channels, clip needs {CHANNELS}"
            )));
        }
        VideoClip::new(f, h, w, self.data.iter().map(|&v| v as f32).collect(), fps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    #[serde(default = "default_t_train")]
    pub t_train: usize,
    #[serde(default = "default_t_infer")]
    pub t_infer: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
}

fn default_t_train() -> usize {
    1000
}
fn default_t_infer() -> usize {
    20
}
fn default_beta_start() -> f64 {
    0.00085
}
fn default_beta_end() -> f64 {
    0.012
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            t_train: default_t_train(),
            t_infer: default_t_infer(),
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// `alpha_bar[t]` for `t = 0..=t_train`; `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
    /// Training timesteps visited at inference, strictly decreasing.
    inference_steps: Vec<usize>,
}

/// Scaled-linear schedule: betas linearly spaced in the square-root domain.
pub fn make_schedule(t_train: usize, t_infer: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta range must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    if t_infer == 0 || t_infer > t_train {
        return Err(Error::Config(format!(
            "need 1 <= t_infer <= t_train, got t_infer={t_infer}, t_train={t_train}"
        )));
    }
    let (lo, hi) = (beta_start.sqrt(), beta_end.sqrt());
    let denom = (t_train - 1).max(1) as f64;
    let mut alpha_bar = Vec::with_capacity(t_train + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for i in 0..t_train {
        let root = lo + (hi - lo) * i as f64 / denom;
        acc *= 1.0 - root * root;
        alpha_bar.push(acc);
    }
    let inference_steps = (1..=t_infer).rev().map(|k| t_train * k / t_infer).collect();
    Ok(NoiseSchedule {
        alpha_bar,
        inference_steps,
    })
}

impl NoiseSchedule {
    pub fn from_params(p: &ScheduleParams) -> Result<Self> {
        make_schedule(p.t_train, p.t_infer, p.beta_start, p.beta_end)
    }

    pub fn t_train(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// Number of inference steps `T`.
    pub fn steps(&self) -> usize {
        self.inference_steps.len()
    }

    pub fn inference_steps(&self) -> &[usize] {
        &self.inference_steps
    }

    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(Error::InvalidTimestep { t, max: self.t_train() })
    }

    /// Timesteps visited when only the last `remaining` inference steps run.
    ///
    /// Returns `(t, t_prev)` pairs, e.g. `remaining = 2` with the default
    /// schedule yields `[(100, 50), (50, 0)]`.
    pub fn tail(&self, remaining: usize) -> Result<Vec<(usize, usize)>> {
        if remaining > self.steps() {
            return Err(Error::Config(format!(
                "{remaining} steps requested but schedule has {}",
                self.steps()
            )));
        }
        let start = self.steps() - remaining;
        Ok((start..self.steps())
            .map(|i| {
                let prev = self.inference_steps.get(i + 1).copied().unwrap_or(0);
                (self.inference_steps[i], prev)
            })
            .collect())
    }

    /// Training timestep at which an SDEdit run of `remaining` steps starts
    /// (`0` when nothing runs).
    pub fn start_timestep(&self, remaining: usize) -> Result<usize> {
        Ok(self.tail(remaining)?.first().map(|&(t, _)| t).unwrap_or(0))
    }
}

/// Rounds a fraction of `T` to an integer step count.
pub fn steps_from_fraction(fraction: f64, total: usize) -> usize {
    (fraction * total as f64).round() as usize
}

/// DDPM forward process: `sqrt(ab) * x0 + sqrt(1 - ab) * eps`.
pub fn add_noise(x0: &LatentTensor, eps: &LatentTensor, t: usize, sched: &NoiseSchedule) -> Result<LatentTensor> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, "add_noise", |x, e| a * x + b * e)
}

/// Clean-latent prediction from a noise estimate.
pub fn pred_x0(x_t: &LatentTensor, eps_pred: &LatentTensor, t: usize, sched: &NoiseSchedule) -> Result<LatentTensor> {
    let ab = sched.alpha_bar(t)?;
    if ab < ALPHA_BAR_FLOOR {
        return Err(Error::DegenerateTimestep { t, alpha_bar: ab });
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps_pred, "pred_x0", |x, e| (x - b * e) / a)
}

/// Deterministic DDIM update towards `t_prev` (eta = 0).
pub fn ddim_step(
    x0_hat: &LatentTensor,
    eps_pred: &LatentTensor,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    let ab = sched.alpha_bar(t_prev)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0_hat.zip_map(eps_pred, "ddim_step", |x, e| a * x + b * e)
}
