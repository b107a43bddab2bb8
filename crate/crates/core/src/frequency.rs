//! Spatial Gaussian low-pass and the exact low/high band split.
//!
//! Blurring is separable (rows then columns), per frame and per channel, with
//! half-sample symmetric reflection at the borders (`d c b a | a b c d`).
//! Frames never mix along time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{VideoClip, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Border {
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlurSpec {
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Kernel half-width; `ceil(3 * sigma)` when absent.
    #[serde(default)]
    pub radius: Option<usize>,
    #[serde(default = "default_border")]
    pub border: Border,
}

fn default_sigma() -> f64 {
    3.0
}

fn default_border() -> Border {
    Border::Reflect
}

impl Default for BlurSpec {
    fn default() -> Self {
        Self::new(default_sigma())
    }
}

impl BlurSpec {
    pub fn new(sigma: f64) -> Self {
        Self {
            sigma,
            radius: None,
            border: Border::Reflect,
        }
    }

    pub fn with_radius(mut self, radius: usize) -> Self {
        self.radius = Some(radius);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "blur sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.radius == Some(0) {
            return Err(Error::Config("blur radius must be at least 1".into()));
        }
        Ok(())
    }

    pub fn effective_radius(&self) -> usize {
        self.radius.unwrap_or_else(|| (3.0 * self.sigma).ceil() as usize).max(1)
    }

    /// Sampled 1D kernel of length `2r + 1`, normalized to sum to one.
    pub fn kernel(&self) -> Vec<f64> {
        let r = self.effective_radius() as i64;
        let two_s2 = 2.0 * self.sigma * self.sigma;
        let raw: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / two_s2).exp()).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }
}

/// Maps any integer coordinate into `0..n` by symmetric reflection.
#[inline]
pub(crate) fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

pub fn gaussian_blur(clip: &VideoClip, spec: &BlurSpec) -> Result<VideoClip> {
    spec.validate()?;
    let (h, w) = (clip.height(), clip.width());
    if h < 2 || w < 2 {
        return Err(Error::InvalidClip(format!("frame {h}x{w} too small to blur")));
    }
    let kernel = spec.kernel();
    let r = spec.effective_radius() as i64;
    let col_idx: Vec<Vec<usize>> = (0..w as i64)
        .map(|x| (-r..=r).map(|k| reflect_index(x + k, w)).collect())
        .collect();
    let row_idx: Vec<Vec<usize>> = (0..h as i64)
        .map(|y| (-r..=r).map(|k| reflect_index(y + k, h)).collect())
        .collect();

    let mut out = Vec::with_capacity(clip.data().len());
    let mut tmp = vec![0.0f64; h * w * CHANNELS];
    for f in 0..clip.frames() {
        let src = clip.frame(f);
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    let mut acc = 0.0;
                    for (wk, &xx) in kernel.iter().zip(&col_idx[x]) {
                        acc += wk * src[(y * w + xx) * CHANNELS + c] as f64;
                    }
                    tmp[(y * w + x) * CHANNELS + c] = acc;
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    let mut acc = 0.0;
                    for (wk, &yy) in kernel.iter().zip(&row_idx[y]) {
                        acc += wk * tmp[(yy * w + x) * CHANNELS + c];
                    }
                    out.push(acc as f32);
                }
            }
        }
    }
    VideoClip::new(clip.frames(), h, w, out, clip.fps())
}

/// Low band (blurred clip) and high band (clip minus low band).
pub fn split_bands(clip: &VideoClip, spec: &BlurSpec) -> Result<(VideoClip, VideoClip)> {
    let lf = gaussian_blur(clip, spec)?;
    let hf = clip.sub(&lf)?;
    Ok((lf, hf))
}

pub fn high_band(clip: &VideoClip, spec: &BlurSpec) -> Result<VideoClip> {
    Ok(split_bands(clip, spec)?.1)
}
