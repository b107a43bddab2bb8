//! Analytic stand-ins for the learned models.

use serde::{Deserialize, Serialize};

use super::{run_ddim, GaussianPriorDenoiser, SIGMA_MIN};
use super::{BackgroundProvider, Conditioning, Inpainter, LatentCodec, Relighter};
use crate::attention::{attention, cross_frame_attention, AttentionBatch, Matrix};
use crate::error::{Error, Result};
use crate::frequency::{gaussian_blur, BlurSpec};
use crate::resample::{block_mean, pool2_stats, resize_bilinear};
use crate::scheduler::{LatentTensor, NoiseSchedule};
use crate::video::{MaskClip, VideoClip, CHANNELS};

pub const DEFAULT_SIGMA_SCALE: f64 = 0.05;

// ---------------------------------------------------------------------------
// Codec

/// 2x spatial average-pool encoder with a local-contrast standard deviation,
/// and a bilinear 2x decoder. Lossy on anything but locally smooth content.
#[derive(Debug, Clone, Copy)]
pub struct ToyCodec {
    pub sigma_scale: f64,
}

impl Default for ToyCodec {
    fn default() -> Self {
        Self {
            sigma_scale: DEFAULT_SIGMA_SCALE,
        }
    }
}

pub fn toy_encode(clip: &VideoClip, sigma_scale: f64) -> Result<(LatentTensor, LatentTensor)> {
    let (h, w) = (clip.height(), clip.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidClip(format!(
            "toy codec needs even frame size, got {h}x{w}"
        )));
    }
    let shape = [clip.frames(), h / 2, w / 2, CHANNELS];
    let mut mu = Vec::with_capacity(shape.iter().product());
    let mut sigma = Vec::with_capacity(mu.capacity());
    for f in 0..clip.frames() {
        let (m, s) = pool2_stats(clip.frame(f), h, w, CHANNELS);
        mu.extend(m);
        sigma.extend(s.into_iter().map(|s| (SIGMA_MIN + sigma_scale * s).max(SIGMA_MIN)));
    }
    Ok((LatentTensor::new(shape, mu)?, LatentTensor::new(shape, sigma)?))
}

pub fn toy_decode(latent: &LatentTensor) -> Result<VideoClip> {
    let [f, h, w, c] = latent.shape();
    if c != CHANNELS {
        return Err(Error::InvalidClip(format!(
            "toy decoder expects {CHANNELS} channels, got {c}"
        )));
    }
    let per = h * w * c;
    let mut data = Vec::with_capacity(f * per * 4);
    for fi in 0..f {
        let up = resize_bilinear(&latent.data()[fi * per..(fi + 1) * per], h, w, c, 2 * h, 2 * w);
        data.extend(up.into_iter().map(|v| v as f32));
    }
    VideoClip::new(f, 2 * h, 2 * w, data, crate::video::DEFAULT_FPS)
}

impl LatentCodec for ToyCodec {
    fn name(&self) -> &str {
        "toy"
    }

    fn latent_shape(&self, clip_shape: [usize; 4]) -> Result<[usize; 4]> {
        let [f, h, w, c] = clip_shape;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidClip(format!(
                "toy codec needs even frame size, got {h}x{w}"
            )));
        }
        Ok([f, h / 2, w / 2, c])
    }

    fn encode_moments(&self, clip: &VideoClip) -> Result<(LatentTensor, LatentTensor)> {
        toy_encode(clip, self.sigma_scale)
    }

    fn decode(&self, latent: &LatentTensor) -> Result<VideoClip> {
        toy_decode(latent)
    }
}

// ---------------------------------------------------------------------------
// Relighter

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyRelighterParams {
    /// Spread of the text-guided model's belief around its tinted target.
    #[serde(default = "default_prior_std")]
    pub prior_std: f64,
    /// Multiplier on token features before attention logits.
    #[serde(default = "default_feature_gain")]
    pub feature_gain: f64,
}

fn default_prior_std() -> f64 {
    0.05
}

fn default_feature_gain() -> f64 {
    4.0
}

impl Default for ToyRelighterParams {
    fn default() -> Self {
        Self {
            prior_std: default_prior_std(),
            feature_gain: default_feature_gain(),
        }
    }
}

/// Image-guided path: low-band moment matching. Text-guided path: DDIM in
/// pixel space with a Gaussian-prior model centred on a prompt-tinted copy
/// of the foreground condition.
#[derive(Debug, Clone)]
pub struct ToyRelighter {
    schedule: NoiseSchedule,
    blur: BlurSpec,
    params: ToyRelighterParams,
}

impl ToyRelighter {
    pub fn new(schedule: NoiseSchedule, blur: BlurSpec, params: ToyRelighterParams) -> Self {
        Self { schedule, blur, params }
    }

    /// Clean image the text-guided model converges to for `fg` and `prompt`.
    pub fn text_target(&self, fg: &VideoClip, prompt: &str, cross_frame: bool) -> Result<VideoClip> {
        let tint = prompt_tint(prompt);
        let base = VideoClip::from_fn(fg.frames(), fg.height(), fg.width(), |f, y, x, c| {
            fg.get(f, y, x, c) + tint[c]
        })?;
        if !cross_frame || base.frames() == 1 {
            return Ok(base);
        }
        // Token grid: 4x downsampled frame, d = 3 colour features. The model's
        // neutral path is per-frame self-attention; swapping in the first
        // frame's keys/values moves each frame's palette towards frame one.
        let (h, w) = (base.height(), base.width());
        let (th, tw) = ((h / 4).max(1), (w / 4).max(1));
        let gain = self.params.feature_gain;
        let mut tokens = Vec::with_capacity(base.frames());
        for f in 0..base.frames() {
            let frame: Vec<f64> = base.frame(f).iter().map(|&v| v as f64).collect();
            tokens.push(Matrix::new(
                th * tw,
                CHANNELS,
                block_mean(&frame, h, w, CHANNELS, th, tw),
            )?);
        }
        let scaled: Vec<Matrix> = tokens
            .iter()
            .map(|m| Matrix::new(m.rows(), m.cols(), m.data().iter().map(|v| v * gain).collect()))
            .collect::<Result<_>>()?;
        let batch = AttentionBatch::new(scaled.clone(), scaled, tokens)?;
        let cross = cross_frame_attention(&batch)?;
        let mut data = Vec::with_capacity(base.data().len());
        for f in 0..base.frames() {
            let own = attention(&batch.q[f], &batch.k[f], &batch.v[f])?;
            let delta: Vec<f64> = cross[f].data().iter().zip(own.data()).map(|(a, b)| a - b).collect();
            let delta = resize_bilinear(&delta, th, tw, CHANNELS, h, w);
            data.extend(base.frame(f).iter().zip(delta).map(|(&v, d)| v + d as f32));
        }
        VideoClip::new(base.frames(), h, w, data, base.fps())
    }
}

/// Per-channel additive colour cast derived from the prompt. Prompts naming
/// warm or cool light get the matching cast; anything else is decided by a
/// stable hash. An empty prompt adds nothing.
pub fn prompt_tint(prompt: &str) -> [f32; 3] {
    if prompt.trim().is_empty() {
        return [0.0; 3];
    }
    const WARM: &[&str] = &["sunset", "warm", "fire", "golden", "candle", "desert", "lava"];
    const COOL: &[&str] = &["night", "moon", "blue", "cool", "ice", "snow", "neon", "ocean"];
    let hash = prompt.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    let lower = prompt.to_lowercase();
    let warm = if WARM.iter().any(|k| lower.contains(k)) {
        true
    } else if COOL.iter().any(|k| lower.contains(k)) {
        false
    } else {
        hash & 1 == 0
    };
    let strength = 0.08 + 0.08 * ((hash >> 8) & 0xff) as f32 / 255.0;
    if warm {
        [strength, 0.4 * strength, -strength]
    } else {
        [-strength, 0.1 * strength, strength]
    }
}

fn channel_stats(values: &[f32], frame_len: usize, c: usize) -> (f64, f64) {
    let n = (frame_len / CHANNELS) as f64;
    let mean = values.iter().skip(c).step_by(CHANNELS).map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .skip(c)
        .step_by(CHANNELS)
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

impl Relighter for ToyRelighter {
    fn relight_image_guided(&self, fg: &VideoClip, bg: &VideoClip) -> Result<VideoClip> {
        fg.ensure_same_shape(bg, "relight_image_guided")?;
        let fg_lf = gaussian_blur(fg, &self.blur)?;
        let bg_lf = gaussian_blur(bg, &self.blur)?;
        let n = fg.frame_len();
        let mut data = Vec::with_capacity(fg.data().len());
        for f in 0..fg.frames() {
            let (src, lf, target) = (fg.frame(f), fg_lf.frame(f), bg_lf.frame(f));
            let mut maps = [(0.0f64, 1.0f64, 0.0f64); CHANNELS];
            for (c, map) in maps.iter_mut().enumerate() {
                let (m_fg, s_fg) = channel_stats(lf, n, c);
                let (m_bg, s_bg) = channel_stats(target, n, c);
                // Zero-variance channels keep their contrast and only shift.
                let scale = if s_fg > 1e-6 { s_bg / s_fg } else { 1.0 };
                *map = (m_fg, scale, m_bg);
            }
            for (i, (&v, &l)) in src.iter().zip(lf).enumerate() {
                let (m_fg, scale, m_bg) = maps[i % CHANNELS];
                let hf = v as f64 - l as f64;
                data.push((hf + (l as f64 - m_fg) * scale + m_bg) as f32);
            }
        }
        VideoClip::new(fg.frames(), fg.height(), fg.width(), data, fg.fps())
    }

    fn relight_text_guided_denoise(
        &self,
        noisy: &VideoClip,
        fg: &VideoClip,
        prompt: &str,
        steps: usize,
        cross_frame: bool,
    ) -> Result<VideoClip> {
        noisy.ensure_same_shape(fg, "relight_text_guided_denoise")?;
        if steps == 0 {
            return Ok(noisy.clone());
        }
        let target = self.text_target(fg, prompt, cross_frame)?;
        let model = GaussianPriorDenoiser::new(
            self.schedule.clone(),
            LatentTensor::from_clip(&target),
            self.params.prior_std,
        )?;
        let out = run_ddim(
            &LatentTensor::from_clip(noisy),
            steps,
            &self.schedule,
            &model,
            &Conditioning::new(prompt),
        )?;
        out.to_clip(noisy.fps())
    }
}

// ---------------------------------------------------------------------------
// Inpainter

/// Residual tolerance of the harmonic fill.
pub const FILL_TOLERANCE: f64 = 1e-4;
pub const FILL_MAX_ITERS: usize = 2000;

/// Harmonic (Laplace) fill of every pixel with `mask > 0`, solved by
/// successive over-relaxed 4-neighbour averaging. Image borders are
/// reflecting (only in-frame neighbours are averaged). The result is blended
/// back as `mask * fill + (1 - mask) * clip`.
pub fn laplacian_fill(clip: &VideoClip, mask: &MaskClip) -> Result<VideoClip> {
    mask.ensure_matches(clip, "laplacian_fill")?;
    let (h, w) = (clip.height(), clip.width());
    let mut out = clip.data().to_vec();
    for f in 0..clip.frames() {
        let m = mask.frame(f);
        let unknown: Vec<usize> = (0..h * w).filter(|&i| m[i] > 0.0).collect();
        if unknown.is_empty() {
            continue;
        }
        if unknown.len() == h * w {
            return Err(Error::backend(
                "inpainter",
                format!("frame {f} is fully masked; nothing to anchor the fill"),
            ));
        }
        let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
        for &i in &unknown {
            let (y, x) = (i / w, i % w);
            y0 = y0.min(y);
            y1 = y1.max(y);
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
        let extent = (y1 - y0 + 1).max(x1 - x0 + 1) as f64;
        let omega = 2.0 / (1.0 + (std::f64::consts::PI / (extent + 1.0)).sin());
        let neighbours: Vec<Vec<usize>> = unknown
            .iter()
            .map(|&i| {
                let (y, x) = (i / w, i % w);
                let mut n = Vec::with_capacity(4);
                if y > 0 {
                    n.push(i - w);
                }
                if y + 1 < h {
                    n.push(i + w);
                }
                if x > 0 {
                    n.push(i - 1);
                }
                if x + 1 < w {
                    n.push(i + 1);
                }
                n
            })
            .collect();

        let src = clip.frame(f);
        for c in 0..CHANNELS {
            let mut u: Vec<f64> = src.iter().skip(c).step_by(CHANNELS).map(|&v| v as f64).collect();
            let known_mean = {
                let (sum, n) = (0..h * w)
                    .filter(|&i| m[i] <= 0.0)
                    .fold((0.0, 0usize), |(s, n), i| (s + u[i], n + 1));
                sum / n as f64
            };
            for &i in &unknown {
                u[i] = known_mean;
            }
            for _ in 0..FILL_MAX_ITERS {
                let mut worst = 0.0f64;
                for (&i, nb) in unknown.iter().zip(&neighbours) {
                    let avg = nb.iter().map(|&j| u[j]).sum::<f64>() / nb.len() as f64;
                    let residual = avg - u[i];
                    u[i] += omega * residual;
                    worst = worst.max(residual.abs());
                }
                if worst < FILL_TOLERANCE {
                    break;
                }
            }
            let base = f * h * w * CHANNELS;
            for &i in &unknown {
                let k = base + i * CHANNELS + c;
                let mi = m[i] as f64;
                out[k] = (mi * u[i] + (1.0 - mi) * out[k] as f64) as f32;
            }
        }
    }
    VideoClip::new(clip.frames(), h, w, out, clip.fps())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LaplacianInpainter;

impl Inpainter for LaplacianInpainter {
    fn fill(&self, clip: &VideoClip, mask: &MaskClip) -> Result<VideoClip> {
        laplacian_fill(clip, mask)
    }
}

// ---------------------------------------------------------------------------
// Background provider

/// Pans a reflection-extended copy of the first frame along the global
/// integer translation of the input clip. Deterministic; the seed is unused.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticBackground {
    /// Largest displacement searched per axis; half the short edge if unset.
    pub max_shift: Option<usize>,
}

fn luminance(clip: &VideoClip, f: usize) -> Vec<f64> {
    clip.frame(f)
        .chunks_exact(CHANNELS)
        .map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / CHANNELS as f64)
        .collect()
}

/// Normalized cross-correlation of `cur(y, x)` with `reference(y - dy, x - dx)`
/// over their overlap, or `None` when the overlap is too small or flat.
fn shifted_ncc(cur: &[f64], reference: &[f64], h: usize, w: usize, dy: i64, dx: i64) -> Option<f64> {
    let (hi, wi) = (h as i64, w as i64);
    let (ys, ye) = (dy.max(0), (hi + dy).min(hi));
    let (xs, xe) = (dx.max(0), (wi + dx).min(wi));
    let area = (ye - ys) * (xe - xs);
    if ye <= ys || xe <= xs || area * 4 < hi * wi {
        return None;
    }
    let n = area as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in ys..ye {
        for x in xs..xe {
            let a = cur[(y * wi + x) as usize];
            let b = reference[((y - dy) * wi + (x - dx)) as usize];
            sa += a;
            sb += b;
            saa += a * a;
            sbb += b * b;
            sab += a * b;
        }
    }
    let va = saa / n - (sa / n).powi(2);
    let vb = sbb / n - (sb / n).powi(2);
    if va < 1e-12 || vb < 1e-12 {
        return None;
    }
    Some((sab / n - sa * sb / (n * n)) / (va * vb).sqrt())
}

/// Integer content displacement `(dy, dx)` of every frame relative to frame
/// one, so that `frame_i(y, x) ~ frame_1(y - dy, x - dx)`.
pub fn estimate_offsets(clip: &VideoClip, max_shift: usize) -> Vec<(i64, i64)> {
    let (h, w) = (clip.height(), clip.width());
    let reference = luminance(clip, 0);
    let r = max_shift as i64;
    // Candidates ordered by L1 length so ties resolve to the smaller motion.
    let mut candidates: Vec<(i64, i64)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect();
    candidates.sort_by_key(|&(dy, dx)| (dy.abs() + dx.abs(), dy, dx));
    let mut offsets = vec![(0, 0)];
    for f in 1..clip.frames() {
        let cur = luminance(clip, f);
        let mut best: Option<(f64, (i64, i64))> = None;
        for &(dy, dx) in &candidates {
            if let Some(score) = shifted_ncc(&cur, &reference, h, w, dy, dx) {
                if best.is_none_or(|(s, _)| score > s + 1e-12) {
                    best = Some((score, (dy, dx)));
                }
            }
        }
        offsets.push(best.map(|(_, d)| d).unwrap_or((0, 0)));
    }
    offsets
}

pub fn synthetic_background(input: &VideoClip, first_frame: &VideoClip, max_shift: Option<usize>) -> Result<VideoClip> {
    let (h, w) = (input.height(), input.width());
    if first_frame.height() != h || first_frame.width() != w {
        return Err(Error::shape(
            "synthetic_background",
            &first_frame.shape(),
            &input.shape(),
        ));
    }
    let max_shift = max_shift.unwrap_or(h.min(w) / 2);
    let offsets = estimate_offsets(input, max_shift);
    let src = first_frame.frame(0);
    let mut data = Vec::with_capacity(input.data().len());
    for &(dy, dx) in &offsets {
        for y in 0..h as i64 {
            let sy = crate::frequency::reflect_index(y - dy, h);
            for x in 0..w as i64 {
                let sx = crate::frequency::reflect_index(x - dx, w);
                data.extend_from_slice(&src[(sy * w + sx) * CHANNELS..(sy * w + sx + 1) * CHANNELS]);
            }
        }
    }
    VideoClip::new(input.frames(), h, w, data, input.fps())
}

impl BackgroundProvider for SyntheticBackground {
    fn generate(&self, input: &VideoClip, first_frame: &VideoClip, _seed: u64) -> Result<VideoClip> {
        synthetic_background(input, first_frame, self.max_shift)
    }
}
