//! Foreground refinement and DDIM denoising with the refinement projection.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::{Conditioning, Denoiser, Inpainter, LatentCodec, SIGMA_MIN};
use crate::error::{Error, Result};
use crate::frequency::{gaussian_blur, BlurSpec};
use crate::rng::{normal_tensor, Stream};
use crate::scheduler::{ddim_step, pred_x0, LatentTensor, NoiseSchedule};
use crate::video::{MaskClip, VideoClip, CHANNELS};

/// Where the refined clip's background comes from.
#[derive(Debug, Clone)]
pub enum BackgroundFill {
    /// Inpaint the generated frame under the foreground masks dilated by
    /// `dilate_px`.
    InpaintInput {
        dilate_px: usize,
    },
    Precomputed(VideoClip),
}

#[derive(Debug, Clone)]
pub struct RefineConfig {
    pub blur: BlurSpec,
    pub fg_masks: MaskClip,
    pub bg_fill: BackgroundFill,
}

impl RefineConfig {
    pub fn new(blur: BlurSpec, fg_masks: MaskClip, dilate_px: usize) -> Self {
        Self {
            blur,
            fg_masks,
            bg_fill: BackgroundFill::InpaintInput { dilate_px },
        }
    }

    pub fn with_background(mut self, bg: VideoClip) -> Self {
        self.bg_fill = BackgroundFill::Precomputed(bg);
        self
    }
}

/// `M * (HF(input) + LF(i0t)) + (1 - M) * I_BG`.
pub fn refine(i0t: &VideoClip, input: &VideoClip, cfg: &RefineConfig, inpainter: &dyn Inpainter) -> Result<VideoClip> {
    i0t.ensure_same_shape(input, "refine")?;
    cfg.fg_masks.ensure_matches(i0t, "refine")?;
    let lf = gaussian_blur(i0t, &cfg.blur)?;
    let input_lf = gaussian_blur(input, &cfg.blur)?;
    let bg = if cfg.fg_masks.is_all(1.0) {
        None
    } else {
        Some(match &cfg.bg_fill {
            BackgroundFill::InpaintInput { dilate_px } => inpainter.fill(i0t, &cfg.fg_masks.dilate(*dilate_px))?,
            BackgroundFill::Precomputed(bg) => {
                bg.ensure_same_shape(i0t, "refine background")?;
                bg.clone()
            }
        })
    };
    let masks = cfg.fg_masks.values();
    let data = (0..i0t.data().len())
        .map(|i| {
            let m = masks[i / CHANNELS];
            let fg = (input.data()[i] - input_lf.data()[i]) + lf.data()[i];
            match &bg {
                Some(bg) => m * fg + (1.0 - m) * bg.data()[i],
                None => fg,
            }
        })
        .collect();
    VideoClip::new(i0t.frames(), i0t.height(), i0t.width(), data, i0t.fps())
}

pub trait Refiner {
    fn refine(&self, i0t: &VideoClip, input: &VideoClip) -> Result<VideoClip>;
}

/// Leaves the decoded prediction untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRefiner;

impl Refiner for IdentityRefiner {
    fn refine(&self, i0t: &VideoClip, _input: &VideoClip) -> Result<VideoClip> {
        Ok(i0t.clone())
    }
}

pub struct ForegroundRefiner<'a> {
    pub cfg: RefineConfig,
    pub inpainter: &'a dyn Inpainter,
}

impl Refiner for ForegroundRefiner<'_> {
    fn refine(&self, i0t: &VideoClip, input: &VideoClip) -> Result<VideoClip> {
        refine(i0t, input, &self.cfg, self.inpainter)
    }
}

/// `mu_hat + eps_hat * sigma_hat` with `eps_hat = (x0t - mu) / sigma`, where
/// `(mu, sigma)` encode `decoded` (the decode of `x0t`) and `(mu_hat,
/// sigma_hat)` encode `refined`. Both deviations are floored at `sigma_min`.
pub fn project_decoded(
    x0t: &LatentTensor,
    decoded: &VideoClip,
    refined: &VideoClip,
    codec: &dyn LatentCodec,
    sigma_min: f64,
) -> Result<LatentTensor> {
    let (mu, sigma) = codec.encode(decoded)?;
    let (mu_hat, sigma_hat) = codec.encode(refined)?;
    x0t.ensure_same_shape(&mu, "project")?;
    mu.ensure_same_shape(&mu_hat, "project")?;
    let data = x0t
        .data()
        .iter()
        .zip(mu.data().iter().zip(sigma.data()))
        .zip(mu_hat.data().iter().zip(sigma_hat.data()))
        .map(|((&x, (&m, &s)), (&mh, &sh))| {
            let eps_hat = (x - m) / s.max(sigma_min);
            mh + eps_hat * sh.max(sigma_min)
        })
        .collect();
    LatentTensor::new(x0t.shape(), data)
}

pub fn project(
    x0t: &LatentTensor,
    refined: &VideoClip,
    codec: &dyn LatentCodec,
    sigma_min: f64,
) -> Result<LatentTensor> {
    let decoded = codec.decode(x0t)?;
    project_decoded(x0t, &decoded, refined, codec, sigma_min)
}

/// Largest `|project(x0t, decode(x0t)) - x0t|` over `trials` random latents
/// of random small shape.
pub fn alignment_sweep(codec: &dyn LatentCodec, trials: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for trial in 0..trials as u64 {
        let mut rng = crate::rng::rng_for(seed, Stream::Fixture, trial, 1);
        let shape = [
            rand::Rng::random_range(&mut rng, 1..=3),
            rand::Rng::random_range(&mut rng, 4..=12),
            rand::Rng::random_range(&mut rng, 4..=12),
            CHANNELS,
        ];
        let scale = rand::Rng::random_range(&mut rng, 0.01..1.0);
        let x0t = normal_tensor(shape, seed, Stream::Fixture, trial).map(|v| 0.5 + scale * v)?;
        let decoded = codec.decode(&x0t)?;
        let projected = project_decoded(&x0t, &decoded, &decoded, codec, SIGMA_MIN)?;
        worst = worst.max(projected.max_abs_diff(&x0t)?);
    }
    Ok(worst)
}

/// How the refined clip is mapped back into latent space each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Deterministic,
    /// Plain re-encoding `mu_hat + eps * sigma_hat` with fresh standard
    /// normal `eps` per step (the ablation).
    Reparameterized {
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpaStep {
    pub t: usize,
    /// RMS of `encode_mean(decode(x0t)) - x0t`.
    pub recon_rms: f64,
    /// Largest `|x0t_hat - x0t|` over background latent cells.
    pub bg_deviation_max: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RpaTrace {
    pub steps: Vec<RpaStep>,
}

impl RpaTrace {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for step in &self.steps {
            serde_json::to_writer(&mut out, step).expect("trace step serializes");
            out.push(b'\n');
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

/// Latent cells whose decoded footprint, padded by one latent cell, holds
/// no foreground pixel. Returned per latent element (channels expanded).
pub fn background_cells(mask: &MaskClip, latent_shape: [usize; 4]) -> Result<Vec<bool>> {
    let [f, lh, lw, c] = latent_shape;
    if mask.frames() != f || lh == 0 || lw == 0 {
        return Err(Error::shape(
            "background cells",
            &[mask.frames(), mask.height(), mask.width()],
            &latent_shape,
        ));
    }
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::with_capacity(f * lh * lw * c);
    for fi in 0..f {
        let m = mask.frame(fi);
        for y in 0..lh {
            let ys = (y.saturating_sub(1) * h / lh)..((y + 2).min(lh) * h / lh).max(1);
            for x in 0..lw {
                let xs = (x.saturating_sub(1) * w / lw)..((x + 2).min(lw) * w / lw).max(1);
                let clear = ys.clone().all(|py| xs.clone().all(|px| m[py * w + px] <= 0.0));
                out.extend(std::iter::repeat_n(clear, c));
            }
        }
    }
    Ok(out)
}

/// DDIM over the last `steps` inference steps, optionally refining and
/// projecting the predicted clean latent at every step.
pub struct DenoiseLoop<'a> {
    pub schedule: &'a NoiseSchedule,
    pub denoiser: &'a dyn Denoiser,
    pub codec: &'a dyn LatentCodec,
    /// `None` runs plain DDIM.
    pub refiner: Option<&'a dyn Refiner>,
    pub projection: Projection,
    pub sigma_min: f64,
    /// Foreground masks used to locate background cells for the trace.
    pub trace_mask: Option<&'a MaskClip>,
}

impl<'a> DenoiseLoop<'a> {
    pub fn new(schedule: &'a NoiseSchedule, denoiser: &'a dyn Denoiser, codec: &'a dyn LatentCodec) -> Self {
        Self {
            schedule,
            denoiser,
            codec,
            refiner: None,
            projection: Projection::Deterministic,
            sigma_min: SIGMA_MIN,
            trace_mask: None,
        }
    }

    pub fn with_refiner(mut self, refiner: &'a dyn Refiner) -> Self {
        self.refiner = Some(refiner);
        self
    }

    pub fn run(
        &self,
        x_start: &LatentTensor,
        input: &VideoClip,
        cond: &Conditioning,
        steps: usize,
    ) -> Result<(VideoClip, RpaTrace)> {
        let bg_cells = match (self.refiner, self.trace_mask) {
            (Some(_), Some(mask)) => Some(background_cells(mask, x_start.shape())?),
            _ => None,
        };
        let mut trace = RpaTrace::default();
        let mut x = x_start.clone();
        for (k, (t, t_prev)) in self.schedule.tail(steps)?.into_iter().enumerate() {
            let eps = self.denoiser.eps(&x, cond, t)?;
            x.ensure_same_shape(&eps, "denoiser output")?;
            let x0 = pred_x0(&x, &eps, t, self.schedule)?;
            let x0_hat = match self.refiner {
                None => x0,
                Some(refiner) => {
                    let decoded = self.codec.decode(&x0)?.with_fps(input.fps());
                    let refined = refiner.refine(&decoded, input)?;
                    let (projected, recon) = match self.projection {
                        Projection::Deterministic => {
                            let (mu, _) = self.codec.encode(&decoded)?;
                            let p = project_decoded(&x0, &decoded, &refined, self.codec, self.sigma_min)?;
                            (p, mu)
                        }
                        Projection::Reparameterized { seed } => {
                            let (mu_hat, sigma_hat) = self.codec.encode(&refined)?;
                            let noise = normal_tensor(mu_hat.shape(), seed, Stream::Reparameterize, k as u64);
                            let data = mu_hat
                                .data()
                                .iter()
                                .zip(sigma_hat.data().iter().zip(noise.data()))
                                .map(|(&m, (&s, &n))| m + n * s)
                                .collect();
                            let sampled = LatentTensor::new(mu_hat.shape(), data)?;
                            (sampled, self.codec.encode_mean(&decoded)?)
                        }
                    };
                    trace
                        .steps
                        .push(trace_step(t, &x0, &recon, &projected, bg_cells.as_deref())?);
                    projected
                }
            };
            x = ddim_step(&x0_hat, &eps, t_prev, self.schedule)?;
        }
        Ok((self.codec.decode(&x)?.with_fps(input.fps()), trace))
    }
}

fn trace_step(
    t: usize,
    x0: &LatentTensor,
    mu: &LatentTensor,
    projected: &LatentTensor,
    bg: Option<&[bool]>,
) -> Result<RpaStep> {
    x0.ensure_same_shape(mu, "trace")?;
    let n = x0.len().max(1) as f64;
    let recon_rms = (x0
        .data()
        .iter()
        .zip(mu.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let bg_deviation_max = x0
        .data()
        .iter()
        .zip(projected.data())
        .enumerate()
        .filter(|(i, _)| bg.is_none_or(|cells| cells[*i]))
        .map(|(_, (a, b))| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(RpaStep {
        t,
        recon_rms,
        bg_deviation_max,
    })
}

/// Convenience form of [`DenoiseLoop`] with foreground refinement.
#[allow(clippy::too_many_arguments)]
pub fn denoise_with_rpa(
    x_start: &LatentTensor,
    input: &VideoClip,
    cond: &Conditioning,
    start_step: usize,
    sched: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    codec: &dyn LatentCodec,
    cfg: &RefineConfig,
    inpainter: &dyn Inpainter,
    rpa_enabled: bool,
) -> Result<(VideoClip, RpaTrace)> {
    let refiner = ForegroundRefiner {
        cfg: cfg.clone(),
        inpainter,
    };
    let mut lp = DenoiseLoop::new(sched, denoiser, codec);
    if rpa_enabled {
        lp.refiner = Some(&refiner);
        lp.trace_mask = Some(&cfg.fg_masks);
    }
    lp.run(x_start, input, cond, start_step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{LaplacianInpainter, OracleDenoiser, ToyCodec};
    use crate::frequency::split_bands;
    use crate::scheduler::make_schedule;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_clip(seed: u64, frames: usize, h: usize, w: usize) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoClip::from_fn(frames, h, w, |_, _, _, _| rng.random::<f32>()).unwrap()
    }

    fn random_latent(seed: u64, shape: [usize; 4]) -> LatentTensor {
        normal_tensor(shape, seed, Stream::Fixture, 0)
            .map(|v| 0.5 + 0.2 * v)
            .unwrap()
    }

    #[test]
    fn refine_identity_with_full_mask() {
        let clip = random_clip(1, 2, 12, 12);
        let cfg = RefineConfig::new(BlurSpec::new(2.0), MaskClip::filled(2, 12, 12, 1.0).unwrap(), 2);
        let out = refine(&clip, &clip, &cfg, &LaplacianInpainter).unwrap();
        assert!(out.max_abs_diff(&clip).unwrap() < 1e-6);
    }

    #[test]
    fn refine_empty_mask_is_background() {
        let clip = random_clip(2, 2, 12, 12);
        let bg = random_clip(3, 2, 12, 12);
        let cfg = RefineConfig::new(BlurSpec::new(2.0), MaskClip::filled(2, 12, 12, 0.0).unwrap(), 2)
            .with_background(bg.clone());
        let out = refine(&clip, &random_clip(4, 2, 12, 12), &cfg, &LaplacianInpainter).unwrap();
        assert_eq!(out, bg);
    }

    #[test]
    fn refine_constant_input_keeps_low_band() {
        let clip = random_clip(5, 2, 12, 12);
        let input = VideoClip::filled(2, 12, 12, 0.3).unwrap();
        let spec = BlurSpec::new(2.0);
        let cfg = RefineConfig::new(spec, MaskClip::filled(2, 12, 12, 1.0).unwrap(), 2);
        let out = refine(&clip, &input, &cfg, &LaplacianInpainter).unwrap();
        let (lf, _) = split_bands(&clip, &spec).unwrap();
        assert!(out.max_abs_diff(&lf).unwrap() < 1e-6);
    }

    #[test]
    fn alignment_property() {
        let codec = ToyCodec::default();
        for seed in 0..20 {
            let x0 = random_latent(seed, [2, 4, 6, 3]);
            let decoded = codec.decode(&x0).unwrap();
            let out = project(&x0, &decoded, &codec, SIGMA_MIN).unwrap();
            assert!(out.max_abs_diff(&x0).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn projection_scalar_cell() {
        // eps_hat = (0.9 - 0.8) / 0.1 = 1, x_hat = 0.5 + 1 * 0.2 = 0.7.
        let (x, m, s, mh, sh) = (0.9f64, 0.8f64, 0.1f64, 0.5f64, 0.2f64);
        let eps_hat = (x - m) / s.max(SIGMA_MIN);
        assert!((mh + eps_hat * sh - 0.7).abs() < 1e-12);
    }

    #[test]
    fn additive_refinement_translates_projection() {
        // A constant offset passes through the toy codec's mean unchanged
        // and leaves its local deviation untouched.
        let codec = ToyCodec::default();
        let x0 = random_latent(7, [1, 4, 4, 3]);
        let decoded = codec.decode(&x0).unwrap();
        let shifted = decoded.map(|v| v + 0.125).unwrap();
        let out = project(&x0, &shifted, &codec, SIGMA_MIN).unwrap();
        let expected = x0.map(|v| v + 0.125).unwrap();
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-5);
    }

    fn fixture() -> (NoiseSchedule, ToyCodec, LatentTensor, LatentTensor) {
        let s = make_schedule(1000, 20, 0.00085, 0.012).unwrap();
        let target = random_latent(8, [2, 4, 4, 3]);
        let start = normal_tensor([2, 4, 4, 3], 9, Stream::Fixture, 0);
        (s, ToyCodec::default(), target, start)
    }

    #[test]
    fn disabled_rpa_is_plain_ddim_to_target() {
        let (s, codec, target, start) = fixture();
        let den = OracleDenoiser::new(s.clone(), target.clone());
        let input = codec.decode(&target).unwrap();
        let cfg = RefineConfig::new(BlurSpec::new(2.0), MaskClip::filled(2, 8, 8, 1.0).unwrap(), 2);
        let (out, trace) = denoise_with_rpa(
            &start,
            &input,
            &Conditioning::default(),
            20,
            &s,
            &den,
            &codec,
            &cfg,
            &LaplacianInpainter,
            false,
        )
        .unwrap();
        assert!(out.max_abs_diff(&codec.decode(&target).unwrap()).unwrap() < 1e-5);
        assert!(trace.steps.is_empty());
    }

    #[test]
    fn identity_refinement_matches_plain_run() {
        let (s, codec, target, start) = fixture();
        let den = OracleDenoiser::new(s.clone(), target.clone());
        let input = random_clip(10, 2, 8, 8);
        let c = Conditioning::default();
        let plain = DenoiseLoop::new(&s, &den, &codec)
            .run(&start, &input, &c, 20)
            .unwrap()
            .0;
        let (rpa, trace) = DenoiseLoop::new(&s, &den, &codec)
            .with_refiner(&IdentityRefiner)
            .run(&start, &input, &c, 20)
            .unwrap();
        assert!(rpa.max_abs_diff(&plain).unwrap() <= 1e-6);
        assert_eq!(trace.steps.len(), 20);
        assert!(trace
            .steps
            .iter()
            .all(|st| st.bg_deviation_max < 1e-6 && st.recon_rms.is_finite()));
    }

    #[test]
    fn single_step_refinement_oracle() {
        // One step from t = 50 straight to t = 0 lands on the projection
        // itself, so the output is decode(project(target, refine(decode(target)))).
        let (s, codec, target, start) = fixture();
        let den = OracleDenoiser::new(s.clone(), target.clone());
        let input = random_clip(11, 2, 8, 8);
        let spec = BlurSpec::new(1.0);
        let cfg = RefineConfig::new(spec, MaskClip::filled(2, 8, 8, 1.0).unwrap(), 2);
        let c = Conditioning::default();
        let (out, _) =
            denoise_with_rpa(&start, &input, &c, 1, &s, &den, &codec, &cfg, &LaplacianInpainter, true).unwrap();

        let decoded = codec.decode(&target).unwrap();
        let (lf, _) = split_bands(&decoded, &spec).unwrap();
        let (_, input_hf) = split_bands(&input, &spec).unwrap();
        let refined = lf.add(&input_hf).unwrap();
        let (mu, sigma) = codec.encode(&decoded).unwrap();
        let (mh, sh) = codec.encode(&refined).unwrap();
        let data: Vec<f64> = (0..target.len())
            .map(|i| mh.data()[i] + (target.data()[i] - mu.data()[i]) / sigma.data()[i] * sh.data()[i])
            .collect();
        let expected = codec.decode(&LatentTensor::new(target.shape(), data).unwrap()).unwrap();
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-5);
    }

    #[test]
    fn reparameterized_projection_is_seeded() {
        let (s, codec, target, start) = fixture();
        let den = OracleDenoiser::new(s.clone(), target);
        let input = random_clip(12, 2, 8, 8);
        let c = Conditioning::default();
        let run = |seed| {
            let mut lp = DenoiseLoop::new(&s, &den, &codec).with_refiner(&IdentityRefiner);
            lp.projection = Projection::Reparameterized { seed };
            lp.run(&start, &input, &c, 10).unwrap().0
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn background_cells_follow_mask() {
        let mask = MaskClip::from_fn(1, 16, 16, |_, y, x| if y < 4 && x < 4 { 1.0 } else { 0.0 }).unwrap();
        let cells = background_cells(&mask, [1, 8, 8, 1]).unwrap();
        assert!(!cells[0] && !cells[2] && !cells[2 * 8 + 2]);
        assert!(cells[3] && cells[3 * 8] && cells[63]);
    }

    #[test]
    fn trace_writes_json_lines() {
        let trace = RpaTrace {
            steps: vec![
                RpaStep {
                    t: 700,
                    recon_rms: 0.5,
                    bg_deviation_max: 0.0,
                },
                RpaStep {
                    t: 650,
                    recon_rms: 0.25,
                    bg_deviation_max: 1e-9,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        trace.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed: Vec<RpaStep> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed, trace.steps);
    }
}
