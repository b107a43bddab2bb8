use std::sync::Arc;

use crate::backends::remote::{RemoteBackground, RemoteClient, RemoteCodec, RemoteInpainter, RemoteRelighter};
use crate::backends::{
    BackendKind, BackendSet, Conditioning, DenoiserSource, LaplacianInpainter, LatentCodec, SyntheticBackground,
    ToyCodec, ToyRelighter,
};
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, Stream};
use crate::rpa::{DenoiseLoop, ForegroundRefiner, Projection, RefineConfig, RpaTrace};
use crate::scheduler::{add_noise, LatentTensor, NoiseSchedule};
use crate::video::{composite, MaskClip, VideoClip};

use super::config::{PipelineConfig, ProjectionMode};

/// Binds every backend named in the config.
pub fn build_backends(cfg: &PipelineConfig, schedule: &NoiseSchedule) -> Result<BackendSet> {
    let client = match (&cfg.backend.remote_url, cfg.backend.any_remote()) {
        (Some(url), true) => Some(Arc::new(RemoteClient::new(url.clone()))),
        (None, true) => {
            return Err(Error::Config(
                "backend.remote_url is required when a backend is remote".into(),
            ))
        }
        _ => None,
    };
    let remote = || client.clone().expect("checked above");
    Ok(BackendSet {
        codec: match cfg.backend.codec {
            BackendKind::Toy => Box::new(ToyCodec {
                sigma_scale: cfg.toy.sigma_scale,
            }),
            BackendKind::Remote => Box::new(RemoteCodec::new(remote())),
        },
        denoiser: match cfg.backend.denoiser {
            BackendKind::Toy => DenoiserSource::Toy { pull: cfg.toy.pull },
            BackendKind::Remote => DenoiserSource::Remote(remote()),
        },
        relighter: match cfg.backend.relighter {
            BackendKind::Toy => Box::new(ToyRelighter::new(schedule.clone(), cfg.blur, cfg.toy.relighter)),
            BackendKind::Remote => Box::new(RemoteRelighter::new(remote())),
        },
        inpainter: match cfg.backend.inpainter {
            BackendKind::Toy => Box::new(LaplacianInpainter),
            BackendKind::Remote => Box::new(RemoteInpainter::new(remote())),
        },
        background: match cfg.backend.background {
            BackendKind::Toy => Box::new(SyntheticBackground::default()),
            BackendKind::Remote => Box::new(RemoteBackground::new(remote())),
        },
    })
}

/// Where the first background frame comes from.
pub enum FirstFrame<'a> {
    /// Text mode: relight the (foreground-free) first input frame.
    Prompt(&'a str),
    /// Image mode: a supplied background image.
    Image(&'a VideoClip),
}

pub struct Stages<'a> {
    pub cfg: &'a PipelineConfig,
    pub schedule: &'a NoiseSchedule,
    pub backends: &'a BackendSet,
}

impl Stages<'_> {
    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    fn noise_like(&self, shape: [usize; 4], stream: Stream) -> LatentTensor {
        normal_tensor(shape, self.seed(), stream, 0)
    }

    /// Background clip `I_b` following the input's motion, free of foreground.
    pub fn background(&self, input: &VideoClip, masks: &MaskClip, first: FirstFrame<'_>) -> Result<VideoClip> {
        masks.ensure_matches(input, "stage 1")?;
        let b = self.backends;
        match first {
            FirstFrame::Image(image) => {
                if image.height() != input.height() || image.width() != input.width() {
                    return Err(Error::Config(format!(
                        "background image is {}x{}, input frames are {}x{}",
                        image.height(),
                        image.width(),
                        input.height(),
                        input.width()
                    )));
                }
                let first = image.frames_range(0, 1)?.with_fps(input.fps());
                b.background.generate(input, &first, self.seed())
            }
            FirstFrame::Prompt(prompt) => {
                let dilated = masks.dilate(self.cfg.rpa.mask_dilate_px);
                let frame1 = input.frames_range(0, 1)?;
                let clean = b.inpainter.fill(&frame1, &dilated.frames_range(0, 1)?)?;
                let steps = self.schedule.steps();
                let t = self.schedule.start_timestep(steps)?;
                let eps = self.noise_like(clean.shape(), Stream::Background);
                let noisy =
                    add_noise(&LatentTensor::from_clip(&clean), &eps, t, self.schedule)?.to_clip(input.fps())?;
                let first = b
                    .relighter
                    .relight_text_guided_denoise(&noisy, &clean, prompt, steps, false)?;
                let panned = b.background.generate(input, &first, self.seed())?;
                b.inpainter.fill(&panned, &dilated)
            }
        }
    }

    /// Step 1 of harmonization: image-guided relight, composited on `bg`.
    pub fn relight_composite(&self, input: &VideoClip, masks: &MaskClip, bg: &VideoClip) -> Result<VideoClip> {
        let relit = self.backends.relighter.relight_image_guided(input, bg)?;
        composite(&relit, bg, masks)
    }

    /// Step 2 of harmonization: SDEdit of `step1` over the last `t0` steps.
    pub fn harmonize_text(
        &self,
        step1: &VideoClip,
        input: &VideoClip,
        masks: &MaskClip,
        bg: &VideoClip,
        prompt: &str,
        t0: usize,
    ) -> Result<VideoClip> {
        if t0 == 0 {
            return Ok(step1.clone());
        }
        let t = self.schedule.start_timestep(t0)?;
        let eps = self.noise_like(step1.shape(), Stream::Harmonize);
        let noisy = add_noise(&LatentTensor::from_clip(step1), &eps, t, self.schedule)?.to_clip(step1.fps())?;
        let condition = composite(input, bg, masks)?;
        self.backends.relighter.relight_text_guided_denoise(
            &noisy,
            &condition,
            prompt,
            t0,
            self.cfg.harmonize.cross_frame,
        )
    }

    /// Light harmonization; returns `(step-1 composite, I_L)`.
    pub fn harmonize(
        &self,
        input: &VideoClip,
        masks: &MaskClip,
        bg: &VideoClip,
        prompt: &str,
        t0: usize,
    ) -> Result<(VideoClip, VideoClip)> {
        let step1 = self.relight_composite(input, masks, bg)?;
        let il = self.harmonize_text(&step1, input, masks, bg, prompt, t0)?;
        Ok((step1, il))
    }

    /// Consistency enhancement of `il` over the last `t1` steps.
    pub fn enhance(
        &self,
        il: &VideoClip,
        input: &VideoClip,
        masks: &MaskClip,
        prompt: &str,
        t1: usize,
    ) -> Result<(VideoClip, RpaTrace)> {
        let codec: &dyn LatentCodec = self.backends.codec.as_ref();
        let z = codec.encode_mean(il)?;
        if t1 == 0 {
            return Ok((codec.decode(&z)?.with_fps(il.fps()), RpaTrace::default()));
        }
        let noise = self.noise_like(z.shape(), Stream::Enhance);
        let x_start = add_noise(&z, &noise, self.schedule.start_timestep(t1)?, self.schedule)?;
        let denoiser = self
            .backends
            .denoiser
            .bind(self.schedule, temporal_smooth(&z, 1)?, noise)?;
        let refiner = ForegroundRefiner {
            cfg: RefineConfig::new(self.cfg.blur, masks.clone(), self.cfg.rpa.mask_dilate_px),
            inpainter: self.backends.inpainter.as_ref(),
        };
        let mut lp = DenoiseLoop::new(self.schedule, denoiser.as_ref(), codec);
        lp.sigma_min = self.cfg.rpa.sigma_min;
        lp.projection = match self.cfg.rpa.projection {
            ProjectionMode::Deterministic => Projection::Deterministic,
            ProjectionMode::Reparameterized => Projection::Reparameterized { seed: self.seed() },
        };
        if self.cfg.rpa.enabled {
            lp.refiner = Some(&refiner);
            lp.trace_mask = Some(masks);
        }
        lp.run(&x_start, input, &Conditioning::new(prompt), t1)
    }
}

/// Box filter over neighbouring frames (`radius` each side, clamped at the ends).
pub fn temporal_smooth(z: &LatentTensor, radius: usize) -> Result<LatentTensor> {
    let [f, h, w, c] = z.shape();
    let per = h * w * c;
    let mut data = Vec::with_capacity(z.len());
    for fi in 0..f {
        let (lo, hi) = (fi.saturating_sub(radius), (fi + radius).min(f - 1));
        let n = (hi - lo + 1) as f64;
        for i in 0..per {
            data.push((lo..=hi).map(|k| z.data()[k * per + i]).sum::<f64>() / n);
        }
    }
    LatentTensor::new(z.shape(), data)
}
