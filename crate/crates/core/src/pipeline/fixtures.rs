//! Synthetic test clips with known motion and foreground texture.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::clip_io::{save_clip, save_mask, FrameFormat};
use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};
use crate::video::{MaskClip, VideoClip, DEFAULT_FPS};

use super::PipelineConfig;

pub const PAN_PROMPT: &str = "warm sunset over a quiet beach";
pub const TEXTURED_PROMPT: &str = "cool moonlight in a neon city";

#[derive(Debug, Clone)]
pub struct Fixture {
    pub input: VideoClip,
    pub masks: MaskClip,
    /// Content displacement per frame, `(dy, dx)`.
    pub motion: (i64, i64),
}

struct Waves(Vec<(f32, f32, f32, f32, usize)>);

impl Waves {
    /// `count` plane waves with periods in `periods` and amplitudes in `amps`.
    fn new(rng: &mut impl Rng, count: usize, periods: (f32, f32), amps: (f32, f32)) -> Self {
        Waves(
            (0..count)
                .map(|i| {
                    let period = rng.random_range(periods.0..periods.1);
                    let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
                    let k = std::f32::consts::TAU / period;
                    (
                        k * angle.cos(),
                        k * angle.sin(),
                        rng.random_range(0.0..std::f32::consts::TAU),
                        rng.random_range(amps.0..amps.1),
                        i % 3,
                    )
                })
                .collect(),
        )
    }

    fn at(&self, y: f32, x: f32, c: usize) -> f32 {
        self.0
            .iter()
            .map(|&(ky, kx, ph, a, home)| {
                // Each wave is strongest in its home channel.
                let weight = if home == c { 1.0 } else { 0.5 };
                weight * a * (ky * y + kx * x + ph).sin()
            })
            .sum()
    }
}

struct Spec {
    frames: usize,
    height: usize,
    width: usize,
    motion: (i64, i64),
    fg_radii: (f32, f32),
    fg_periods: (f32, f32),
    fg_amps: (f32, f32),
    bg_detail_amps: (f32, f32),
    flicker: f32,
    fg_base: [f32; 3],
    bg_base: [f32; 3],
}

fn build(seed: u64, tag: u64, s: &Spec) -> Result<Fixture> {
    let mut rng = rng_for(seed, Stream::Fixture, tag, 0);
    let bg_smooth = Waves::new(&mut rng, 4, (18.0, 40.0), (0.05, 0.1));
    let bg_detail = Waves::new(&mut rng, 4, (6.0, 12.0), s.bg_detail_amps);
    let fg_detail = Waves::new(&mut rng, 6, s.fg_periods, s.fg_amps);
    let flicker: Vec<f32> = (0..s.frames)
        .map(|_| rng.random_range(-s.flicker..=s.flicker))
        .collect();
    // Subject starts left of centre so it stays in view while panning.
    let span = (s.motion.1 * (s.frames as i64 - 1)) as f32;
    let (cy, cx) = (s.height as f32 / 2.0 - 0.5, s.width as f32 / 2.0 - 0.5 - span / 2.0);
    let inside = |y: f32, x: f32| {
        let (dy, dx) = ((y - cy) / s.fg_radii.0, (x - cx) / s.fg_radii.1);
        dy * dy + dx * dx <= 1.0
    };
    // The whole scene, subject included, translates past the camera.
    let scene = |f: usize, y: usize, x: usize| {
        let sy = y as f32 - (s.motion.0 * f as i64) as f32;
        let sx = x as f32 - (s.motion.1 * f as i64) as f32;
        (sy, sx)
    };
    let input = VideoClip::from_fn(s.frames, s.height, s.width, |f, y, x, c| {
        let (sy, sx) = scene(f, y, x);
        let v = if inside(sy, sx) {
            s.fg_base[c] + fg_detail.at(sy, sx, c)
        } else {
            s.bg_base[c] + bg_smooth.at(sy, sx, c) + bg_detail.at(sy, sx, c)
        };
        (v + flicker[f]).clamp(0.0, 1.0)
    })?
    .with_fps(DEFAULT_FPS);
    let masks = MaskClip::from_fn(s.frames, s.height, s.width, |f, y, x| {
        let (sy, sx) = scene(f, y, x);
        if inside(sy, sx) {
            1.0
        } else {
            0.0
        }
    })?;
    Ok(Fixture {
        input,
        masks,
        motion: s.motion,
    })
}

/// 8 frames of 32x48: a textured subject and its surroundings panning
/// +2 px/frame.
pub fn pan_fixture(seed: u64) -> Result<Fixture> {
    build(
        seed,
        1,
        &Spec {
            frames: 8,
            height: 32,
            width: 48,
            motion: (0, 2),
            fg_radii: (10.0, 9.0),
            fg_periods: (6.0, 10.0),
            fg_amps: (0.04, 0.07),
            bg_detail_amps: (0.03, 0.06),
            flicker: 0.03,
            fg_base: [0.55, 0.45, 0.4],
            bg_base: [0.45, 0.5, 0.55],
        },
    )
}

/// 8 frames of 96x128: a large subject with strong 8-12 px texture over a
/// mostly smooth backdrop, panning +1 px/frame.
pub fn textured_fixture(seed: u64) -> Result<Fixture> {
    build(
        seed,
        2,
        &Spec {
            frames: 8,
            height: 96,
            width: 128,
            motion: (0, 1),
            fg_radii: (36.0, 34.0),
            fg_periods: (8.0, 12.0),
            fg_amps: (0.07, 0.1),
            bg_detail_amps: (0.005, 0.01),
            flicker: 0.005,
            fg_base: [0.5, 0.48, 0.45],
            bg_base: [0.5, 0.52, 0.5],
        },
    )
}

/// Single backdrop frame matching the pan fixture, for image-guided runs.
pub fn pan_backdrop(seed: u64) -> Result<VideoClip> {
    let mut rng = rng_for(seed, Stream::Fixture, 3, 0);
    let waves = Waves::new(&mut rng, 5, (10.0, 30.0), (0.05, 0.1));
    VideoClip::from_fn(1, 32, 48, |_, y, x, c| {
        (0.5 + waves.at(y as f32, x as f32, c)).clamp(0.0, 1.0)
    })
}

#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub dir: PathBuf,
    pub input: PathBuf,
    pub masks: PathBuf,
    pub config: PathBuf,
}

fn write_fixture(dir: &Path, fixture: &Fixture, prompt: &str, seed: u64) -> Result<FixturePaths> {
    let input = dir.join("input");
    let masks = dir.join("masks");
    save_clip(&fixture.input, &input, FrameFormat::Raw32)?;
    save_mask(&fixture.masks, &masks, FrameFormat::Raw32)?;
    let mut cfg = PipelineConfig::new("input", "masks", prompt, "run");
    cfg.seed = seed;
    let config = dir.join("config.json");
    write_config(&config, &cfg)?;
    Ok(FixturePaths {
        dir: dir.to_path_buf(),
        input,
        masks,
        config,
    })
}

fn write_config(path: &Path, cfg: &PipelineConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `pan/` and `textured/` fixtures (clips, masks, text-mode configs)
/// plus `pan/backdrop` and `pan/config_image.json` for image-guided runs.
pub fn make_fixtures(out: &Path, seed: u64) -> Result<(FixturePaths, FixturePaths)> {
    let pan = write_fixture(&out.join("pan"), &pan_fixture(seed)?, PAN_PROMPT, seed)?;
    let textured = write_fixture(&out.join("textured"), &textured_fixture(seed)?, TEXTURED_PROMPT, seed)?;
    save_clip(&pan_backdrop(seed)?, &pan.dir.join("backdrop"), FrameFormat::Raw32)?;
    let mut image_cfg = PipelineConfig::new("input", "masks", "", "run_image");
    image_cfg.prompt = None;
    image_cfg.background_image = Some("backdrop".into());
    image_cfg.seed = seed;
    write_config(&pan.dir.join("config_image.json"), &image_cfg)?;
    Ok((pan, textured))
}
