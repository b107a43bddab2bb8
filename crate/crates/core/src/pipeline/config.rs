use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::{BackendKind, ToyRelighterParams, DEFAULT_SIGMA_SCALE};
use crate::clip_io::FrameFormat;
use crate::error::{Error, Result};
use crate::frequency::BlurSpec;
use crate::scheduler::{steps_from_fraction, ScheduleParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default = "toy")]
    pub codec: BackendKind,
    #[serde(default = "toy")]
    pub denoiser: BackendKind,
    #[serde(default = "toy")]
    pub relighter: BackendKind,
    #[serde(default = "toy")]
    pub inpainter: BackendKind,
    #[serde(default = "toy")]
    pub background: BackendKind,
    /// Base URL of the model server; required when any backend is remote.
    #[serde(default)]
    pub remote_url: Option<String>,
}

fn toy() -> BackendKind {
    BackendKind::Toy
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            codec: toy(),
            denoiser: toy(),
            relighter: toy(),
            inpainter: toy(),
            background: toy(),
            remote_url: None,
        }
    }
}

impl BackendConfig {
    pub fn any_remote(&self) -> bool {
        [
            self.codec,
            self.denoiser,
            self.relighter,
            self.inpainter,
            self.background,
        ]
        .contains(&BackendKind::Remote)
    }

    pub fn all(kind: BackendKind) -> Self {
        Self {
            codec: kind,
            denoiser: kind,
            relighter: kind,
            inpainter: kind,
            background: kind,
            remote_url: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarmonizeConfig {
    #[serde(default = "yes")]
    pub cross_frame: bool,
}

fn yes() -> bool {
    true
}

impl Default for HarmonizeConfig {
    fn default() -> Self {
        Self { cross_frame: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpaConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
    #[serde(default = "default_dilate")]
    pub mask_dilate_px: usize,
    /// JSON-lines per-step trace.
    #[serde(default)]
    pub trace_path: Option<PathBuf>,
    #[serde(default)]
    pub projection: ProjectionMode,
}

/// How refined frames return to latent space.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    #[default]
    Deterministic,
    /// Fresh random `eps` per step, seeded from the run seed.
    Reparameterized,
}

/// Floor on both deviations in the projection. The toy codec's local
/// deviations sit well below this, which keeps `sigma_hat / sigma` at one.
pub const DEFAULT_RPA_SIGMA_MIN: f64 = 1e-2;

fn default_sigma_min() -> f64 {
    DEFAULT_RPA_SIGMA_MIN
}

fn default_dilate() -> usize {
    2
}

impl Default for RpaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            sigma_min: DEFAULT_RPA_SIGMA_MIN,
            mask_dilate_px: default_dilate(),
            trace_path: None,
            projection: ProjectionMode::Deterministic,
        }
    }
}

/// Knobs of the analytic backends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    /// Per-step pull of the video denoiser towards its temporally smoothed anchor.
    #[serde(default = "default_pull")]
    pub pull: f64,
    #[serde(default = "default_sigma_scale")]
    pub sigma_scale: f64,
    #[serde(default)]
    pub relighter: ToyRelighterParams,
}

fn default_pull() -> f64 {
    0.35
}

fn default_sigma_scale() -> f64 {
    DEFAULT_SIGMA_SCALE
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            pull: default_pull(),
            sigma_scale: default_sigma_scale(),
            relighter: ToyRelighterParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Strong,
    Weak,
}

impl Preset {
    pub fn fraction(self) -> f64 {
        match self {
            Preset::Strong => 0.7,
            Preset::Weak => 0.4,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strong" => Ok(Preset::Strong),
            "weak" => Ok(Preset::Weak),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected strong or weak)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Input clip manifest (or its directory).
    pub input: PathBuf,
    /// Foreground mask manifest (or its directory).
    pub masks: PathBuf,
    #[serde(default)]
    pub prompt: Option<String>,
    /// Single-frame clip manifest used as the first background frame.
    #[serde(default)]
    pub background_image: Option<PathBuf>,
    #[serde(default = "default_t_train")]
    pub t_train: usize,
    #[serde(default = "default_t_infer")]
    pub t_infer: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    /// Harmonization steps; `round(0.7 * t_infer)` when absent.
    #[serde(default)]
    pub t0: Option<usize>,
    /// Enhancement steps; `round(0.7 * t_infer)` when absent.
    #[serde(default)]
    pub t1: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub blur: BlurSpec,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub harmonize: HarmonizeConfig,
    #[serde(default)]
    pub rpa: RpaConfig,
    #[serde(default)]
    pub toy: ToyConfig,
    #[serde(default = "default_output_format")]
    pub output_format: FrameFormat,
}

fn default_t_train() -> usize {
    ScheduleParams::default().t_train
}
fn default_t_infer() -> usize {
    ScheduleParams::default().t_infer
}
fn default_beta_start() -> f64 {
    ScheduleParams::default().beta_start
}
fn default_beta_end() -> f64 {
    ScheduleParams::default().beta_end
}
fn default_output_format() -> FrameFormat {
    FrameFormat::Raw32
}

impl PipelineConfig {
    /// Minimal text-mode config with every optional field at its default.
    pub fn new(
        input: impl Into<PathBuf>,
        masks: impl Into<PathBuf>,
        prompt: &str,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            input: input.into(),
            masks: masks.into(),
            prompt: Some(prompt.to_string()),
            background_image: None,
            t_train: default_t_train(),
            t_infer: default_t_infer(),
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
            t0: None,
            t1: None,
            seed: 0,
            output_dir: output_dir.into(),
            blur: BlurSpec::default(),
            backend: BackendConfig::default(),
            harmonize: HarmonizeConfig::default(),
            rpa: RpaConfig::default(),
            toy: ToyConfig::default(),
            output_format: default_output_format(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.input);
        join(&mut self.masks);
        join(&mut self.output_dir);
        if let Some(p) = self.background_image.as_mut() {
            join(p);
        }
        if let Some(p) = self.rpa.trace_path.as_mut() {
            join(p);
        }
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        let steps = steps_from_fraction(preset.fraction(), self.t_infer);
        self.t0 = Some(steps);
        self.t1 = Some(steps);
    }

    pub fn schedule_params(&self) -> ScheduleParams {
        ScheduleParams {
            t_train: self.t_train,
            t_infer: self.t_infer,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn t0(&self) -> usize {
        self.t0
            .unwrap_or_else(|| steps_from_fraction(Preset::Strong.fraction(), self.t_infer))
    }

    pub fn t1(&self) -> usize {
        self.t1
            .unwrap_or_else(|| steps_from_fraction(Preset::Strong.fraction(), self.t_infer))
    }

    /// Fills defaulted step counts and checks every invariant.
    pub fn resolve(&mut self) -> Result<()> {
        self.t0 = Some(self.t0());
        self.t1 = Some(self.t1());
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.prompt, &self.background_image) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "exactly one of prompt and background_image must be set".into(),
                ))
            }
        }
        crate::scheduler::NoiseSchedule::from_params(&self.schedule_params())?;
        for (name, steps) in [("t0", self.t0()), ("t1", self.t1())] {
            if steps > self.t_infer {
                return Err(Error::Config(format!(
                    "{name} = {steps} exceeds t_infer = {}",
                    self.t_infer
                )));
            }
        }
        self.blur.validate()?;
        if !(self.rpa.sigma_min > 0.0 && self.rpa.sigma_min.is_finite()) {
            return Err(Error::Config(format!(
                "rpa.sigma_min must be positive, got {}",
                self.rpa.sigma_min
            )));
        }
        if !(0.0..=1.0).contains(&self.toy.pull) {
            return Err(Error::Config(format!(
                "toy.pull must lie in [0, 1], got {}",
                self.toy.pull
            )));
        }
        if !(self.toy.sigma_scale >= 0.0 && self.toy.sigma_scale.is_finite()) {
            return Err(Error::Config(format!(
                "toy.sigma_scale must be non-negative, got {}",
                self.toy.sigma_scale
            )));
        }
        if !(self.toy.relighter.prior_std >= 0.0 && self.toy.relighter.feature_gain.is_finite()) {
            return Err(Error::Config(
                "toy.relighter parameters must be finite and non-negative".into(),
            ));
        }
        if self.backend.any_remote() && self.backend.remote_url.is_none() {
            return Err(Error::Config(
                "backend.remote_url is required when a backend is remote".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"input": "in", "masks": "m", "prompt": "sunset", "output_dir": "out"}"#
    }

    #[test]
    fn defaults_resolve_to_strong_steps() {
        let mut cfg = PipelineConfig::from_json(minimal()).unwrap();
        cfg.resolve().unwrap();
        assert_eq!((cfg.t0, cfg.t1), (Some(14), Some(14)));
        assert_eq!(cfg.blur, BlurSpec::default());
        assert!(cfg.harmonize.cross_frame && cfg.rpa.enabled);
        assert_eq!(cfg.rpa.mask_dilate_px, 2);
    }

    #[test]
    fn presets() {
        let mut cfg = PipelineConfig::from_json(minimal()).unwrap();
        cfg.apply_preset("weak".parse().unwrap());
        assert_eq!((cfg.t0(), cfg.t1()), (8, 8));
        cfg.apply_preset(Preset::Strong);
        assert_eq!((cfg.t0(), cfg.t1()), (14, 14));
        assert!("medium".parse::<Preset>().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"input": "in", "masks": "m", "prompt": "p", "output_dir": "o", "steps": 3}"#;
        assert!(matches!(PipelineConfig::from_json(text), Err(Error::Config(_))));
        let nested = r#"{"input": "in", "masks": "m", "prompt": "p", "output_dir": "o", "rpa": {"on": true}}"#;
        assert!(PipelineConfig::from_json(nested).is_err());
    }

    #[test]
    fn invariants() {
        let base = PipelineConfig::from_json(minimal()).unwrap();
        let mut both = base.clone();
        both.background_image = Some("bg".into());
        assert!(both.validate().is_err());
        let mut neither = base.clone();
        neither.prompt = None;
        assert!(neither.validate().is_err());
        let mut deep = base.clone();
        deep.t0 = Some(21);
        assert!(deep.validate().is_err());
        let mut edge = base.clone();
        edge.t0 = Some(20);
        edge.t1 = Some(0);
        assert!(edge.validate().is_ok());
        let mut remote = base.clone();
        remote.backend.codec = BackendKind::Remote;
        assert!(remote.validate().is_err());
        remote.backend.remote_url = Some("http://localhost:1".into());
        assert!(remote.validate().is_ok());
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let mut cfg = PipelineConfig::from_json(minimal()).unwrap();
        cfg.resolve_paths(Path::new("/data/run"));
        assert_eq!(cfg.input, PathBuf::from("/data/run/in"));
        assert_eq!(cfg.output_dir, PathBuf::from("/data/run/out"));
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = PipelineConfig::from_json(minimal()).unwrap();
        cfg.resolve().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json(&text).unwrap(), cfg);
    }
}
