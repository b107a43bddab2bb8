//! Contracts for every learned component the pipeline relies on, with
//! analytic toy implementations and an HTTP bridge to real models.

mod denoise;
pub mod remote;
mod toy;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use denoise::{oracle_eps, run_ddim, AnchoredDenoiser, GaussianPriorDenoiser, OracleDenoiser};
pub use toy::{
    estimate_offsets, laplacian_fill, prompt_tint, synthetic_background, toy_decode, toy_encode, LaplacianInpainter,
    SyntheticBackground, ToyCodec, ToyRelighter, ToyRelighterParams, DEFAULT_SIGMA_SCALE,
};

use crate::error::Result;
use crate::scheduler::{LatentTensor, NoiseSchedule};
use crate::video::{MaskClip, VideoClip};

/// Lower bound applied to every codec standard deviation.
pub const SIGMA_MIN: f64 = 1e-4;

/// Prompt plus an opaque control payload forwarded untouched to denoisers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub prompt: String,
    #[serde(default)]
    pub aux: Vec<u8>,
}

impl Conditioning {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            aux: Vec::new(),
        }
    }
}

/// A video VAE: `encode` yields the posterior mean and standard deviation.
pub trait LatentCodec {
    fn name(&self) -> &str;

    fn latent_shape(&self, clip_shape: [usize; 4]) -> Result<[usize; 4]>;

    /// Raw posterior moments; callers normally use [`LatentCodec::encode`].
    fn encode_moments(&self, clip: &VideoClip) -> Result<(LatentTensor, LatentTensor)>;

    fn decode(&self, latent: &LatentTensor) -> Result<VideoClip>;

    /// Posterior moments with `sigma` clamped to at least [`SIGMA_MIN`].
    fn encode(&self, clip: &VideoClip) -> Result<(LatentTensor, LatentTensor)> {
        let (mu, sigma) = self.encode_moments(clip)?;
        Ok((mu, sigma.map(|s| s.max(SIGMA_MIN))?))
    }

    fn encode_mean(&self, clip: &VideoClip) -> Result<LatentTensor> {
        Ok(self.encode_moments(clip)?.0)
    }
}

/// Noise predictor `eps(x_t, c, t)`.
pub trait Denoiser {
    fn eps(&self, x_t: &LatentTensor, cond: &Conditioning, t: usize) -> Result<LatentTensor>;
}

/// Image-guided and text-guided relighting.
pub trait Relighter {
    fn relight_image_guided(&self, fg: &VideoClip, bg: &VideoClip) -> Result<VideoClip>;

    /// Denoises `noisy` (noised to the start of the last `steps` inference
    /// steps) under the foreground condition and prompt.
    fn relight_text_guided_denoise(
        &self,
        noisy: &VideoClip,
        fg: &VideoClip,
        prompt: &str,
        steps: usize,
        cross_frame: bool,
    ) -> Result<VideoClip>;
}

/// Replaces the region where `mask > 0`; pixels with `mask = 0` come back
/// unchanged.
pub trait Inpainter {
    fn fill(&self, clip: &VideoClip, mask: &MaskClip) -> Result<VideoClip>;
}

/// Extends a first frame into a clip following the motion of `input`.
pub trait BackgroundProvider {
    fn generate(&self, input: &VideoClip, first_frame: &VideoClip, seed: u64) -> Result<VideoClip>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Toy,
    Remote,
}

/// How the stage-3 video denoiser is obtained for a given run.
pub enum DenoiserSource {
    /// [`AnchoredDenoiser`] with the given per-step pull.
    Toy {
        pull: f64,
    },
    Remote(Arc<remote::RemoteClient>),
}

impl DenoiserSource {
    /// `anchor` is the clean latent the toy model believes in and `noise` the
    /// noise the SDEdit start was built from. Remote models ignore both.
    pub fn bind(
        &self,
        schedule: &NoiseSchedule,
        anchor: LatentTensor,
        noise: LatentTensor,
    ) -> Result<Box<dyn Denoiser>> {
        Ok(match self {
            DenoiserSource::Toy { pull } => Box::new(AnchoredDenoiser::new(schedule.clone(), anchor, noise, *pull)?),
            DenoiserSource::Remote(client) => Box::new(remote::RemoteDenoiser::new(client.clone())),
        })
    }
}

/// The bound set of model implementations for one pipeline run.
pub struct BackendSet {
    pub codec: Box<dyn LatentCodec>,
    pub denoiser: DenoiserSource,
    pub relighter: Box<dyn Relighter>,
    pub inpainter: Box<dyn Inpainter>,
    pub background: Box<dyn BackgroundProvider>,
}
