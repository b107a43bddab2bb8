//! Background replacement for videos with a latent video diffusion model.
//!
//! The engine generates a motion-matched background, harmonizes the
//! foreground's lighting in two SDEdit steps and then re-denoises the clip
//! with a video model while a refinement projection keeps the foreground's
//! high-frequency detail. All learned components sit behind traits in
//! [`backends`], with analytic toy implementations and an HTTP bridge.

#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod backends;
pub mod clip_io;
pub mod error;
pub mod frequency;
pub mod metrics;
pub mod pipeline;
pub mod resample;
pub mod rng;
pub mod rpa;
pub mod scheduler;
pub mod video;

pub use error::{Error, ErrorKind, Result};
pub use scheduler::{LatentTensor, NoiseSchedule};
pub use video::{MaskClip, VideoClip};
