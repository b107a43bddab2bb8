//! HTTP bridge to externally hosted models.
//!
//! Every call is a POST of `{op, shape, dtype: "f32", data_b64, params}` and
//! answers `{shape, data_b64}` (optionally with extra named tensors in
//! `aux`) or `{error}`. Tensor payloads are row-major little-endian `f32`,
//! base64 encoded. Secondary tensor inputs travel inside `params` using the
//! same `{shape, dtype, data_b64}` layout.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackgroundProvider, Conditioning, Denoiser, Inpainter, LatentCodec, Relighter};
use crate::error::{Error, Result};
use crate::scheduler::LatentTensor;
use crate::video::{MaskClip, VideoClip, DEFAULT_FPS};

pub const DTYPE: &str = "f32";
const BODY_LIMIT: u64 = 1 << 31;

pub fn encode_f32(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f32(b64: &str) -> std::result::Result<Vec<f32>, String> {
    let bytes = STANDARD.decode(b64).map_err(|e| format!("invalid base64: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err(format!("payload of {} bytes is not a whole number of f32", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTensor {
    pub shape: Vec<usize>,
    #[serde(default = "default_dtype")]
    pub dtype: String,
    pub data_b64: String,
}

fn default_dtype() -> String {
    DTYPE.to_string()
}

impl WireTensor {
    pub fn new(shape: &[usize], values: &[f32]) -> Self {
        Self {
            shape: shape.to_vec(),
            dtype: default_dtype(),
            data_b64: encode_f32(values),
        }
    }

    pub fn values(&self) -> std::result::Result<Vec<f32>, String> {
        if self.dtype != DTYPE {
            return Err(format!("unsupported dtype {:?}", self.dtype));
        }
        let values = decode_f32(&self.data_b64)?;
        let expected: usize = self.shape.iter().product();
        if values.len() != expected {
            return Err(format!(
                "shape {:?} needs {expected} values, payload has {}",
                self.shape,
                values.len()
            ));
        }
        Ok(values)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("tensor serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub op: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub data_b64: String,
    #[serde(default)]
    pub params: Value,
}

impl WireRequest {
    pub fn tensor(&self) -> WireTensor {
        WireTensor {
            shape: self.shape.clone(),
            dtype: self.dtype.clone(),
            data_b64: self.data_b64.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub aux: BTreeMap<String, WireTensor>,
}

impl WireResponse {
    pub fn ok(tensor: WireTensor) -> Self {
        Self {
            shape: Some(tensor.shape),
            data_b64: Some(tensor.data_b64),
            ..Self::default()
        }
    }

    pub fn error(message: impl Into<String>) -> Self {
        Self {
            error: Some(message.into()),
            ..Self::default()
        }
    }
}

/// Result of one remote call: the primary tensor plus named extras.
#[derive(Debug, Clone)]
pub struct Reply {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    pub aux: BTreeMap<String, WireTensor>,
}

pub struct RemoteClient {
    base_url: String,
    agent: ureq::Agent,
}

impl std::fmt::Debug for RemoteClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteClient")
            .field("base_url", &self.base_url)
            .finish()
    }
}

impl RemoteClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(600)))
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn call(&self, op: &str, shape: &[usize], values: &[f32], params: Value) -> Result<Reply> {
        let request = WireRequest {
            op: op.to_string(),
            shape: shape.to_vec(),
            dtype: DTYPE.to_string(),
            data_b64: encode_f32(values),
            params,
        };
        let url = format!("{}/{op}", self.base_url);
        let fail = |msg: String| Error::backend(format!("remote {op}"), msg);
        let mut response = self
            .agent
            .post(&url)
            .send_json(&request)
            .map_err(|e| fail(format!("{url}: {e}")))?;
        let status = response.status();
        let body: WireResponse = response
            .body_mut()
            .with_config()
            .limit(BODY_LIMIT)
            .read_json()
            .map_err(|e| fail(format!("HTTP {status}: unreadable response: {e}")))?;
        if let Some(message) = body.error {
            return Err(fail(format!("HTTP {status}: {message}")));
        }
        if !status.is_success() {
            return Err(fail(format!("HTTP {status}")));
        }
        let (shape, data) = match (body.shape, body.data_b64) {
            (Some(s), Some(d)) => (s, d),
            _ => return Err(fail("response lacks shape or data_b64".into())),
        };
        let tensor = WireTensor {
            shape,
            dtype: DTYPE.to_string(),
            data_b64: data,
        };
        let values = tensor.values().map_err(fail)?;
        Ok(Reply {
            shape: tensor.shape,
            values,
            aux: body.aux,
        })
    }
}

fn shape4(shape: &[usize], op: &str) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(shape).map_err(|_| {
        Error::backend(
            format!("remote {op}"),
            format!("expected a rank-4 tensor, got shape {shape:?}"),
        )
    })
}

fn clip_from(reply: Reply, op: &str, fps: f32) -> Result<VideoClip> {
    let [f, h, w, c] = shape4(&reply.shape, op)?;
    if c != crate::video::CHANNELS {
        return Err(Error::backend(
            format!("remote {op}"),
            format!("expected 3 channels, got {c}"),
        ));
    }
    VideoClip::new(f, h, w, reply.values, fps)
}

fn latent_from(shape: &[usize], values: Vec<f32>, op: &str) -> Result<LatentTensor> {
    LatentTensor::new(shape4(shape, op)?, values.into_iter().map(f64::from).collect())
}

fn latent_values(latent: &LatentTensor) -> Vec<f32> {
    latent.data().iter().map(|&v| v as f32).collect()
}

fn clip_param(clip: &VideoClip) -> Value {
    WireTensor::new(&clip.shape(), clip.data()).to_json()
}

fn mask_param(mask: &MaskClip) -> Value {
    WireTensor::new(&[mask.frames(), mask.height(), mask.width(), 1], mask.values()).to_json()
}

pub struct RemoteCodec {
    client: Arc<RemoteClient>,
}

impl RemoteCodec {
    pub fn new(client: Arc<RemoteClient>) -> Self {
        Self { client }
    }
}

impl LatentCodec for RemoteCodec {
    fn name(&self) -> &str {
        "remote"
    }

    fn latent_shape(&self, clip_shape: [usize; 4]) -> Result<[usize; 4]> {
        // Only the server knows its compression; probe with a blank clip.
        let [_, h, w, c] = clip_shape;
        let probe = VideoClip::filled(clip_shape[0], h, w, 0.0)?;
        debug_assert_eq!(c, crate::video::CHANNELS);
        Ok(self.encode_moments(&probe)?.0.shape())
    }

    fn encode_moments(&self, clip: &VideoClip) -> Result<(LatentTensor, LatentTensor)> {
        let reply = self.client.call("encode", &clip.shape(), clip.data(), json!({}))?;
        let sigma = reply
            .aux
            .get("sigma")
            .ok_or_else(|| Error::backend("remote encode", "response lacks aux.sigma"))?;
        let sigma_values = sigma.values().map_err(|e| Error::backend("remote encode", e))?;
        if sigma.shape != reply.shape {
            return Err(Error::backend(
                "remote encode",
                format!(
                    "sigma shape {:?} differs from mean shape {:?}",
                    sigma.shape, reply.shape
                ),
            ));
        }
        let mu = latent_from(&reply.shape, reply.values, "encode")?;
        let sigma = latent_from(&sigma.shape, sigma_values, "encode")?;
        Ok((mu, sigma))
    }

    fn decode(&self, latent: &LatentTensor) -> Result<VideoClip> {
        let reply = self
            .client
            .call("decode", &latent.shape(), &latent_values(latent), json!({}))?;
        clip_from(reply, "decode", DEFAULT_FPS)
    }
}

pub struct RemoteDenoiser {
    client: Arc<RemoteClient>,
}

impl RemoteDenoiser {
    pub fn new(client: Arc<RemoteClient>) -> Self {
        Self { client }
    }
}

impl Denoiser for RemoteDenoiser {
    fn eps(&self, x_t: &LatentTensor, cond: &Conditioning, t: usize) -> Result<LatentTensor> {
        let params = json!({ "t": t, "prompt": cond.prompt, "aux_b64": STANDARD.encode(&cond.aux) });
        let reply = self.client.call("eps", &x_t.shape(), &latent_values(x_t), params)?;
        let eps = latent_from(&reply.shape, reply.values, "eps")?;
        x_t.ensure_same_shape(&eps, "remote eps")?;
        Ok(eps)
    }
}

pub struct RemoteRelighter {
    client: Arc<RemoteClient>,
}

impl RemoteRelighter {
    pub fn new(client: Arc<RemoteClient>) -> Self {
        Self { client }
    }
}

impl Relighter for RemoteRelighter {
    fn relight_image_guided(&self, fg: &VideoClip, bg: &VideoClip) -> Result<VideoClip> {
        let reply = self
            .client
            .call("relight_img", &fg.shape(), fg.data(), json!({ "bg": clip_param(bg) }))?;
        let out = clip_from(reply, "relight_img", fg.fps())?;
        out.ensure_same_shape(fg, "remote relight_img")?;
        Ok(out)
    }

    fn relight_text_guided_denoise(
        &self,
        noisy: &VideoClip,
        fg: &VideoClip,
        prompt: &str,
        steps: usize,
        cross_frame: bool,
    ) -> Result<VideoClip> {
        let params = json!({
            "fg": clip_param(fg),
            "prompt": prompt,
            "steps": steps,
            "cross_frame": cross_frame,
        });
        let reply = self.client.call("relight_txt", &noisy.shape(), noisy.data(), params)?;
        let out = clip_from(reply, "relight_txt", noisy.fps())?;
        out.ensure_same_shape(noisy, "remote relight_txt")?;
        Ok(out)
    }
}

pub struct RemoteInpainter {
    client: Arc<RemoteClient>,
}

impl RemoteInpainter {
    pub fn new(client: Arc<RemoteClient>) -> Self {
        Self { client }
    }
}

impl Inpainter for RemoteInpainter {
    fn fill(&self, clip: &VideoClip, mask: &MaskClip) -> Result<VideoClip> {
        mask.ensure_matches(clip, "remote inpaint")?;
        let reply = self.client.call(
            "inpaint",
            &clip.shape(),
            clip.data(),
            json!({ "mask": mask_param(mask) }),
        )?;
        let filled = clip_from(reply, "inpaint", clip.fps())?;
        filled.ensure_same_shape(clip, "remote inpaint")?;
        // Pixels outside the mask are ours, whatever the server sends back.
        let data = filled
            .data()
            .iter()
            .zip(clip.data())
            .enumerate()
            .map(|(i, (&new, &old))| {
                if mask.values()[i / crate::video::CHANNELS] > 0.0 {
                    new
                } else {
                    old
                }
            })
            .collect();
        VideoClip::new(clip.frames(), clip.height(), clip.width(), data, clip.fps())
    }
}

pub struct RemoteBackground {
    client: Arc<RemoteClient>,
}

impl RemoteBackground {
    pub fn new(client: Arc<RemoteClient>) -> Self {
        Self { client }
    }
}

impl BackgroundProvider for RemoteBackground {
    fn generate(&self, input: &VideoClip, first_frame: &VideoClip, seed: u64) -> Result<VideoClip> {
        let params = json!({ "first_frame": clip_param(first_frame), "seed": seed });
        let reply = self.client.call("background", &input.shape(), input.data(), params)?;
        let out = clip_from(reply, "background", input.fps())?;
        out.ensure_same_shape(input, "remote background")?;
        Ok(out)
    }
}
