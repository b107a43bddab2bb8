//! Dense video and mask containers.
//!
//! Frames are stored frame-major, row-major, channel-interleaved as `f32`.
//! Values are nominally in `[0, 1]` but intermediate stages may over- or
//! undershoot; clamping only happens when a clip is quantized on save.

use crate::error::{Error, Result};

/// Every clip carries exactly three channels.
pub const CHANNELS: usize = 3;
/// Smallest accepted frame edge.
pub const MIN_EDGE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    fps: f32,
}

impl VideoClip {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>, fps: f32) -> Result<Self> {
        if frames == 0 {
            return Err(Error::InvalidClip("clip has no frames".into()));
        }
        if height < MIN_EDGE || width < MIN_EDGE {
            return Err(Error::InvalidClip(format!(
                "frame {height}x{width} smaller than {MIN_EDGE}x{MIN_EDGE}"
            )));
        }
        let expected = frames * height * width * CHANNELS;
        if data.len() != expected {
            return Err(Error::InvalidClip(format!(
                "expected {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidClip(format!("non-finite value at index {pos}")));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
            fps,
        })
    }

    pub fn filled(frames: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(
            frames,
            height,
            width,
            vec![value; frames * height * width * CHANNELS],
            DEFAULT_FPS,
        )
    }

    /// Builds a clip by evaluating `f(frame, y, x, channel)` at every element.
    pub fn from_fn(
        frames: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(frames * height * width * CHANNELS);
        for fi in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    for c in 0..CHANNELS {
                        data.push(f(fi, y, x, c));
                    }
                }
            }
        }
        Self::new(frames, height, width, data, DEFAULT_FPS)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn with_fps(mut self, fps: f32) -> Self {
        self.fps = fps;
        self
    }

    /// `[frames, height, width, channels]`
    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, CHANNELS]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    #[inline]
    pub fn index(&self, f: usize, y: usize, x: usize, c: usize) -> usize {
        ((f * self.height + y) * self.width + x) * CHANNELS + c
    }

    #[inline]
    pub fn get(&self, f: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(f, y, x, c)]
    }

    /// Extracts a contiguous range of frames as a new clip.
    pub fn frames_range(&self, start: usize, count: usize) -> Result<VideoClip> {
        if count == 0 || start + count > self.frames {
            return Err(Error::InvalidClip(format!(
                "frame range {start}..{} outside 0..{}",
                start + count,
                self.frames
            )));
        }
        let n = self.frame_len();
        VideoClip::new(
            count,
            self.height,
            self.width,
            self.data[start * n..(start + count) * n].to_vec(),
            self.fps,
        )
    }

    /// Repeats a single frame `count` times.
    pub fn repeat_frame(&self, f: usize, count: usize) -> Result<VideoClip> {
        let frame = self.frame(f);
        let data = frame.iter().copied().cycle().take(frame.len() * count).collect();
        VideoClip::new(count, self.height, self.width, data, self.fps)
    }

    /// Concatenates per-frame clips of identical spatial size along time.
    pub fn concat_frames(parts: &[VideoClip]) -> Result<VideoClip> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidClip("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut frames = 0;
        for part in parts {
            if part.height != first.height || part.width != first.width {
                return Err(Error::shape("concat_frames", &first.shape(), &part.shape()));
            }
            data.extend_from_slice(&part.data);
            frames += part.frames;
        }
        VideoClip::new(frames, first.height, first.width, data, first.fps)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<VideoClip> {
        VideoClip::new(
            self.frames,
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
            self.fps,
        )
    }

    pub fn zip_map(&self, other: &VideoClip, f: impl Fn(f32, f32) -> f32) -> Result<VideoClip> {
        self.ensure_same_shape(other, "zip_map")?;
        VideoClip::new(
            self.frames,
            self.height,
            self.width,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            self.fps,
        )
    }

    pub fn add(&self, other: &VideoClip) -> Result<VideoClip> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &VideoClip) -> Result<VideoClip> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn ensure_same_shape(&self, other: &VideoClip, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(context, &self.shape(), &other.shape()));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &VideoClip) -> Result<f32> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

pub const DEFAULT_FPS: f32 = 8.0;

/// Per-frame soft masks. Values are clamped into `[0, 1]` at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskClip {
    frames: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl MaskClip {
    pub fn new(frames: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidClip("empty mask".into()));
        }
        if values.len() != frames * height * width {
            return Err(Error::InvalidClip(format!(
                "mask expected {} values, got {}",
                frames * height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidClip("non-finite mask value".into()));
        }
        let values = values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self {
            frames,
            height,
            width,
            values,
        })
    }

    pub fn filled(frames: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(frames, height, width, vec![value; frames * height * width])
    }

    pub fn from_fn(
        frames: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(frames * height * width);
        for fi in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    values.push(f(fi, y, x));
                }
            }
        }
        Self::new(frames, height, width, values)
    }

    /// Collapses a clip into a mask by averaging its channels.
    pub fn from_clip(clip: &VideoClip) -> Result<Self> {
        let values = clip
            .data()
            .chunks_exact(CHANNELS)
            .map(|px| px.iter().sum::<f32>() / CHANNELS as f32)
            .collect();
        Self::new(clip.frames(), clip.height(), clip.width(), values)
    }

    /// Renders the mask as a grey clip, e.g. for saving.
    pub fn to_clip(&self) -> Result<VideoClip> {
        let data = self.values.iter().flat_map(|&v| [v; CHANNELS]).collect();
        VideoClip::new(self.frames, self.height, self.width, data, DEFAULT_FPS)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[f * n..(f + 1) * n]
    }

    #[inline]
    pub fn get(&self, f: usize, y: usize, x: usize) -> f32 {
        self.values[(f * self.height + y) * self.width + x]
    }

    pub fn matches(&self, clip: &VideoClip) -> bool {
        self.frames == clip.frames() && self.height == clip.height() && self.width == clip.width()
    }

    pub fn ensure_matches(&self, clip: &VideoClip, context: &'static str) -> Result<()> {
        if !self.matches(clip) {
            return Err(Error::shape(
                context,
                &[self.frames, self.height, self.width],
                &clip.shape()[..3],
            ));
        }
        Ok(())
    }

    pub fn is_all(&self, value: f32) -> bool {
        self.values.iter().all(|&v| v == value)
    }

    pub fn frames_range(&self, start: usize, count: usize) -> Result<MaskClip> {
        let n = self.height * self.width;
        if count == 0 || start + count > self.frames {
            return Err(Error::InvalidClip("mask frame range out of bounds".into()));
        }
        MaskClip::new(
            count,
            self.height,
            self.width,
            self.values[start * n..(start + count) * n].to_vec(),
        )
    }

    /// Grey-level dilation with a square structuring element of half-width `px`.
    pub fn dilate(&self, px: usize) -> MaskClip {
        if px == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0f32; self.values.len()];
        let mut rows = vec![0.0f32; h * w];
        for f in 0..self.frames {
            let src = self.frame(f);
            for y in 0..h {
                for x in 0..w {
                    let lo = x.saturating_sub(px);
                    let hi = (x + px).min(w - 1);
                    rows[y * w + x] = src[y * w + lo..=y * w + hi].iter().copied().fold(0.0, f32::max);
                }
            }
            let dst = &mut out[f * h * w..(f + 1) * h * w];
            for y in 0..h {
                let lo = y.saturating_sub(px);
                let hi = (y + px).min(h - 1);
                for x in 0..w {
                    dst[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).fold(0.0, f32::max);
                }
            }
        }
        MaskClip {
            frames: self.frames,
            height: h,
            width: w,
            values: out,
        }
    }
}

/// `mask * fg + (1 - mask) * bg`, per channel.
pub fn composite(fg: &VideoClip, bg: &VideoClip, mask: &MaskClip) -> Result<VideoClip> {
    fg.ensure_same_shape(bg, "composite")?;
    mask.ensure_matches(fg, "composite")?;
    let data = fg
        .data()
        .chunks_exact(CHANNELS)
        .zip(bg.data().chunks_exact(CHANNELS))
        .zip(mask.values())
        .flat_map(|((a, b), &m)| {
            let mut px = [0.0f32; CHANNELS];
            for c in 0..CHANNELS {
                px[c] = m * a[c] + (1.0 - m) * b[c];
            }
            px
        })
        .collect();
    VideoClip::new(fg.frames(), fg.height(), fg.width(), data, fg.fps())
}
