//! Frame-sequence persistence: a `manifest.json` next to one file per frame.
//!
//! Raster frames are PNG (8 or 16 bits per channel). `raw32` frames use a
//! tiny bit-exact container: the magic `RPA1`, then `H`, `W`, `C` as
//! little-endian `u32`, then `H*W*C` little-endian `f32` values, row-major
//! and channel-interleaved.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{MaskClip, VideoClip, CHANNELS};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const RAW32_MAGIC: &[u8; 4] = b"RPA1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameFormat {
    Raster8,
    Raster16,
    Raw32,
}

impl FrameFormat {
    fn extension(self) -> &'static str {
        match self {
            FrameFormat::Raster8 | FrameFormat::Raster16 => "png",
            FrameFormat::Raw32 => "rpa",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipManifest {
    pub frames: Vec<String>,
    pub width: usize,
    pub height: usize,
    pub count: usize,
    pub fps: f32,
    pub format: FrameFormat,
}

impl ClipManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: ClipManifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if manifest.count != manifest.frames.len() {
            return Err(Error::format(
                path,
                format!(
                    "count {} disagrees with {} listed frames",
                    manifest.count,
                    manifest.frames.len()
                ),
            ));
        }
        Ok(manifest)
    }
}

/// Accepts either a manifest file or a directory holding `manifest.json`.
pub fn resolve_manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

pub fn load_clip(manifest_path: &Path) -> Result<VideoClip> {
    let manifest_path = resolve_manifest_path(manifest_path);
    let manifest = ClipManifest::read(&manifest_path)?;
    if manifest.frames.is_empty() {
        return Err(Error::format(&manifest_path, "manifest lists no frames"));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut data = Vec::with_capacity(manifest.count * manifest.height * manifest.width * CHANNELS);
    for name in &manifest.frames {
        let frame_path = dir.join(name);
        let (h, w, values) = read_frame(&frame_path, manifest.format)?;
        if h != manifest.height || w != manifest.width {
            return Err(Error::format(
                &frame_path,
                format!(
                    "dimension mismatch: frame is {h}x{w}, manifest declares {}x{}",
                    manifest.height, manifest.width
                ),
            ));
        }
        data.extend(values);
    }
    VideoClip::new(manifest.count, manifest.height, manifest.width, data, manifest.fps)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))
}

pub fn load_mask(manifest_path: &Path) -> Result<MaskClip> {
    MaskClip::from_clip(&load_clip(manifest_path)?)
}

pub fn save_clip(clip: &VideoClip, out_dir: &Path, format: FrameFormat) -> Result<ClipManifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut names = Vec::with_capacity(clip.frames());
    for f in 0..clip.frames() {
        let name = format!("frame_{f:05}.{}", format.extension());
        write_frame(&out_dir.join(&name), clip.height(), clip.width(), clip.frame(f), format)?;
        names.push(name);
    }
    let manifest = ClipManifest {
        frames: names,
        width: clip.width(),
        height: clip.height(),
        count: clip.frames(),
        fps: clip.fps(),
        format,
    };
    let path = out_dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn save_mask(mask: &MaskClip, out_dir: &Path, format: FrameFormat) -> Result<ClipManifest> {
    save_clip(&mask.to_clip()?, out_dir, format)
}

/// 8-bit quantizer: clamp, then `round(v * 255)`.
pub fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn quantize16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn write_frame(path: &Path, h: usize, w: usize, values: &[f32], format: FrameFormat) -> Result<()> {
    match format {
        FrameFormat::Raster8 => {
            let buf: Vec<u8> = values.iter().map(|&v| quantize8(v)).collect();
            let img = ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, buf).expect("buffer sized from clip");
            img.save(path).map_err(|e| Error::format(path, e.to_string()))
        }
        FrameFormat::Raster16 => {
            let buf: Vec<u16> = values.iter().map(|&v| quantize16(v)).collect();
            let img = ImageBuffer::<Rgb<u16>, _>::from_raw(w as u32, h as u32, buf).expect("buffer sized from clip");
            img.save(path).map_err(|e| Error::format(path, e.to_string()))
        }
        FrameFormat::Raw32 => {
            let bytes = encode_raw32(h, w, CHANNELS, values);
            fs::write(path, bytes).map_err(|e| Error::io(path, e))
        }
    }
}

fn read_frame(path: &Path, format: FrameFormat) -> Result<(usize, usize, Vec<f32>)> {
    match format {
        FrameFormat::Raster8 | FrameFormat::Raster16 => {
            let img = image::open(path).map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::format(path, format!("unsupported pixel format: {other}")),
            })?;
            let (w, h) = (img.width() as usize, img.height() as usize);
            // Grey inputs are replicated across channels by the conversion.
            let values = match format {
                FrameFormat::Raster8 => img.to_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
                _ => img
                    .to_rgb16()
                    .into_raw()
                    .into_iter()
                    .map(|v| v as f32 / 65535.0)
                    .collect(),
            };
            Ok((h, w, values))
        }
        FrameFormat::Raw32 => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let (h, w, c, values) = decode_raw32(&bytes).map_err(|msg| Error::format(path, msg))?;
            let values = match c {
                CHANNELS => values,
                1 => values.iter().flat_map(|&v| [v; CHANNELS]).collect(),
                other => {
                    return Err(Error::format(
                        path,
                        format!("unsupported pixel format: {other} channels"),
                    ))
                }
            };
            Ok((h, w, values))
        }
    }
}

pub fn encode_raw32(h: usize, w: usize, c: usize, values: &[f32]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(16 + values.len() * 4);
    bytes.extend_from_slice(RAW32_MAGIC);
    for dim in [h, w, c] {
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub fn decode_raw32(bytes: &[u8]) -> std::result::Result<(usize, usize, usize, Vec<f32>), String> {
    if bytes.len() < 16 || &bytes[..4] != RAW32_MAGIC {
        return Err("missing RPA1 magic".into());
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let n = h * w * c;
    let payload = &bytes[16..];
    if payload.len() != n * 4 {
        return Err(format!(
            "payload holds {} bytes, header implies {}",
            payload.len(),
            n * 4
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((h, w, c, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_clip(seed: u64, frames: usize, h: usize, w: usize) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoClip::from_fn(frames, h, w, |_, _, _, _| rng.random::<f32>()).unwrap()
    }

    #[test]
    fn black_frames_load_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let clip = VideoClip::filled(3, 8, 8, 0.0).unwrap();
        save_clip(&clip, dir.path(), FrameFormat::Raster8).unwrap();
        let back = load_clip(&dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(back.frames(), 3);
        assert!(back.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn raw32_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        // Out-of-range values survive the raw container untouched.
        let clip = random_clip(1, 2, 8, 12).map(|v| v * 3.0 - 1.0).unwrap();
        save_clip(&clip, dir.path(), FrameFormat::Raw32).unwrap();
        let back = load_clip(dir.path()).unwrap();
        let same = clip
            .data()
            .iter()
            .zip(back.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }

    #[test]
    fn raster16_round_trip_within_one_code() {
        let dir = tempfile::tempdir().unwrap();
        let clip = random_clip(2, 2, 8, 8);
        save_clip(&clip, dir.path(), FrameFormat::Raster16).unwrap();
        let back = load_clip(dir.path()).unwrap();
        assert!(clip.max_abs_diff(&back).unwrap() <= 1.0 / 65535.0);
    }

    #[test]
    fn raster8_quantizer_endpoints() {
        assert_eq!(quantize8(1.0), 255);
        assert_eq!(quantize8(0.0), 0);
        // round(0.5 * 255) = round(127.5) = 128 (ties away from zero)
        assert_eq!(quantize8(0.5), 128);
        assert_eq!(quantize8(1.7), 255);
        assert_eq!(quantize8(-0.2), 0);
    }

    #[test]
    fn raster8_stores_max_code_for_one() {
        let dir = tempfile::tempdir().unwrap();
        let clip = VideoClip::filled(1, 8, 8, 1.0).unwrap();
        let manifest = save_clip(&clip, dir.path(), FrameFormat::Raster8).unwrap();
        let img = image::open(dir.path().join(&manifest.frames[0])).unwrap().to_rgb8();
        assert!(img.into_raw().iter().all(|&v| v == 255));
    }

    #[test]
    fn grey_png_is_replicated() {
        let dir = tempfile::tempdir().unwrap();
        let grey = ImageBuffer::<image::Luma<u8>, _>::from_fn(8, 8, |x, _| image::Luma([(x * 30) as u8]));
        grey.save(dir.path().join("g.png")).unwrap();
        let manifest = ClipManifest {
            frames: vec!["g.png".into()],
            width: 8,
            height: 8,
            count: 1,
            fps: 8.0,
            format: FrameFormat::Raster8,
        };
        fs::write(
            dir.path().join(MANIFEST_NAME),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        let clip = load_clip(dir.path()).unwrap();
        assert_eq!(clip.get(0, 0, 3, 0), 90.0 / 255.0);
        assert_eq!(clip.get(0, 0, 3, 1), clip.get(0, 0, 3, 2));
    }

    #[test]
    fn mismatched_frame_reports_file() {
        let dir = tempfile::tempdir().unwrap();
        let small = VideoClip::filled(2, 8, 8, 0.5).unwrap();
        let mut manifest = save_clip(&small, dir.path(), FrameFormat::Raster8).unwrap();
        let big = VideoClip::filled(1, 16, 16, 0.5).unwrap();
        let sub = dir.path().join("big");
        let big_manifest = save_clip(&big, &sub, FrameFormat::Raster8).unwrap();
        manifest.frames.push(format!("big/{}", big_manifest.frames[0]));
        manifest.count = 3;
        fs::write(
            dir.path().join(MANIFEST_NAME),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        let err = load_clip(dir.path()).unwrap_err().to_string();
        assert!(err.contains("dimension mismatch"), "{err}");
        assert!(err.contains("frame_00000.png"), "{err}");
    }

    #[test]
    fn missing_frame_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let clip = VideoClip::filled(2, 8, 8, 0.5).unwrap();
        let manifest = save_clip(&clip, dir.path(), FrameFormat::Raw32).unwrap();
        fs::remove_file(dir.path().join(&manifest.frames[1])).unwrap();
        let err = load_clip(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("frame_00001.rpa"));
    }

    #[test]
    fn unknown_format_tag_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join(MANIFEST_NAME),
            r#"{"frames":["a.bmp"],"width":8,"height":8,"count":1,"fps":8.0,"format":"bmp24"}"#,
        )
        .unwrap();
        assert!(matches!(load_clip(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn raw32_header_layout() {
        let bytes = encode_raw32(2, 3, 1, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(&bytes[..4], b"RPA1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert!(decode_raw32(&bytes[..20]).is_err());
    }
}
