//! Pixel-domain quality scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequency::{high_band, BlurSpec};
use crate::resample::block_mean;
use crate::video::{MaskClip, VideoClip, CHANNELS};

pub const FEATURE_GRID: usize = 16;
pub const PSNR_CAP_DB: f64 = 99.0;

/// Mean-centred 16x16 block-mean feature of one frame.
pub fn frame_feature(clip: &VideoClip, f: usize) -> Vec<f64> {
    let frame: Vec<f64> = clip.frame(f).iter().map(|&v| v as f64).collect();
    let mut feat = block_mean(
        &frame,
        clip.height(),
        clip.width(),
        CHANNELS,
        FEATURE_GRID,
        FEATURE_GRID,
    );
    let mean = feat.iter().sum::<f64>() / feat.len() as f64;
    feat.iter_mut().for_each(|v| *v -= mean);
    feat
}

const ZERO_NORM: f64 = 1e-12;

/// Cosine similarity of consecutive frame features; `None` for pairs with
/// exactly one blank frame.
pub fn tem_con_series(clip: &VideoClip) -> Result<Vec<Option<f64>>> {
    if clip.frames() < 2 {
        return Err(Error::Metric {
            metric: "tem_con",
            message: "needs at least two frames".into(),
        });
    }
    let feats: Vec<Vec<f64>> = (0..clip.frames()).map(|f| frame_feature(clip, f)).collect();
    Ok(feats
        .windows(2)
        .enumerate()
        .map(|(i, pair)| {
            let (a, b) = (&pair[0], &pair[1]);
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            match (na < ZERO_NORM, nb < ZERO_NORM) {
                (true, true) => Some(1.0),
                (false, false) => Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)),
                _ => {
                    log::warn!(
                        "tem_con: frames {} and {} pair a blank frame with content; pair excluded",
                        i,
                        i + 1
                    );
                    None
                }
            }
        })
        .collect())
}

pub fn tem_con(clip: &VideoClip) -> Result<f64> {
    let kept: Vec<f64> = tem_con_series(clip)?.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::Metric {
            metric: "tem_con",
            message: "every frame pair was excluded".into(),
        });
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

fn psnr(sse: f64, n: usize) -> f64 {
    let mse = sse / n as f64;
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

fn bg_errors(out: &VideoClip, reference: &VideoClip, mask: &MaskClip) -> Result<Vec<(f64, usize)>> {
    out.ensure_same_shape(reference, "bg_psnr")?;
    mask.ensure_matches(out, "bg_psnr")?;
    Ok((0..out.frames())
        .map(|f| {
            let (a, b, m) = (out.frame(f), reference.frame(f), mask.frame(f));
            let mut sse = 0.0;
            let mut n = 0;
            for (p, &mv) in m.iter().enumerate() {
                if mv < 0.5 {
                    for c in 0..CHANNELS {
                        let d = a[p * CHANNELS + c] as f64 - b[p * CHANNELS + c] as f64;
                        sse += d * d;
                    }
                    n += CHANNELS;
                }
            }
            (sse, n)
        })
        .collect())
}

/// PSNR over background pixels (`mask < 0.5`), peak 1.0, capped at 99 dB.
pub fn bg_psnr(out: &VideoClip, reference: &VideoClip, mask: &MaskClip) -> Result<f64> {
    let errs = bg_errors(out, reference, mask)?;
    let (sse, n) = errs.iter().fold((0.0, 0), |(s, n), &(a, b)| (s + a, n + b));
    if n == 0 {
        return Err(Error::Metric {
            metric: "bg_psnr",
            message: "mask leaves no background pixels".into(),
        });
    }
    Ok(psnr(sse, n))
}

/// Per-frame PSNR; frames without background report the cap.
pub fn bg_psnr_series(out: &VideoClip, reference: &VideoClip, mask: &MaskClip) -> Result<Vec<f64>> {
    Ok(bg_errors(out, reference, mask)?
        .into_iter()
        .map(|(sse, n)| if n == 0 { PSNR_CAP_DB } else { psnr(sse, n) })
        .collect())
}

fn pearson(pairs: impl Iterator<Item = (f64, f64)>) -> Option<f64> {
    let (mut n, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (a, b) in pairs {
        n += 1.0;
        sa += a;
        sb += b;
        saa += a * a;
        sbb += b * b;
        sab += a * b;
    }
    if n == 0.0 {
        return None;
    }
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    if va <= 1e-18 || vb <= 1e-18 {
        return None;
    }
    Some((sab - sa * sb / n) / (va * vb).sqrt())
}

fn fg_pairs<'a>(
    a: &'a VideoClip,
    b: &'a VideoClip,
    mask: &'a MaskClip,
    frames: std::ops::Range<usize>,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    let fl = a.frame_len();
    frames.flat_map(move |f| {
        (0..fl)
            .filter(move |i| mask.frame(f)[i / CHANNELS] >= 0.5)
            .map(move |i| (a.frame(f)[i] as f64, b.frame(f)[i] as f64))
    })
}

/// Pearson correlation of the high bands of `out` and `input` over
/// foreground pixels (`mask >= 0.5`).
pub fn fg_hf_corr(out: &VideoClip, input: &VideoClip, mask: &MaskClip, blur: &BlurSpec) -> Result<f64> {
    out.ensure_same_shape(input, "fg_hf_corr")?;
    mask.ensure_matches(out, "fg_hf_corr")?;
    let (ha, hb) = (high_band(out, blur)?, high_band(input, blur)?);
    pearson(fg_pairs(&ha, &hb, mask, 0..out.frames())).ok_or_else(|| Error::Metric {
        metric: "fg_hf_corr",
        message: "high band has zero variance over the foreground".into(),
    })
}

/// Per-frame correlation; frames where it is undefined report 0.
pub fn fg_hf_corr_series(out: &VideoClip, input: &VideoClip, mask: &MaskClip, blur: &BlurSpec) -> Result<Vec<f64>> {
    out.ensure_same_shape(input, "fg_hf_corr")?;
    mask.ensure_matches(out, "fg_hf_corr")?;
    let (ha, hb) = (high_band(out, blur)?, high_band(input, blur)?);
    Ok((0..out.frames())
        .map(|f| {
            pearson(fg_pairs(&ha, &hb, mask, f..f + 1)).unwrap_or_else(|| {
                log::warn!("fg_hf_corr: undefined on frame {f}");
                0.0
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    /// Excluded pairs are `null`.
    pub tem_con: Vec<Option<f64>>,
    pub bg_psnr: Vec<f64>,
    pub fg_hf_corr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tem_con: f64,
    pub bg_psnr: f64,
    pub fg_hf_corr: f64,
    pub series: MetricSeries,
}

/// `bg_psnr` of `out` against `reference`, `fg_hf_corr` against `input`.
pub fn evaluate(
    out: &VideoClip,
    input: &VideoClip,
    reference: &VideoClip,
    mask: &MaskClip,
    blur: &BlurSpec,
) -> Result<MetricReport> {
    Ok(MetricReport {
        tem_con: tem_con(out)?,
        bg_psnr: bg_psnr(out, reference, mask)?,
        fg_hf_corr: fg_hf_corr(out, input, mask, blur)?,
        series: MetricSeries {
            tem_con: tem_con_series(out)?,
            bg_psnr: bg_psnr_series(out, reference, mask)?,
            fg_hf_corr: fg_hf_corr_series(out, input, mask, blur)?,
        },
    })
}
