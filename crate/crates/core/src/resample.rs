//! Spatial resampling helpers shared by the toy backends and metrics.
//!
//! All routines work on a single frame laid out row-major with `c`
//! interleaved channels.

/// 2x2 block mean and population standard deviation.
pub fn pool2_stats(src: &[f32], h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut mean = Vec::with_capacity(oh * ow * c);
    let mut std = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let px = [
                    src[((2 * y) * w + 2 * x) * c + ch] as f64,
                    src[((2 * y) * w + 2 * x + 1) * c + ch] as f64,
                    src[((2 * y + 1) * w + 2 * x) * c + ch] as f64,
                    src[((2 * y + 1) * w + 2 * x + 1) * c + ch] as f64,
                ];
                let m = px.iter().sum::<f64>() / 4.0;
                let var = px.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 4.0;
                mean.push(m);
                std.push(var.sqrt());
            }
        }
    }
    (mean, std)
}

/// Source coordinate for output pixel `o` when scaling `n_in -> n_out`
/// with pixel-centre alignment, split into a base index and a weight.
#[inline]
fn bilinear_tap(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let scale = n_in as f64 / n_out as f64;
    let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ytaps: Vec<_> = (0..oh).map(|y| bilinear_tap(y, h, oh)).collect();
    let xtaps: Vec<_> = (0..ow).map(|x| bilinear_tap(x, w, ow)).collect();
    let mut out = Vec::with_capacity(oh * ow * c);
    for &(y0, y1, fy) in &ytaps {
        for &(x0, x1, fx) in &xtaps {
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Mean over a near-uniform grid of `oh x ow` blocks. Every block holds at
/// least one source pixel.
pub fn block_mean(src: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    let bounds = |i: usize, n: usize, m: usize| {
        let start = i * n / m;
        let end = ((i + 1) * n / m).max(start + 1).min(n);
        (start.min(n - 1), end)
    };
    let mut out = Vec::with_capacity(oh * ow * c);
    for by in 0..oh {
        let (y0, y1) = bounds(by, h, oh);
        for bx in 0..ow {
            let (x0, x1) = bounds(bx, w, ow);
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            for ch in 0..c {
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += src[(y * w + x) * c + ch];
                    }
                }
                out.push(acc / count);
            }
        }
    }
    out
}
