//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vidrpa::attention::{cross_frame_attention, self_attention, AttentionBatch, Matrix};
use vidrpa::backends::{run_ddim, Conditioning, LaplacianInpainter, LatentCodec, OracleDenoiser, ToyCodec};
use vidrpa::frequency::{gaussian_blur, split_bands, BlurSpec};
use vidrpa::metrics::bg_psnr;
use vidrpa::pipeline::fixtures::{self, PAN_PROMPT};
use vidrpa::pipeline::{build_backends, run_pipeline, run_pipeline_from, PipelineConfig, ProjectionMode, Stages};
use vidrpa::rng::{normal_tensor, Stream};
use vidrpa::rpa::{denoise_with_rpa, DenoiseLoop, IdentityRefiner, RefineConfig};
use vidrpa::scheduler::{add_noise, make_schedule, pred_x0, LatentTensor, NoiseSchedule};
use vidrpa::VideoClip;

type Check = Result<(bool, String), Box<dyn std::error::Error>>;
type Criterion<'a> = (u8, Option<Duration>, Box<dyn Fn() -> Check + 'a>);

fn schedule() -> NoiseSchedule {
    make_schedule(1000, 20, 0.00085, 0.012).unwrap()
}

fn random_latent(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> LatentTensor {
    let n = shape.iter().product();
    LatentTensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn l2(a: &VideoClip, b: &VideoClip) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn criterion_1() -> Check {
    let out = Command::new(env!("CARGO_BIN_EXE_vidrpa"))
        .args([
            "verify-rpa",
            "--codec",
            "toy",
            "--trials",
            "1000",
            "--seed",
            "11",
            "--tolerance",
            "1e-6",
        ])
        .output()?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    let worst: f64 = stdout
        .split_whitespace()
        .find_map(|w| w.strip_prefix("max_deviation="))
        .ok_or("no max_deviation in verify-rpa output")?
        .parse()?;
    let pass = out.status.success() && stdout.contains("PASS") && worst <= 1e-6;
    Ok((pass, format!("1000 trials, max deviation {worst:.2e} (limit 1e-6)")))
}

fn criterion_2() -> Check {
    let fx = fixtures::pan_fixture(0)?;
    let sched = schedule();
    let codec = ToyCodec::default();
    let target = codec.encode_mean(&fx.input)?;
    let den = OracleDenoiser::new(sched.clone(), target.clone());
    let noise = normal_tensor(target.shape(), 5, Stream::Enhance, 0);
    let x_start = add_noise(&target, &noise, sched.start_timestep(20)?, &sched)?;
    let cond = Conditioning::default();
    let cfg = RefineConfig::new(BlurSpec::default(), fx.masks.clone(), 2);
    let (plain, _) = denoise_with_rpa(
        &x_start,
        &fx.input,
        &cond,
        20,
        &sched,
        &den,
        &codec,
        &cfg,
        &LaplacianInpainter,
        false,
    )?;
    let (ident, trace) = DenoiseLoop::new(&sched, &den, &codec)
        .with_refiner(&IdentityRefiner)
        .run(&x_start, &fx.input, &cond, 20)?;
    let diff = ident.max_abs_diff(&plain)? as f64;
    let pass = diff <= 1e-5 && trace.steps.len() == 20;
    Ok((
        pass,
        format!("8x32x48, 20 steps, max |identity - disabled| {diff:.2e} (limit 1e-5)"),
    ))
}

struct TexturedRuns {
    rpa_corr: f64,
    off_corr: f64,
    gap_db: f64,
    steps: (usize, usize),
    elapsed: Duration,
}

/// Full run, random-eps re-encode ablation and no-refinement baseline on
/// the textured fixture; the ablations rerun stage 3 only.
fn textured_runs(dir: &Path) -> Result<TexturedRuns, Box<dyn std::error::Error>> {
    let clock = Instant::now();
    let (_, textured) = fixtures::make_fixtures(dir, 0)?;
    let mut cfg = PipelineConfig::load(&textured.config)?;
    let rpa = run_pipeline(&cfg)?;
    cfg.rpa.projection = ProjectionMode::Reparameterized;
    let reparam = run_pipeline_from(&cfg, 3)?;
    cfg.rpa.projection = ProjectionMode::Deterministic;
    cfg.rpa.enabled = false;
    let off = run_pipeline_from(&cfg, 3)?;
    let masks = vidrpa::clip_io::load_mask(&vidrpa::clip_io::resolve_manifest_path(&textured.masks))?;
    let gap_db = bg_psnr(&rpa.output, &off.output, &masks)? - bg_psnr(&reparam.output, &off.output, &masks)?;
    Ok(TexturedRuns {
        rpa_corr: rpa.report.fg_hf_corr,
        off_corr: off.report.fg_hf_corr,
        gap_db,
        steps: (rpa.trace.steps.len(), reparam.trace.steps.len()),
        elapsed: clock.elapsed(),
    })
}

fn criterion_3(runs: &TexturedRuns) -> Check {
    let pass = runs.gap_db >= 3.0 && runs.steps == (14, 14);
    Ok((
        pass,
        format!(
            "bg_psnr gap RPA vs random-eps re-encode {:.2} dB over {} refined steps (limit 3 dB); three textured runs took {:.2} s",
            runs.gap_db,
            runs.steps.0,
            runs.elapsed.as_secs_f64()
        ),
    ))
}

fn criterion_4() -> Check {
    let sched = schedule();
    let (lo, hi) = (0.00085f64.sqrt(), 0.012f64.sqrt());
    let mut log_sum = 0.0f64;
    let mut table_err = 0.0f64;
    for (t, &ab) in sched.alpha_bar_table().iter().enumerate() {
        if t > 0 {
            let beta = (lo + (hi - lo) * (t - 1) as f64 / 999.0).powi(2);
            log_sum += (1.0 - beta).ln();
        }
        table_err = table_err.max((ab - log_sum.exp()).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut comp_err = 0.0f64;
    for &t in sched.inference_steps() {
        for _ in 0..100 {
            let x0 = random_latent(&mut rng, [2, 4, 4, 4]);
            let eps = random_latent(&mut rng, [2, 4, 4, 4]);
            let back = pred_x0(&add_noise(&x0, &eps, t, &sched)?, &eps, t, &sched)?;
            comp_err = comp_err.max(back.max_abs_diff(&x0)?);
        }
    }
    let pass = table_err <= 1e-12 && comp_err <= 1e-6 && sched.inference_steps().len() == 20;
    Ok((
        pass,
        format!(
            "alpha_bar table error {table_err:.2e} (limit 1e-12), pred_x0(add_noise) error {comp_err:.2e} (limit 1e-6)"
        ),
    ))
}

fn criterion_5() -> Check {
    let sched = schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let target = random_latent(&mut rng, [2, 6, 6, 4]);
    let den = OracleDenoiser::new(sched.clone(), target.clone());
    let mut worst = 0.0f64;
    for init in 0..10 {
        let x_t = normal_tensor(target.shape(), init, Stream::Enhance, 0);
        let x0 = run_ddim(&x_t, 20, &sched, &den, &Conditioning::default())?;
        worst = worst.max(x0.max_abs_diff(&target)?);
    }
    Ok((
        worst <= 1e-5,
        format!("10 initializations, max distance to target {worst:.2e} (limit 1e-5)"),
    ))
}

fn reflect(i: i64, n: i64) -> usize {
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
    }
    i as usize
}

/// Direct 2D convolution with a (2r+1)^2 Gaussian window.
fn dense_blur(clip: &VideoClip, sigma: f64, r: i64) -> Vec<f64> {
    let (h, w) = (clip.height() as i64, clip.width() as i64);
    let mut window = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            window.push((dy, dx, (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp()));
        }
    }
    let total: f64 = window.iter().map(|w| w.2).sum();
    let mut out = Vec::new();
    for f in 0..clip.frames() {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let acc: f64 = window
                        .iter()
                        .map(|&(dy, dx, wt)| wt * clip.get(f, reflect(y + dy, h), reflect(x + dx, w), c) as f64)
                        .sum();
                    out.push(acc / total);
                }
            }
        }
    }
    out
}

fn criterion_6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut recon = 0.0f64;
    let mut conv = 0.0f64;
    for (sigma, radius) in [(3.0, 9i64), (1.5, 5), (2.2, 7)] {
        let data = (0..3 * 16 * 16 * 3).map(|_| rng.random_range(0.0f32..1.0)).collect();
        let clip = VideoClip::new(3, 16, 16, data, 8.0)?;
        let spec = BlurSpec::new(sigma);
        let (lf, hf) = split_bands(&clip, &spec)?;
        recon = recon.max(lf.add(&hf)?.max_abs_diff(&clip)? as f64);
        let blurred = gaussian_blur(&clip, &spec)?;
        let oracle = dense_blur(&clip, sigma, radius);
        for (a, b) in blurred.data().iter().zip(&oracle) {
            conv = conv.max((*a as f64 - b).abs());
        }
    }
    Ok((
        recon <= 1e-7 && conv <= 1e-6,
        format!("LF+HF reconstruction error {recon:.2e} (limit 1e-7), separable vs dense {conv:.2e} (limit 1e-6)"),
    ))
}

fn criterion_7(runs: &TexturedRuns) -> Check {
    let pass = runs.rpa_corr >= 0.99 && runs.off_corr < runs.rpa_corr;
    Ok((
        pass,
        format!(
            "fg_hf_corr with refinement {:.4} (limit 0.99), without {:.4}",
            runs.rpa_corr, runs.off_corr
        ),
    ))
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn criterion_8() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let frames = 5;
    let q: Vec<Matrix> = (0..frames).map(|_| random_matrix(&mut rng, 6, 8)).collect();
    let k: Vec<Matrix> = (0..frames).map(|_| random_matrix(&mut rng, 7, 8)).collect();
    let v: Vec<Matrix> = (0..frames).map(|_| random_matrix(&mut rng, 7, 4)).collect();
    let base = cross_frame_attention(&AttentionBatch::new(q.clone(), k.clone(), v.clone())?)?;
    let mut invariant = true;
    for trial in 0..20 {
        let (mut k2, mut v2) = (k.clone(), v.clone());
        for j in 1..frames {
            k2[j] = random_matrix(&mut rng, 7 + trial % 3, 8);
            v2[j] = random_matrix(&mut rng, 7 + trial % 3, 4);
        }
        let mutated = cross_frame_attention(&AttentionBatch::new(q.clone(), k2, v2)?)?;
        invariant &= mutated == base;
    }
    let same = AttentionBatch::new(
        vec![q[0].clone(); frames],
        vec![k[0].clone(); frames],
        vec![v[0].clone(); frames],
    )?;
    let cross = cross_frame_attention(&same)?;
    let plain = self_attention(&same)?;
    let symmetry = cross
        .iter()
        .zip(&plain)
        .chain(cross.iter().zip(std::iter::repeat(&cross[0])))
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    Ok((
        invariant && symmetry <= 1e-9,
        format!("outputs unchanged under 20 K/V mutations of frames j != 1: {invariant}; identical-frame deviation {symmetry:.2e} (limit 1e-9)"),
    ))
}

fn criterion_9(dir: &Path) -> Check {
    let (pan, _) = fixtures::make_fixtures(dir, 9)?;
    let mut cfg = PipelineConfig::load(&pan.config)?;
    cfg.t0 = Some(0);
    cfg.t1 = Some(0);
    let zero = run_pipeline(&cfg)?;
    let step1_exact = zero.harmonized == zero.foreground;
    let codec = ToyCodec::default();
    let roundtrip = codec.decode(&codec.encode_mean(&zero.harmonized)?)?;
    let t1_exact = zero.output.data() == roundtrip.data();

    let sched = NoiseSchedule::from_params(&cfg.schedule_params())?;
    let backends = build_backends(&cfg, &sched)?;
    let stages = Stages {
        cfg: &cfg,
        schedule: &sched,
        backends: &backends,
    };
    let fx = fixtures::pan_fixture(9)?;
    let bg = stages.background(&fx.input, &fx.masks, vidrpa::pipeline::FirstFrame::Prompt(PAN_PROMPT))?;
    let step1 = stages.relight_composite(&fx.input, &fx.masks, &bg)?;
    let displacement = [0usize, 8, 14]
        .into_iter()
        .map(|t0| {
            Ok(l2(
                &stages.harmonize_text(&step1, &fx.input, &fx.masks, &bg, PAN_PROMPT, t0)?,
                &step1,
            ))
        })
        .collect::<Result<Vec<f64>, vidrpa::Error>>()?;
    let monotone = displacement[0] == 0.0 && displacement[0] < displacement[1] && displacement[1] < displacement[2];
    Ok((
        step1_exact && t1_exact && monotone,
        format!(
            "T0=0 exact: {step1_exact}; T1=0 exact: {t1_exact}; L2 displacement at T0=0,8,14: {:.4}, {:.4}, {:.4}",
            displacement[0], displacement[1], displacement[2]
        ),
    ))
}

fn read_tree(dir: &Path) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        files.push((
            entry.file_name().to_string_lossy().into_owned(),
            std::fs::read(entry.path())?,
        ));
    }
    files.sort();
    Ok(files)
}

fn report_without_timings(path: &Path) -> Result<serde_json::Value, Box<dyn std::error::Error>> {
    let mut value: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)?;
    value
        .as_object_mut()
        .ok_or("report is not an object")?
        .remove("timings_ms");
    Ok(value)
}

fn criterion_10(dir: &Path) -> Check {
    let bin = env!("CARGO_BIN_EXE_vidrpa");
    let status = Command::new(bin)
        .args(["make-fixtures", "--out"])
        .arg(dir)
        .args(["--seed", "10"])
        .output()?
        .status;
    if !status.success() {
        return Ok((false, "make-fixtures failed".into()));
    }
    let config = dir.join("pan/config.json");
    let run_dir = dir.join("pan/run");
    let mut results = Vec::new();
    let mut slowest = Duration::ZERO;
    for _ in 0..2 {
        let clock = Instant::now();
        let out = Command::new(bin).args(["run", "--config"]).arg(&config).output()?;
        slowest = slowest.max(clock.elapsed());
        if !out.status.success() {
            return Ok((false, format!("run failed: {}", String::from_utf8_lossy(&out.stderr))));
        }
        results.push((
            read_tree(&run_dir.join("output"))?,
            report_without_timings(&run_dir.join("metrics.json"))?,
        ));
        std::fs::remove_dir_all(&run_dir)?;
    }
    let identical = results[0] == results[1];
    Ok((
        identical && slowest < Duration::from_secs(300),
        format!(
            "outputs and reports bit-identical: {identical}; slowest run {:.2} s (limit 300 s)",
            slowest.as_secs_f64()
        ),
    ))
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("temp dir");
    let textured = textured_runs(&scratch.path().join("c3"));
    let textured = textured.as_ref();
    let criteria: Vec<Criterion> = vec![
        (1, Some(Duration::from_secs(30)), Box::new(criterion_1)),
        (2, Some(Duration::from_secs(60)), Box::new(criterion_2)),
        (
            3,
            None,
            Box::new(|| textured.map_err(|e| e.to_string().into()).and_then(criterion_3)),
        ),
        (4, None, Box::new(criterion_4)),
        (5, None, Box::new(criterion_5)),
        (6, None, Box::new(criterion_6)),
        (
            7,
            None,
            Box::new(|| textured.map_err(|e| e.to_string().into()).and_then(criterion_7)),
        ),
        (8, None, Box::new(criterion_8)),
        (9, None, Box::new(|| criterion_9(&scratch.path().join("c9")))),
        (10, None, Box::new(|| criterion_10(&scratch.path().join("c10")))),
    ];
    let mut failed = 0;
    for (n, limit, check) in &criteria {
        let clock = Instant::now();
        let result = check();
        let elapsed = clock.elapsed();
        let (pass, detail) = match result {
            Ok((pass, detail)) => (pass, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = limit.is_none_or(|l| elapsed < l);
        let timing = match limit {
            Some(l) => format!(" [{:.2} s, limit {} s]", elapsed.as_secs_f64(), l.as_secs()),
            None => format!(" [{:.2} s]", elapsed.as_secs_f64()),
        };
        let ok = pass && in_time;
        failed += usize::from(!ok);
        println!("{} criterion {n}: {detail}{timing}", if ok { "PASS" } else { "FAIL" });
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
