//! Three-stage orchestration: background generation, light harmonization and
//! consistency enhancement, with artifacts and a metric report on disk.

mod config;
pub mod fixtures;
mod stages;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{BackendConfig, HarmonizeConfig, PipelineConfig, Preset, ProjectionMode, RpaConfig, ToyConfig};
pub use stages::{build_backends, temporal_smooth, FirstFrame, Stages};

use crate::clip_io::{load_clip, load_mask, resolve_manifest_path, save_clip, FrameFormat};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricSeries};
use crate::rpa::RpaTrace;
use crate::scheduler::NoiseSchedule;
use crate::video::VideoClip;

pub const BACKGROUND_DIR: &str = "background";
pub const FOREGROUND_DIR: &str = "foreground";
pub const HARMONIZED_DIR: &str = "harmonized";
pub const OUTPUT_DIR: &str = "output";
pub const REPORT_NAME: &str = "metrics.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tem_con: f64,
    pub bg_psnr: f64,
    pub fg_hf_corr: f64,
    pub series: MetricSeries,
    pub config: PipelineConfig,
    pub timings_ms: BTreeMap<String, f64>,
}

impl RunReport {
    /// The report as JSON with wall-clock timings removed.
    pub fn comparable(&self) -> serde_json::Value {
        let mut value = serde_json::to_value(self).expect("report serializes");
        value.as_object_mut().expect("object").remove("timings_ms");
        value
    }
}

/// Paths of everything a run leaves behind.
#[derive(Debug, Clone, PartialEq)]
pub struct StageArtifacts {
    /// `I_b`
    pub background: PathBuf,
    /// Step-1 harmonization composite `I_f`.
    pub foreground: PathBuf,
    /// `I_L`
    pub harmonized: PathBuf,
    /// `I'`
    pub output: PathBuf,
    pub report: PathBuf,
    pub trace: Option<PathBuf>,
}

impl StageArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            background: dir.join(BACKGROUND_DIR),
            foreground: dir.join(FOREGROUND_DIR),
            harmonized: dir.join(HARMONIZED_DIR),
            output: dir.join(OUTPUT_DIR),
            report: dir.join(REPORT_NAME),
            trace: None,
        }
    }
}

pub struct RunOutcome {
    pub artifacts: StageArtifacts,
    pub report: RunReport,
    pub background: VideoClip,
    pub foreground: VideoClip,
    pub harmonized: VideoClip,
    pub output: VideoClip,
    pub trace: RpaTrace,
}

fn load_background_image(path: &Path) -> Result<VideoClip> {
    load_clip(&resolve_manifest_path(path))
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutcome> {
    run_pipeline_from(cfg, 1)
}

/// Runs stages `from_stage..=3`, reading earlier stage outputs from the
/// output directory.
pub fn run_pipeline_from(cfg: &PipelineConfig, from_stage: u8) -> Result<RunOutcome> {
    if !(1..=3).contains(&from_stage) {
        return Err(Error::Config(format!("from_stage must be 1, 2 or 3, got {from_stage}")));
    }
    let mut cfg = cfg.clone();
    cfg.resolve()?;
    let schedule = NoiseSchedule::from_params(&cfg.schedule_params())?;
    let backends = build_backends(&cfg, &schedule)?;
    let stages = Stages {
        cfg: &cfg,
        schedule: &schedule,
        backends: &backends,
    };

    let input = load_clip(&resolve_manifest_path(&cfg.input))?;
    let masks = load_mask(&resolve_manifest_path(&cfg.masks))?;
    masks.ensure_matches(&input, "input masks")?;
    let mut artifacts = StageArtifacts::in_dir(&cfg.output_dir);
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let prompt = cfg.prompt.clone().unwrap_or_default();
    let mut timings = BTreeMap::new();
    let load_saved =
        |dir: &Path, stage: &'static str| load_clip(&resolve_manifest_path(dir)).map_err(|e| e.in_stage(stage));

    let clock = Instant::now();
    let background = if from_stage <= 1 {
        let bg = match &cfg.background_image {
            Some(path) => {
                let image = load_background_image(path)?;
                stages.background(&input, &masks, FirstFrame::Image(&image))
            }
            None => stages.background(&input, &masks, FirstFrame::Prompt(&prompt)),
        }
        .map_err(|e| e.in_stage("background"))?;
        save_clip(&bg, &artifacts.background, FrameFormat::Raw32)?;
        bg
    } else {
        load_saved(&artifacts.background, "background")?
    };
    timings.insert("background".to_string(), clock.elapsed().as_secs_f64() * 1e3);

    let clock = Instant::now();
    let (foreground, harmonized) = if from_stage <= 2 {
        let (fg, il) = stages
            .harmonize(&input, &masks, &background, &prompt, cfg.t0())
            .map_err(|e| e.in_stage("harmonize"))?;
        save_clip(&fg, &artifacts.foreground, FrameFormat::Raw32)?;
        save_clip(&il, &artifacts.harmonized, FrameFormat::Raw32)?;
        (fg, il)
    } else {
        (
            load_saved(&artifacts.foreground, "harmonize")?,
            load_saved(&artifacts.harmonized, "harmonize")?,
        )
    };
    timings.insert("harmonize".to_string(), clock.elapsed().as_secs_f64() * 1e3);

    let clock = Instant::now();
    let (output, trace) = stages
        .enhance(&harmonized, &input, &masks, &prompt, cfg.t1())
        .map_err(|e| e.in_stage("enhance"))?;
    save_clip(&output, &artifacts.output, cfg.output_format)?;
    if let Some(path) = &cfg.rpa.trace_path {
        trace.write_jsonl(path)?;
        artifacts.trace = Some(path.clone());
    }
    timings.insert("enhance".to_string(), clock.elapsed().as_secs_f64() * 1e3);

    let metrics = evaluate(&output, &input, &background, &masks, &cfg.blur).map_err(|e| e.in_stage("metrics"))?;
    let report = RunReport {
        tem_con: metrics.tem_con,
        bg_psnr: metrics.bg_psnr,
        fg_hf_corr: metrics.fg_hf_corr,
        series: metrics.series,
        config: cfg.clone(),
        timings_ms: timings,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&artifacts.report, text).map_err(|e| Error::io(&artifacts.report, e))?;

    Ok(RunOutcome {
        artifacts,
        report,
        background,
        foreground,
        harmonized,
        output,
        trace,
    })
}
