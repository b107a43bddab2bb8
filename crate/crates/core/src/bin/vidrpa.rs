use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use vidrpa::backends::{LatentCodec, ToyCodec};
use vidrpa::clip_io::{load_clip, load_mask, resolve_manifest_path};
use vidrpa::frequency::BlurSpec;
use vidrpa::metrics::evaluate;
use vidrpa::pipeline::{fixtures, run_pipeline_from, PipelineConfig, Preset};
use vidrpa::rpa::alignment_sweep;
use vidrpa::{Error, ErrorKind};

#[derive(Parser)]
#[command(
    name = "vidrpa",
    version,
    about = "Video background replacement with refinement projection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Strong,
    Weak,
}

#[derive(Clone, Copy, ValueEnum)]
enum CodecArg {
    Toy,
}

#[derive(Subcommand)]
enum Command {
    /// Run the three-stage pipeline.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override t0/t1 with (0.7T, 0.7T) or (0.4T, 0.4T).
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        /// Resume from a stage using earlier outputs in the output directory.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
        from_stage: u8,
    },
    /// Write synthetic pan and textured fixtures with configs.
    MakeFixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score clip A against clip B (background PSNR, foreground detail, temporal consistency of A).
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 3.0)]
        blur_sigma: f64,
    },
    /// Check that identity refinement projects every latent back onto itself.
    VerifyRpa {
        #[arg(long, value_enum, default_value = "toy")]
        codec: CodecArg,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
}

fn exit_code(err: &Error) -> ExitCode {
    ExitCode::from(match err.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Backend => 3,
        ErrorKind::Io => 4,
    })
}

/// Writes a line to stdout; a closed pipe (e.g. `| head`) is not an error.
macro_rules! say {
    ($($arg:tt)*) => {
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    };
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Run {
            config,
            preset,
            from_stage,
        } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(p) = preset {
                cfg.apply_preset(match p {
                    PresetArg::Strong => Preset::Strong,
                    PresetArg::Weak => Preset::Weak,
                });
                cfg.validate()?;
            }
            let outcome = run_pipeline_from(&cfg, from_stage)?;
            let r = &outcome.report;
            say!(
                "tem_con {:.6}  bg_psnr {:.3} dB  fg_hf_corr {:.6}",
                r.tem_con,
                r.bg_psnr,
                r.fg_hf_corr
            );
            say!("report: {}", outcome.artifacts.report.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::MakeFixtures { out, seed } => {
            let (pan, textured) = fixtures::make_fixtures(&out, seed)?;
            say!("{}", pan.config.display());
            say!("{}", textured.config.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Metrics { a, b, mask, blur_sigma } => {
            let a = load_clip(&resolve_manifest_path(&a))?;
            let b = load_clip(&resolve_manifest_path(&b))?;
            let mask = load_mask(&resolve_manifest_path(&mask))?;
            let blur = BlurSpec::new(blur_sigma);
            blur.validate()?;
            let report = evaluate(&a, &b, &b, &mask, &blur)?;
            say!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyRpa {
            codec,
            trials,
            seed,
            tolerance,
        } => {
            let codec: Box<dyn LatentCodec> = match codec {
                CodecArg::Toy => Box::new(ToyCodec::default()),
            };
            let worst = alignment_sweep(codec.as_ref(), trials, seed)?;
            let pass = worst <= tolerance;
            say!(
                "verify-rpa codec={} trials={trials} max_deviation={worst:.3e} tolerance={tolerance:e} {}",
                codec.name(),
                if pass { "PASS" } else { "FAIL" }
            );
            Ok(if pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}
