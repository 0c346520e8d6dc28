use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use hsisr_core::pipeline::{self, PipelineConfig, Variant};
use hsisr_core::metrics::MetricsReport;

/// Hyperspectral super-resolution with a grouped autoencoder and latent diffusion.
///
/// Relative output directories are placed under $HSISR_OUTPUT_ROOT when set.
#[derive(Parser)]
#[command(name = "hsisr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set grouping.n_subs=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize or ingest cubes, normalize, degrade, split and cut patches.
    Prepare(Common),
    /// Train the grouped autoencoder.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Train the latent denoiser with the autoencoder frozen.
    TrainStage2(Common),
    /// Super-resolve the test images, or one LR cube.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, requires = "input")]
        output: Option<PathBuf>,
    },
    /// Score inferred images against references and the bicubic baseline.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Score just this reference/candidate pair.
        #[arg(long, requires = "candidate")]
        reference: Option<PathBuf>,
        #[arg(long, requires = "reference")]
        candidate: Option<PathBuf>,
    },
    /// Train and score every ablation variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Restrict to these variants (full, no-GD, no-GS, diff-PB, diff-FB).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Time inference of ours, diff-PB and diff-FB.
    BenchmarkTime(Common),
}

fn load(common: &Common) -> anyhow::Result<PipelineConfig> {
    Ok(PipelineConfig::load(common.config.as_deref(), &common.set)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Prepare(c) => {
            let cfg = load(&c)?;
            let ds = pipeline::cmd_prepare(&cfg)?;
            println!("{} train / {} test images, {} patches in {}", ds.train.len(), ds.test.len(), ds.index.patch_count, ds.dir.display());
        }
        Command::TrainStage1 { common, resume } => {
            let cfg = load(&common)?;
            let s = pipeline::cmd_train_stage1(&cfg, resume)?;
            println!("stage 1: {} steps, final loss {:.6}", s.steps, s.final_loss);
            if let Some(r) = s.heldout {
                println!("held-out patches: {r}");
            }
        }
        Command::TrainStage2(c) => {
            let cfg = load(&c)?;
            let s = pipeline::cmd_train_stage2(&cfg)?;
            println!("stage 2: {} steps on {} latent pairs, final ε-loss {:.6}", s.steps, s.pair_count, s.final_loss);
        }
        Command::Infer { common, input, output } => {
            let cfg = load(&common)?;
            for r in pipeline::cmd_infer(&cfg, input.as_deref(), output.as_deref())? {
                println!("{}: {} denoiser calls, {:.2}s -> {}", r.image, r.calls, r.seconds, r.path.display());
            }
        }
        Command::Evaluate { common, reference, candidate } => {
            let cfg = load(&common)?;
            if let (Some(r), Some(c)) = (reference, candidate) {
                let report = pipeline::evaluate_files(&r, &c, cfg.scale)?;
                println!("{}", MetricsReport::csv_header());
                println!("{}", report.csv_row());
                return Ok(());
            }
            for e in pipeline::cmd_evaluate(&cfg)? {
                println!("{:<8} {}  {}", e.model, e.image, e.report);
            }
        }
        Command::Ablate { common, variants } => {
            let cfg = load(&common)?;
            let variants: Vec<Variant> = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<Result<_, _>>()?
            };
            for r in pipeline::cmd_ablate(&cfg, &variants)? {
                println!("{:<8} {}  {}  calls {}", r.variant, r.image, r.report, r.calls);
            }
        }
        Command::BenchmarkTime(c) => {
            let cfg = load(&c)?;
            println!("model,size,seconds_per_image,calls_per_image");
            for r in pipeline::cmd_benchmark_time(&cfg)? {
                println!("{},{},{:.4},{}", r.model, r.size, r.seconds_per_image, r.calls_per_image);
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<hsisr_core::Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli).context("hsisr failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
