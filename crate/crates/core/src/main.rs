use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stylevc::config::RunConfig;
use stylevc::datagen::Split;
use stylevc::diffusion::SamplerKind;
use stylevc::harness::{self, ConversionRequest, Converter, StyleSource, TrainVcOptions};
use stylevc::{Error, Result};

/// Prompt-driven style voice conversion on a synthetic desk corpus.
#[derive(Debug, Parser)]
#[command(name = "stylevc", version, arg_required_else_help = true)]
struct Cli {
    /// Run configuration (TOML). Built-in defaults are used when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Corpus directory, overriding the config.
    #[arg(long, global = true, env = "STYLEVC_DATA_ROOT")]
    data_root: Option<PathBuf>,

    /// Run directory for checkpoints and metrics, overriding the config.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its manifest.
    PrepareData {
        /// Seed overriding the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the unit codebook and train the conversion model.
    TrainVc {
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
        /// Total training steps, overriding the config.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the prompt-conditioned style diffusion model.
    TrainDiffusion {
        /// Training steps, overriding the config.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Convert source features to a mel in a target style.
    Convert(ConvertArgs),
    /// Score converted mels against the corpus.
    Evaluate {
        /// Directory of converted `<utterance id>.bin` mels.
        #[arg(long)]
        converted: PathBuf,
        /// Report path; defaults to `metrics.jsonl` inside the converted directory.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("style").required(true).args(["prompt", "reference"])))]
#[command(group(clap::ArgGroup::new("input").required(true).args(["source", "split"])))]
struct ConvertArgs {
    /// Source frame-feature file.
    #[arg(long, requires = "output")]
    source: Option<PathBuf>,
    /// Convert every utterance of a corpus split instead (train or heldout).
    #[arg(long, value_parser = parse_split, requires = "out_dir")]
    split: Option<Split>,
    /// Natural-language style prompt.
    #[arg(long)]
    prompt: Option<String>,
    /// Reference mel whose style is copied.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Output mel path (single conversion).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Output directory (split conversion).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Precomputed prompt embeddings keyed by prompt text.
    #[arg(long)]
    prompt_embeddings: Option<PathBuf>,
    /// Diffusion sampling steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Reverse sampler.
    #[arg(long, value_parser = parse_sampler)]
    sampler: Option<SamplerKind>,
    /// Seed for style sampling and prior noise.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "heldout" => Ok(Split::Heldout),
        other => Err(format!("unknown split {other:?} (expected train or heldout)")),
    }
}

fn parse_sampler(s: &str) -> std::result::Result<SamplerKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(root) = &cli.data_root {
        cfg.data_root = root.clone();
    }
    if let Some(dir) = &cli.run_dir {
        cfg.run_dir = dir.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::PrepareData { seed } => {
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let m = harness::prepare_data(&cfg)?;
            println!("{} utterances -> {}", m.records.len(), cfg.manifest_path().display());
        }
        Command::TrainVc { resume, steps } => {
            if let Some(steps) = steps {
                cfg.train_vc.steps = steps;
            }
            cfg.validate()?;
            let report = harness::train_vc(
                &cfg,
                TrainVcOptions {
                    resume,
                    stop_after: None,
                },
            )?;
            if let Some(last) = report.losses.last() {
                println!(
                    "trained steps {}..{}; final loss {:.4}",
                    report.first_step,
                    report.first_step + report.losses.len() - 1,
                    last.total
                );
            } else {
                println!("nothing to do: checkpoint already at {} steps", cfg.train_vc.steps);
            }
        }
        Command::TrainDiffusion { steps } => {
            if let Some(steps) = steps {
                cfg.train_diffusion.steps = steps;
            }
            cfg.validate()?;
            let report = harness::train_diffusion(&cfg)?;
            let last = report.train_losses.last().copied().unwrap_or(f64::NAN);
            print!("trained {} steps; final loss {last:.4}", report.train_losses.len());
            if let Some((_, h)) = report.heldout_losses.last() {
                print!("; held-out {h:.4}");
            }
            println!();
        }
        Command::Convert(args) => {
            if let Some(steps) = args.steps {
                cfg.sampling.steps = steps;
            }
            if let Some(sampler) = args.sampler {
                cfg.sampling.sampler = sampler;
            }
            cfg.validate()?;
            let style = match (args.prompt, args.reference) {
                (Some(p), None) => StyleSource::Prompt(p),
                (None, Some(r)) => StyleSource::Reference(r),
                _ => unreachable!("clap enforces exactly one style source"),
            };
            let converter = Converter::load(
                &cfg.run_dir,
                matches!(style, StyleSource::Prompt(_)),
                args.prompt_embeddings.as_deref(),
            )?;
            let seed = args.seed.unwrap_or(cfg.seed);
            let sampling = cfg.sampling.options();
            match (args.source, args.split) {
                (Some(source), None) => {
                    let output = args.output.expect("clap requires --output with --source");
                    let req = ConversionRequest {
                        source,
                        style,
                        output,
                        sampling,
                        seed,
                    };
                    let out = converter.run(&req)?;
                    println!("{} frames -> {}", out.mel.num_frames(), req.output.display());
                }
                (None, Some(split)) => {
                    let dir = args.out_dir.expect("clap requires --out-dir with --split");
                    let written = harness::convert_split(&cfg, &converter, split, &style, &sampling, seed, &dir)?;
                    println!("{} conversions -> {}", written.len(), dir.display());
                }
                _ => unreachable!("clap enforces exactly one input"),
            }
        }
        Command::Evaluate { converted, report } => {
            let report = report.unwrap_or_else(|| converted.join("metrics.jsonl"));
            let records = harness::evaluate(&cfg, &converted, &report)?;
            let mean = |f: fn(&stylevc::evaluation::MetricsRecord) -> Option<f64>| {
                let v: Vec<f64> = records.iter().filter_map(f).collect();
                if v.is_empty() {
                    None
                } else {
                    Some(v.iter().sum::<f64>() / v.len() as f64)
                }
            };
            let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.3}"));
            println!(
                "{} utterances; MCD {} dB, F0 RMSE {} Hz, F0 corr {} -> {}",
                records.len(),
                fmt(mean(|r| r.mcd_db)),
                fmt(mean(|r| r.f0_rmse_hz)),
                fmt(mean(|r| r.f0_corr)),
                report.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
