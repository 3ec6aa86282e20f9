use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use pomnet::data::{BBox, ShapeFamily};
use pomnet_cli::commands::{self, EvalArgs, PredictArgs, PredictorChoice, Role, SynthArgs, TrainArgs};

#[derive(Parser)]
#[command(name = "pomnet", version, about = "Category-agnostic pose estimation by keypoint matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorArg {
    Model,
    Oracle,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shape dataset (images, annotations.json, split.json).
    Synth {
        /// Base (training) families, comma separated.
        #[arg(long, value_delimiter = ',', value_parser = parse_family, required = true)]
        families: Vec<ShapeFamily>,
        #[arg(long, value_delimiter = ',', value_parser = parse_family)]
        val_families: Vec<ShapeFamily>,
        #[arg(long, value_delimiter = ',', value_parser = parse_family)]
        test_families: Vec<ShapeFamily>,
        /// Instances per family.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value = "synthetic")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 96)]
        image_size: u32,
        /// Largest shot count the dataset must support.
        #[arg(long, default_value_t = 5)]
        max_shots: usize,
    },
    /// Episodic training; writes checkpoints and metrics.ndjson to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory or annotation file.
        #[arg(long)]
        data: PathBuf,
        /// Split file; defaults to split.json next to the annotations.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// PCK evaluation on sampled episodes.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Split file; repeat to report the mean over several splits.
        #[arg(long)]
        split: Vec<PathBuf>,
        /// Which categories of the split to evaluate.
        #[arg(long, value_enum, default_value = "test")]
        role: RoleArg,
        #[arg(long, default_value_t = 0.2, value_parser = parse_sigma)]
        sigma: f64,
        /// Episodes per category.
        #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
        episodes: u64,
        #[arg(long = "k", default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        shots: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "model")]
        predictor: PredictorArg,
        /// Write the result JSON here as well as to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Predict keypoints of one query image from annotated supports.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Annotation file holding the support instances.
        #[arg(long)]
        support: PathBuf,
        #[arg(long)]
        query: PathBuf,
        /// Query box as x,y,w,h; the whole image by default.
        #[arg(long, value_parser = parse_bbox)]
        query_bbox: Option<BBox>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// HTTP inference service.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Allow cross-origin requests (for a UI served elsewhere).
        #[arg(long)]
        cors: bool,
    },
}

fn parse_family(s: &str) -> Result<ShapeFamily, String> {
    s.parse().map_err(|e: pomnet::Error| e.to_string())
}

fn parse_sigma(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("sigma must be a positive number, got {s:?}")),
    }
}

fn parse_bbox(s: &str) -> Result<BBox, String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match v.as_slice() {
        [x, y, w, h] if *w > 0.0 && *h > 0.0 => Ok(BBox::new(*x, *y, *w, *h)),
        _ => Err("expected x,y,w,h with positive width and height".into()),
    }
}

fn emit(value: &serde_json::Value, output: Option<&PathBuf>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(path) = output {
        std::fs::write(path, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            families,
            val_families,
            test_families,
            instances,
            out,
            seed,
            image_size,
            max_shots,
        } => emit(
            &commands::synth(&SynthArgs {
                families,
                val_families,
                test_families,
                instances,
                out,
                seed,
                image_size,
                max_shots,
            })?,
            None,
        ),
        Command::Train {
            config,
            data,
            split,
            seed,
            out,
            resume,
        } => emit(
            &commands::train(&TrainArgs {
                config,
                data,
                split,
                seed,
                out,
                resume,
            })?,
            None,
        ),
        Command::Eval {
            checkpoint,
            data,
            split,
            role,
            sigma,
            episodes,
            shots,
            seed,
            predictor,
            output,
        } => {
            let args = EvalArgs {
                checkpoint,
                data,
                splits: split,
                role: match role {
                    RoleArg::Train => Role::Train,
                    RoleArg::Val => Role::Val,
                    RoleArg::Test => Role::Test,
                },
                sigma,
                episodes: episodes as usize,
                shots: shots as usize,
                seed,
                predictor: match predictor {
                    PredictorArg::Model => PredictorChoice::Model,
                    PredictorArg::Oracle => PredictorChoice::Oracle,
                    PredictorArg::Uniform => PredictorChoice::Uniform,
                },
            };
            emit(&commands::eval(&args)?, output.as_ref())
        }
        Command::Predict {
            checkpoint,
            support,
            query,
            query_bbox,
            output,
        } => emit(
            &commands::predict(&PredictArgs {
                checkpoint,
                support,
                query,
                query_bbox,
            })?,
            output.as_ref(),
        ),
        Command::Serve {
            checkpoint,
            host,
            port,
            cors,
        } => {
            let model = pomnet_cli::inference::InferenceModel::load(&checkpoint)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(pomnet_cli::server::serve(model, &host, port, cors))
        }
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    if let Command::Eval {
        checkpoint: None,
        predictor: PredictorArg::Model,
        ..
    } = &cli.command
    {
        Cli::command()
            .error(
                clap::error::ErrorKind::MissingRequiredArgument,
                "--checkpoint is required unless --predictor is oracle or uniform",
            )
            .exit();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
