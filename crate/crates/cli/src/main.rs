use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use omnirf::eval::{evaluate_dirs, render_run, score_run, Metric, RenderTarget};
use omnirf::io::artifacts::write_atomic;
use omnirf::io::load_dataset;
use omnirf::retrain::{retrain_run, DEFAULT_ALPHA_THRESHOLD, DEFAULT_STEPS};
use omnirf::synthgen::{generate, SceneSpec};
use omnirf::trainer::{resume_joint, train_joint, TrainConfig};
use omnirf::{Error, Exec};

#[derive(Parser)]
#[command(name = "omnirf", version, about = "Layered video decomposition with a radiance-field background")]
struct Cli {
    /// Run the sequential code path instead of the thread pool.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene into a dataset directory.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Jointly train foreground layers and the background field.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// YAML training config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from the latest checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Retrain the background with foreground pixels excluded.
    Retrain {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ALPHA_THRESHOLD)]
        alpha_threshold: f64,
        #[arg(long, default_value_t = DEFAULT_STEPS)]
        steps: usize,
        /// Output directory; defaults to `<run>/retrain`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render every frame of a trained run.
    Render {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        what: RenderTarget,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two directories of frames, or score a trained run.
    Evaluate {
        #[arg(long, required_unless_present = "run", requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        /// Score a run directory against its dataset's ground truth.
        #[arg(long, conflicts_with_all = ["pred", "gt"])]
        run: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "psnr,ssim")]
        metrics: Vec<Metric>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_config(path: Option<&Path>) -> omnirf::Result<TrainConfig> {
    match path {
        Some(p) if !p.is_file() => Err(Error::MissingInput(p.to_path_buf())),
        Some(p) => TrainConfig::from_yaml(&fs::read_to_string(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn report_scores(run_dir: &Path, exec: Exec) -> omnirf::Result<()> {
    let m = score_run(run_dir, exec)?;
    log::info!("metrics: {}", serde_json::to_string(&m)?);
    Ok(())
}

fn run(cli: Cli) -> omnirf::Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match cli.command {
        Command::Generate { config, out } => {
            if !config.is_file() {
                return Err(Error::MissingInput(config));
            }
            let spec = SceneSpec::from_yaml(&fs::read_to_string(&config)?)?;
            generate(&spec, &out)?;
            log::info!("wrote {} frames to {}", spec.frames, out.display());
        }
        Command::Train { data, out, config, seed, steps, resume } => {
            let dataset = load_dataset(&data)?;
            let art = if resume {
                resume_joint(&out, &dataset, exec)?
            } else {
                let mut cfg = read_config(config.as_deref())?;
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                if let Some(s) = steps {
                    cfg.steps = s;
                }
                cfg.validate()?;
                train_joint(&dataset, Some(&data), cfg, &out, exec)?
            };
            report_scores(&art.run_dir, exec)?;
            log::info!("run written to {}", art.run_dir.display());
        }
        Command::Retrain { run, alpha_threshold, steps, out } => {
            let art = retrain_run(&run, alpha_threshold, steps, out.as_deref(), exec)?;
            report_scores(&art.run_dir, exec)?;
            log::info!("background written to {}", art.run_dir.display());
        }
        Command::Render { run, what, out } => {
            let dir = render_run(&run, what, out.as_deref(), exec)?;
            log::info!("frames written to {}", dir.display());
        }
        Command::Evaluate { pred, gt, run, metrics, out } => {
            let text = match (run, pred, gt) {
                (Some(run), _, _) => serde_json::to_string_pretty(&score_run(&run, exec)?)?,
                (None, Some(pred), Some(gt)) => serde_json::to_string_pretty(&evaluate_dirs(&pred, &gt, &metrics, exec)?)?,
                _ => return Err(Error::InvalidInput("evaluate needs --run or both --pred and --gt".into())),
            };
            match out {
                Some(p) => write_atomic(&p, text.as_bytes())?,
                None => println!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::DivergedLoss { .. } => ExitCode::from(3),
                e if e.is_validation() => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
