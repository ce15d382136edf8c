use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use softpair::commands::{self, Ablation};
use softpair::config::RunConfig;
use softpair::gradcheck::GradCheckConfig;

#[derive(Parser)]
#[command(name = "softpair", version, about = "Two-tower contrastive training with EMA self-distillation")]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, evaluation sets and label features.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint and JSON-lines metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `C` (contrastive only) or `C+D` (contrastive + distillation).
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Zero-shot flat hit@k of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory whose images are queried.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
        ks: Vec<usize>,
        /// Evaluate the EMA teacher instead of the student.
        #[arg(long)]
        teacher: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients against central finite differences.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = softpair::gradcheck::DEFAULT_SEED)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.set_seed(s);
            }
            if let Some(o) = out {
                cfg.paths.data_dir = o;
            }
            let summary = commands::gen_data(&cfg)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Train {
            config,
            ablation,
            data,
            checkpoint,
            metrics,
            epochs,
            seed,
            workers,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(a) = ablation {
                a.apply(&mut cfg);
            }
            if let Some(s) = seed {
                cfg.set_seed(s);
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(w) = workers {
                cfg.train.num_workers = w;
            }
            if let Some(d) = data {
                cfg.paths.data_dir = d;
            }
            if let Some(c) = checkpoint {
                cfg.paths.checkpoint_dir = c;
            }
            if let Some(m) = metrics {
                cfg.paths.metrics = m;
            }
            let outcome = commands::run_train(&cfg)?;
            if let Some(last) = outcome.metrics.last() {
                println!("{}", serde_json::to_string(last)?);
            }
        }
        Command::Eval {
            checkpoint,
            data,
            labels,
            ks,
            teacher,
            out,
        } => {
            let result = commands::run_eval(&checkpoint, &data, &labels, &ks, teacher)?;
            let json = result.to_json();
            println!("{json}");
            if let Some(path) = out {
                std::fs::write(&path, format!("{json}\n"))
                    .map_err(|e| format!("{}: {e}", path.display()))?;
            }
        }
        Command::GradCheck {
            config,
            trials,
            seed,
        } => {
            let mut gc = match config {
                Some(path) => RunConfig::load(&path)?.grad_check,
                None => GradCheckConfig::default(),
            };
            if let Some(t) = trials {
                if t == 0 {
                    eprintln!("error: --trials must be at least 1");
                    return Ok(ExitCode::from(2));
                }
                gc.trials = t;
            }
            let report = commands::run_grad_check(&gc, seed)?;
            println!("{}", serde_json::to_string(&report)?);
            if !report.passed() {
                let w = &report.worst;
                eprintln!(
                    "error: max relative error {:e} exceeds {:e} at trial {} {}[{}, {}] (analytic {:e}, numeric {:e})",
                    report.max_rel_error, report.tolerance, w.trial, w.tensor, w.row, w.col, w.analytic, w.numeric
                );
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
