use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use metacon::app::{self, EvalOptions, TrainOptions};
use metacon::config::Mode;
use metacon::gradcheck::Scale;
use metacon::{Error, OpKind};

#[derive(Parser)]
#[command(name = "metacon", version, about = "Domain-conditioned meta-contrastive training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Meta,
    Baseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Tiny,
    Small,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset described by a config.
    Generate { config: PathBuf },
    /// Train, or resume training, into the config's run directory.
    Train {
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even if the checkpoint came from a different config.
        #[arg(long)]
        force: bool,
    },
    /// Held-out retrieval before and after adaptation.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',')]
        holdout_domains: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        /// Second checkpoint for a side-by-side comparison table.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every gradient in the system.
    Gradcheck {
        #[arg(long, value_enum, default_value = "tiny")]
        scale: ScaleArg,
        /// Flip the sign of one primitive's gradient (harness self-test).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn run(cli: Cli) -> metacon::Result<()> {
    let root = app::output_root();
    match cli.command {
        Command::Generate { config } => {
            let s = app::cmd_generate(&config, &root)?;
            println!("wrote {}", s.path.display());
            for (d, n) in &s.counts {
                println!("domain {d}: {n} samples");
            }
            println!("{} domains", s.counts.len());
        }
        Command::Train {
            config,
            mode,
            resume,
            force,
        } => {
            let opts = TrainOptions {
                config,
                mode: mode.map(|m| match m {
                    ModeArg::Meta => Mode::Meta,
                    ModeArg::Baseline => Mode::Baseline,
                }),
                resume,
                force,
            };
            let s = app::cmd_train(&opts, &root)?;
            match &s.last {
                Some(row) => println!(
                    "iterations {}..={} done, final total loss {:.6}",
                    s.start_iteration + 1,
                    row.iteration,
                    row.metrics.total
                ),
                None => println!("nothing to do: already at iteration {}", s.start_iteration),
            }
            println!("run directory {}", s.run_dir.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            holdout_domains,
            ks,
            compare,
            out,
        } => {
            let s = app::cmd_eval(&EvalOptions {
                checkpoint,
                dataset,
                holdout_domains,
                ks,
                compare,
                out_dir: out,
            })?;
            print!("{}", std::fs::read_to_string(s.out_dir.join(app::SUMMARY_FILE))?);
            println!("reports in {}", s.out_dir.display());
        }
        Command::Gradcheck { scale, inject_fault } => {
            let fault = inject_fault
                .map(|name| {
                    OpKind::from_name(&name).ok_or_else(|| Error::Invalid(format!("unknown op {name:?}")))
                })
                .transpose()?;
            let scale = match scale {
                ScaleArg::Tiny => Scale::Tiny,
                ScaleArg::Small => Scale::Small,
            };
            let report = app::cmd_gradcheck(scale, fault)?;
            print!("{report}");
            let failed: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::GradCheck(failed.join(", ")));
            }
            println!("all {} checks passed", report.checks.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
