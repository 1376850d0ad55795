use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use robustvc::pipeline::{parse_condition, Defense, Lab, RunOptions};
use robustvc::train::TrainMode;
use robustvc::{Error, Result};

#[derive(Parser)]
#[command(name = "rvc-lab", version, about = "Robust voice conversion laboratory")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, default_value = "experiment.toml")]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Concurrent evaluation cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Rebuild artifacts even when current, and overwrite stale ones.
    #[arg(long, global = true)]
    force: bool,
    /// Resample audio that is not 16 kHz instead of rejecting it.
    #[arg(long, global = true)]
    resample: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and validate dataset manifests.
    Prepare,
    /// Train VC checkpoints, the verifier and the builtin denoiser.
    Train {
        /// clean, denoising, denoising_adversarial, verifier, denoiser or all.
        #[arg(long, default_value = "all")]
        what: String,
    },
    /// Enhance WAV files.
    Enhance {
        #[arg(long, default_value = "builtin")]
        kind: String,
        #[arg(long)]
        out_dir: PathBuf,
        inputs: Vec<PathBuf>,
    },
    /// Attack the target utterance of every evaluation pair.
    Attack {
        #[arg(long, default_value = "baseline")]
        defense: String,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Convert every evaluation pair.
    Convert {
        #[arg(long, default_value = "baseline")]
        defense: String,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate one cell.
    Evaluate {
        #[arg(long, default_value = "clean")]
        condition: String,
        #[arg(long, default_value = "baseline")]
        defense: String,
    },
    /// Evaluate the full condition x defense grid.
    Matrix,
    /// Summarize all reports.
    Report,
}

fn defense(s: &str) -> Result<Defense> {
    Defense::parse(s).ok_or_else(|| Error::InvalidInput(format!("unknown defense {s:?}")))
}

fn run(cli: Cli) -> Result<()> {
    let options = RunOptions {
        force: cli.force,
        jobs: cli.jobs,
    };
    let mut lab = Lab::open(&cli.config, cli.seed, options)?;
    lab.config.data.resample |= cli.resample;
    match cli.command {
        Command::Prepare => {
            let (tr, ev) = lab.prepare()?;
            println!("train utterances {tr}, eval utterances {ev}");
        }
        Command::Train { what } => {
            let modes: Vec<&str> = match what.as_str() {
                "all" => vec!["verifier", "denoiser", "clean", "denoising", "denoising_adversarial"],
                w => vec![w],
            };
            for m in modes {
                match m {
                    "verifier" => {
                        let (_, cal) = lab.train_verifier()?;
                        println!("verifier: threshold {:.4} eer {:.4}", cal.threshold, cal.eer);
                    }
                    "denoiser" => {
                        lab.train_builtin_denoiser()?;
                        println!("denoiser: done");
                    }
                    other => {
                        let mode = TrainMode::parse(other)
                            .ok_or_else(|| Error::InvalidInput(format!("unknown training target {other:?}")))?;
                        lab.train_vc(mode)?;
                        println!("{}: done", mode.name());
                    }
                }
            }
        }
        Command::Enhance { kind, out_dir, inputs } => {
            let outs = lab.enhance_files(&inputs, &out_dir, &kind)?;
            println!("enhanced {} file(s) into {}", outs.len(), out_dir.display());
        }
        Command::Attack { defense: d, out_dir } => {
            let d = defense(&d)?;
            let dir = out_dir.unwrap_or_else(|| lab.out().join("attacks").join(d.name()));
            let recs = lab.attack(d, &dir)?;
            println!("attacked {} utterance(s) into {}", recs.len(), dir.display());
        }
        Command::Convert { defense: d, out_dir } => {
            let d = defense(&d)?;
            let dir = out_dir.unwrap_or_else(|| lab.out().join("converted").join(d.name()));
            let outs = lab.convert(d, &dir)?;
            println!("converted {} pair(s) into {}", outs.len(), dir.display());
        }
        Command::Evaluate { condition, defense: d } => {
            let c = parse_condition(&condition)
                .ok_or_else(|| Error::InvalidInput(format!("unknown condition {condition:?}")))?;
            let r = lab.evaluate(c, defense(&d)?)?;
            println!("{} {}: SVAR {:.1}% (threshold {:.4})", r.condition, r.defense, r.svar, r.threshold);
        }
        Command::Matrix => {
            let reports = lab.matrix()?;
            print!("{}", robustvc::eval::summary_table(&reports));
        }
        Command::Report => print!("{}", lab.report()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
