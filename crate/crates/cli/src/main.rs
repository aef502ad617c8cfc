use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kfprune::checkpoint::Checkpoint;
use kfprune::config::RunConfig;
use kfprune::data::accuracy;
use kfprune::pipeline::{load_data, Session};
use kfprune::report::report_text;
use kfprune::verify::run_suite;

/// Second-order pruning of small networks with Kronecker-factored curvature.
#[derive(Parser)]
#[command(name = "kfprune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fresh network and write a checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Iteratively prune a checkpoint until the stop rule holds, then fine-tune.
    Prune {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "in", short)]
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Directory receiving one plan file per iteration.
        #[arg(long)]
        plans: Option<PathBuf>,
        /// File receiving the run report (also printed).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Continue training the remaining weights of a checkpoint.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "in", short)]
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Step count, or epochs with an `ep` suffix.
        #[arg(long, default_value = "1ep")]
        length: String,
    },
    /// Sparsity, FLOPs, weight histogram and magnitude/importance agreement.
    Report { checkpoint: PathBuf },
    /// Run the numerical self-checks; exits 1 if any fails.
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// fine or channel.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    p: Option<f64>,
    /// Statistics steps per iteration, or epochs with an `ep` suffix.
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    damping: Option<f64>,
    /// sampled or empirical.
    #[arg(long)]
    fisher: Option<String>,
    #[arg(long)]
    target_sparsity: Option<f64>,
    #[arg(long)]
    target_flops_ratio: Option<f64>,
    #[arg(long)]
    max_iterations: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Any other configuration key, as key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn apply(&self, mut cfg: RunConfig) -> kfprune::Result<RunConfig> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| kfprune::Error::io(path, e))?;
            cfg.apply_text(&text)
                .map_err(|e| kfprune::Error::Config(format!("{}: {e}", path.display())))?;
        }
        if self.target_sparsity.is_some() || self.target_flops_ratio.is_some() || self.max_iterations.is_some() {
            cfg.target_sparsity = None;
            cfg.target_flops_ratio = None;
            cfg.max_iterations = None;
        }
        let flags: [(&str, Option<String>); 10] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("mode", self.mode.clone()),
            ("p", self.p.map(|v| v.to_string())),
            ("steps", self.steps.clone()),
            ("damping", self.damping.map(|v| v.to_string())),
            ("fisher", self.fisher.clone()),
            ("target_sparsity", self.target_sparsity.map(|v| v.to_string())),
            ("target_flops_ratio", self.target_flops_ratio.map(|v| v.to_string())),
            ("max_iterations", self.max_iterations.map(|v| v.to_string())),
            ("threads", self.threads.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| kfprune::Error::Config(format!("--set expects key=value, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

enum Failure {
    Verification,
    Error(kfprune::Error),
}

impl From<kfprune::Error> for Failure {
    fn from(e: kfprune::Error) -> Self {
        Failure::Error(e)
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> kfprune::Result<()> {
    fs::write(path, bytes).map_err(|e| kfprune::Error::io(path, e))
}

fn load(path: &Path) -> kfprune::Result<(Checkpoint, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let cfg = RunConfig::parse(&ck.config)?;
    Ok((ck, cfg))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { run, out } => {
            let cfg = run.apply(RunConfig::default())?;
            let (train, test) = load_data(&cfg)?;
            let mut s = Session::new(cfg)?;
            let loss = s.pretrain(&train)?;
            println!("steps\t{}", s.meta.train_steps);
            println!("mean_loss\t{loss:.6}");
            println!("train_accuracy\t{:.4}", accuracy(&s.model, &train)?);
            println!("test_accuracy\t{:.4}", accuracy(&s.model, &test)?);
            s.checkpoint().save(&out)?;
        }
        Command::Prune {
            run,
            input,
            out,
            plans,
            report,
        } => {
            let (ck, stored) = load(&input)?;
            let cfg = run.apply(stored)?;
            let (train, test) = load_data(&cfg)?;
            if let Some(dir) = &plans {
                fs::create_dir_all(dir).map_err(|e| kfprune::Error::io(dir, e))?;
            }
            let mut s = Session::resume(cfg, ck)?;
            let summary = s.prune(&train, &test, |_, row, plan| {
                println!(
                    "iteration {}: removed {} ({} -> {} remaining), flops {} -> {}, test accuracy {:.4}",
                    row.iteration,
                    row.victims,
                    row.remaining_before,
                    row.remaining_after,
                    row.flops_before,
                    row.flops_after,
                    row.test_accuracy
                );
                if let Some(dir) = &plans {
                    write(&dir.join(format!("plan-{:04}.tsv", row.iteration)), plan)?;
                }
                Ok(())
            })?;
            let text = summary.to_text();
            print!("{text}");
            if let Some(path) = &report {
                write(path, &text)?;
            }
            s.checkpoint().save(&out)?;
        }
        Command::Finetune {
            run,
            input,
            out,
            length,
        } => {
            let (ck, stored) = load(&input)?;
            let cfg = run.apply(stored)?;
            let (train, test) = load_data(&cfg)?;
            let mut s = Session::resume(cfg, ck)?;
            let steps = length
                .parse::<kfprune::config::Steps>()?
                .resolve(s.steps_per_epoch(&train));
            let loss = s.finetune(&train, steps)?;
            println!("steps\t{steps}");
            println!("mean_loss\t{loss:.6}");
            println!("test_accuracy\t{:.4}", accuracy(&s.model, &test)?);
            s.checkpoint().save(&out)?;
        }
        Command::Report { checkpoint } => {
            print!("{}", report_text(&Checkpoint::load(&checkpoint)?)?);
        }
        Command::Oracle { seed } => {
            let checks = run_suite(seed)?;
            for c in &checks {
                println!("{}\t{}\t{}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().any(|c| !c.passed) {
                return Err(Failure::Verification);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => ExitCode::from(1),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
