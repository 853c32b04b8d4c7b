//! `famarl` — file-based driver for the macro-action RL pipeline.
//!
//! Stages couple through files in the output directory (see
//! `famarl_core::pipeline` for the artifact map). Exit codes: 0 success,
//! 2 usage error, 3 numerical failure.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use famarl_core::config::RunConfig;
use famarl_core::env::Task;
use famarl_core::pipeline;
use famarl_core::scripts::ScriptKind;
use famarl_core::{Error, Result};

#[derive(Parser)]
#[command(name = "famarl", version, about = "Macro-action RL pipeline")]
struct Cli {
    /// Master seed; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// JSON run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScriptArg {
    /// Expert script: down-only, down-and-up, pushed-down-only,
    /// pushed-down-and-up, or "all".
    #[arg(long)]
    script: String,
}

fn parse_scripts(s: &str) -> Result<Vec<ScriptKind>> {
    if s == "all" {
        Ok(ScriptKind::ALL.to_vec())
    } else {
        Ok(vec![ScriptKind::parse(s)?])
    }
}

fn parse_one_script(s: &str) -> Result<ScriptKind> {
    if s == "all" {
        return Err(Error::usage("this stage takes a single script, not 'all'"));
    }
    ScriptKind::parse(s)
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted-expert demonstration corpora.
    GenDemos {
        #[command(flatten)]
        script: ScriptArg,
        /// Demonstrations per script (overrides the config).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Cut a demonstration corpus into macro-action segments.
    Segment {
        #[command(flatten)]
        script: ScriptArg,
    },
    /// Train the sequence-VAE on a segmented corpus (calibrates C_last
    /// first unless the config provides one).
    TrainFavae {
        #[command(flatten)]
        script: ScriptArg,
        /// Capacity-penalty weight (overrides the config).
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Run only the low-beta capacity calibration and report C_last.
    CalibrateC {
        #[command(flatten)]
        script: ScriptArg,
    },
    /// Sweep one latent coordinate of a trained model and export the
    /// decoded trajectories.
    Traverse {
        /// FAVAE checkpoint path.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        ladder: usize,
        #[arg(long)]
        index: usize,
        /// Comma-separated traversal values.
        #[arg(long, default_value = "-3,-1,1,3", allow_hyphen_values = true)]
        values: String,
    },
    /// Train a policy with PPO.
    TrainPolicy {
        /// famarl (macro actions), ppo (primitive), or figar (repetition).
        #[arg(long)]
        agent: String,
        /// FAVAE checkpoint; required for --agent famarl.
        #[arg(long)]
        favae: Option<PathBuf>,
        /// Environment task: base or maze (defaults to the config's task).
        #[arg(long)]
        task: Option<String>,
        /// Primitive-step training budget (overrides the config).
        #[arg(long)]
        total_steps: Option<usize>,
    },
    /// Deterministically evaluate a trained policy.
    Evaluate {
        #[arg(long)]
        agent: String,
        #[arg(long)]
        favae: Option<PathBuf>,
        /// Environment task: base or maze (defaults to the config's task).
        #[arg(long)]
        task: Option<String>,
        /// Episode count (overrides the config).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run the fast invariant suites.
    Check,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.world.seed = seed;
    }
    Ok(cfg)
}

/// Switch the task only; geometry (map size, gap width, ...) stays as
/// configured so a config file fully determines the environment.
fn apply_task(cfg: &mut RunConfig, task: &str) -> Result<()> {
    match task {
        "base" => {
            cfg.world.task = Task::Base;
            Ok(())
        }
        "maze" => {
            cfg.world.task = Task::Maze;
            Ok(())
        }
        other => Err(Error::usage(format!(
            "unknown task '{other}'; expected base or maze"
        ))),
    }
}

fn parse_values(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::usage(format!("invalid traversal value '{v}'")))
        })
        .collect()
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenDemos { script, n } => {
            if let Some(n) = n {
                cfg.demos_per_script = *n;
            }
            let kinds = parse_scripts(&script.script)?;
            pipeline::gen_demos(out, &cfg, &kinds)?;
            for k in &kinds {
                println!(
                    "wrote {} demos to {}",
                    cfg.demos_per_script,
                    pipeline::demos_jsonl(out, *k).display()
                );
            }
        }
        Command::Segment { script } => {
            let kind = parse_one_script(&script.script)?;
            let count = pipeline::segment(out, &cfg, kind)?;
            println!(
                "wrote {count} segments to {}",
                pipeline::segments_jsonl(out, kind).display()
            );
        }
        Command::TrainFavae { script, beta } => {
            if let Some(beta) = beta {
                cfg.favae.beta = *beta;
            }
            let kind = parse_one_script(&script.script)?;
            let ladder = pipeline::train_favae(out, &cfg, kind)?;
            println!(
                "trained FAVAE (beta={}, C_last={:?}) -> {}",
                ladder.beta,
                ladder.c_last,
                pipeline::favae_ckpt(out, kind).display()
            );
        }
        Command::CalibrateC { script } => {
            let kind = parse_one_script(&script.script)?;
            let c = pipeline::calibrate_c(out, &cfg, kind)?;
            println!("calibrated C_last = {c:?}");
        }
        Command::Traverse {
            model,
            ladder,
            index,
            values,
        } => {
            let values = parse_values(values)?;
            let n = pipeline::traverse(out, &cfg, model, *ladder, *index, &values)?;
            println!(
                "wrote {n} traversal trajectories to {}",
                pipeline::traversal_jsonl(out).display()
            );
        }
        Command::TrainPolicy {
            agent,
            favae,
            task,
            total_steps,
        } => {
            if let Some(task) = task {
                apply_task(&mut cfg, task)?;
            }
            if let Some(steps) = total_steps {
                cfg.ppo.total_steps = *steps;
            }
            let ckpt = pipeline::train_policy(out, &cfg, agent, favae.as_deref())?;
            println!("trained {agent} policy -> {}", ckpt.display());
        }
        Command::Evaluate {
            agent,
            favae,
            task,
            episodes,
        } => {
            if let Some(task) = task {
                apply_task(&mut cfg, task)?;
            }
            if let Some(eps) = episodes {
                cfg.eval_episodes = *eps;
            }
            let report = pipeline::evaluate(out, &cfg, agent, favae.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Check => {
            let report = pipeline::check(&cfg)?;
            for (name, ok) in &report.checks {
                println!("{name}: {}", if *ok { "pass" } else { "FAIL" });
            }
            if !report.all_passed() {
                return Err(Error::numerical("invariant checks failed"));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => ExitCode::from(2),
                Error::Numerical(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
