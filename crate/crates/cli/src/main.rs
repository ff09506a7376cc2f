use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sgdrive_cli::commands::{self, EvalPolicy};
use sgdrive_cli::{CliError, Result, RunConfig};

#[derive(Parser)]
#[command(name = "sgdrive", version, about = "Subgoal-angle imitation driving pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines (or a JSON object).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr0=0.0005`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Global seed for collection, balancing, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Record expert episodes in the training town.
    Collect {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        town_seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Balance the steer distribution and compute throttle class weights.
    Balance {
        #[arg(long)]
        data: PathBuf,
        /// Output directory; defaults to the dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one policy on a balanced dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// angle-branched, angle-input or discrete-branched.
        #[arg(long)]
        arch: Option<String>,
        /// as or asd.
        #[arg(long)]
        channels: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Closed-loop evaluation on held-out paths.
    Eval {
        #[arg(long, conflicts_with = "policy", required_unless_present = "policy")]
        checkpoint: Option<PathBuf>,
        /// `expert` evaluates the scripted expert.
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Sensing channel mode; must match the checkpoint.
        #[arg(long)]
        channels: Option<String>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Merge eval and training reports of several runs.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &common.config {
        cfg.load_file(p)?;
    }
    for s in &common.sets {
        cfg.set_pair(s)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match cli.command {
        Command::Collect { out, episodes, town_seed, jobs } => {
            let cfg = resolve(
                c,
                &[
                    ("data.episodes", episodes.map(|v| v.to_string())),
                    ("sim.town_seed", town_seed.map(|v| v.to_string())),
                ],
            )?;
            let index = commands::collect(&cfg, &out, jobs)?;
            println!("recorded {} episodes into {}", index.episodes.len(), out.display());
        }
        Command::Balance { data, out } => {
            let cfg = resolve(c, &[])?;
            let out = out.unwrap_or_else(|| data.clone());
            let set = commands::balance(&cfg, &data, &out)?;
            println!(
                "kept {} samples; class weights {}",
                set.samples.len(),
                set.class_weights
                    .map_or("undefined".into(), |(s, g)| format!("stop {s:.4} go {g:.4}"))
            );
        }
        Command::Train { data, out, arch, channels, epochs } => {
            let cfg = resolve(
                c,
                &[
                    ("model.arch", arch),
                    ("model.channels", channels),
                    ("train.epochs", epochs.map(|v| v.to_string())),
                ],
            )?;
            let (_, report) = commands::train(&cfg, &data, &out, |s| {
                println!(
                    "epoch {:3}  total {:.5}  steer {:.5}  throttle {:.5}  lr {:.2e}",
                    s.epoch, s.total, s.steer_loss, s.throttle_loss, s.lr
                )
            })?;
            println!("trained in {:.1} s; model at {}", report.wall_time_s, out.join(commands::MODEL_FILE).display());
        }
        Command::Eval { checkpoint, policy, out, channels, paths, jobs } => {
            let cfg = resolve(
                c,
                &[
                    ("model.channels", channels),
                    ("eval.n_paths", paths.map(|v| v.to_string())),
                ],
            )?;
            let policy = match (checkpoint, policy.as_deref()) {
                (Some(p), _) => EvalPolicy::Checkpoint(p),
                (None, Some("expert")) => EvalPolicy::Expert,
                (None, other) => {
                    return Err(CliError::Config(format!(
                        "unknown policy `{}`; use --policy expert or --checkpoint",
                        other.unwrap_or("")
                    )))
                }
            };
            let r = commands::eval(&cfg, &policy, &out, jobs)?;
            println!(
                "{}: success {:.1}% ({}/{}), normal driving {}",
                r.policy,
                r.success_rate,
                r.n_success,
                r.n_episodes,
                sgdrive::evaluation::fmt_metric(r.normal_driving_rate)
            );
        }
        Command::Report { runs, out } => {
            let r = commands::report(&runs, &out)?;
            println!("merged {} runs into {}", r.runs.len(), out.display());
            for t in &r.trends {
                println!(
                    "{}: {} vs {} -> {}",
                    t.name,
                    sgdrive::evaluation::fmt_metric(t.lhs),
                    sgdrive::evaluation::fmt_metric(t.rhs),
                    t.holds.map_or("undefined".into(), |h| h.to_string())
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
