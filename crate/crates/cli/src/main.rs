use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use uavnav_cli::commands::{self, EvalOptions, EvalPolicy, TrainOptions};
use uavnav_cli::{CliError, RunConfig};
use uavnav_policy::Head;

#[derive(Parser, Debug)]
#[command(name = "uavnav", version, about = "Instruction-following UAV navigation: data, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Key-value config file; flags and --set override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; stage seeds derive from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set data.trajectories=N.
    #[arg(long)]
    trajectories: Option<usize>,
    /// Validate the config and inputs, then exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug, Clone)]
struct Training {
    /// Directory with the corpora (default: --out).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue from the last checkpoint in --out.
    #[arg(long)]
    resume: bool,
    /// Stop after N optimizer steps, leaving a resumable checkpoint.
    #[arg(long, value_name = "N")]
    stop_after: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum HeadArg {
    Lm,
    Wp,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/val/test corpora, the reinforcement subset and statistics.
    BuildData {
        #[command(flatten)]
        common: Common,
    },
    /// Print corpus statistics.
    Stats {
        #[command(flatten)]
        common: Common,
        /// Directory with the corpora (default: --out).
        #[arg(long)]
        data: Option<PathBuf>,
        /// JSON instead of TSV.
        #[arg(long)]
        json: bool,
    },
    /// Supervised fine-tuning of both heads.
    TrainSft {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: Training,
    },
    /// Group-relative reinforcement fine-tuning of the language head.
    TrainRft {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: Training,
        /// Supervised checkpoint to start from (default: <out>/sft.ckpt).
        #[arg(long)]
        sft: Option<PathBuf>,
    },
    /// Closed-loop evaluation on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory with the corpora (default: --out).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        head: HeadArg,
        /// Evaluate expert injection instead of a model; fails unless perfect.
        #[arg(long, conflicts_with_all = ["checkpoint", "random_walk"])]
        oracle: bool,
        /// Evaluate the uniform random-walk baseline.
        #[arg(long, conflicts_with = "checkpoint")]
        random_walk: bool,
        /// Also write per-episode records.
        #[arg(long)]
        trace: bool,
    },
}

fn resolve(c: &Common) -> Result<RunConfig, CliError> {
    let mut overrides = Vec::new();
    if let Some(s) = c.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(n) = c.trajectories {
        overrides.push(format!("data.trajectories={n}"));
    }
    overrides.extend(c.set.iter().cloned());
    let cfg = RunConfig::resolve(c.config.as_deref(), &overrides).map_err(CliError::usage)?;
    if let Some(w) = c.workers {
        if w == 0 {
            return Err(CliError::usage("--workers must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::runtime(format!("thread pool: {e}")))?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::BuildData { common } => {
            let cfg = resolve(&common)?;
            commands::build_data(&cfg, &common.out, common.dry_run)
        }
        Command::Stats { common, data, json } => {
            resolve(&common)?;
            commands::stats(data.as_deref().unwrap_or(&common.out), json)
        }
        Command::TrainSft { common, training } => {
            let cfg = resolve(&common)?;
            let opts = TrainOptions {
                resume: training.resume,
                dry_run: common.dry_run,
                stop_after: training.stop_after,
            };
            commands::train_sft_cmd(&cfg, training.data.as_deref().unwrap_or(&common.out), &common.out, &opts)
        }
        Command::TrainRft { common, training, sft } => {
            let cfg = resolve(&common)?;
            let opts = TrainOptions {
                resume: training.resume,
                dry_run: common.dry_run,
                stop_after: training.stop_after,
            };
            let data = training.data.as_deref().unwrap_or(&common.out);
            commands::train_rft_cmd(&cfg, data, &common.out, sft.as_deref(), &opts)
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            head,
            oracle,
            random_walk,
            trace,
        } => {
            let cfg = resolve(&common)?;
            let heads = match head {
                HeadArg::Lm => vec![Head::Lm],
                HeadArg::Wp => vec![Head::Wp],
                HeadArg::Both => vec![Head::Lm, Head::Wp],
            };
            let policy = if oracle {
                EvalPolicy::Oracle
            } else if random_walk {
                EvalPolicy::RandomWalk
            } else {
                EvalPolicy::Checkpoint
            };
            if common.dry_run {
                println!("config ok");
                return Ok(());
            }
            let opts = EvalOptions {
                heads,
                policy,
                checkpoint,
                trace,
            };
            commands::eval_cmd(&cfg, data.as_deref().unwrap_or(&common.out), &common.out, &opts).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UAVNAV_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
