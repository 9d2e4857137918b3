use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geopath::trainer::{EpochMetrics, EvalMode, ForcePolicy};
use geopath_cli::commands::{self, EvalArgs, Split};
use geopath_cli::{CliError, CliResult, Context, Overrides, RunConfig, DEFAULT_REPORT_DIR, REPORT_DIR_ENV};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "geopath", version, about = "Geo-conditioned dynamic path selection experiments")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,
    /// Master seed for data, initialisation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving metrics streams and reports.
    #[arg(long, global = true, env = REPORT_DIR_ENV, value_name = "DIR")]
    report_dir: Option<PathBuf>,
    /// Drop the location branch from the policy network.
    #[arg(long, global = true)]
    remove_mlp: bool,
    /// Drop the uniqueness term from the reward.
    #[arg(long, global = true)]
    remove_u: bool,
    /// Weight of the location branch in the fused logits.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Weight of the sparsity term of the reward.
    #[arg(long, global = true)]
    theta_s: Option<f64>,
    /// Weight of the uniqueness term of the reward.
    #[arg(long, global = true)]
    theta_d: Option<f64>,
    /// Penalty for a wrong prediction.
    #[arg(long, global = true)]
    lambda: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic landmark dataset.
    Generate {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train the recognition network with every block active.
    Pretrain {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "CKPT")]
        out: PathBuf,
    },
    /// Train the policy network against a frozen recognition network.
    TrainPolicy {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "CKPT")]
        recognition: PathBuf,
        #[arg(long, value_name = "CKPT")]
        out: PathBuf,
    },
    /// Finetune both networks jointly.
    Finetune {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "CKPT")]
        recognition: PathBuf,
        #[arg(long, value_name = "CKPT")]
        policy: PathBuf,
        #[arg(long, value_name = "CKPT")]
        out: PathBuf,
    },
    /// Evaluate a recognition network under learned or forced paths.
    Evaluate {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "CKPT")]
        recognition: PathBuf,
        #[arg(long, value_name = "CKPT")]
        policy: Option<PathBuf>,
        /// Path selection: greedy or sample.
        #[arg(long, default_value = "greedy")]
        mode: EvalMode,
        /// Override the policy network with a fixed path: ones or zeros.
        #[arg(long)]
        force_policy: Option<ForcePolicy>,
        /// Which CSV of the data directory to read: eval or train.
        #[arg(long, default_value = "eval")]
        split: Split,
    },
    /// Summarise a policy log: diversity, uniqueness, Pr and C(N, k).
    Analyze {
        #[arg(long, value_name = "JSONL")]
        log: PathBuf,
    },
    /// Print the resolved configuration.
    Config,
}

fn context(g: &GlobalArgs) -> CliResult<Context> {
    let base = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let overrides = Overrides {
        seed: g.seed,
        remove_mlp: g.remove_mlp,
        remove_u: g.remove_u,
        alpha: g.alpha,
        theta_s: g.theta_s,
        theta_d: g.theta_d,
        lambda: g.lambda,
    };
    Ok(Context {
        config: base.resolve(&overrides)?,
        report_dir: report_dir(g),
    })
}

fn report_dir(g: &GlobalArgs) -> PathBuf {
    g.report_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_REPORT_DIR))
}

fn stage_summary(command: &str, rows: &[EpochMetrics], out: &Path) -> serde_json::Value {
    let last = rows.last();
    json!({
        "command": command,
        "epochs": rows.len(),
        "accuracy": last.map(|r| r.accuracy_greedy),
        "mean_pr": last.map(|r| r.eval_pr),
        "diversity": last.map(|r| r.diversity),
        "checkpoint": out.display().to_string(),
    })
}

fn run(cli: Cli) -> CliResult<serde_json::Value> {
    if let Command::Analyze { log } = &cli.command {
        let report = commands::analyze(&report_dir(&cli.global), log)?;
        return Ok(json!({ "command": "analyze", "report": report }));
    }
    let ctx = context(&cli.global)?;
    Ok(match cli.command {
        Command::Generate { out } => {
            let s = commands::generate(&ctx, &out)?;
            json!({ "command": "generate", "summary": s, "out": out.display().to_string() })
        }
        Command::Pretrain { data, out } => {
            let rows = commands::pretrain(&ctx, &data, &out)?;
            stage_summary("pretrain", &rows, &out)
        }
        Command::TrainPolicy {
            data,
            recognition,
            out,
        } => {
            let rows = commands::policy(&ctx, &data, &recognition, &out)?;
            stage_summary("train-policy", &rows, &out)
        }
        Command::Finetune {
            data,
            recognition,
            policy,
            out,
        } => {
            let rows = commands::finetune(&ctx, &data, &recognition, &policy, &out)?;
            stage_summary("finetune", &rows, &out)
        }
        Command::Evaluate {
            data,
            recognition,
            policy,
            mode,
            force_policy,
            split,
        } => {
            let args = EvalArgs {
                mode,
                force: force_policy,
                split,
            };
            let report = commands::evaluate(&ctx, &data, &recognition, policy.as_deref(), args)?;
            json!({ "command": "evaluate", "summary": report.summary })
        }
        Command::Analyze { .. } => unreachable!("handled above"),
        Command::Config => serde_json::to_value(&ctx.config)
            .map_err(|e| CliError::Internal(e.to_string()))?,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments");
            let err = CliError::Usage(first.trim_start_matches("error: ").to_string());
            eprintln!("{}", err.to_line());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
