use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use compaudit::checkpoint::read_json;
use compaudit::pipeline::{run_stage, AuditReport, CellFailure, ExperimentPlan, RunOptions, Stage};

#[derive(Parser)]
#[command(name = "compaudit", version, about = "Membership-leakage audit of compressed classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage, or only the one given by --stage.
    Run {
        #[command(flatten)]
        common: Common,
        /// train, compress, attack, evaluate or report
        #[arg(long, value_parser = parse_stage)]
        stage: Option<Stage>,
    },
    /// Train victim and shadow originals.
    Train(Common),
    /// Build the compression matrix from trained originals.
    Compress(Common),
    /// Run the selected attacks.
    Attack(Common),
    /// Compute metrics from attack outputs.
    Evaluate(Common),
    /// Write report.json, report.txt and CSV tables.
    Report(Common),
    /// Parse and validate a plan without running it.
    Validate {
        #[arg(long)]
        plan: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment plan (TOML)
    #[arg(long)]
    plan: PathBuf,
    /// Output directory shared by all stages
    #[arg(long, env = "COMPAUDIT_OUT", default_value = "out")]
    out: PathBuf,
    /// Parallel jobs; defaults to the number of CPUs
    #[arg(long, env = "COMPAUDIT_WORKERS")]
    workers: Option<usize>,
    /// Overrides the plan's seed base.
    #[arg(long)]
    seed_base: Option<u64>,
    /// Also store fitted meta-classifiers as JSON.
    #[arg(long)]
    save_classifiers: bool,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: compaudit::Error| e.to_string())
}

/// Runs `stages` and returns the failed cells. A run ending in `report`
/// lists every failure recorded in the report.
fn execute(common: &Common, stages: &[Stage]) -> compaudit::Result<Vec<CellFailure>> {
    let mut plan = ExperimentPlan::from_file(&common.plan)?;
    if let Some(s) = common.seed_base {
        plan.seed_base = s;
    }
    let opts = RunOptions {
        out_dir: common.out.clone(),
        workers: common.workers,
        base_dir: common.plan.parent().map(PathBuf::from).unwrap_or_default(),
        save_classifiers: common.save_classifiers,
    };
    let mut failures = Vec::new();
    for &stage in stages {
        eprintln!("[{}] running", stage.name());
        failures.extend(run_stage(&plan, &opts, stage)?.failures);
    }
    if stages.contains(&Stage::Report) {
        print!("{}", std::fs::read_to_string(opts.out_dir.join("report.txt"))?);
        let report: AuditReport = read_json(opts.out_dir.join("report.json"))?;
        failures = report.failures;
    }
    Ok(failures)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, stages) = match &cli.command {
        Command::Run { common, stage } => (common, stage.map_or(Stage::ALL.to_vec(), |s| vec![s])),
        Command::Train(c) => (c, vec![Stage::Train]),
        Command::Compress(c) => (c, vec![Stage::Compress]),
        Command::Attack(c) => (c, vec![Stage::Attack]),
        Command::Evaluate(c) => (c, vec![Stage::Evaluate]),
        Command::Report(c) => (c, vec![Stage::Report]),
        Command::Validate { plan } => {
            return match ExperimentPlan::from_file(plan) {
                Ok(p) => {
                    println!("plan ok, hash {}", p.hash());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    match execute(common, &stages) {
        Ok(failures) => {
            if failures.is_empty() {
                return ExitCode::SUCCESS;
            }
            eprintln!("{} cell(s) failed:", failures.len());
            for f in failures {
                eprintln!("  [{}] {}: {}", f.stage, f.cell, f.message);
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
