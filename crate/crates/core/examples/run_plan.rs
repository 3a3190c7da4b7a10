//! Runs a plan file through every stage and prints the text report.
//!
//! `cargo run --release --example run_plan -- crates/core/examples/plans/quick.toml out/quick`

use std::path::PathBuf;

use compaudit::pipeline::{run_plan, ExperimentPlan, RunOptions};

fn main() -> compaudit::Result<()> {
    let mut args = std::env::args().skip(1);
    let plan_path = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/plans/quick.toml")));
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("compaudit-run-plan"));
    let plan = ExperimentPlan::from_file(&plan_path)?;
    let opts = RunOptions {
        base_dir: plan_path.parent().map(PathBuf::from).unwrap_or_default(),
        ..RunOptions::new(&out)
    };
    let report = run_plan(&plan, &opts)?;
    print!("{}", report.render_text());
    println!("\noutputs in {}", out.display());
    Ok(())
}
