use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ens_lab::{list_scenarios, run, run_all, RunOptions};

#[derive(Parser)]
#[command(name = "ens-lab", version, about = "Exposure-notification attack lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print every scenario id.
    List,
    /// Run one scenario and print its report as JSON.
    Run {
        id: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        trace_out: Option<PathBuf>,
        /// KEY=VALUE override; repeatable.
        #[arg(long = "config", value_name = "KEY=VALUE")]
        config: Vec<String>,
    },
    /// Run all scenarios, optionally filtered by a glob on the id.
    Suite {
        #[arg(long)]
        filter: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Directory for one NDJSON trace per scenario.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
    },
}

fn main() -> Result<ExitCode> {
    let ok = match Cli::parse().cmd {
        Cmd::List => {
            for id in list_scenarios() {
                println!("{id}");
            }
            true
        }
        Cmd::Run {
            id,
            seed,
            trace_out,
            config,
        } => {
            let opts = RunOptions {
                seed,
                overrides: config,
                trace_out,
            };
            let r = run(&id, &opts)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            eprintln!("{}", r.summary_line());
            r.pass
        }
        Cmd::Suite {
            filter,
            report,
            seed,
            trace_dir,
        } => {
            let s = run_all(filter.as_deref(), seed, trace_dir.as_deref())?;
            for r in &s.runs {
                println!("{}", r.summary_line());
            }
            println!("{} passed, {} failed, {:.0} ms", s.passed, s.failed, s.wall_ms);
            if let Some(p) = report {
                s.save(&p).with_context(|| format!("writing {}", p.display()))?;
            }
            s.all_passed()
        }
    };
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
