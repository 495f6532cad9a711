use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aggc::config::{apply_override, load_table, resolve_output, RunConfig};
use aggc::runner::{self, tail_mean_loss};
use aggc::Result;

/// Adaptive group-wise gradient clipping experiments.
///
/// Exit codes: 0 success, 1 configuration error, 2 numerical failure,
/// 3 I/O failure. Relative output directories are placed under
/// $AGGC_OUTPUT_ROOT when it is set.
#[derive(Parser)]
#[command(name = "aggc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        config: PathBuf,
        /// Override a config value, e.g. `--set strategy.beta=0.9`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run two configs on the same workload and write paired scale traces.
    Compare {
        config_a: PathBuf,
        config_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Applied to both configs.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run a config once per value of one parameter.
    Sweep {
        config: PathBuf,
        #[arg(long, value_name = "KEY")]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn fmt_loss(loss: Option<f64>) -> String {
    loss.map_or_else(|| "-".to_string(), |l| format!("{l:.6}"))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config, overrides } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            let out = runner::run(&cfg)?;
            let s = &out.summary;
            println!(
                "run {}: {} steps, {} groups, clip frequency {:.4}, boost frequency {:.4}, loss {} -> {}",
                s.run_id,
                s.steps,
                s.groups.len(),
                s.clip_frequency(),
                s.boost_frequency(),
                fmt_loss(s.initial_loss),
                fmt_loss(tail_mean_loss(&out.records, 0.1)),
            );
            println!("logs in {}", out.dir.display());
        }
        Command::Compare {
            config_a,
            config_b,
            out,
            overrides,
        } => {
            let a = RunConfig::load(&config_a, &overrides)?;
            let b = RunConfig::load(&config_b, &overrides)?;
            let out = resolve_output(out);
            let report = runner::compare(&a, &b, &out)?;
            println!(
                "compare {} ({}) vs {} ({}): max |scale delta| {:.6}",
                report.run_a,
                report.strategy_a,
                report.run_b,
                report.strategy_b,
                report.max_abs_delta
            );
            if let Some(s) = &report.spillover {
                println!(
                    "stable-group scale at spike steps: {:.6} vs {:.6}",
                    s.mean_stable_scale_a, s.mean_stable_scale_b
                );
            }
            println!(
                "paired traces in {}",
                out.join(runner::PAIRED_CSV).display()
            );
        }
        Command::Sweep {
            config,
            param,
            values,
            overrides,
        } => {
            let mut table = load_table(&config)?;
            for o in &overrides {
                apply_override(&mut table, o)?;
            }
            let rows = runner::sweep(&table, &param, &values)?;
            println!(
                "{:<16} {:>12} {:>12} {:>10} {:>10}",
                param, "first loss", "tail loss", "clip", "boost"
            );
            for r in &rows {
                println!(
                    "{:<16} {:>12} {:>12} {:>10.4} {:>10.4}",
                    r.value,
                    fmt_loss(r.initial_loss),
                    fmt_loss(r.tail_loss),
                    r.clip_frequency,
                    r.boost_frequency
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
