use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use csiloop_core::harness::checks::{self, CheckReport, GradcheckOptions};
use csiloop_core::harness::commands::{self, Target};
use csiloop_core::harness::{ConfigError, ExperimentConfig, MetricsPhase, MetricsTable};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(
    name = "csiloop",
    version,
    about = "Closed-loop CSI activity recognition experiments"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML config file; keys not given keep their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set model.epochs=4. Applied after CSILOOP_* variables.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Output directory (same as --set output_dir=DIR).
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// Run independent seeds concurrently.
    #[arg(long, global = true)]
    parallel_seeds: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one baseline per seed on in-domain data.
    TrainBaseline,
    /// Score the saved baselines under the configured shift.
    InjectShift,
    /// Shift, then one adaptation cycle per seed.
    RunClosedLoop {
        /// Repeat for every precision in sweep_precisions.
        #[arg(long, conflicts_with = "precision")]
        sweep: bool,
        /// Teacher precision; repeat to run several.
        #[arg(long)]
        precision: Vec<f64>,
    },
    /// Score a checkpoint (default: the saved baselines).
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use the shifted test recordings.
        #[arg(long)]
        shifted: bool,
    },
    /// Analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb one recurrent gradient entry by this amount.
        #[arg(long, value_name = "DELTA")]
        inject_fault: Option<f64>,
    },
    /// Fast pairing against the brute-force oracle.
    Synccheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Codec round trips, decoder fuzzing and checkpoint transfer.
    Protofuzz {
        #[arg(long, default_value_t = 10_000)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize the metric files in the output directory.
    Report,
    /// Print the effective configuration.
    ShowConfig,
}

fn load_config(g: &Global) -> Result<ExperimentConfig, ConfigError> {
    let mut sets = g.sets.clone();
    if let Some(o) = &g.output {
        let quoted = toml::Value::String(o.display().to_string()).to_string();
        sets.push(format!("output_dir={quoted}"));
    }
    ExperimentConfig::load(g.config.as_deref(), std::env::vars(), &sets)
}

fn print_table(t: &MetricsTable) {
    for r in t.sorted() {
        let p = r
            .teacher_precision
            .map(|p| format!(" p={p}"))
            .unwrap_or_default();
        println!(
            "seed {:>4} {:<9}{}  overall {:6.2}%",
            r.seed,
            r.phase.name(),
            p,
            r.overall
        );
    }
}

fn print_check(r: &CheckReport, dir: &Path) -> u8 {
    for p in &r.properties {
        println!(
            "{} {}/{}: {} ({} cases)",
            if p.passed { "PASS" } else { "FAIL" },
            r.check,
            p.name,
            p.detail,
            p.cases
        );
    }
    let out = dir.join("checks");
    if std::fs::create_dir_all(&out).is_ok() {
        let _ = std::fs::write(out.join(format!("{}.json", r.check)), r.to_json());
    }
    if r.passed {
        0
    } else {
        EXIT_FAILURE
    }
}

fn print_targets(targets: &[Target]) -> u8 {
    for t in targets {
        println!(
            "{} {}: {}",
            if t.passed { "PASS" } else { "FAIL" },
            t.name,
            t.detail
        );
    }
    if targets.iter().all(|t| t.passed) {
        0
    } else {
        EXIT_FAILURE
    }
}

fn run(cli: Cli) -> Result<u8, csiloop_core::Error> {
    let cfg = match load_config(&cli.global) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return Ok(EXIT_CONFIG);
        }
    };
    let par = cli.global.parallel_seeds;
    let dir = cfg.output_dir.clone();
    Ok(match cli.command {
        Command::TrainBaseline => {
            let t = commands::train_baselines(&cfg, par)?;
            print_table(&t);
            0
        }
        Command::InjectShift => {
            let t = commands::inject_shift(&cfg, par)?;
            print_table(&t);
            0
        }
        Command::RunClosedLoop { sweep, precision } => {
            let s = commands::closed_loop(&cfg, par, sweep, &precision)?;
            print_table(&s.metrics);
            for r in &s.runs {
                println!(
                    "seed {:>4} p={:.3} cycle {}",
                    r.seed,
                    r.teacher_precision,
                    serde_json::to_string(&r.outcome).unwrap_or_default()
                );
            }
            0
        }
        Command::Eval {
            checkpoint,
            shifted,
        } => {
            let t = commands::eval(&cfg, checkpoint.as_deref(), shifted)?;
            print_table(&t);
            let phase = if shifted {
                MetricsPhase::Shifted
            } else {
                MetricsPhase::Baseline
            };
            if let Some(m) = t.mean_overall(phase, None) {
                println!("mean overall {m:.2}%");
            }
            0
        }
        Command::Gradcheck {
            instances,
            seed,
            inject_fault,
        } => print_check(
            &checks::gradcheck(&GradcheckOptions {
                instances,
                seed,
                fault: inject_fault,
                ..Default::default()
            }),
            &dir,
        ),
        Command::Synccheck { cases, seed } => print_check(&checks::synccheck(cases, seed), &dir),
        Command::Protofuzz { cases, seed } => print_check(&checks::protofuzz(cases, seed), &dir),
        Command::Report => {
            let r = commands::report(&cfg)?;
            print!("{}", r.markdown);
            print_targets(&r.targets)
        }
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            0
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            // A missing or mismatched baseline is a setup problem.
            let code = if matches!(e, csiloop_core::Error::Invalid(_)) {
                EXIT_CONFIG
            } else {
                EXIT_FAILURE
            };
            ExitCode::from(code)
        }
    }
}
