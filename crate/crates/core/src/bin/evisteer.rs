use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use evisteer::harness::{
    gradcheck_loss, run_ablation, run_domain_generalization, run_fewshot, run_sweep,
    run_verification, sweep_csv, write_records, AblationVariant, ExperimentConfig, Harness,
    OutputFormat, RunRecord, SweepAxis,
};
use evisteer::steering::count_parameters;
use evisteer::Error;

#[derive(Parser)]
#[command(name = "evisteer", version, about = "Evidential steering experiments on synthetic tasks")]
struct Cli {
    /// Offset added to every run seed in the config (default seeds 0,1,2).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON experiment config; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    #[arg(long, global = true, default_value = "csv")]
    format: OutputFormat,
    /// Also record wall-clock seconds per run (output is then not reproducible).
    #[arg(long, global = true)]
    timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every property suite and report each check.
    Verify,
    /// Few-shot accuracy per shot count, with the zero-shot row.
    Fewshot {
        #[arg(long, value_delimiter = ',', default_values_t = [4, 8, 16])]
        shots: Vec<usize>,
    },
    /// Train on the source task, evaluate on source and shifted targets.
    Domaingen,
    /// Component ablations with deltas against the full model.
    Ablate {
        #[arg(long, value_delimiter = ',', default_values_t = AblationVariant::ALL.map(|v| v.name().to_string()))]
        variants: Vec<String>,
    },
    /// Domain generalization across adapted depths or latent dimensions.
    Sweep {
        #[arg(long, default_value = "depth")]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
    },
    /// Finite-difference check of the training loss on a toy model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
    },
    /// Trainable parameter count of the steering adapters.
    CountParams {
        #[arg(long, default_value_t = 768)]
        d_vision: usize,
        #[arg(long, default_value_t = 768)]
        d_text: usize,
        #[arg(long, default_value_t = 4)]
        r: usize,
        #[arg(long, default_value_t = 11)]
        d: usize,
    },
}

enum Failure {
    Check(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for s in &mut cfg.seeds {
        *s += cli.seed;
    }
    Ok(cfg)
}

fn harness(cli: &Cli) -> Result<Harness, Error> {
    let mut h = Harness::new(load_config(cli)?)?;
    h.timing = cli.timing;
    h.history_dir = Some(cli.out.join("histories"));
    Ok(h)
}

fn summarize(records: &[RunRecord]) {
    for r in records.iter().filter(|r| r.is_mean()) {
        let ood = r.accuracy_ood_mean.map(|v| format!(" OOD {v:.2}")).unwrap_or_default();
        let hm = r.hm.map(|v| format!(" HM {v:.2}")).unwrap_or_default();
        let delta = r.deltas.map(|d| format!(" (dHM {:+.2})", d.hm)).unwrap_or_default();
        println!(
            "{:<14} K={:<2} d={} r={:<2} ID {:.2}{ood}{hm}{delta}",
            r.variant, r.shots, r.depth, r.rank, r.accuracy_id
        );
    }
}

fn emit(cli: &Cli, stem: &str, records: &[RunRecord], csv: Option<String>) -> Result<(), Error> {
    let path = write_records(&cli.out, stem, records, cli.format, csv)?;
    summarize(records);
    println!("wrote {}", path.display());
    Ok(())
}

fn write_text(dir: &Path, name: &str, body: &str) -> Result<PathBuf, Error> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, body)?;
    Ok(path)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Verify => {
            let checks = run_verification()?;
            let mut body = String::new();
            match cli.format {
                OutputFormat::Csv => {
                    body.push_str("check,passed,measured,tolerance,detail\n");
                    for c in &checks {
                        body.push_str(&format!(
                            "{},{},{:e},{:e},\"{}\"\n",
                            c.name, c.passed, c.measured, c.tolerance, c.detail
                        ));
                    }
                }
                OutputFormat::Json => {
                    body = serde_json::to_string_pretty(&checks).map_err(Error::from)? + "\n";
                }
            }
            let ext = if cli.format == OutputFormat::Csv { "csv" } else { "json" };
            for c in &checks {
                println!("{c}");
            }
            write_text(&cli.out, &format!("verify.{ext}"), &body)?;
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(Failure::Check(format!("{failed} of {} checks failed", checks.len())));
            }
            println!("all {} checks passed", checks.len());
        }
        Command::Fewshot { shots } => {
            let h = harness(cli)?;
            let seeds = h.config.seeds.clone();
            let records = run_fewshot(&h, shots, &seeds)?;
            emit(cli, "fewshot", &records, None)?;
        }
        Command::Domaingen => {
            let h = harness(cli)?;
            let seeds = h.config.seeds.clone();
            let mut records = vec![h.zero_shot("domaingen", true)?];
            records.extend(run_domain_generalization(&h, &h.config.steering, "evi_steer", &seeds)?);
            emit(cli, "domaingen", &records, None)?;
        }
        Command::Ablate { variants } => {
            let variants = variants
                .iter()
                .map(|v| AblationVariant::parse(v))
                .collect::<Result<Vec<_>, _>>()?;
            let h = harness(cli)?;
            let seeds = h.config.seeds.clone();
            let records = run_ablation(&h, &variants, &seeds)?;
            emit(cli, "ablation", &records, None)?;
        }
        Command::Sweep { axis, values } => {
            let axis = SweepAxis::parse(axis)?;
            let h = harness(cli)?;
            let values = if values.is_empty() {
                axis.default_values(h.config.encoder.layers)
            } else {
                values.clone()
            };
            let seeds = h.config.seeds.clone();
            let records = run_sweep(&h, axis, &values, &seeds)?;
            let stem = format!("sweep_{}", axis.name());
            emit(cli, &stem, &records, Some(sweep_csv(axis, &records)))?;
        }
        Command::Gradcheck { h } => {
            let report = gradcheck_loss(3, *h)?;
            let worst = format!("input {} entry {}", report.worst.0, report.worst.1);
            println!(
                "max relative error {:e} over {} entries (worst: {})",
                report.max_rel_error, report.entries_checked, worst
            );
            let body = match cli.format {
                OutputFormat::Csv => format!(
                    "max_rel_error,entries_checked,worst,h\n{:e},{},{},{:e}\n",
                    report.max_rel_error, report.entries_checked, worst, h
                ),
                OutputFormat::Json => format!(
                    "{{\"max_rel_error\": {:e}, \"entries_checked\": {}, \"worst\": \"{}\", \"h\": {:e}}}\n",
                    report.max_rel_error, report.entries_checked, worst, h
                ),
            };
            let ext = if cli.format == OutputFormat::Csv { "csv" } else { "json" };
            write_text(&cli.out, &format!("gradcheck.{ext}"), &body)?;
            if !(report.max_rel_error < 1e-4) {
                return Err(Failure::Check("gradient check above 1e-4".into()));
            }
        }
        Command::CountParams { d_vision, d_text, r, d } => {
            let n = count_parameters(*d_vision, *d_text, *r, *d);
            println!("{n}");
            println!(
                "{:.2}% off 221,000; {:.4}% of 196M",
                100.0 * (n as f64 - 221_000.0).abs() / 221_000.0,
                100.0 * n as f64 / 196_000_000.0
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failure: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e @ (Error::Config(_) | Error::Json(_)))) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
