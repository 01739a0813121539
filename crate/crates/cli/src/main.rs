use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use subshift_core::harness::io::write_atomic;
use subshift_core::harness::report::{read_metrics_csv, summarize};
use subshift_core::harness::sweep::{run_dir, write_run_artifacts};
use subshift_core::harness::{emit_curves, emit_table, run_experiment, write_outputs, ExperimentConfig};
use subshift_core::{generate, run_method, Method, TrainLog};

#[derive(Parser)]
#[command(
    name = "subshift",
    version,
    about = "Group-robust training on synthetic subpopulation shift"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test dataset CSVs.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate a single run.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// erm, groupdro, cegdro, cegdro_ef or groupdro_sc; defaults to the
        /// first configured method.
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hyperparameter selection on validation, then seeded report runs.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `experiment.output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild the result table from a sweep's `results.csv`.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Long-format training curves from a sweep's per-run step logs.
    Curves {
        #[arg(long = "in")]
        input: PathBuf,
        /// Defaults to `<in>/curves.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate { config, out } => {
            let config = load_config(config.as_deref())?;
            let splits = generate(&config.data)?;
            for (name, ds) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
                let mut buf = Vec::new();
                ds.write_csv(&mut buf)?;
                write_atomic(&out.join(format!("{name}.csv")), &buf)?;
            }
            println!(
                "wrote {} / {} / {} samples to {}",
                splits.train.len(),
                splits.val.len(),
                splits.test.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            method,
            seed,
            out,
        } => {
            let config = load_config(config.as_deref())?;
            let method = method.unwrap_or(config.methods[0]);
            let mut settings = config.run_settings();
            if let Some(seed) = seed {
                settings.train.seed = seed;
            }
            let data = generate(&config.data)?;
            let output = run_method(method, &data, &settings)
                .with_context(|| format!("{method} run with seed {}", settings.train.seed))?;
            write_run_artifacts(&out, settings.train.seed, &output)?;
            println!(
                "{}: val worst {:.4} avg {:.4} | test worst {:.4} avg {:.4} | {} steps",
                method.display_name(),
                output.val.worst_group_accuracy,
                output.val.average_accuracy,
                output.test.worst_group_accuracy,
                output.test.average_accuracy,
                output.log.total_steps()
            );
        }
        Command::Sweep { config, out } => {
            let config = load_config(config.as_deref())?;
            let dir = out.unwrap_or_else(|| config.output_dir.clone());
            let result = run_experiment(&config)?;
            write_outputs(&result, &config, &dir)?;
            print!("{}", result.table().text);
            if !result.failures.is_empty() {
                for f in &result.failures {
                    eprintln!("failed: {} seed {}: {}", f.method, f.seed, f.error);
                }
                bail!(
                    "{} run(s) failed; partial results in {}",
                    result.failures.len(),
                    dir.display()
                );
            }
        }
        Command::Report { input, split } => {
            let path = input.join("results.csv");
            let file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            let rows = read_metrics_csv(BufReader::new(file))?;
            let summary = summarize(&rows, &split);
            if summary.is_empty() {
                bail!("no `{split}` rows in {}", path.display());
            }
            let table = emit_table(&summary);
            write_atomic(&input.join(format!("table_{split}.txt")), table.text.as_bytes())?;
            write_atomic(&input.join(format!("table_{split}.csv")), table.csv.as_bytes())?;
            print!("{}", table.text);
        }
        Command::Curves { input, out } => {
            let mut logs: Vec<(Method, u64, TrainLog)> = Vec::new();
            for method in Method::ALL {
                let method_dir = input.join("runs").join(method.key());
                let Ok(entries) = fs::read_dir(&method_dir) else {
                    continue;
                };
                let mut seeds: Vec<u64> = entries
                    .filter_map(|e| e.ok())
                    .filter_map(|e| e.file_name().to_str()?.strip_prefix("seed_")?.parse().ok())
                    .collect();
                seeds.sort_unstable();
                for seed in seeds {
                    let path = run_dir(&input, method, seed).join("steps.csv");
                    let file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
                    logs.push((method, seed, TrainLog::read_csv(BufReader::new(file))?));
                }
            }
            if logs.is_empty() {
                bail!("no run logs under {}", input.join("runs").display());
            }
            let csv = emit_curves(logs.iter().map(|(m, s, l)| (*m, *s, l)));
            let path = out.unwrap_or_else(|| input.join("curves.csv"));
            write_atomic(&path, csv.as_bytes())?;
            println!("wrote curves for {} runs to {}", logs.len(), path.display());
        }
    }
    Ok(())
}
