//! `dephn` — generate synthetic multi-task datasets, train the model
//! family, sweep coefficient functions, and dump figure-ready CSVs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use dephn_core::config::TrainConfig;
use dephn_core::feature::FieldSchema;
use dephn_core::report;
use dephn_core::synth::{self, BinarizeRule, DatasetSpec, Variant};
use dephn_core::train::{self, compute_metrics, evaluate};
use dephn_core::vgrad::CoefficientFunction;

#[derive(Parser)]
#[command(name = "dephn", version, about = "Multi-task learning lab harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Related,
    Unrelated,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    ZeroThreshold,
    Median,
}

#[derive(Clone, Copy, ValueEnum)]
enum FunctionArg {
    MulCos,
    MulAbs,
    MulSquare,
    MulSqrt,
    AddCos,
    AddAbs,
    AddSquare,
    AddSqrt,
    All,
}

impl FunctionArg {
    fn functions(self) -> Vec<CoefficientFunction> {
        match self {
            FunctionArg::MulCos => vec![CoefficientFunction::MulCos],
            FunctionArg::MulAbs => vec![CoefficientFunction::MulAbs],
            FunctionArg::MulSquare => vec![CoefficientFunction::MulSquare],
            FunctionArg::MulSqrt => vec![CoefficientFunction::MulSqrt],
            FunctionArg::AddCos => vec![CoefficientFunction::AddCos],
            FunctionArg::AddAbs => vec![CoefficientFunction::AddAbs],
            FunctionArg::AddSquare => vec![CoefficientFunction::AddSquare],
            FunctionArg::AddSqrt => vec![CoefficientFunction::AddSqrt],
            FunctionArg::All => CoefficientFunction::ALL.to_vec(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-task dataset (CSV + manifest + confidences).
    GenerateData {
        #[arg(long, value_enum)]
        variant: VariantArg,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "data")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 50_000)]
        samples: usize,
        /// Number of categorical fields.
        #[arg(long, default_value_t = 4)]
        fields: usize,
        /// Vocabulary size shared by every field.
        #[arg(long, default_value_t = 40)]
        cardinality: usize,
        #[arg(long, default_value_t = 0.1)]
        noise_std: f64,
        #[arg(long, value_enum, default_value_t = RuleArg::ZeroThreshold)]
        rule: RuleArg,
        /// File stem; defaults to `<variant>-seed<seed>`.
        #[arg(long)]
        name: Option<String>,
    },
    /// Train one model from a config file and write all run artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out_dir: PathBuf,
    },
    /// Train the full model for every (coefficient, similarity) pair.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/sweep")]
        out_dir: PathBuf,
    },
    /// Sample coefficient functions on the unit square as CSV heatmap data.
    CoeffGrid {
        #[arg(long, value_enum, default_value_t = FunctionArg::All)]
        function: FunctionArg,
        #[arg(long, default_value_t = 101)]
        resolution: usize,
        #[arg(long, default_value = "runs/coeff-grid")]
        out_dir: PathBuf,
    },
    /// Evaluate a saved model on a dataset CSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Summarize the metric CSVs under a directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateData {
            variant,
            seed,
            out_dir,
            samples,
            fields,
            cardinality,
            noise_std,
            rule,
            name,
        } => {
            let variant = match variant {
                VariantArg::Related => Variant::Related,
                VariantArg::Unrelated => Variant::Unrelated,
            };
            let rule = match rule {
                RuleArg::ZeroThreshold => BinarizeRule::ZeroThreshold,
                RuleArg::Median => BinarizeRule::Median,
            };
            let schema = FieldSchema::new(vec![cardinality; fields], 8)?;
            let mut spec = DatasetSpec::new(samples, schema, seed, variant);
            spec.noise_std = noise_std;
            spec.rule = rule;
            let (dataset, manifest) = synth::generate(&spec)?;
            std::fs::create_dir_all(&out_dir)?;
            let stem = name.unwrap_or_else(|| format!("{}-seed{seed}", variant.name()));
            let csv = out_dir.join(format!("{stem}.csv"));
            synth::write_csv(&dataset, &csv)?;
            synth::write_manifest(&manifest, &out_dir.join(format!("{stem}.manifest.toml")))?;
            synth::write_confidences_csv(
                &dataset,
                &out_dir.join(format!("{stem}.confidences.csv")),
            )?;
            println!(
                "wrote {} ({} rows, correlation {:.4}, positive rates {:.3}/{:.3})",
                csv.display(),
                manifest.rows,
                manifest.confidence_correlation,
                manifest.positive_rate[0],
                manifest.positive_rate[1],
            );
        }
        Command::Train { config, seed, out_dir } => {
            let mut config = TrainConfig::from_path(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let artifacts = train::run_experiment(&config, &out_dir)?;
            println!(
                "run {} done in {:.1}s; artifacts in {}",
                artifacts.config_hash,
                artifacts.wall_clock_seconds,
                artifacts.out_dir.display()
            );
            for m in &artifacts.metrics {
                match m.auc {
                    Some(a) => println!("  task {}: logloss {:.6}  auc {:.6}", m.task, m.logloss, a),
                    None => println!(
                        "  task {}: logloss {:.6}  auc unavailable ({})",
                        m.task,
                        m.logloss,
                        m.auc_error.as_deref().unwrap_or("unknown")
                    ),
                }
            }
        }
        Command::Sweep { config, seed, out_dir } => {
            let mut config = TrainConfig::from_path(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let rows = train::sweep(&config, &out_dir)?;
            println!("swept {} configurations; summary in {}", rows.len() / 2, out_dir.join("sweep.csv").display());
            for r in &rows {
                let auc = r.auc.map_or("n/a".to_string(), |a| format!("{a:.6}"));
                println!("  {:<11} {:<11} task {}: logloss {:.6}  auc {}", r.function, r.measure, r.task, r.logloss, auc);
            }
        }
        Command::CoeffGrid { function, resolution, out_dir } => {
            if resolution < 2 {
                bail!("resolution must be at least 2");
            }
            std::fs::create_dir_all(&out_dir)?;
            for f in function.functions() {
                let path = out_dir.join(format!("{}.csv", f.name()));
                report::write_coeff_grid_csv(&path, f, resolution)?;
                println!("wrote {} ({} rows)", path.display(), resolution * resolution);
            }
        }
        Command::Eval { model, data, out_dir } => {
            let model = report::read_model_json(&model)
                .with_context(|| format!("loading model {}", model.display()))?;
            let schema = dephn_core::synth::CsvSchema {
                cardinalities: model.config.schema.cardinalities.clone(),
                task_count: model.config.task_count,
            };
            let dataset = synth::load_csv_dataset(&data, &schema)
                .with_context(|| format!("loading dataset {}", data.display()))?;
            let eval = evaluate(&model, &dataset, 1024)?;
            let metrics = compute_metrics(&eval, &dataset.labels);
            for m in &metrics {
                match m.auc {
                    Some(a) => println!("task {}: logloss {:.6}  auc {:.6}", m.task, m.logloss, a),
                    None => println!(
                        "task {}: logloss {:.6}  auc unavailable ({})",
                        m.task,
                        m.logloss,
                        m.auc_error.as_deref().unwrap_or("unknown")
                    ),
                }
            }
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(&dir)?;
                report::write_metrics_csv(&dir.join("metrics.csv"), "eval", 0, &metrics)?;
            }
        }
        Command::Report { dir } => {
            let mut found = 0;
            summarize(&dir, &mut found)?;
            if found == 0 {
                bail!("no metrics.csv files under {}", dir.display());
            }
        }
    }
    Ok(())
}

/// Prints every metrics.csv under `dir`, recursively, as one table.
fn summarize(dir: &Path, found: &mut usize) -> anyhow::Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            summarize(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == "metrics.csv") {
            let text = std::fs::read_to_string(&path)?;
            if *found == 0 {
                println!("{:<48} {:>4} {:>10} {:>10}", "run", "task", "logloss", "auc");
            }
            *found += 1;
            let label = path
                .parent()
                .and_then(|p| p.strip_prefix(dir).ok())
                .map(|p| p.display().to_string())
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| dir.display().to_string());
            for line in text.lines().skip(2) {
                let parts: Vec<&str> = line.split(',').collect();
                if parts.len() == 3 {
                    let auc = if parts[2].is_empty() { "n/a" } else { parts[2] };
                    println!("{:<48} {:>4} {:>10.10} {:>10.10}", label, parts[0], parts[1], auc);
                }
            }
        }
    }
    Ok(())
}
