//! CSV artifact writers. Every run artifact opens with a comment line
//! carrying the config hash and seed, then a header row; values use Rust's
//! shortest-roundtrip float formatting so identical runs produce identical
//! bytes. The coefficient grid is the one fixed-precision format (six
//! decimals, as consumed by heatmap plotters).

use std::io::Write;
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::Result;
use crate::feature::Branch;
use crate::model::Model;
use crate::train::{EpochLoss, SweepRow, TaskMetrics};
use crate::vgrad::{coefficient_grid, CoefficientFunction};

fn open(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

fn stamp(file: &mut impl Write, hash: &str, seed: u64) -> Result<()> {
    writeln!(file, "# config_hash={hash} seed={seed}")?;
    Ok(())
}

pub fn write_metrics_csv(
    path: &Path,
    hash: &str,
    seed: u64,
    metrics: &[TaskMetrics],
) -> Result<()> {
    let mut f = open(path)?;
    stamp(&mut f, hash, seed)?;
    writeln!(f, "task,logloss,auc")?;
    for m in metrics {
        let auc = m.auc.map_or(String::new(), |a| a.to_string());
        writeln!(f, "{},{},{}", m.task, m.logloss, auc)?;
    }
    Ok(())
}

pub fn write_loss_curve_csv(
    path: &Path,
    hash: &str,
    seed: u64,
    losses: &[EpochLoss],
) -> Result<()> {
    let mut f = open(path)?;
    stamp(&mut f, hash, seed)?;
    writeln!(f, "epoch,task,train_loss")?;
    for e in losses {
        for (task, loss) in e.per_task.iter().enumerate() {
            writeln!(f, "{},{},{}", e.epoch, task, loss)?;
        }
    }
    Ok(())
}

/// Soft-selection gate values: one row per branch per gate coordinate.
pub fn write_ssg_gates_csv(path: &Path, hash: &str, seed: u64, model: &Model) -> Result<()> {
    let mut f = open(path)?;
    stamp(&mut f, hash, seed)?;
    writeln!(f, "branch,index,gate_value")?;
    for branch in Branch::ALL {
        if let Some(entry) = model.params.get(&format!("ssg.{}.raw", branch.name())) {
            for (i, &raw) in entry.tensor.data().iter().enumerate() {
                writeln!(f, "{},{},{}", branch.name(), i, crate::tape::sigmoid(raw))?;
            }
        }
    }
    Ok(())
}

pub fn write_gate_table_csv(
    path: &Path,
    hash: &str,
    seed: u64,
    table: &[Vec<Vec<f64>>],
) -> Result<()> {
    let mut f = open(path)?;
    stamp(&mut f, hash, seed)?;
    writeln!(f, "task,expert,mapping,gate_value")?;
    for (t, per_task) in table.iter().enumerate() {
        for (k, per_expert) in per_task.iter().enumerate() {
            for (p, value) in per_expert.iter().enumerate() {
                writeln!(f, "{t},{k},{p},{value}")?;
            }
        }
    }
    Ok(())
}

pub fn write_activation_ratio_csv(
    path: &Path,
    hash: &str,
    seed: u64,
    ratios: &[f64],
) -> Result<()> {
    let mut f = open(path)?;
    stamp(&mut f, hash, seed)?;
    writeln!(f, "task,ratio")?;
    for (t, r) in ratios.iter().enumerate() {
        writeln!(f, "{t},{r}")?;
    }
    Ok(())
}

/// Latent teacher confidence against the model's combined logit, one row
/// per validation sample. Empty (header only) when the dataset carries no
/// confidences.
pub fn write_scatter_csv(
    path: &Path,
    hash: &str,
    seed: u64,
    confidences: &[Vec<f64>],
    logits: &[Vec<f64>],
) -> Result<()> {
    let mut f = open(path)?;
    stamp(&mut f, hash, seed)?;
    let tasks = logits.len();
    let mut header = vec!["sample".to_string()];
    for t in 0..tasks {
        header.push(format!("confidence{t}"));
        header.push(format!("logit{t}"));
    }
    writeln!(f, "{}", header.join(","))?;
    if confidences.len() != tasks || confidences.iter().any(Vec::is_empty) {
        return Ok(());
    }
    let rows = logits.first().map_or(0, Vec::len);
    for r in 0..rows {
        let mut row = vec![r.to_string()];
        for t in 0..tasks {
            row.push(confidences[t][r].to_string());
            row.push(logits[t][r].to_string());
        }
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn write_config_echo(path: &Path, config: &TrainConfig, hash: &str) -> Result<()> {
    let mut f = open(path)?;
    writeln!(f, "# config_hash={hash}")?;
    write!(f, "{}", config.to_toml())?;
    Ok(())
}

pub fn write_model_json(path: &Path, model: &Model) -> Result<()> {
    let json = serde_json::to_string(model)
        .map_err(|e| crate::error::Error::Train(format!("model serialization failed: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_model_json(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| crate::error::Error::Train(format!("bad model file {}: {e}", path.display())))
}

/// Row-major uniform grid of one coefficient function over the unit
/// square: `x,y,gamma` with six decimal places.
pub fn write_coeff_grid_csv(
    path: &Path,
    function: CoefficientFunction,
    resolution: usize,
) -> Result<()> {
    let grid = coefficient_grid(function, resolution);
    let mut f = open(path)?;
    writeln!(f, "x,y,gamma")?;
    let n = grid.resolution;
    for i in 0..n {
        let x = i as f64 / (n - 1) as f64;
        for j in 0..n {
            let y = j as f64 / (n - 1) as f64;
            writeln!(f, "{x:.6},{y:.6},{:.6}", grid.at(i, j))?;
        }
    }
    Ok(())
}

pub fn write_sweep_csv(path: &Path, hash: &str, seed: u64, rows: &[SweepRow]) -> Result<()> {
    let mut f = open(path)?;
    stamp(&mut f, hash, seed)?;
    writeln!(f, "function,measure,task,logloss,auc")?;
    for r in rows {
        let auc = r.auc.map_or(String::new(), |a| a.to_string());
        writeln!(f, "{},{},{},{},{}", r.function, r.measure, r.task, r.logloss, auc)?;
    }
    Ok(())
}
