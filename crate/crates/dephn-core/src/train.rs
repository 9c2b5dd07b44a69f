//! Training loop, evaluation, and the experiment driver behind the CLI.
//!
//! One step records a fresh tape: forward over all tasks, per-task logloss,
//! an unweighted total, backward, Adam. For the full model with gradient
//! modulation enabled, the per-gate coefficients are computed from the
//! current batch's labels and the live gate snapshot, then applied as
//! forward-identity wrappers before the towers consume the gates.

use std::path::{Path, PathBuf};
use std::time::Instant;


use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::{auc, logloss, PROB_CLAMP};
use crate::model::{GatingMode, Model, ModelKind};
use crate::params::Adam;
use crate::synth::{load_confidences_csv, load_csv_dataset, read_manifest, LabeledDataset};
use crate::tape::{NodeId, Tape, Tensor};
use crate::vgrad::{gamma_table, GammaContext};

/// Mean per-task training loss for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub per_task: Vec<f64>,
}

/// Validation metrics for one task. A single-class fold leaves `auc` empty
/// and records why.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMetrics {
    pub task: usize,
    pub logloss: f64,
    pub auc: Option<f64>,
    pub auc_error: Option<String>,
}

/// Raw validation outputs kept for reports.
#[derive(Debug, Clone, Default)]
pub struct EvalOutput {
    pub probs: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub logit_pub: Vec<Vec<f64>>,
    pub logit_pri: Vec<Option<Vec<f64>>>,
}

/// Builds the clamped negative log-likelihood of one task's batch.
pub fn logloss_node(tape: &mut Tape, prob: NodeId, labels: &[f64]) -> Result<NodeId> {
    let b = labels.len();
    let y = tape.constant(Tensor::matrix(b, 1, labels.to_vec()));
    let p = tape.clamp(prob, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let ln_p = tape.ln(p)?;
    let hit = tape.mul(y, ln_p)?;
    let not_y = tape.one_minus(y);
    let not_p = tape.one_minus(p);
    let ln_not_p = tape.ln(not_p)?;
    let miss = tape.mul(not_y, ln_not_p)?;
    let sum = tape.add(hit, miss)?;
    let mean = tape.mean_all(sum);
    Ok(tape.scale(mean, -1.0))
}

fn modulation_active(model: &Model, config: &TrainConfig) -> bool {
    config.virtual_gradient
        && model.config.kind == ModelKind::Dephn
        && model.config.task_count >= 2
}

/// One optimizer step. Returns the per-task batch losses.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    fields: &[Vec<usize>],
    labels: &[Vec<f64>],
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let measure = config.similarity;
    let function = config.coefficient;
    let hook = |snapshot: &[Vec<Vec<f64>>]| -> Result<Vec<Vec<Vec<f64>>>> {
        let ctx = GammaContext { labels, gates: snapshot, measure, function };
        gamma_table(&ctx)
    };
    let modulation = if modulation_active(model, config) {
        Some(&hook as crate::model::ModulationFn)
    } else {
        None
    };
    let pass = model.forward(&mut tape, fields, modulation)?;

    let mut per_task = Vec::with_capacity(labels.len());
    let mut total: Option<NodeId> = None;
    for (t, task_labels) in labels.iter().enumerate() {
        let loss = logloss_node(&mut tape, pass.probs[t], task_labels)?;
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::Train(format!(
                "non-finite loss {value} on task {t} (batch of {})",
                task_labels.len()
            )));
        }
        per_task.push(value);
        total = Some(match total {
            None => loss,
            Some(prev) => tape.add(prev, loss)?,
        });
    }
    let total = total.ok_or_else(|| Error::Train("no tasks in batch".into()))?;
    let grads = tape.backward(total)?;
    adam.update(&mut model.params, &grads);
    Ok(per_task)
}

/// Trains a fresh model on the given dataset. Deterministic in
/// (config, dataset).
pub fn train_model(config: &TrainConfig, train: &LabeledDataset) -> Result<(Model, Vec<EpochLoss>)> {
    let task_count = train.task_count();
    let model_config = config.model_config(train.schema.cardinalities.clone(), task_count);
    let mut model = Model::new(model_config, config.seed)?;
    let mut adam = Adam::new(
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_epsilon,
    );
    let n = train.len();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = crate::params::shuffled_indices(n, config.seed, &format!("epoch{epoch}"));
        let mut sums = vec![0.0; task_count];
        for chunk in order.chunks(config.batch_size) {
            let (fields, labels) = train.batch(chunk);
            let losses = train_step(&mut model, &mut adam, &fields, &labels, config)?;
            for (s, l) in sums.iter_mut().zip(&losses) {
                *s += l * chunk.len() as f64;
            }
        }
        epoch_losses.push(EpochLoss {
            epoch,
            per_task: sums.iter().map(|s| s / n as f64).collect(),
        });
    }
    Ok((model, epoch_losses))
}

/// Forward-only pass over a dataset in fixed-size chunks.
pub fn evaluate(model: &Model, dataset: &LabeledDataset, chunk_size: usize) -> Result<EvalOutput> {
    let t = model.config.task_count;
    let mut out = EvalOutput {
        probs: vec![Vec::new(); t],
        logits: vec![Vec::new(); t],
        logit_pub: vec![Vec::new(); t],
        logit_pri: vec![None; t],
    };
    let rows: Vec<usize> = (0..dataset.len()).collect();
    for chunk in rows.chunks(chunk_size.max(1)) {
        let (fields, _) = dataset.batch(chunk);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &fields, None)?;
        for task in 0..t {
            out.probs[task].extend_from_slice(tape.value(pass.probs[task]));
            out.logits[task].extend_from_slice(tape.value(pass.logits[task]));
            out.logit_pub[task].extend_from_slice(tape.value(pass.logit_pub[task]));
            if let Some(pri) = pass.logit_pri[task] {
                out.logit_pri[task]
                    .get_or_insert_with(Vec::new)
                    .extend_from_slice(tape.value(pri));
            }
        }
    }
    Ok(out)
}

/// Logloss and AUC per task; a single-class fold reports the AUC failure
/// instead of aborting.
pub fn compute_metrics(eval: &EvalOutput, labels: &[Vec<f64>]) -> Vec<TaskMetrics> {
    labels
        .iter()
        .enumerate()
        .map(|(task, y)| {
            let scores = &eval.probs[task];
            let ll = logloss(scores, y);
            match auc(scores, y) {
                Ok(a) => TaskMetrics { task, logloss: ll, auc: Some(a), auc_error: None },
                Err(e) => TaskMetrics {
                    task,
                    logloss: ll,
                    auc: None,
                    auc_error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Mean-|logit| share of the public branch per task, over a whole
/// evaluation output.
pub fn activation_ratios(eval: &EvalOutput) -> Vec<f64> {
    let mean_abs = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>() / v.len().max(1) as f64;
    (0..eval.logit_pub.len())
        .map(|t| {
            let pub_mag = mean_abs(&eval.logit_pub[t]);
            let pri_mag = eval.logit_pri[t].as_deref().map_or(0.0, mean_abs);
            if pub_mag + pri_mag == 0.0 {
                0.5
            } else {
                pub_mag / (pub_mag + pri_mag)
            }
        })
        .collect()
}

/// Gate table values `[task][expert][mapping]` for reporting: trainable
/// value gates come straight from the parameters; softmax gates are
/// averaged over (at most) the first 1024 validation rows.
pub fn gate_table_for_report(
    model: &Model,
    dataset: &LabeledDataset,
) -> Result<Option<Vec<Vec<Vec<f64>>>>> {
    if !matches!(model.config.kind, ModelKind::Mtphn | ModelKind::Dephn) {
        return Ok(None);
    }
    match model.config.gating {
        GatingMode::Tvg => Ok(model.tvg_gate_table()),
        GatingMode::Mg => {
            let rows: Vec<usize> = (0..dataset.len().min(1024)).collect();
            let (fields, _) = dataset.batch(&rows);
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &fields, None)?;
            Ok(pass.gate_snapshot)
        }
    }
}

/// Everything one experiment run leaves on disk.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub config_hash: String,
    pub metrics: Vec<TaskMetrics>,
    pub epoch_losses: Vec<EpochLoss>,
    pub wall_clock_seconds: f64,
}

/// Loads the dataset named by a config, with its manifest and confidence
/// sidecar when present.
pub fn load_dataset_for(config: &TrainConfig) -> Result<LabeledDataset> {
    let path = Path::new(&config.dataset);
    if !path.exists() {
        return Err(Error::Data(format!("dataset not found: {}", path.display())));
    }
    let manifest = read_manifest(&config.manifest_path())?;
    let mut dataset = load_csv_dataset(path, &manifest.csv_schema())?;
    dataset.schema.embed_dim = config.embed_dim;
    let sidecar = config.confidences_path();
    if sidecar.exists() {
        load_confidences_csv(&sidecar, &mut dataset)?;
    }
    Ok(dataset)
}

/// Full run: load, split, train, evaluate, and write every artifact CSV.
pub fn run_experiment(config: &TrainConfig, out_dir: &Path) -> Result<RunArtifacts> {
    config.validate()?;
    let started = Instant::now();
    let dataset = load_dataset_for(config)?;
    let (train, validation) = dataset.split(config.validation_fraction, config.seed);
    let (model, epoch_losses) = train_model(config, &train)?;
    let eval = evaluate(&model, &validation, 1024)?;
    let metrics = compute_metrics(&eval, &validation.labels);
    let ratios = activation_ratios(&eval);
    let gate_table = gate_table_for_report(&model, &validation)?;

    std::fs::create_dir_all(out_dir)?;
    let hash = config.hash();
    crate::report::write_config_echo(&out_dir.join("config.toml"), config, &hash)?;
    crate::report::write_metrics_csv(&out_dir.join("metrics.csv"), &hash, config.seed, &metrics)?;
    crate::report::write_loss_curve_csv(
        &out_dir.join("loss_curve.csv"),
        &hash,
        config.seed,
        &epoch_losses,
    )?;
    crate::report::write_activation_ratio_csv(
        &out_dir.join("activation_ratio.csv"),
        &hash,
        config.seed,
        &ratios,
    )?;
    if let Some(table) = &gate_table {
        crate::report::write_gate_table_csv(
            &out_dir.join("gate_table.csv"),
            &hash,
            config.seed,
            table,
        )?;
    }
    if matches!(model.config.kind, ModelKind::Mtphn | ModelKind::Dephn) {
        crate::report::write_ssg_gates_csv(
            &out_dir.join("ssg_gates.csv"),
            &hash,
            config.seed,
            &model,
        )?;
    }
    crate::report::write_scatter_csv(
        &out_dir.join("confidence_scatter.csv"),
        &hash,
        config.seed,
        &validation.confidences,
        &eval.logits,
    )?;
    crate::report::write_model_json(&out_dir.join("model.json"), &model)?;

    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        config_hash: hash,
        metrics,
        epoch_losses,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

/// One row of the coefficient-function sweep summary.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub function: &'static str,
    pub measure: &'static str,
    pub task: usize,
    pub logloss: f64,
    pub auc: Option<f64>,
}

/// Trains the full model once per (coefficient function, similarity
/// measure) pair and writes a 16-configuration summary.
pub fn sweep(base: &TrainConfig, out_dir: &Path) -> Result<Vec<SweepRow>> {
    use rayon::prelude::*;
    let mut combos = Vec::new();
    for function in crate::vgrad::CoefficientFunction::ALL {
        for measure in crate::vgrad::SimilarityMeasure::ALL {
            combos.push((function, measure));
        }
    }
    let results: Vec<Result<Vec<SweepRow>>> = combos
        .par_iter()
        .map(|&(function, measure)| {
            let mut config = base.clone();
            config.model = ModelKind::Dephn;
            config.virtual_gradient = true;
            config.coefficient = function;
            config.similarity = measure;
            let run_dir = out_dir
                .join("sweep")
                .join(format!("{}-{}", function.name(), measure.name()));
            let artifacts = run_experiment(&config, &run_dir)?;
            Ok(artifacts
                .metrics
                .iter()
                .map(|m| SweepRow {
                    function: function.name(),
                    measure: measure.name(),
                    task: m.task,
                    logloss: m.logloss,
                    auc: m.auc,
                })
                .collect())
        })
        .collect();
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    rows.sort_by(|a, b| {
        (a.function, a.measure, a.task).cmp(&(b.function, b.measure, b.task))
    });
    crate::report::write_sweep_csv(&out_dir.join("sweep.csv"), &base.hash(), base.seed, &rows)?;
    Ok(rows)
}
