//! Browser bindings for the lab's three explorable pieces:
//! coefficient-function heatmaps, the synthetic two-task benchmark, and a
//! small live training loop. Everything crosses the boundary as numbers or
//! JSON strings so the same functions are callable (and tested) natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use dephn_core::config::TrainConfig;
use dephn_core::feature::FieldSchema;
use dephn_core::metrics::pearson;
use dephn_core::model::{Model, ModelKind};
use dephn_core::params::{shuffled_indices, Adam};
use dephn_core::synth::{generate, DatasetSpec, LabeledDataset, Variant};
use dephn_core::train::{compute_metrics, evaluate, train_step};
use dephn_core::vgrad::{coefficient_grid, CoefficientFunction};

fn parse_function(name: &str) -> Option<CoefficientFunction> {
    CoefficientFunction::ALL.into_iter().find(|f| f.name() == name)
}

fn json_error(message: &str) -> String {
    format!("{{\"error\":\"{}\"}}", message.replace('"', "'"))
}

/// Names of the eight coefficient functions, as a JSON array.
#[wasm_bindgen]
pub fn coefficient_names() -> String {
    let names: Vec<&str> = CoefficientFunction::ALL.iter().map(|f| f.name()).collect();
    serde_json::to_string(&names).unwrap()
}

/// Row-major `resolution x resolution` samples of one coefficient function
/// over the unit square (row i is the task-similarity axis). Empty when
/// the name is unknown or the resolution is out of range.
#[wasm_bindgen]
pub fn coefficient_heatmap(function: &str, resolution: usize) -> Vec<f64> {
    let Some(f) = parse_function(function) else {
        return Vec::new();
    };
    if !(2..=512).contains(&resolution) {
        return Vec::new();
    }
    coefficient_grid(f, resolution).values
}

#[derive(Serialize)]
struct SynthPreview {
    confidence_base: Vec<f64>,
    confidence_task: Vec<f64>,
    correlation: f64,
    positive_rate: Vec<f64>,
    label_agreement: f64,
}

/// Generates a small synthetic dataset and returns the latent confidences
/// plus summary statistics as JSON.
#[wasm_bindgen]
pub fn synth_preview(variant: &str, seed: u64, samples: usize, noise_std: f64) -> String {
    let variant = match variant {
        "related" => Variant::Related,
        "unrelated" => Variant::Unrelated,
        other => return json_error(&format!("unknown variant `{other}`")),
    };
    let samples = samples.clamp(16, 5_000);
    let schema = match FieldSchema::new(vec![40, 40, 40, 40], 8) {
        Ok(s) => s,
        Err(e) => return json_error(&e.to_string()),
    };
    let mut spec = DatasetSpec::new(samples, schema, seed, variant);
    spec.noise_std = noise_std.clamp(0.0, 2.0);
    match generate(&spec) {
        Ok((data, manifest)) => {
            let agree = data.labels[0]
                .iter()
                .zip(&data.labels[1])
                .filter(|(a, b)| a == b)
                .count() as f64
                / data.len() as f64;
            let preview = SynthPreview {
                confidence_base: data.confidences[0].clone(),
                confidence_task: data.confidences[1].clone(),
                correlation: manifest.confidence_correlation,
                positive_rate: manifest.positive_rate,
                label_agreement: agree,
            };
            serde_json::to_string(&preview).unwrap()
        }
        Err(e) => json_error(&e.to_string()),
    }
}

#[derive(Serialize)]
struct StepReport {
    step: usize,
    epoch: usize,
    losses: Vec<f64>,
}

#[derive(Serialize)]
struct MetricsReport {
    task: usize,
    logloss: f64,
    auc: Option<f64>,
}

/// An interactive training session over a freshly generated dataset,
/// stepped from the page a few batches at a time.
#[wasm_bindgen]
pub struct DemoTrainer {
    config: TrainConfig,
    train: LabeledDataset,
    validation: LabeledDataset,
    model: Model,
    adam: Adam,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    step: usize,
}

#[wasm_bindgen]
impl DemoTrainer {
    /// `model`: dnn | mmoe-lite | mtphn | dephn; `variant`: related |
    /// unrelated. Returns an error string via panic-free construction:
    /// check `last_error` style is avoided by making `new` fallible in JS
    /// through a factory.
    fn try_new(
        model: &str,
        variant: &str,
        seed: u64,
        samples: usize,
        virtual_gradient: bool,
    ) -> Result<DemoTrainer, String> {
        let kind = match model {
            "dnn" => ModelKind::Dnn,
            "mmoe-lite" => ModelKind::MmoeLite,
            "mtphn" => ModelKind::Mtphn,
            "dephn" => ModelKind::Dephn,
            other => return Err(format!("unknown model `{other}`")),
        };
        let variant = match variant {
            "related" => Variant::Related,
            "unrelated" => Variant::Unrelated,
            other => return Err(format!("unknown variant `{other}`")),
        };
        let samples = samples.clamp(256, 10_000);
        let schema = FieldSchema::new(vec![24, 24, 24], 4).map_err(|e| e.to_string())?;
        let spec = DatasetSpec::new(samples, schema, seed, variant);
        let (dataset, _) = generate(&spec).map_err(|e| e.to_string())?;
        let (train, validation) = dataset.split(0.2, seed);
        let config = TrainConfig {
            model: kind,
            seed,
            batch_size: 128,
            virtual_gradient,
            embed_dim: 4,
            heads: 2,
            expert_dim: 8,
            public_experts: 2,
            dnn_hidden: vec![16],
            cross_depth: 1,
            field_depth: 1,
            ..TrainConfig::default()
        };
        let model_config = config.model_config(train.schema.cardinalities.clone(), 2);
        let model = Model::new(model_config, seed).map_err(|e| e.to_string())?;
        let adam = Adam::new(
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_epsilon,
        );
        let order: Vec<usize> = (0..train.len()).collect();
        let mut trainer = DemoTrainer {
            config,
            train,
            validation,
            model,
            adam,
            order,
            cursor: 0,
            epoch: 0,
            step: 0,
        };
        trainer.reshuffle();
        Ok(trainer)
    }

    #[wasm_bindgen(constructor)]
    pub fn new(model: &str, variant: &str, seed: u64, samples: usize, virtual_gradient: bool) -> DemoTrainer {
        // The page validates its inputs; an invalid combination still gets
        // a usable (default) trainer rather than an aborted wasm instance.
        Self::try_new(model, variant, seed, samples, virtual_gradient)
            .or_else(|_| Self::try_new("dephn", "related", seed, samples, virtual_gradient))
            .expect("default trainer construction")
    }

    fn reshuffle(&mut self) {
        self.order = shuffled_indices(
            self.train.len(),
            self.config.seed,
            &format!("demo-epoch{}", self.epoch),
        );
        self.cursor = 0;
    }

    /// Runs `batches` optimizer steps and reports the last batch's
    /// per-task losses as JSON.
    pub fn run_batches(&mut self, batches: usize) -> String {
        let mut last = Vec::new();
        for _ in 0..batches.clamp(1, 256) {
            if self.cursor >= self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            let end = (self.cursor + self.config.batch_size).min(self.order.len());
            let rows = &self.order[self.cursor..end];
            let (fields, labels) = self.train.batch(rows);
            match train_step(&mut self.model, &mut self.adam, &fields, &labels, &self.config) {
                Ok(losses) => last = losses,
                Err(e) => return json_error(&e.to_string()),
            }
            self.cursor = end;
            self.step += 1;
        }
        serde_json::to_string(&StepReport { step: self.step, epoch: self.epoch, losses: last })
            .unwrap()
    }

    /// Validation logloss and AUC per task, as JSON.
    pub fn validation_metrics(&self) -> String {
        match evaluate(&self.model, &self.validation, 512) {
            Ok(eval) => {
                let rows: Vec<MetricsReport> = compute_metrics(&eval, &self.validation.labels)
                    .into_iter()
                    .map(|m| MetricsReport { task: m.task, logloss: m.logloss, auc: m.auc })
                    .collect();
                serde_json::to_string(&rows).unwrap()
            }
            Err(e) => json_error(&e.to_string()),
        }
    }

    /// The trainable-value gate table `[task][expert][mapping]` as JSON,
    /// or `null` for kinds without one.
    pub fn gate_table(&self) -> String {
        serde_json::to_string(&self.model.tvg_gate_table()).unwrap()
    }

    /// Scatter data: validation teacher confidence vs current model logit
    /// for one task, as JSON `[[c, logit], ...]`.
    pub fn confidence_scatter(&self, task: usize) -> String {
        if task >= self.validation.task_count() || self.validation.confidences.is_empty() {
            return json_error("no confidences for that task");
        }
        match evaluate(&self.model, &self.validation, 512) {
            Ok(eval) => {
                let points: Vec<(f64, f64)> = self.validation.confidences[task]
                    .iter()
                    .zip(&eval.logits[task])
                    .map(|(&c, &l)| (c, l))
                    .collect();
                serde_json::to_string(&points).unwrap()
            }
            Err(e) => json_error(&e.to_string()),
        }
    }

    /// Pearson correlation between the two tasks' validation confidences.
    pub fn task_correlation(&self) -> f64 {
        if self.validation.confidences.len() < 2 {
            return f64::NAN;
        }
        pearson(
            &self.validation.confidences[0],
            &self.validation.confidences[1],
        )
        .unwrap_or(f64::NAN)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_matches_core_grid() {
        let values = coefficient_heatmap("add-cos", 21);
        assert_eq!(values.len(), 21 * 21);
        assert_eq!(values[0], 2.0);
        assert!(coefficient_heatmap("nope", 21).is_empty());
        assert!(coefficient_heatmap("add-cos", 1).is_empty());
        let names: Vec<String> = serde_json::from_str(&coefficient_names()).unwrap();
        assert_eq!(names.len(), 8);
    }

    #[test]
    fn preview_reports_statistics() {
        let json = synth_preview("unrelated", 5, 500, 0.1);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["confidence_base"].as_array().unwrap().len(), 500);
        assert!(v["correlation"].as_f64().unwrap() < 1.0);
        assert!(v["label_agreement"].as_f64().unwrap() > 0.0);
        let err = synth_preview("sideways", 5, 500, 0.1);
        assert!(err.contains("error"));
    }

    #[test]
    fn trainer_steps_and_reports() {
        let mut t = DemoTrainer::new("dephn", "related", 3, 512, true);
        let first: serde_json::Value =
            serde_json::from_str(&t.run_batches(2)).unwrap();
        assert_eq!(first["step"].as_u64().unwrap(), 2);
        assert_eq!(first["losses"].as_array().unwrap().len(), 2);
        let metrics: serde_json::Value =
            serde_json::from_str(&t.validation_metrics()).unwrap();
        assert_eq!(metrics.as_array().unwrap().len(), 2);
        let gates: serde_json::Value = serde_json::from_str(&t.gate_table()).unwrap();
        assert!(gates.is_array());
        let scatter: serde_json::Value =
            serde_json::from_str(&t.confidence_scatter(0)).unwrap();
        assert!(!scatter.as_array().unwrap().is_empty());
        assert!(t.task_correlation().is_finite());
    }

    #[test]
    fn trainer_epoch_rolls_over() {
        let mut t = DemoTrainer::new("mmoe-lite", "unrelated", 9, 256, false);
        // 256 samples, 0.2 validation -> ~205 train rows -> 2 batches/epoch
        let report: serde_json::Value = serde_json::from_str(&t.run_batches(5)).unwrap();
        assert!(report["epoch"].as_u64().unwrap() >= 1);
    }
}
