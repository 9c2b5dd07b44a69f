//! Synthetic two-task benchmark generation.
//!
//! A frozen teacher network maps random categorical features to a bounded,
//! centered scalar confidence `c`. The second task's confidence is a fixed
//! transform of `c`: a log/exponential blend that tracks `c` closely (the
//! related variant) or a trigonometric fold that decorrelates it (the
//! unrelated variant). Labels binarize the confidences. Everything is
//! deterministic given (spec, seed).

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FieldSchema;
use crate::metrics::pearson;
use crate::params::seeded_rng;

/// Which transform builds the second task's confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Related,
    Unrelated,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Related => "related",
            Variant::Unrelated => "unrelated",
        }
    }
}

/// Confidence-to-label rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BinarizeRule {
    /// Label 1 iff the confidence is strictly positive.
    #[default]
    ZeroThreshold,
    /// Label 1 iff the confidence exceeds the sample median.
    Median,
}

/// Frozen teacher shape. The raw network output is standardized, pushed
/// through `tanh` with `pre_gain`, and scaled into `(-bound, bound)` so the
/// downstream exponential stays tame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub pre_gain: f64,
    pub bound: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig { embed_dim: 4, hidden: vec![16, 8], pre_gain: 2.0, bound: 3.0 }
    }
}

/// A frozen random MLP over frozen random embeddings. Same seed, same
/// confidences.
#[derive(Debug, Clone)]
pub struct TeacherNet {
    config: TeacherConfig,
    embeds: Vec<Vec<f64>>,
    layers: Vec<(Vec<f64>, Vec<f64>, usize, usize)>, // (weight, bias, in, out)
}

impl TeacherNet {
    pub fn new(schema: &FieldSchema, config: TeacherConfig, seed: u64) -> Self {
        let mut embeds = Vec::with_capacity(schema.field_count());
        for (j, &card) in schema.cardinalities.iter().enumerate() {
            let mut rng = seeded_rng(seed, &format!("teacher.embed.f{j}"));
            let table = (0..card * config.embed_dim)
                .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                .collect();
            embeds.push(table);
        }
        let mut dims = vec![schema.field_count() * config.embed_dim];
        dims.extend(&config.hidden);
        dims.push(1);
        let mut layers = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let mut rng = seeded_rng(seed, &format!("teacher.l{l}"));
            let limit = (6.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit)
                .collect();
            let b = vec![0.0; fan_out];
            layers.push((w, b, fan_in, fan_out));
        }
        TeacherNet { config, embeds, layers }
    }

    fn raw_score(&self, row: &[usize]) -> f64 {
        let d = self.config.embed_dim;
        let mut h: Vec<f64> = Vec::with_capacity(row.len() * d);
        for (j, &idx) in row.iter().enumerate() {
            h.extend_from_slice(&self.embeds[j][idx * d..(idx + 1) * d]);
        }
        for (l, (w, b, fan_in, fan_out)) in self.layers.iter().enumerate() {
            let mut next = b.clone();
            for i in 0..*fan_in {
                let hi = h[i];
                for o in 0..*fan_out {
                    next[o] += hi * w[i * fan_out + o];
                }
            }
            if l < self.layers.len() - 1 {
                for v in next.iter_mut() {
                    *v = v.tanh();
                }
            }
            h = next;
        }
        h[0]
    }

    /// Bounded, centered confidences for a whole feature matrix
    /// (column-major `fields[j][row]`).
    pub fn confidences(&self, fields: &[Vec<usize>]) -> Result<Vec<f64>> {
        let n = fields.first().map_or(0, Vec::len);
        let mut raw = Vec::with_capacity(n);
        let mut row = vec![0usize; fields.len()];
        for r in 0..n {
            for (j, col) in fields.iter().enumerate() {
                row[j] = col[r];
            }
            raw.push(self.raw_score(&row));
        }
        let mean = raw.iter().sum::<f64>() / n as f64;
        let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        if var == 0.0 {
            return Err(Error::Data("degenerate teacher: constant raw scores".into()));
        }
        let std = var.sqrt();
        let mut c: Vec<f64> = raw
            .iter()
            .map(|v| self.config.bound * (self.config.pre_gain * (v - mean) / std).tanh())
            .collect();
        let c_mean = c.iter().sum::<f64>() / n as f64;
        for v in c.iter_mut() {
            *v -= c_mean;
        }
        Ok(c)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Related-task confidence: `sign(c) * 2 ln(|c|+1) + 0.1 e^|c| + eps`.
pub fn related_confidence(c: &[f64], noise_std: f64, rng: &mut ChaCha20Rng) -> Result<Vec<f64>> {
    let noise = Normal::new(0.0, noise_std.max(0.0))
        .map_err(|e| Error::Data(format!("bad noise_std: {e}")))?;
    let mut out = Vec::with_capacity(c.len());
    for &v in c {
        let base = sign(v) * 2.0 * (v.abs() + 1.0).ln() + 0.1 * v.abs().exp();
        if !base.is_finite() {
            return Err(Error::Data(format!(
                "confidence transform overflowed at c = {v}"
            )));
        }
        let eps = if noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
        out.push(base + eps);
    }
    Ok(out)
}

/// Unrelated-task confidence: `sign(c) * (2 sin|c| + 0.1 cos|c|)`.
pub fn unrelated_confidence(c: &[f64]) -> Vec<f64> {
    c.iter()
        .map(|&v| sign(v) * (2.0 * v.abs().sin() + 0.1 * v.abs().cos()))
        .collect()
}

/// Confidences to binary labels.
pub fn binarize(confidences: &[f64], rule: BinarizeRule) -> Vec<f64> {
    let threshold = match rule {
        BinarizeRule::ZeroThreshold => 0.0,
        BinarizeRule::Median => {
            let mut sorted = confidences.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite confidence"));
            let n = sorted.len();
            if n.is_multiple_of(2) {
                (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
            } else {
                sorted[n / 2]
            }
        }
    };
    confidences
        .iter()
        .map(|&c| if c > threshold { 1.0 } else { 0.0 })
        .collect()
}

/// Pearson correlation of two confidence vectors; zero variance is an
/// error here (it means the teacher degenerated).
pub fn measure_task_correlation(base: &[f64], task: &[f64]) -> Result<f64> {
    pearson(base, task)
        .ok_or_else(|| Error::Data("zero-variance confidences: degenerate teacher".into()))
}

/// Generation recipe for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub sample_count: usize,
    pub schema: FieldSchema,
    pub seed: u64,
    pub noise_std: f64,
    pub variant: Variant,
    pub rule: BinarizeRule,
    pub teacher: TeacherConfig,
}

impl DatasetSpec {
    pub fn new(sample_count: usize, schema: FieldSchema, seed: u64, variant: Variant) -> Self {
        DatasetSpec {
            sample_count,
            schema,
            seed,
            noise_std: 0.1,
            variant,
            rule: BinarizeRule::ZeroThreshold,
            teacher: TeacherConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if self.sample_count < 2 {
            return Err(Error::Config("sample_count must be at least 2".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// A materialized dataset: column-major integer features, per-task latent
/// confidences (empty when loaded from plain CSV), and per-task labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub schema: FieldSchema,
    pub fields: Vec<Vec<usize>>,
    pub confidences: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.fields.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task_count(&self) -> usize {
        self.labels.len()
    }

    /// Gathers the given rows into column-major field and label batches.
    pub fn batch(&self, rows: &[usize]) -> (Vec<Vec<usize>>, Vec<Vec<f64>>) {
        let fields = self
            .fields
            .iter()
            .map(|col| rows.iter().map(|&r| col[r]).collect())
            .collect();
        let labels = self
            .labels
            .iter()
            .map(|col| rows.iter().map(|&r| col[r]).collect())
            .collect();
        (fields, labels)
    }

    /// Deterministic shuffled split; `validation_fraction` of rows go to
    /// the second dataset.
    pub fn split(&self, validation_fraction: f64, seed: u64) -> (LabeledDataset, LabeledDataset) {
        assert!((0.0..1.0).contains(&validation_fraction));
        let order = crate::params::shuffled_indices(self.len(), seed, "train-validation-split");
        let val_len = (self.len() as f64 * validation_fraction).round() as usize;
        let (val_rows, train_rows) = order.split_at(val_len);
        (self.subset(train_rows), self.subset(val_rows))
    }

    fn subset(&self, rows: &[usize]) -> LabeledDataset {
        LabeledDataset {
            schema: self.schema.clone(),
            fields: self
                .fields
                .iter()
                .map(|col| rows.iter().map(|&r| col[r]).collect())
                .collect(),
            confidences: self
                .confidences
                .iter()
                .map(|col| rows.iter().map(|&r| col[r]).collect())
                .collect(),
            labels: self
                .labels
                .iter()
                .map(|col| rows.iter().map(|&r| col[r]).collect())
                .collect(),
        }
    }
}

/// Companion metadata written next to every generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub variant: Variant,
    pub rows: usize,
    pub cardinalities: Vec<usize>,
    pub embed_dim: usize,
    pub task_count: usize,
    pub noise_std: f64,
    pub binarize_rule: BinarizeRule,
    /// Pearson correlation between the base and task confidences.
    pub confidence_correlation: f64,
    pub positive_rate: Vec<f64>,
    pub teacher: TeacherConfig,
}

impl DatasetManifest {
    pub fn csv_schema(&self) -> CsvSchema {
        CsvSchema {
            cardinalities: self.cardinalities.clone(),
            task_count: self.task_count,
        }
    }
}

/// Draws the feature matrix: independent uniform draws per field.
pub fn sample_features(spec: &DatasetSpec) -> Vec<Vec<usize>> {
    spec.schema
        .cardinalities
        .iter()
        .enumerate()
        .map(|(j, &card)| {
            let mut rng = seeded_rng(spec.seed, &format!("features.f{j}"));
            (0..spec.sample_count).map(|_| rng.random_range(0..card)).collect()
        })
        .collect()
}

/// Generates the dataset and its manifest.
pub fn generate(spec: &DatasetSpec) -> Result<(LabeledDataset, DatasetManifest)> {
    spec.validate()?;
    let fields = sample_features(spec);
    let teacher = TeacherNet::new(&spec.schema, spec.teacher.clone(), spec.seed);
    let base = teacher.confidences(&fields)?;
    let task = match spec.variant {
        Variant::Related => {
            let mut rng = seeded_rng(spec.seed, "label-noise");
            related_confidence(&base, spec.noise_std, &mut rng)?
        }
        Variant::Unrelated => unrelated_confidence(&base),
    };
    let correlation = measure_task_correlation(&base, &task)?;
    let labels = vec![binarize(&base, spec.rule), binarize(&task, spec.rule)];
    let positive_rate = labels
        .iter()
        .map(|l| l.iter().sum::<f64>() / l.len() as f64)
        .collect();
    let manifest = DatasetManifest {
        seed: spec.seed,
        variant: spec.variant,
        rows: spec.sample_count,
        cardinalities: spec.schema.cardinalities.clone(),
        embed_dim: spec.schema.embed_dim,
        task_count: 2,
        noise_std: spec.noise_std,
        binarize_rule: spec.rule,
        confidence_correlation: correlation,
        positive_rate,
        teacher: spec.teacher.clone(),
    };
    let dataset = LabeledDataset {
        schema: spec.schema.clone(),
        fields,
        confidences: vec![base, task],
        labels,
    };
    Ok((dataset, manifest))
}

/// Column layout of a dataset CSV: `f0..f{c-1}` integer features followed
/// by `y0..y{T-1}` binary labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub cardinalities: Vec<usize>,
    pub task_count: usize,
}

impl CsvSchema {
    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = (0..self.cardinalities.len()).map(|j| format!("f{j}")).collect();
        h.extend((0..self.task_count).map(|t| format!("y{t}")));
        h
    }
}

/// Writes the dataset CSV (features + labels only).
pub fn write_csv(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let schema = CsvSchema {
        cardinalities: dataset.schema.cardinalities.clone(),
        task_count: dataset.task_count(),
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{}", schema.header().join(","))?;
    for r in 0..dataset.len() {
        let mut row: Vec<String> = dataset.fields.iter().map(|col| col[r].to_string()).collect();
        row.extend(dataset.labels.iter().map(|col| (col[r] as u8).to_string()));
        writeln!(file, "{}", row.join(","))?;
    }
    Ok(())
}

/// Writes the latent confidences as a sidecar CSV (`c0,c1,...`).
pub fn write_confidences_csv(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..dataset.confidences.len()).map(|t| format!("c{t}")).collect();
    writeln!(file, "{}", header.join(","))?;
    for r in 0..dataset.len() {
        let row: Vec<String> = dataset
            .confidences
            .iter()
            .map(|col| format!("{}", col[r]))
            .collect();
        writeln!(file, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text = toml::to_string(manifest)
        .map_err(|e| Error::Data(format!("manifest serialization failed: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Data(format!("bad manifest {}: {e}", path.display())))
}

/// Loads a dataset CSV against an expected schema, validating the header,
/// every field's vocabulary bound, and label values. Errors carry the
/// offending line number or field.
pub fn load_csv_dataset(path: &Path, schema: &CsvSchema) -> Result<LabeledDataset> {
    let c = schema.cardinalities.len();
    let t = schema.task_count;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let expected = schema.header();
    let got: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if got != expected {
        return Err(Error::Data(format!(
            "header mismatch in {}: expected {:?}, got {:?}",
            path.display(),
            expected,
            got
        )));
    }
    let mut fields: Vec<Vec<usize>> = vec![Vec::new(); c];
    let mut labels: Vec<Vec<f64>> = vec![Vec::new(); t];
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2; // 1-based, after the header
        if record.len() != c + t {
            return Err(Error::Data(format!(
                "line {line}: expected {} columns, got {}",
                c + t,
                record.len()
            )));
        }
        for j in 0..c {
            let value: usize = record[j]
                .parse()
                .map_err(|_| Error::Data(format!("line {line}: bad integer `{}` in f{j}", &record[j])))?;
            if value >= schema.cardinalities[j] {
                return Err(Error::Data(format!(
                    "line {line}: field f{j} value {value} outside vocabulary of {}",
                    schema.cardinalities[j]
                )));
            }
            fields[j].push(value);
        }
        for task in 0..t {
            let raw = &record[c + task];
            let value: u8 = raw
                .parse()
                .map_err(|_| Error::Data(format!("line {line}: bad label `{raw}` in y{task}")))?;
            if value > 1 {
                return Err(Error::Data(format!(
                    "line {line}: label y{task} must be 0 or 1, got {value}"
                )));
            }
            labels[task].push(value as f64);
        }
    }
    Ok(LabeledDataset {
        schema: FieldSchema {
            cardinalities: schema.cardinalities.clone(),
            embed_dim: 1, // model config supplies the real embedding width
        },
        fields,
        confidences: Vec::new(),
        labels,
    })
}

/// Loads a confidence sidecar if present, attaching it to the dataset.
pub fn load_confidences_csv(path: &Path, dataset: &mut LabeledDataset) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let tasks = reader.headers()?.len();
    let mut confidences: Vec<Vec<f64>> = vec![Vec::new(); tasks];
    for record in reader.records() {
        let record = record?;
        for (t, v) in record.iter().enumerate() {
            confidences[t].push(
                v.parse()
                    .map_err(|_| Error::Data(format!("bad confidence value `{v}`")))?,
            );
        }
    }
    if confidences.first().map_or(0, Vec::len) != dataset.len() {
        return Err(Error::Data("confidence sidecar row count mismatch".into()));
    }
    dataset.confidences = confidences;
    Ok(())
}
