//! Shared feature pipeline: per-field embeddings, multi-head self-attention
//! over field positions, and soft selection gating that blends raw and
//! attention-enhanced embeddings independently for each downstream branch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, seeded_rng, uniform, ParamStore};
use crate::tape::{NodeId, Tape, Tensor};

/// Categorical field layout: one vocabulary per field, one shared
/// embedding width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub cardinalities: Vec<usize>,
    pub embed_dim: usize,
}

impl FieldSchema {
    pub fn new(cardinalities: Vec<usize>, embed_dim: usize) -> Result<Self> {
        let schema = FieldSchema { cardinalities, embed_dim };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cardinalities.is_empty() {
            return Err(Error::Config("schema needs at least one field".into()));
        }
        if let Some(card) = self.cardinalities.iter().find(|&&c| c < 2) {
            return Err(Error::Config(format!(
                "every field needs a vocabulary of at least 2, got {card}"
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn field_count(&self) -> usize {
        self.cardinalities.len()
    }

    /// Width of the flattened per-sample embedding, `c * d_f`.
    pub fn flat_dim(&self) -> usize {
        self.field_count() * self.embed_dim
    }
}

/// The three parallel interaction structures fed by the pipeline. Each owns
/// an independent soft-selection gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Dnn,
    Cross,
    Field,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Dnn, Branch::Cross, Branch::Field];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Dnn => "dnn",
            Branch::Cross => "cross",
            Branch::Field => "field",
        }
    }
}

/// Whether the selection gate has one coordinate per embedding coordinate
/// or one per field (broadcast across that field's embedding).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SsgGranularity {
    #[default]
    PerCoordinate,
    PerField,
}

/// Registers shared embedding tables, one per field.
pub fn init_embedding_params(store: &mut ParamStore, schema: &FieldSchema, prefix: &str, seed: u64) {
    for (j, &card) in schema.cardinalities.iter().enumerate() {
        let name = format!("{prefix}embed.f{j}");
        let mut rng = seeded_rng(seed, &name);
        store.insert(&name, uniform(vec![card, schema.embed_dim], -0.1, 0.1, &mut rng));
    }
}

/// Registers the attention projections and the three per-branch gates.
pub fn init_pipeline_params(
    store: &mut ParamStore,
    schema: &FieldSchema,
    granularity: SsgGranularity,
    seed: u64,
) {
    let d = schema.embed_dim;
    for mat in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
        let mut rng = seeded_rng(seed, mat);
        store.insert(mat, kaiming_uniform(vec![d, d], d, &mut rng));
    }
    for bias in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
        store.insert(bias, Tensor::zeros(vec![d]));
    }
    let gate_len = match granularity {
        SsgGranularity::PerCoordinate => schema.flat_dim(),
        SsgGranularity::PerField => schema.field_count(),
    };
    for branch in Branch::ALL {
        // Zero raw gate = equal blend of raw and attended embeddings.
        store.insert(&format!("ssg.{}.raw", branch.name()), Tensor::zeros(vec![gate_len]));
    }
}

/// Looks up one batch of integer field indices, returning one `[B x d_f]`
/// node per field. Tables are shared across branches and tasks.
pub fn embed_batch(
    tape: &mut Tape,
    store: &ParamStore,
    schema: &FieldSchema,
    prefix: &str,
    fields: &[Vec<usize>],
) -> Result<Vec<NodeId>> {
    if fields.len() != schema.field_count() {
        return Err(Error::Config(format!(
            "batch has {} fields, schema has {}",
            fields.len(),
            schema.field_count()
        )));
    }
    let mut out = Vec::with_capacity(fields.len());
    for (j, indices) in fields.iter().enumerate() {
        let table = tape.param(&format!("{prefix}embed.f{j}"), store)?;
        out.push(tape.embed(table, indices)?);
    }
    Ok(out)
}

/// Scaled dot-product self-attention over the field positions of each
/// sample, with `heads` parallel heads and an output projection. No
/// positional encoding: permuting fields permutes outputs identically.
pub fn multi_head_self_attention(
    tape: &mut Tape,
    store: &ParamStore,
    schema: &FieldSchema,
    heads: usize,
    fields: &[NodeId],
) -> Result<Vec<NodeId>> {
    let d = schema.embed_dim;
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "embed_dim {d} must be divisible by heads {heads}"
        )));
    }
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let c = fields.len();

    let wq = tape.param("attn.wq", store)?;
    let bq = tape.param("attn.bq", store)?;
    let wk = tape.param("attn.wk", store)?;
    let bk = tape.param("attn.bk", store)?;
    let wv = tape.param("attn.wv", store)?;
    let bv = tape.param("attn.bv", store)?;
    let wo = tape.param("attn.wo", store)?;
    let bo = tape.param("attn.bo", store)?;

    let project = |tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId| -> Result<NodeId> {
        let h = tape.matmul(x, w)?;
        Ok(tape.add(h, b)?)
    };
    let queries: Vec<NodeId> = fields
        .iter()
        .map(|&f| project(tape, f, wq, bq))
        .collect::<Result<_>>()?;
    let keys: Vec<NodeId> = fields
        .iter()
        .map(|&f| project(tape, f, wk, bk))
        .collect::<Result<_>>()?;
    let values: Vec<NodeId> = fields
        .iter()
        .map(|&f| project(tape, f, wv, bv))
        .collect::<Result<_>>()?;

    let mut attended = Vec::with_capacity(c);
    for i in 0..c {
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let start = h * head_dim;
            let q_i = tape.slice_last(queries[i], start, head_dim)?;
            let mut scores = Vec::with_capacity(c);
            for k in keys.iter().take(c) {
                let k_j = tape.slice_last(*k, start, head_dim)?;
                let prod = tape.mul(q_i, k_j)?;
                let dot = tape.sum_axis(prod, 1)?;
                scores.push(tape.scale(dot, scale));
            }
            let score_row = tape.concat(&scores, 1)?;
            let weights = tape.softmax(score_row, 1)?;
            let mut acc: Option<NodeId> = None;
            for (j, v) in values.iter().enumerate().take(c) {
                let a_ij = tape.slice_last(weights, j, 1)?;
                let v_j = tape.slice_last(*v, start, head_dim)?;
                let term = tape.mul(a_ij, v_j)?;
                acc = Some(match acc {
                    None => term,
                    Some(prev) => tape.add(prev, term)?,
                });
            }
            head_outputs.push(acc.expect("at least one field"));
        }
        let merged = tape.concat(&head_outputs, 1)?;
        attended.push(project(tape, merged, wo, bo)?);
    }
    Ok(attended)
}

/// Per-coordinate convex blend `g * attended + (1 - g) * raw` with
/// `g = sigmoid(raw_param)`, returned per field. Each branch passes its own
/// gate parameter name.
pub fn soft_selection_gate(
    tape: &mut Tape,
    store: &ParamStore,
    branch: Branch,
    granularity: SsgGranularity,
    raw_fields: &[NodeId],
    attended_fields: &[NodeId],
) -> Result<Vec<NodeId>> {
    if raw_fields.len() != attended_fields.len() {
        return Err(Error::Config(format!(
            "branch {} got {} raw fields but {} attended fields",
            branch.name(),
            raw_fields.len(),
            attended_fields.len()
        )));
    }
    let raw_param = tape.param(&format!("ssg.{}.raw", branch.name()), store)?;
    let gate = tape.sigmoid(raw_param);
    let mut blended = Vec::with_capacity(raw_fields.len());
    for (j, (&raw, &att)) in raw_fields.iter().zip(attended_fields).enumerate() {
        let d_f = tape.shape(raw)[1];
        let g_j = match granularity {
            SsgGranularity::PerCoordinate => tape.slice_last(gate, j * d_f, d_f)?,
            SsgGranularity::PerField => tape.slice_last(gate, j, 1)?,
        };
        let keep = tape.one_minus(g_j);
        let selected = tape.mul(g_j, att)?;
        let passed = tape.mul(keep, raw)?;
        blended.push(tape.add(selected, passed)?);
    }
    Ok(blended)
}

/// Flattens per-field nodes into the `[B x c*d_f]` branch input.
pub fn flatten_fields(tape: &mut Tape, fields: &[NodeId]) -> Result<NodeId> {
    Ok(tape.concat(fields, 1)?)
}
