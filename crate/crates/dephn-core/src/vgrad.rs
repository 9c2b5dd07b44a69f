//! Virtual gradient machinery: batch label similarity, inter-task gate
//! differences, the coefficient functions mapping both into a gradient
//! scale in [0, 2], and the forward-identity tape transform that applies
//! the scale to a gate's backward pass.
//!
//! Coefficients are computed in plain `f64` outside any tape, then applied
//! as constants, so modulation never changes forward values.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::pearson;
use crate::tape::{NodeId, Tape};

/// How two tasks' label vectors are compared within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMeasure {
    AbsCosine,
    #[default]
    AbsPearson,
}

impl SimilarityMeasure {
    pub const ALL: [SimilarityMeasure; 2] =
        [SimilarityMeasure::AbsCosine, SimilarityMeasure::AbsPearson];

    pub fn name(self) -> &'static str {
        match self {
            SimilarityMeasure::AbsCosine => "abs-cosine",
            SimilarityMeasure::AbsPearson => "abs-pearson",
        }
    }
}

/// Similarity of two equal-length label vectors, in [0, 1].
/// Degenerate inputs (zero norm or zero variance) map to 0.
pub fn batch_label_similarity(
    left: &[f64],
    right: &[f64],
    measure: SimilarityMeasure,
) -> Result<f64> {
    if left.len() != right.len() {
        return Err(Error::Metric(format!(
            "label vectors differ in length: {} vs {}",
            left.len(),
            right.len()
        )));
    }
    if left.len() < 2 {
        return Err(Error::Metric(format!(
            "label similarity needs at least 2 samples, got {}",
            left.len()
        )));
    }
    let value = match measure {
        SimilarityMeasure::AbsCosine => {
            let dot: f64 = left.iter().zip(right).map(|(a, b)| a * b).sum();
            let na: f64 = left.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nb: f64 = right.iter().map(|b| b * b).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                (dot / (na * nb)).abs()
            }
        }
        SimilarityMeasure::AbsPearson => pearson(left, right).map_or(0.0, f64::abs),
    };
    Ok(value.min(1.0))
}

/// Inter-task gate difference `min(1, |g_t - g_j|)`.
pub fn gate_difference(gate_t: f64, gate_j: f64) -> f64 {
    (gate_t - gate_j).abs().min(1.0)
}

/// Closed-form maps from (task similarity x, gate difference y) on the
/// unit square to a gradient scale in [0, 2]. The multiplicative family
/// combines x and y as a product, the additive family as a sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientFunction {
    MulCos,
    MulAbs,
    MulSquare,
    MulSqrt,
    AddCos,
    AddAbs,
    AddSquare,
    #[default]
    AddSqrt,
}

impl CoefficientFunction {
    pub const ALL: [CoefficientFunction; 8] = [
        CoefficientFunction::MulCos,
        CoefficientFunction::MulAbs,
        CoefficientFunction::MulSquare,
        CoefficientFunction::MulSqrt,
        CoefficientFunction::AddCos,
        CoefficientFunction::AddAbs,
        CoefficientFunction::AddSquare,
        CoefficientFunction::AddSqrt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CoefficientFunction::MulCos => "mul-cos",
            CoefficientFunction::MulAbs => "mul-abs",
            CoefficientFunction::MulSquare => "mul-square",
            CoefficientFunction::MulSqrt => "mul-sqrt",
            CoefficientFunction::AddCos => "add-cos",
            CoefficientFunction::AddAbs => "add-abs",
            CoefficientFunction::AddSquare => "add-square",
            CoefficientFunction::AddSqrt => "add-sqrt",
        }
    }
}

/// Evaluates the selected coefficient function at (x, y) in [0, 1]^2.
/// The square-root variants take the absolute value of their base so the
/// map stays real on the whole square.
pub fn gamma(x: f64, y: f64, function: CoefficientFunction) -> f64 {
    debug_assert!((-1e-9..=1.0 + 1e-9).contains(&x), "x out of range: {x}");
    debug_assert!((-1e-9..=1.0 + 1e-9).contains(&y), "y out of range: {y}");
    match function {
        CoefficientFunction::MulCos => (2.0 * PI * x * y).cos() + 1.0,
        CoefficientFunction::MulAbs => 2.0 * (2.0 * x * y - 1.0).abs(),
        CoefficientFunction::MulSquare => 2.0 * (2.0 * x * y - 1.0).powi(2),
        CoefficientFunction::MulSqrt => 2.0 * (2.0 * x * y - 1.0).abs().sqrt(),
        CoefficientFunction::AddCos => ((x + y) * PI).cos() + 1.0,
        CoefficientFunction::AddAbs => 2.0 * (x + y - 1.0).abs(),
        CoefficientFunction::AddSquare => 2.0 * (x + y - 1.0).powi(2),
        CoefficientFunction::AddSqrt => 2.0 * (x + y - 1.0).abs().sqrt(),
    }
}

/// Batch context for computing aggregated coefficients: per-task label
/// vectors and a post-activation gate snapshot indexed `[task][expert][mapping]`.
#[derive(Debug, Clone)]
pub struct GammaContext<'a> {
    pub labels: &'a [Vec<f64>],
    pub gates: &'a [Vec<Vec<f64>>],
    pub measure: SimilarityMeasure,
    pub function: CoefficientFunction,
}

impl<'a> GammaContext<'a> {
    pub fn task_count(&self) -> usize {
        self.labels.len()
    }
}

/// Product over all other tasks of the pairwise coefficient for gate
/// (t, k, p). A single task means no modulation (returns 1).
pub fn aggregate_gamma(ctx: &GammaContext, task: usize, expert: usize, mapping: usize) -> Result<f64> {
    let mut product = 1.0;
    for other in 0..ctx.task_count() {
        if other == task {
            continue;
        }
        let x = batch_label_similarity(&ctx.labels[other], &ctx.labels[task], ctx.measure)?;
        let y = gate_difference(
            ctx.gates[task][expert][mapping],
            ctx.gates[other][expert][mapping],
        );
        product *= gamma(x, y, ctx.function);
    }
    Ok(product)
}

/// Aggregated coefficients for every (task, expert, mapping) triple.
pub fn gamma_table(ctx: &GammaContext) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut table = Vec::with_capacity(ctx.task_count());
    for t in 0..ctx.task_count() {
        let mut per_task = Vec::with_capacity(ctx.gates[t].len());
        for k in 0..ctx.gates[t].len() {
            let mut per_expert = Vec::with_capacity(ctx.gates[t][k].len());
            for p in 0..ctx.gates[t][k].len() {
                per_expert.push(aggregate_gamma(ctx, t, k, p)?);
            }
            per_task.push(per_expert);
        }
        table.push(per_task);
    }
    Ok(table)
}

/// Wraps a gate node so its forward value is untouched while its backward
/// gradient is multiplied by `coefficient`. The coefficient is a constant
/// by the time it is applied; no gradient flows into its computation.
pub fn apply_gradient_scaling(tape: &mut Tape, gate: NodeId, coefficient: f64) -> Result<NodeId> {
    if !coefficient.is_finite() || coefficient < 0.0 {
        return Err(Error::Train(format!(
            "invalid gradient scaling coefficient {coefficient}"
        )));
    }
    Ok(tape.grad_scale(gate, coefficient)?)
}

/// A coefficient function sampled on the uniform n-by-n grid over [0, 1]^2.
#[derive(Debug, Clone)]
pub struct CoefficientGrid {
    pub function: CoefficientFunction,
    pub resolution: usize,
    /// Row-major values; row i is x = i/(n-1), column j is y = j/(n-1).
    pub values: Vec<f64>,
}

impl CoefficientGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.resolution + j]
    }
}

pub fn coefficient_grid(function: CoefficientFunction, resolution: usize) -> CoefficientGrid {
    assert!(resolution >= 2, "grid needs at least 2 points per axis");
    let n = resolution;
    let mut values = Vec::with_capacity(n * n);
    for i in 0..n {
        let x = i as f64 / (n - 1) as f64;
        for j in 0..n {
            let y = j as f64 / (n - 1) as f64;
            values.push(gamma(x, y, function));
        }
    }
    CoefficientGrid { function, resolution, values }
}
