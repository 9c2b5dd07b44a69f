//! The heterogeneous expert bank: shared deep experts plus task-private
//! cross-interaction and field-interaction stacks, all projected to a
//! common expert output width and wrapped in a zero-initialized trainable
//! residual.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, seeded_rng, ParamStore};
use crate::tape::{NodeId, Tape, Tensor};

/// Cross layer weight form: rank-1 (vector) or full matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CrossMode {
    Dcn,
    #[default]
    Dcnv2,
}

/// Explicit feature crossing with a residual at every layer: the output
/// dimension equals the input dimension until the final projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossStack {
    pub depth: usize,
    pub mode: CrossMode,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl CrossStack {
    pub fn init_params(&self, store: &mut ParamStore, prefix: &str, seed: u64) {
        let d = self.input_dim;
        for l in 0..self.depth {
            let wname = format!("{prefix}.l{l}.w");
            let mut rng = seeded_rng(seed, &wname);
            let w = match self.mode {
                CrossMode::Dcn => kaiming_uniform(vec![d], d, &mut rng),
                CrossMode::Dcnv2 => kaiming_uniform(vec![d, d], d, &mut rng),
            };
            store.insert(&wname, w);
            store.insert(&format!("{prefix}.l{l}.b"), Tensor::zeros(vec![d]));
        }
        let pname = format!("{prefix}.proj");
        let mut rng = seeded_rng(seed, &pname);
        store.insert(&pname, kaiming_uniform(vec![d, self.output_dim], d, &mut rng));
    }

    /// `x_{l+1} = x0 .* (w_l . x_l) + b_l + x_l` (vector mode) or
    /// `x_{l+1} = x0 .* (W_l x_l + b_l) + x_l` (matrix mode), then a
    /// bias-free projection to the expert output width.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prefix: &str,
        x0: NodeId,
    ) -> Result<NodeId> {
        if tape.shape(x0) != [tape.shape(x0)[0], self.input_dim] {
            return Err(Error::Config(format!(
                "cross stack expects input width {}, got {:?}",
                self.input_dim,
                tape.shape(x0)
            )));
        }
        let mut x = x0;
        for l in 0..self.depth {
            let w = tape.param(&format!("{prefix}.l{l}.w"), store)?;
            let b = tape.param(&format!("{prefix}.l{l}.b"), store)?;
            let inner = match self.mode {
                CrossMode::Dcn => {
                    let prod = tape.mul(x, w)?;
                    tape.sum_axis(prod, 1)?
                }
                CrossMode::Dcnv2 => {
                    let h = tape.matmul(x, w)?;
                    tape.add(h, b)?
                }
            };
            let crossed = tape.mul(x0, inner)?;
            x = match self.mode {
                CrossMode::Dcn => {
                    let with_bias = tape.add(crossed, b)?;
                    tape.add(with_bias, x)?
                }
                CrossMode::Dcnv2 => tape.add(crossed, x)?,
            };
        }
        let proj = tape.param(&format!("{prefix}.proj"), store)?;
        Ok(tape.matmul(x, proj)?)
    }
}

/// Vector-wise interaction across fields: each field is multiplied by a
/// learned mixture of every field's current state, crossed against its
/// original embedding, with a residual per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldStack {
    pub depth: usize,
    pub field_count: usize,
    pub field_dim: usize,
    pub output_dim: usize,
}

impl FieldStack {
    pub fn init_params(&self, store: &mut ParamStore, prefix: &str, seed: u64) {
        let c = self.field_count;
        for l in 0..self.depth {
            let mname = format!("{prefix}.l{l}.m");
            let mut rng = seeded_rng(seed, &mname);
            store.insert(&mname, kaiming_uniform(vec![c * c], c, &mut rng));
        }
        let flat = c * self.field_dim;
        let pname = format!("{prefix}.proj");
        let mut rng = seeded_rng(seed, &pname);
        store.insert(&pname, kaiming_uniform(vec![flat, self.output_dim], flat, &mut rng));
    }

    /// `H_{l+1}[i] = H0[i] .* (sum_j M_l[i,j] H_l[j]) + H_l[i]`, then the
    /// fields are flattened and projected to the expert output width.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prefix: &str,
        fields0: &[NodeId],
    ) -> Result<NodeId> {
        let c = self.field_count;
        if fields0.len() != c {
            return Err(Error::Config(format!(
                "field stack expects {c} fields, got {}",
                fields0.len()
            )));
        }
        let mut state: Vec<NodeId> = fields0.to_vec();
        for l in 0..self.depth {
            let m = tape.param(&format!("{prefix}.l{l}.m"), store)?;
            let mut next = Vec::with_capacity(c);
            for i in 0..c {
                let mut mix: Option<NodeId> = None;
                for (j, h_j) in state.iter().enumerate() {
                    let coef = tape.slice_last(m, i * c + j, 1)?;
                    let term = tape.mul(coef, *h_j)?;
                    mix = Some(match mix {
                        None => term,
                        Some(prev) => tape.add(prev, term)?,
                    });
                }
                let crossed = tape.mul(fields0[i], mix.expect("c >= 1"))?;
                next.push(tape.add(crossed, state[i])?);
            }
            state = next;
        }
        let flat = tape.concat(&state, 1)?;
        let proj = tape.param(&format!("{prefix}.proj"), store)?;
        Ok(tape.matmul(flat, proj)?)
    }
}

/// Plain MLP: affine + relu hidden layers, linear final layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnnExpert {
    pub input_dim: usize,
    /// Layer widths including the final output width.
    pub widths: Vec<usize>,
}

impl DnnExpert {
    pub fn init_params(&self, store: &mut ParamStore, prefix: &str, seed: u64) {
        let mut fan_in = self.input_dim;
        for (l, &out) in self.widths.iter().enumerate() {
            let wname = format!("{prefix}.l{l}.w");
            let mut rng = seeded_rng(seed, &wname);
            store.insert(&wname, kaiming_uniform(vec![fan_in, out], fan_in, &mut rng));
            store.insert(&format!("{prefix}.l{l}.b"), Tensor::zeros(vec![out]));
            fan_in = out;
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prefix: &str,
        input: NodeId,
    ) -> Result<NodeId> {
        let mut h = input;
        let last = self.widths.len() - 1;
        for l in 0..self.widths.len() {
            let w = tape.param(&format!("{prefix}.l{l}.w"), store)?;
            let b = tape.param(&format!("{prefix}.l{l}.b"), store)?;
            let z = tape.matmul(h, w)?;
            let z = tape.add(z, b)?;
            h = if l < last { tape.relu(z) } else { z };
        }
        Ok(h)
    }
}

/// `expert_out + scale * project(expert_in)` with `scale` starting at zero,
/// so every expert begins as its plain stack output.
pub fn trainable_residual(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    expert_in: NodeId,
    expert_out: NodeId,
) -> Result<NodeId> {
    let in_dim = tape.shape(expert_in)[1];
    let out_dim = tape.shape(expert_out)[1];
    let projected = if in_dim == out_dim {
        expert_in
    } else {
        let proj = tape.param(&format!("{prefix}.res.proj"), store)?;
        tape.matmul(expert_in, proj)?
    };
    let scale = tape.param(&format!("{prefix}.res.scale"), store)?;
    let scaled = tape.mul(scale, projected)?;
    Ok(tape.add(expert_out, scaled)?)
}

fn init_residual_params(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    seed: u64,
) {
    if in_dim != out_dim {
        let pname = format!("{prefix}.res.proj");
        let mut rng = seeded_rng(seed, &pname);
        store.insert(&pname, kaiming_uniform(vec![in_dim, out_dim], in_dim, &mut rng));
    }
    store.insert(&format!("{prefix}.res.scale"), Tensor::zeros(vec![1]));
}

/// Which private stack a task-exclusive expert slot uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrivateExpertKind {
    Cross,
    Field,
}

/// Expert bank layout: shared deep experts plus a per-task private
/// composition. All experts emit `expert_dim`-wide outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub public_experts: usize,
    /// Hidden widths of each public deep expert; `expert_dim` is appended.
    pub dnn_hidden: Vec<usize>,
    pub expert_dim: usize,
    pub cross_depth: usize,
    pub field_depth: usize,
    pub cross_mode: CrossMode,
    /// Private expert composition, identical for every task.
    pub private_experts: Vec<PrivateExpertKind>,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            public_experts: 3,
            dnn_hidden: vec![64, 32],
            expert_dim: 16,
            cross_depth: 2,
            field_depth: 2,
            cross_mode: CrossMode::Dcnv2,
            private_experts: vec![PrivateExpertKind::Cross, PrivateExpertKind::Field],
        }
    }
}

/// Instantiated bank dimensions for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertBank {
    pub config: BankConfig,
    /// Flattened branch input width (`c * d_f`).
    pub input_dim: usize,
    pub field_count: usize,
    pub field_dim: usize,
}

impl ExpertBank {
    pub fn new(config: BankConfig, field_count: usize, field_dim: usize) -> Self {
        ExpertBank {
            config,
            input_dim: field_count * field_dim,
            field_count,
            field_dim,
        }
    }

    fn public_dnn(&self) -> DnnExpert {
        let mut widths = self.config.dnn_hidden.clone();
        widths.push(self.config.expert_dim);
        DnnExpert { input_dim: self.input_dim, widths }
    }

    fn private_cross(&self) -> CrossStack {
        CrossStack {
            depth: self.config.cross_depth,
            mode: self.config.cross_mode,
            input_dim: self.input_dim,
            output_dim: self.config.expert_dim,
        }
    }

    fn private_field(&self) -> FieldStack {
        FieldStack {
            depth: self.config.field_depth,
            field_count: self.field_count,
            field_dim: self.field_dim,
            output_dim: self.config.expert_dim,
        }
    }

    pub fn init_public_params(&self, store: &mut ParamStore, seed: u64) {
        let dnn = self.public_dnn();
        for k in 0..self.config.public_experts {
            let prefix = format!("expert.pub{k}");
            dnn.init_params(store, &prefix, seed);
            init_residual_params(store, &prefix, self.input_dim, self.config.expert_dim, seed);
        }
    }

    pub fn init_private_params(&self, store: &mut ParamStore, task: usize, seed: u64) {
        for (k, kind) in self.config.private_experts.iter().enumerate() {
            let prefix = format!("expert.pri.t{task}.k{k}");
            match kind {
                PrivateExpertKind::Cross => self.private_cross().init_params(store, &prefix, seed),
                PrivateExpertKind::Field => self.private_field().init_params(store, &prefix, seed),
            }
            init_residual_params(store, &prefix, self.input_dim, self.config.expert_dim, seed);
        }
    }

    /// Shared expert outputs on the public branch input; computed once per
    /// pass and reused by every task.
    pub fn public_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z_pub: NodeId,
    ) -> Result<Vec<NodeId>> {
        let dnn = self.public_dnn();
        let mut outs = Vec::with_capacity(self.config.public_experts);
        for k in 0..self.config.public_experts {
            let prefix = format!("expert.pub{k}");
            let raw = dnn.forward(tape, store, &prefix, z_pub)?;
            outs.push(trainable_residual(tape, store, &prefix, z_pub, raw)?);
        }
        Ok(outs)
    }

    /// Task-exclusive expert outputs. The cross stack sees the flattened
    /// cross-branch input; the field stack sees the field-branch structure.
    pub fn private_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        task: usize,
        z_cross: NodeId,
        fields: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        let mut outs = Vec::with_capacity(self.config.private_experts.len());
        for (k, kind) in self.config.private_experts.iter().enumerate() {
            let prefix = format!("expert.pri.t{task}.k{k}");
            let (input, raw) = match kind {
                PrivateExpertKind::Cross => {
                    let out = self.private_cross().forward(tape, store, &prefix, z_cross)?;
                    (z_cross, out)
                }
                PrivateExpertKind::Field => {
                    let out = self.private_field().forward(tape, store, &prefix, fields)?;
                    let flat = crate::feature::flatten_fields(tape, fields)?;
                    (flat, out)
                }
            };
            outs.push(trainable_residual(tape, store, &prefix, input, raw)?);
        }
        Ok(outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::finite_difference_check;
    use crate::params::uniform;

    #[test]
    fn cross_residual_only_reduces_to_projection() {
        let stack = CrossStack { depth: 3, mode: CrossMode::Dcnv2, input_dim: 4, output_dim: 2 };
        let mut store = ParamStore::new();
        stack.init_params(&mut store, "cx", 5);
        for l in 0..3 {
            let w = store.get_mut(&format!("cx.l{l}.w")).unwrap();
            w.tensor.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let x0 = tape.constant(Tensor::matrix(2, 4, vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0, 1.0, -1.0]));
        let out = stack.forward(&mut tape, &store, "cx", x0).unwrap();
        // every layer is identity, so the output is proj(x0)
        let proj = tape.constant(store.get("cx.proj").unwrap().tensor.clone());
        let expect = tape.matmul(x0, proj).unwrap();
        assert_eq!(tape.value(out), tape.value(expect));
    }

    #[test]
    fn cross_vector_mode_arithmetic() {
        // one layer, x0 = x = [1,2], w = [1,0], b = 0 -> [2,4]
        let stack = CrossStack { depth: 1, mode: CrossMode::Dcn, input_dim: 2, output_dim: 2 };
        let mut store = ParamStore::new();
        store.insert("cx.l0.w", Tensor::vector(vec![1.0, 0.0]));
        store.insert("cx.l0.b", Tensor::zeros(vec![2]));
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        store.insert("cx.proj", eye);
        let mut tape = Tape::new();
        let x0 = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let out = stack.forward(&mut tape, &store, "cx", x0).unwrap();
        assert_eq!(tape.value(out), &[2.0, 4.0]);
    }

    #[test]
    fn cross_matrix_mode_arithmetic() {
        // W = I, b = 0, x0 = [1,1]: x1 = x0 .* x0 + x0 = [2,2]
        let stack = CrossStack { depth: 1, mode: CrossMode::Dcnv2, input_dim: 2, output_dim: 2 };
        let mut store = ParamStore::new();
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        store.insert("cx.l0.w", eye.clone());
        store.insert("cx.l0.b", Tensor::zeros(vec![2]));
        store.insert("cx.proj", eye);
        let mut tape = Tape::new();
        let x0 = tape.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]));
        let out = stack.forward(&mut tape, &store, "cx", x0).unwrap();
        assert_eq!(tape.value(out), &[2.0, 2.0]);
    }

    #[test]
    fn field_stack_residual_only_and_single_field() {
        // zero mixing -> projection of the flattened originals
        let stack = FieldStack { depth: 2, field_count: 2, field_dim: 2, output_dim: 3 };
        let mut store = ParamStore::new();
        stack.init_params(&mut store, "fx", 6);
        for l in 0..2 {
            store.get_mut(&format!("fx.l{l}.m")).unwrap().tensor.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let f0 = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let f1 = tape.constant(Tensor::matrix(1, 2, vec![-0.5, 0.25]));
        let out = stack.forward(&mut tape, &store, "fx", &[f0, f1]).unwrap();
        let flat = tape.concat(&[f0, f1], 1).unwrap();
        let proj = tape.constant(store.get("fx.proj").unwrap().tensor.clone());
        let expect = tape.matmul(flat, proj).unwrap();
        assert_eq!(tape.value(out), tape.value(expect));

        // c = 1, M = [1]: H1 = h .* h + h
        let single = FieldStack { depth: 1, field_count: 1, field_dim: 2, output_dim: 2 };
        let mut store = ParamStore::new();
        store.insert("s.l0.m", Tensor::vector(vec![1.0]));
        store.insert("s.proj", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(1, 2, vec![3.0, -2.0]));
        let out = single.forward(&mut tape, &store, "s", &[h]).unwrap();
        assert_eq!(tape.value(out), &[12.0, 2.0]);
    }

    #[test]
    fn field_stack_two_layers_compose_the_single_layer_rule() {
        let c = 3;
        let d = 2;
        let mut rng = seeded_rng(17, "field-compose");
        let m0 = uniform(vec![c * c], -0.5, 0.5, &mut rng);
        let m1 = uniform(vec![c * c], -0.5, 0.5, &mut rng);
        let h0: Vec<Tensor> = (0..c).map(|_| uniform(vec![2, d], -1.0, 1.0, &mut rng)).collect();

        // independent oracle: apply the per-layer recursion in plain f64
        let apply = |m: &Tensor, h0v: &[Vec<f64>], h: &[Vec<f64>]| -> Vec<Vec<f64>> {
            let mut next = vec![vec![0.0; 2 * d]; c];
            for i in 0..c {
                let mut mix = vec![0.0; 2 * d];
                for j in 0..c {
                    let coef = m.data()[i * c + j];
                    for (mx, &hv) in mix.iter_mut().zip(&h[j]) {
                        *mx += coef * hv;
                    }
                }
                for e in 0..2 * d {
                    next[i][e] = h0v[i][e] * mix[e] + h[i][e];
                }
            }
            next
        };
        let h0v: Vec<Vec<f64>> = h0.iter().map(|t| t.data().to_vec()).collect();
        let l1 = apply(&m0, &h0v, &h0v);
        let l2 = apply(&m1, &h0v, &l1);

        let eye = {
            let flat = c * d;
            let mut data = vec![0.0; flat * flat];
            for i in 0..flat {
                data[i * flat + i] = 1.0;
            }
            Tensor::matrix(flat, flat, data)
        };
        let stack = FieldStack { depth: 2, field_count: c, field_dim: d, output_dim: c * d };
        let mut store = ParamStore::new();
        store.insert("fx.l0.m", m0);
        store.insert("fx.l1.m", m1);
        store.insert("fx.proj", eye);
        let mut tape = Tape::new();
        let nodes: Vec<NodeId> = h0.iter().map(|t| tape.constant(t.clone())).collect();
        let out = stack.forward(&mut tape, &store, "fx", &nodes).unwrap();
        let got = tape.value(out);
        // rows of `got` are [b, c*d]: field i occupies columns i*d..(i+1)*d
        for b in 0..2 {
            for i in 0..c {
                for e in 0..d {
                    let expect = l2[i][b * d + e];
                    let actual = got[b * (c * d) + i * d + e];
                    assert!((actual - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dnn_zero_weights_zero_output_and_affine_case() {
        let dnn = DnnExpert { input_dim: 3, widths: vec![4, 2] };
        let mut store = ParamStore::new();
        dnn.init_params(&mut store, "d", 8);
        for (_, e) in store.iter_mut() {
            e.tensor.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1.0; 6]));
        let out = dnn.forward(&mut tape, &store, "d", x).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));

        // single linear layer equals a direct matrix product
        let lin = DnnExpert { input_dim: 2, widths: vec![2] };
        let mut store = ParamStore::new();
        store.insert("lin.l0.w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        store.insert("lin.l0.b", Tensor::vector(vec![0.5, -0.5]));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]));
        let out = lin.forward(&mut tape, &store, "lin", x).unwrap();
        assert_eq!(tape.value(out), &[4.5, 5.5]);
    }

    #[test]
    fn dnn_gradients_match_finite_differences() {
        let dnn = DnnExpert { input_dim: 3, widths: vec![5, 2] };
        let mut store = ParamStore::new();
        dnn.init_params(&mut store, "d", 21);
        let mut rng = seeded_rng(22, "dnn-fd-input");
        let input = uniform(vec![4, 3], -1.0, 1.0, &mut rng);
        let dnn2 = dnn.clone();
        let builder = move |tape: &mut Tape, store: &ParamStore| {
            let x = tape.constant(input.clone());
            let out = dnn2
                .forward(tape, store, "d", x)
                .map_err(|_| crate::tape::TapeError::Empty("forward"))?;
            let sq = tape.mul(out, out)?;
            Ok(tape.mean_all(sq))
        };
        let err = finite_difference_check(&builder, &store, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn residual_zero_scale_is_identity_and_unit_scale_adds() {
        let mut store = ParamStore::new();
        init_residual_params(&mut store, "e", 2, 2, 0);
        let mut tape = Tape::new();
        let inp = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let out = tape.constant(Tensor::matrix(1, 2, vec![10.0, 20.0]));
        let r = trainable_residual(&mut tape, &store, "e", inp, out).unwrap();
        assert_eq!(tape.value(r), &[10.0, 20.0]);

        store.get_mut("e.res.scale").unwrap().tensor.data_mut()[0] = 1.0;
        let mut tape = Tape::new();
        let inp = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let out = tape.constant(Tensor::matrix(1, 2, vec![10.0, 20.0]));
        let r = trainable_residual(&mut tape, &store, "e", inp, out).unwrap();
        assert_eq!(tape.value(r), &[11.0, 22.0]);
    }

    #[test]
    fn residual_scale_gradient_is_inner_product_with_projection() {
        let mut store = ParamStore::new();
        init_residual_params(&mut store, "e", 3, 2, 33);
        store.get_mut("e.res.scale").unwrap().tensor.data_mut()[0] = 0.37;
        let mut rng = seeded_rng(34, "res-fd");
        let input = uniform(vec![2, 3], -1.0, 1.0, &mut rng);
        let output = uniform(vec![2, 2], -1.0, 1.0, &mut rng);
        let builder = move |tape: &mut Tape, store: &ParamStore| {
            let inp = tape.constant(input.clone());
            let out = tape.constant(output.clone());
            let r = trainable_residual(tape, store, "e", inp, out)
                .map_err(|_| crate::tape::TapeError::Empty("residual"))?;
            Ok(tape.sum_all(r))
        };
        let err = finite_difference_check(&builder, &store, 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn bank_outputs_have_the_expert_width() {
        let bank = ExpertBank::new(BankConfig::default(), 3, 4);
        let mut store = ParamStore::new();
        bank.init_public_params(&mut store, 40);
        bank.init_private_params(&mut store, 0, 40);
        let mut rng = seeded_rng(41, "bank-audit");
        let mut tape = Tape::new();
        let z = tape.constant(uniform(vec![2, 12], -1.0, 1.0, &mut rng));
        let fields: Vec<NodeId> = (0..3)
            .map(|_| tape.constant(uniform(vec![2, 4], -1.0, 1.0, &mut rng)))
            .collect();
        let pubs = bank.public_forward(&mut tape, &store, z).unwrap();
        assert_eq!(pubs.len(), 3);
        let pris = bank.private_forward(&mut tape, &store, 0, z, &fields).unwrap();
        assert_eq!(pris.len(), 2);
        for &e in pubs.iter().chain(&pris) {
            assert_eq!(tape.shape(e), &[2, 16]);
        }
    }
}
