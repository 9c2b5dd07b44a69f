//! Central finite-difference audit of tape gradients.
//!
//! Rebuilds the same graph with each trainable coordinate perturbed by
//! `±eps` and compares the two-sided slope against the analytic gradient.
//! `stop_gradient` outputs are pinned to the values of the unperturbed
//! build, so the slope measures the function the tape actually
//! differentiates (frozen factors held fixed).

use crate::params::ParamStore;
use crate::tape::{NodeId, Tape, TapeError, TapeResult};

/// Builds a scalar loss on the given tape from the given parameters.
pub trait LossBuilder {
    fn build(&self, tape: &mut Tape, store: &ParamStore) -> TapeResult<NodeId>;
}

impl<F> LossBuilder for F
where
    F: Fn(&mut Tape, &ParamStore) -> TapeResult<NodeId>,
{
    fn build(&self, tape: &mut Tape, store: &ParamStore) -> TapeResult<NodeId> {
        self(tape, store)
    }
}

/// Max over all trainable coordinates of
/// `|analytic - central_difference| / max(|analytic|, 1e-8)`.
pub fn finite_difference_check(
    builder: &dyn LossBuilder,
    store: &ParamStore,
    eps: f64,
) -> TapeResult<f64> {
    assert!(eps > 0.0, "eps must be positive");
    let mut base_tape = Tape::new();
    let loss = builder.build(&mut base_tape, store)?;
    let base_value = base_tape.value(loss)[0];
    if !base_value.is_finite() {
        return Err(TapeError::NonFinite { what: format!("loss value {base_value}") });
    }
    let grads = base_tape.backward(loss)?;
    let frozen = base_tape.take_stop_grad_log();

    let mut work = store.clone();
    let mut max_rel = 0.0f64;
    let names: Vec<String> = store
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    for name in names {
        let n = work.get(&name).unwrap().tensor.numel();
        for i in 0..n {
            let original = work.get(&name).unwrap().tensor.data()[i];
            let eval = |store: &ParamStore, frozen: &[Vec<f64>]| -> TapeResult<f64> {
                let mut tape = Tape::with_frozen_stop_grads(frozen.to_vec());
                let loss = builder.build(&mut tape, store)?;
                Ok(tape.value(loss)[0])
            };
            work.get_mut(&name).unwrap().tensor.data_mut()[i] = original + eps;
            let plus = eval(&work, &frozen)?;
            work.get_mut(&name).unwrap().tensor.data_mut()[i] = original - eps;
            let minus = eval(&work, &frozen)?;
            work.get_mut(&name).unwrap().tensor.data_mut()[i] = original;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(TapeError::NonFinite {
                    what: format!("perturbed loss at {name}[{i}]"),
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads[&name].data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tensor;

    #[test]
    fn quadratic_is_exact_to_rounding() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(1.3));
        let builder = |tape: &mut Tape, store: &ParamStore| {
            let x = tape.param("x", store)?;
            let sq = tape.mul(x, x)?;
            let scaled = tape.scale(sq, 0.5);
            Ok(tape.add_scalar(scaled, 2.0))
        };
        let err = finite_difference_check(&builder, &store, 1e-4).unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn three_layer_mlp_matches_central_differences() {
        use crate::params::{kaiming_uniform, seeded_rng};
        let dims = [5usize, 7, 6, 4];
        let mut store = ParamStore::new();
        for l in 0..3 {
            let mut rng = seeded_rng(11, &format!("w{l}"));
            store.insert(
                &format!("w{l}"),
                kaiming_uniform(vec![dims[l], dims[l + 1]], dims[l], &mut rng),
            );
            store.insert(&format!("b{l}"), Tensor::zeros(vec![dims[l + 1]]));
        }
        let mut rng = seeded_rng(12, "input");
        let input = crate::params::uniform(vec![3, 5], -1.0, 1.0, &mut rng);
        let builder = move |tape: &mut Tape, store: &ParamStore| {
            let mut h = tape.constant(input.clone());
            for l in 0..3 {
                let w = tape.param(&format!("w{l}"), store)?;
                let b = tape.param(&format!("b{l}"), store)?;
                let z = tape.matmul(h, w)?;
                let z = tape.add(z, b)?;
                h = if l < 2 { tape.relu(z) } else { z };
            }
            Ok(tape.sum_all(h))
        };
        let err = finite_difference_check(&builder, &store, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn frozen_factor_held_fixed_by_oracle() {
        // f = stop_gradient(p) * p has analytic gradient p; the oracle must
        // agree because the frozen factor is pinned during perturbation.
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(1.7));
        let builder = |tape: &mut Tape, store: &ParamStore| {
            let p = tape.param("p", store)?;
            let frozen = tape.stop_gradient(p);
            tape.mul(frozen, p)
        };
        let err = finite_difference_check(&builder, &store, 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn every_primitive_matches_central_differences() {
        use crate::params::{seeded_rng, uniform};
        // Randomized inputs in [-2, 2], kept clear of kinks (abs/relu at 0)
        // and domain edges (ln, fractional powers need positive input).
        let mut rng = seeded_rng(71, "primitive-audit");
        let smooth = uniform(vec![3, 4], -2.0, 2.0, &mut rng);
        let positive = uniform(vec![3, 4], 0.1, 2.0, &mut rng);
        let mut kink_safe = uniform(vec![3, 4], -2.0, 2.0, &mut rng);
        for v in kink_safe.data_mut() {
            if v.abs() < 0.1 {
                *v += 0.2_f64.copysign(*v + 0.05);
            }
        }
        let weights = uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let other = uniform(vec![3, 4], -2.0, 2.0, &mut rng);
        let table = uniform(vec![5, 4], -2.0, 2.0, &mut rng);

        type BuildFn = Box<dyn Fn(&mut Tape, &ParamStore) -> crate::tape::TapeResult<crate::tape::NodeId>>;
        let weighted = |tape: &mut Tape, node: crate::tape::NodeId, w: &Tensor| {
            let wn = tape.constant(w.clone());
            let prod = tape.mul(node, wn)?;
            Ok(tape.sum_all(prod))
        };
        let w = weights.clone();
        let cases: Vec<(&str, Tensor, BuildFn)> = vec![
            ("sigmoid", smooth.clone(), {
                let w = w.clone();
                Box::new(move |t, s| { let x = t.param("x", s)?; let y = t.sigmoid(x); weighted(t, y, &w) })
            }),
            ("tanh", smooth.clone(), {
                let w = w.clone();
                Box::new(move |t, s| { let x = t.param("x", s)?; let y = t.tanh(x); weighted(t, y, &w) })
            }),
            ("sin", smooth.clone(), {
                let w = w.clone();
                Box::new(move |t, s| { let x = t.param("x", s)?; let y = t.sin(x); weighted(t, y, &w) })
            }),
            ("cos", smooth.clone(), {
                let w = w.clone();
                Box::new(move |t, s| { let x = t.param("x", s)?; let y = t.cos(x); weighted(t, y, &w) })
            }),
            ("exp", smooth.clone(), {
                let w = w.clone();
                Box::new(move |t, s| { let x = t.param("x", s)?; let y = t.exp(x); weighted(t, y, &w) })
            }),
            ("ln", positive.clone(), {
                let w = w.clone();
                Box::new(move |t, s| { let x = t.param("x", s)?; let y = t.ln(x)?; weighted(t, y, &w) })
            }),
            ("abs", kink_safe.clone(), {
                let w = w.clone();
                Box::new(move |t, s| { let x = t.param("x", s)?; let y = t.abs(x); weighted(t, y, &w) })
            }),
            ("relu", kink_safe.clone(), {
                let w = w.clone();
                Box::new(move |t, s| { let x = t.param("x", s)?; let y = t.relu(x); weighted(t, y, &w) })
            }),
            ("power-square", smooth.clone(), {
                let w = w.clone();
                Box::new(move |t, s| { let x = t.param("x", s)?; let y = t.power(x, 2.0); weighted(t, y, &w) })
            }),
            ("power-sqrt", positive.clone(), {
                let w = w.clone();
                Box::new(move |t, s| { let x = t.param("x", s)?; let y = t.power(x, 0.5); weighted(t, y, &w) })
            }),
            ("add", smooth.clone(), {
                let w = w.clone();
                let o = other.clone();
                Box::new(move |t, s| {
                    let x = t.param("x", s)?;
                    let c = t.constant(o.clone());
                    let y = t.add(x, c)?;
                    weighted(t, y, &w)
                })
            }),
            ("sub", smooth.clone(), {
                let w = w.clone();
                let o = other.clone();
                Box::new(move |t, s| {
                    let x = t.param("x", s)?;
                    let c = t.constant(o.clone());
                    let y = t.sub(c, x)?;
                    weighted(t, y, &w)
                })
            }),
            ("hadamard", smooth.clone(), {
                let w = w.clone();
                let o = other.clone();
                Box::new(move |t, s| {
                    let x = t.param("x", s)?;
                    let c = t.constant(o.clone());
                    let y = t.mul(x, c)?;
                    weighted(t, y, &w)
                })
            }),
            ("matmul", smooth.clone(), {
                let o = other.clone();
                Box::new(move |t, s| {
                    let x = t.param("x", s)?;
                    // x [3x4] . o^T-ish [4x3] via a constant reshaped tensor
                    let c = t.constant(Tensor::matrix(4, 3, o.data().to_vec()));
                    let y = t.matmul(x, c)?;
                    Ok(t.sum_all(y))
                })
            }),
            ("concat-slice", smooth.clone(), {
                let o = other.clone();
                Box::new(move |t, s| {
                    let x = t.param("x", s)?;
                    let c = t.constant(o.clone());
                    let cat = t.concat(&[x, c], 1)?;
                    let sl = t.slice_last(cat, 2, 4)?;
                    Ok(t.sum_all(sl))
                })
            }),
            ("softmax", smooth.clone(), {
                let w = w.clone();
                Box::new(move |t, s| {
                    let x = t.param("x", s)?;
                    let y = t.softmax(x, 1)?;
                    weighted(t, y, &w)
                })
            }),
            ("sum-axis", smooth.clone(), {
                Box::new(move |t, s| {
                    let x = t.param("x", s)?;
                    let y = t.sum_axis(x, 1)?;
                    let sq = t.mul(y, y)?;
                    Ok(t.mean_all(sq))
                })
            }),
            ("embed", table.clone(), {
                Box::new(move |t, s| {
                    let x = t.param("x", s)?;
                    let e = t.embed(x, &[4, 0, 2, 2])?;
                    let sq = t.mul(e, e)?;
                    Ok(t.sum_all(sq))
                })
            }),
        ];
        for (name, init, builder) in cases {
            let mut store = ParamStore::new();
            store.insert("x", init);
            let err = finite_difference_check(&builder, &store, 1e-5)
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(err <= 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(800.0));
        let builder = |tape: &mut Tape, store: &ParamStore| {
            let p = tape.param("p", store)?;
            Ok(tape.exp(p)) // overflows to +inf
        };
        assert!(matches!(
            finite_difference_check(&builder, &store, 1e-4),
            Err(TapeError::NonFinite { .. })
        ));
    }
}
