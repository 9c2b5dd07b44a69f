//! Named parameter storage, seeded initialization, and the Adam optimizer.
//!
//! Parameters live outside any tape in a [`ParamStore`] keyed by string
//! paths (`"expert.pub0.l1.w"`). Iteration order is the sorted key order,
//! which makes parameter enumeration deterministic across runs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::tape::{GradientMap, Tensor};

/// One stored parameter. Non-trainable entries are skipped by optimizers
/// and receive no gradient.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Deterministic name-to-tensor parameter map.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.insert_entry(name, ParamEntry { tensor, trainable: true });
    }

    pub fn insert_frozen(&mut self, name: &str, tensor: Tensor) {
        self.insert_entry(name, ParamEntry { tensor, trainable: false });
    }

    fn insert_entry(&mut self, name: &str, entry: ParamEntry) {
        let prev = self.entries.insert(name.to_string(), entry);
        assert!(prev.is_none(), "parameter `{name}` defined twice");
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorted iteration over all entries.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    /// Total number of scalar coordinates across trainable parameters.
    pub fn trainable_len(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }
}

/// Stream cipher RNG derived from a master seed and a parameter name, so
/// initialization does not depend on the order parameters are created in.
pub fn seeded_rng(master_seed: u64, name: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    ChaCha20Rng::from_seed(seed)
}

/// Seeded Fisher-Yates permutation of `0..n`, keyed like [`seeded_rng`].
pub fn shuffled_indices(n: usize, master_seed: u64, name: &str) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(master_seed, name);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Kaiming-style uniform init over `(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn kaiming_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha20Rng) -> Tensor {
    let limit = (6.0 / fan_in.max(1) as f64).sqrt();
    uniform(shape, -limit, limit, rng)
}

pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha20Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    Tensor::new(shape, data)
}

/// Adam with bias-corrected first and second moments, keyed by parameter
/// name so state survives across steps.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Applies one update from a gradient map. Parameters without a
    /// gradient entry and non-trainable parameters are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &GradientMap) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, entry) in store.iter_mut() {
            if !entry.trainable {
                continue;
            }
            let Some(grad) = grads.get(name) else { continue };
            let n = entry.tensor.numel();
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; n]);
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; n]);
            let data = entry.tensor.data_mut();
            for i in 0..n {
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}
