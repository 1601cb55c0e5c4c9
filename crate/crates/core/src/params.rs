//! Named parameter storage with persistent gradient accumulators.
//!
//! Parameters live outside any tape; a training step registers them on a
//! fresh tape, runs backward, and folds the resulting gradients back into
//! the store. Registration order is fixed by model construction, which keeps
//! initialization, optimizer traversal, and checkpoints deterministic.

use crate::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix,
    pub grad: Option<Matrix>,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, group: ParamGroup) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            grad: None,
            group,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Add `grad` into the accumulator for `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Matrix) {
        let entry = &mut self.entries[id.0];
        assert_eq!(entry.value.dim(), grad.dim(), "grad shape for {}", entry.name);
        match &mut entry.grad {
            Some(g) => *g += grad,
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Clone of all values, indexable by `ParamId`; the finite-difference
    /// harness perturbs these and evaluates via `Tape::with_values`.
    pub fn values_snapshot(&self) -> Vec<Matrix> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Add seeded Gaussian noise to every parameter. Gradient checks run at
    /// such generic points: fresh-initialization scales sit near layer-norm
    /// eps floors where finite differences lose accuracy, and zero biases
    /// are a measure-zero special case.
    pub fn jitter(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for e in &mut self.entries {
            for v in e.value.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += z * std;
            }
        }
    }
}

/// Deterministic parameter initializer: weights N(0, 0.02^2), biases zero,
/// layer-norm affine at identity. Draw order is construction order.
pub struct Init {
    rng: ChaCha20Rng,
    pub std: f64,
}

impl Init {
    pub fn new(rng: ChaCha20Rng) -> Self {
        Init { rng, std: 0.02 }
    }

    pub fn normal(&mut self, rows: usize, cols: usize) -> Matrix {
        let std = self.std;
        Matrix::from_shape_fn((rows, cols), |_| {
            let z: f64 = self.rng.sample(StandardNormal);
            z * std
        })
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::zeros((rows, cols))
    }

    pub fn ones(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::ones((rows, cols))
    }
}
