//! Dense row-major tensors of 64-bit floats.
//!
//! Every value flowing through the engine — images, embeddings, logits,
//! gradients — is a `Tensor`. Rank 0 (empty shape) denotes a scalar.
//! Allocation and drop feed a process-wide live-byte counter so training
//! runs can report a peak-memory estimate.

use std::sync::atomic::{AtomicUsize, Ordering};

use thiserror::Error;

static LIVE_BYTES: AtomicUsize = AtomicUsize::new(0);
static PEAK_BYTES: AtomicUsize = AtomicUsize::new(0);

fn track_alloc(bytes: usize) {
    let live = LIVE_BYTES.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK_BYTES.fetch_max(live, Ordering::Relaxed);
}

fn track_free(bytes: usize) {
    LIVE_BYTES.fetch_sub(bytes, Ordering::Relaxed);
}

/// Bytes of tensor payload currently alive in the process.
pub fn live_tensor_bytes() -> usize {
    LIVE_BYTES.load(Ordering::Relaxed)
}

/// High-water mark of live tensor bytes since the last reset.
pub fn peak_tensor_bytes() -> usize {
    PEAK_BYTES.load(Ordering::Relaxed)
}

/// Reset the high-water mark down to the current live count.
pub fn reset_peak_tensor_bytes() {
    PEAK_BYTES.store(LIVE_BYTES.load(Ordering::Relaxed), Ordering::Relaxed);
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements but {got} were provided")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape {shape:?} contains a zero extent")]
    ZeroExtent { shape: Vec<usize> },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward on an empty graph")]
    EmptyGraph,
    #[error("node id {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("variable `{0}` tracked twice on one graph")]
    DuplicateVariable(String),
    #[error("backward reached trainable leaf `{0}` but it was not passed to backward")]
    UnboundVariable(String),
    #[error("cross_entropy: target {target} at position {position} out of range for {classes} classes")]
    TargetOutOfRange {
        position: usize,
        target: usize,
        classes: usize,
    },
    #[error("cross_entropy: every position is ignored, mean undefined")]
    AllPositionsIgnored,
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("optimizer step {step} would exceed total_steps {total}")]
    StepBeyondSchedule { step: u64, total: u64 },
    #[error("invalid optimizer state: {0}")]
    InvalidOptimizer(String),
    #[error("finite differences: function evaluated non-finite at perturbed input")]
    NonFiniteEvaluation,
}

/// Dense row-major tensor. Shape extents are strictly positive; data length
/// equals the shape product; elements are finite on (checked) construction.
#[derive(Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Checked constructor: validates extent positivity, length, finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroExtent { shape });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { index, value });
        }
        Ok(Self::from_parts(shape, data))
    }

    /// Internal constructor for op outputs; length must already match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        track_alloc(data.len() * 8);
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Self::from_parts(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Self::from_parts(shape, vec![value; n])
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }

    /// Fresh tensor of N(0, std^2) draws from the given generator.
    pub fn randn<R: rand::Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let n: usize = shape.iter().product();
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self::from_parts(shape, data)
    }

    /// Exact byte-level equality of shape and payload.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute element difference; infinity on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Self::from_parts(self.shape.clone(), self.data.clone())
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        track_free(self.data.len() * 8);
    }
}

/// A named value with a gradient slot. Trainable variables receive gradient
/// accumulation from `Graph::backward` and updates from `sgd_step`;
/// non-trainable ones are never written to by either.
#[derive(Debug, Clone)]
pub struct Variable {
    name: String,
    value: Tensor,
    grad: Tensor,
    trainable: bool,
}

impl Variable {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Variable {
            name: name.into(),
            value,
            grad,
            trainable,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Replace the value in place, keeping the gradient slot shape in sync.
    pub fn set_value(&mut self, value: Tensor) {
        assert_eq!(value.shape(), self.grad.shape(), "variable shape change");
        self.value = value;
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = 0.0;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.grad.numel());
        for (g, d) in self.grad.data_mut().iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub(crate) fn apply_update(&mut self, f: impl Fn(f64, f64) -> f64) {
        let grads: Vec<f64> = self.grad.data().to_vec();
        for (v, g) in self.value.data_mut().iter_mut().zip(grads) {
            *v = f(*v, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_shape_product() {
        let err = Tensor::new(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { .. }));
    }

    #[test]
    fn new_rejects_zero_extent() {
        let err = Tensor::new(vec![2, 0], vec![]).unwrap_err();
        assert!(matches!(err, TensorError::ZeroExtent { .. }));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { index: 1, .. }));
    }

    #[test]
    fn scalar_has_rank_zero() {
        let t = Tensor::scalar(3.5);
        assert_eq!(t.rank(), 0);
        assert_eq!(t.numel(), 1);
        assert_eq!(t.item(), 3.5);
    }

    #[test]
    fn live_bytes_track_alloc_and_drop() {
        let before = live_tensor_bytes();
        let t = Tensor::zeros(vec![4, 4]);
        assert!(live_tensor_bytes() >= before + 128);
        drop(t);
        // Other test threads may allocate concurrently; only our delta is exact.
        assert!(live_tensor_bytes() >= before.saturating_sub(128));
    }

    #[test]
    fn variable_grad_matches_value_shape() {
        let v = Variable::new("w", Tensor::zeros(vec![3, 2]), true);
        assert_eq!(v.grad().shape(), v.value().shape());
        assert!(v.grad().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn randn_is_seeded_deterministic() {
        use rand::SeedableRng;
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let ta = Tensor::randn(vec![8], 0.5, &mut a);
        let tb = Tensor::randn(vec![8], 0.5, &mut b);
        assert!(ta.bit_eq(&tb));
    }
}
