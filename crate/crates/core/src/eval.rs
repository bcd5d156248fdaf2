//! Segmentation metrics at patch resolution, the training-efficiency
//! harness, and learnt-weight analysis.

use thiserror::Error;

use crate::data::{majority_downsample, ClassRole, Dataset};
use crate::model::{FrozenModel, ModelError};
use crate::prompts::{train, Method, SemanticPromptSet, TrainConfig, TrainError};
use crate::tensor::{self, Tensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction and ground truth differ in length: {pred} vs {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("every class is absent from both prediction and ground truth")]
    AllClassesAbsent,
    #[error("evaluation dataset is empty")]
    EmptyDataset,
    #[error("timing needs steps > warmup, got steps={steps} warmup={warmup}")]
    StepsNotAboveWarmup { steps: u64, warmup: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// K x K counts, rows indexed by ground truth, columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Elementwise merge; shard evaluation reduces with this.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Accumulate pixel counts into a fresh matrix.
pub fn confusion(pred: &[usize], gt: &[usize], k: usize) -> Result<ConfusionMatrix, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(k);
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= k {
            return Err(EvalError::LabelOutOfRange { label: p, classes: k });
        }
        if g >= k {
            return Err(EvalError::LabelOutOfRange { label: g, classes: k });
        }
        cm.counts[g * k + p] += 1;
    }
    Ok(cm)
}

/// Per-class IoU and their mean. Classes absent from both prediction and
/// ground truth are excluded from the mean; their slot is `None`.
pub fn miou(cm: &ConfusionMatrix) -> Result<(Vec<Option<f64>>, f64), EvalError> {
    let k = cm.k;
    let mut per_class = Vec::with_capacity(k);
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..k {
        let tp = cm.count(c, c);
        let fp: u64 = (0..k).filter(|&g| g != c).map(|g| cm.count(g, c)).sum();
        let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.count(c, p)).sum();
        let denom = tp + fp + fn_;
        if denom == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / denom as f64;
            per_class.push(Some(iou));
            sum += iou;
            present += 1;
        }
    }
    if present == 0 {
        return Err(EvalError::AllClassesAbsent);
    }
    Ok((per_class, sum / present as f64))
}

/// Argmax along each row, ties resolved toward the lowest class index.
fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = logits.row(r);
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = c;
            }
        }
        let _ = cols;
        out.push(best);
    }
    out
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub confusion: ConfusionMatrix,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

/// Run the frozen model with the given prompts over a dataset: argmax of the
/// semantic read-out per patch against majority-downsampled labels.
/// `threads` > 1 shards images; matrices merge in index order either way.
pub fn evaluate(
    model: &FrozenModel,
    z_spatial: &Tensor,
    z_text: &Tensor,
    dataset: &Dataset,
    threads: usize,
) -> Result<EvalOutcome, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let k = dataset.num_classes();
    let cfg = model.config();
    let size = cfg.image_size;
    let patch = cfg.patch_size;

    let eval_one = |sample: &crate::data::Sample| -> Result<ConfusionMatrix, EvalError> {
        let z_img = model.encode_image(&sample.image)?;
        let pred = model.decode(&z_img, z_spatial, z_text)?;
        let labels = argmax_rows(&pred.semantic_logits);
        let gt = majority_downsample(&sample.labels, size, patch);
        confusion(&labels, &gt, k)
    };

    let threads = threads.max(1).min(dataset.len());
    let mut shards: Vec<ConfusionMatrix> = Vec::new();
    if threads == 1 {
        for s in &dataset.samples {
            shards.push(eval_one(s)?);
        }
    } else {
        let chunk = dataset.len().div_ceil(threads);
        let results: Vec<Result<Vec<ConfusionMatrix>, EvalError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = dataset
                .samples
                .chunks(chunk)
                .map(|block| scope.spawn(move || block.iter().map(eval_one).collect()))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for r in results {
            shards.extend(r?);
        }
    }

    let mut total = ConfusionMatrix::new(k);
    for s in &shards {
        total.merge(s);
    }
    let (per_class_iou, m) = miou(&total)?;
    Ok(EvalOutcome {
        confusion: total,
        per_class_iou,
        miou: m,
    })
}

/// Wall-time and memory profile of a training run, with the encoder
/// invocation counters that make the efficiency comparison auditable
/// independent of hardware noise.
#[derive(Debug, Clone)]
pub struct TimingStats {
    pub mean_step_ms: f64,
    pub std_step_ms: f64,
    pub peak_tensor_bytes: usize,
    pub text_encoder_invocations: u64,
    pub spatial_encoder_invocations: u64,
    pub measured_steps: u64,
}

/// Time `steps` optimization steps of a method, discarding `warmup` steps.
/// Peak memory is the live-tensor high-water mark over the run.
pub fn time_training(
    method: Method,
    model: &FrozenModel,
    fewshot: &Dataset,
    vocab: &crate::data::Vocab,
    cfg: &TrainConfig,
    steps: u64,
    warmup: u64,
    seed: u64,
) -> Result<TimingStats, EvalError> {
    if steps <= warmup {
        return Err(EvalError::StepsNotAboveWarmup { steps, warmup });
    }
    let mut run_cfg = cfg.clone();
    run_cfg.total_steps = steps;
    tensor::reset_peak_tensor_bytes();
    let live_before = tensor::live_tensor_bytes();
    let outcome = train(method, model, fewshot, vocab, &run_cfg, seed)?;
    let peak = tensor::peak_tensor_bytes().saturating_sub(live_before);

    let timed: Vec<f64> = outcome
        .step_seconds
        .iter()
        .skip(warmup as usize)
        .map(|s| s * 1e3)
        .collect();
    let mean = timed.iter().sum::<f64>() / timed.len() as f64;
    let var = timed.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / timed.len() as f64;
    Ok(TimingStats {
        mean_step_ms: mean,
        std_step_ms: var.sqrt(),
        peak_tensor_bytes: peak,
        text_encoder_invocations: outcome.loop_text_invocations,
        spatial_encoder_invocations: outcome.loop_spatial_invocations,
        measured_steps: steps - warmup,
    })
}

/// Learnt-weight summary for the semantic branch. `w` weights the learnable
/// embedding; `1 - w` is the encoder-side weight on the default embedding.
/// Group means are `None` when the group is empty.
#[derive(Debug, Clone)]
pub struct WeightReport {
    pub per_class_w: Vec<f64>,
    pub mean_w_frequent: Option<f64>,
    pub mean_w_rare: Option<f64>,
    pub mean_encoder_side_frequent: Option<f64>,
    pub mean_encoder_side_rare: Option<f64>,
}

pub fn weight_report(set: &SemanticPromptSet, roles: &[ClassRole]) -> WeightReport {
    let w = set.weights();
    let mean_of = |role: ClassRole| -> Option<f64> {
        let vals: Vec<f64> = w
            .iter()
            .zip(roles)
            .filter(|(_, r)| **r == role)
            .map(|(v, _)| *v)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let freq = mean_of(ClassRole::Foreground);
    let rare = mean_of(ClassRole::Background);
    WeightReport {
        per_class_w: w,
        mean_w_frequent: freq,
        mean_w_rare: rare,
        mean_encoder_side_frequent: freq.map(|v| 1.0 - v),
        mean_encoder_side_rare: rare.map(|v| 1.0 - v),
    }
}
