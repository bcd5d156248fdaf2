//! Prompt learning against the frozen model.
//!
//! The embedding-space methods fuse default prompt embeddings with learnable
//! ones through per-row weights `w = sigmoid(omega)`, so the optimization
//! never touches a prompt encoder after initialization. Baselines: context
//! token learning (re-encodes text every step), vanilla coordinate-space
//! spatial learning (re-encodes points every step), and frozen defaults.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{sigmoid, Graph, NodeId};
use crate::data::{majority_downsample, DataError, Dataset, Vocab};
use crate::model::{default_grid, forward, FrozenModel, ModelConfig, ModelError};
use crate::optim::{sgd_step, OptimizerState};
use crate::tensor::{Tensor, TensorError, Variable};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("prompt learning requires a frozen model")]
    ModelNotFrozen,
    #[error("few-shot dataset is empty")]
    EmptyDataset,
    #[error("loss became non-finite at step {step}")]
    NanLoss { step: u64 },
    #[error("num_spatial_prompts {0} is not a perfect square")]
    NonSquarePrompts(usize),
    #[error("invalid train config: {0}")]
    BadConfig(String),
}

/// Whether fusion weights are optimized or pinned at one half.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightsMode {
    Learnable,
    FixedHalf,
}

/// Prompt-learning method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Frozen default prompts; zero optimization steps.
    Default,
    /// Learn spatial prompt embeddings, semantic prompts stay default.
    SpaPrompt,
    /// Learn semantic prompt embeddings, spatial prompts stay default.
    SemPrompt,
    /// Learn both branches jointly.
    SsPrompt,
    /// Learnable context tokens ahead of the class names; the text encoder
    /// runs every step.
    Coop,
    /// Vanilla spatial prompt learning: optimize 2D point coordinates; the
    /// spatial encoder runs every step.
    Vspl,
}

impl Method {
    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "default" => Some(Method::Default),
            "spaprompt" => Some(Method::SpaPrompt),
            "semprompt" => Some(Method::SemPrompt),
            "ssprompt" => Some(Method::SsPrompt),
            "coop" => Some(Method::Coop),
            "vspl" => Some(Method::Vspl),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Method::Default => "default",
            Method::SpaPrompt => "spaprompt",
            Method::SemPrompt => "semprompt",
            Method::SsPrompt => "ssprompt",
            Method::Coop => "coop",
            Method::Vspl => "vspl",
        }
    }

    fn learns_spatial_embeddings(&self) -> bool {
        matches!(self, Method::SpaPrompt | Method::SsPrompt)
    }

    fn learns_semantic_embeddings(&self) -> bool {
        matches!(self, Method::SemPrompt | Method::SsPrompt)
    }
}

/// Default grid prompts plus the learnable state for the spatial branch.
#[derive(Debug, Clone)]
pub struct SpatialPromptSet {
    pub default_points: Vec<(f64, f64)>,
    /// Cache of the encoded grid, computed once at init.
    pub z_default: Tensor,
    pub z_learn: Variable,
    pub weight_logits: Variable,
    pub weights_mode: WeightsMode,
}

/// Default class-name prompts plus the learnable state for the semantic
/// branch.
#[derive(Debug, Clone)]
pub struct SemanticPromptSet {
    pub class_tokens: Vec<Vec<usize>>,
    pub z_default: Tensor,
    pub z_learn: Variable,
    pub weight_logits: Variable,
    pub weights_mode: WeightsMode,
}

impl SpatialPromptSet {
    /// Current fused embeddings.
    pub fn fused(&self) -> Result<Tensor, TrainError> {
        fuse(
            &self.z_default,
            self.z_learn.value(),
            self.weight_logits.value(),
            self.weights_mode,
        )
    }

    /// Effective per-row weights `w`.
    pub fn weights(&self) -> Vec<f64> {
        effective_weights(self.weight_logits.value(), self.weights_mode)
    }
}

impl SemanticPromptSet {
    pub fn fused(&self) -> Result<Tensor, TrainError> {
        fuse(
            &self.z_default,
            self.z_learn.value(),
            self.weight_logits.value(),
            self.weights_mode,
        )
    }

    pub fn weights(&self) -> Vec<f64> {
        effective_weights(self.weight_logits.value(), self.weights_mode)
    }
}

fn effective_weights(logits: &Tensor, mode: WeightsMode) -> Vec<f64> {
    match mode {
        WeightsMode::FixedHalf => vec![0.5; logits.numel()],
        WeightsMode::Learnable => logits.data().iter().map(|&w| sigmoid(w)).collect(),
    }
}

/// The uniform default point grid; N must be a perfect square.
pub fn build_default_spatial(cfg: &ModelConfig) -> Result<Vec<(f64, f64)>, TrainError> {
    let n = cfg.num_spatial_prompts;
    let root = (n as f64).sqrt().round() as usize;
    if n == 0 || root * root != n {
        return Err(TrainError::NonSquarePrompts(n));
    }
    Ok(default_grid(cfg))
}

/// Graph-level fusion: row r is `w_r * learnable_r + (1 - w_r) * default_r`
/// with `w = sigmoid(omega)`, or exactly one half of each when `omega` is
/// absent (fixed-half mode).
pub fn fuse_on(
    g: &mut Graph,
    defaults: NodeId,
    learnable: NodeId,
    omega: Option<NodeId>,
) -> Result<NodeId, TensorError> {
    match omega {
        Some(omega) => {
            let w = g.sigmoid(omega)?;
            let neg = g.scalar_mul(omega, -1.0)?;
            let w_bar = g.sigmoid(neg)?; // 1 - sigmoid(x) == sigmoid(-x)
            let a = g.row_scale(learnable, w)?;
            let b = g.row_scale(defaults, w_bar)?;
            g.add(a, b)
        }
        None => {
            let sum = g.add(learnable, defaults)?;
            g.scalar_mul(sum, 0.5)
        }
    }
}

/// Eager fusion of plain tensors.
pub fn fuse(
    defaults: &Tensor,
    learnable: &Tensor,
    weight_logits: &Tensor,
    mode: WeightsMode,
) -> Result<Tensor, TrainError> {
    let mut g = Graph::new();
    let d = g.constant(defaults.clone());
    let l = g.constant(learnable.clone());
    let omega = match mode {
        WeightsMode::Learnable => Some(g.constant(weight_logits.clone())),
        WeightsMode::FixedHalf => None,
    };
    let out = fuse_on(&mut g, d, l, omega)?;
    Ok(g.value(out).clone())
}

/// Encode the default prompt caches once and initialize the learnable state
/// as an exact copy with zero weight logits, so the fused prompts start
/// bit-identical to the defaults.
pub fn init_prompt_sets(
    model: &FrozenModel,
    class_names: &[String],
    vocab: &Vocab,
    weights_mode: WeightsMode,
) -> Result<(SpatialPromptSet, SemanticPromptSet), TrainError> {
    if !model.is_frozen() {
        return Err(TrainError::ModelNotFrozen);
    }
    let cfg = model.config();
    let points = build_default_spatial(cfg)?;
    let z_default_spatial = model.encode_spatial_batch(&points)?;
    let class_tokens: Vec<Vec<usize>> = class_names
        .iter()
        .map(|n| vocab.tokenize(n))
        .collect::<Result<_, _>>()?;
    let z_default_text = model.encode_text_batch(&class_tokens, None)?;

    let spatial = SpatialPromptSet {
        default_points: points,
        z_learn: Variable::new("spa.z_learn", z_default_spatial.clone(), true),
        weight_logits: Variable::new(
            "spa.omega",
            Tensor::zeros(vec![cfg.num_spatial_prompts]),
            true,
        ),
        z_default: z_default_spatial,
        weights_mode,
    };
    let semantic = SemanticPromptSet {
        z_learn: Variable::new("sem.z_learn", z_default_text.clone(), true),
        weight_logits: Variable::new("sem.omega", Tensor::zeros(vec![class_names.len()]), true),
        class_tokens,
        z_default: z_default_text,
        weights_mode,
    };
    Ok((spatial, semantic))
}

/// Everything a training run produces: prompts ready for decode, the loss
/// trace, per-step wall times, and the method-specific learned state.
#[derive(Debug)]
pub struct TrainOutcome {
    pub z_spatial: Tensor,
    pub z_text: Tensor,
    pub loss_trace: Vec<f64>,
    pub step_seconds: Vec<f64>,
    pub spatial_set: Option<SpatialPromptSet>,
    pub semantic_set: Option<SemanticPromptSet>,
    /// Final context token vectors (context-token baseline only).
    pub context: Option<Tensor>,
    /// Final point coordinates (coordinate-space baseline only).
    pub vspl_points: Option<Vec<(f64, f64)>>,
    /// Prompt-encoder passes made inside the optimization loop, i.e. after
    /// initialization and before the final prompt export.
    pub loop_text_invocations: u64,
    pub loop_spatial_invocations: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub weights_mode: WeightsMode,
    /// Context token count M for the context-token baseline.
    pub context_tokens: usize,
    /// Coordinate updates live on the pixel scale, so their learning rate is
    /// the shared schedule times this factor.
    pub vspl_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 600,
            batch_size: 2,
            base_lr: 1e-3,
            weight_decay: 1e-4,
            power: 0.9,
            weights_mode: WeightsMode::Learnable,
            context_tokens: 4,
            vspl_lr_scale: 32.0,
        }
    }
}

/// Compare freeze checksums; true iff the frozen parameters are bit-identical
/// and match the model's current state.
pub fn freeze_audit(model: &FrozenModel, before: u64, after: u64) -> bool {
    before == after
        && model
            .freeze_checksum()
            .map(|current| current == after)
            .unwrap_or(false)
}

/// Run prompt learning. Only the method-owned variables train; the model is
/// read-only throughout. Returns the final fused embeddings and the loss
/// trace.
pub fn train(
    method: Method,
    model: &FrozenModel,
    fewshot: &Dataset,
    vocab: &Vocab,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    if !model.is_frozen() {
        return Err(TrainError::ModelNotFrozen);
    }
    if fewshot.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.batch_size == 0 || cfg.total_steps == 0 {
        return Err(TrainError::BadConfig(
            "batch_size and total_steps must be positive".into(),
        ));
    }
    let mcfg = model.config().clone();
    let (mut spatial, mut semantic) =
        init_prompt_sets(model, &fewshot.class_names, vocab, cfg.weights_mode)?;

    if method == Method::Default {
        return Ok(TrainOutcome {
            z_spatial: spatial.z_default.clone(),
            z_text: semantic.z_default.clone(),
            loss_trace: vec![],
            step_seconds: vec![],
            spatial_set: Some(spatial),
            semantic_set: Some(semantic),
            context: None,
            vspl_points: None,
            loop_text_invocations: 0,
            loop_spatial_invocations: 0,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // method-specific extra state
    let mut context: Option<Variable> = match method {
        Method::Coop => {
            let m = cfg.context_tokens.max(1);
            Some(Variable::new(
                "coop.context",
                Tensor::randn(vec![m, mcfg.token_dim], 0.02, &mut rng),
                true,
            ))
        }
        _ => None,
    };
    let mut vspl: Vec<Variable> = match method {
        Method::Vspl => spatial
            .default_points
            .iter()
            .enumerate()
            .map(|(i, &(h, w))| {
                Variable::new(
                    format!("vspl.pt{i}"),
                    Tensor::from_parts(vec![1, 2], vec![h, w]),
                    true,
                )
            })
            .collect(),
        _ => vec![],
    };

    // frozen-encoder outputs are cacheable: embed every sample once, in both
    // flip states, before the loop
    let size = mcfg.image_size;
    let mut z_images = Vec::with_capacity(fewshot.len());
    let mut targets = Vec::with_capacity(fewshot.len());
    for s in &fewshot.samples {
        let flipped = s.flipped_horizontal(size);
        z_images.push((model.encode_image(&s.image)?, model.encode_image(&flipped.image)?));
        targets.push((
            majority_downsample(&s.labels, size, mcfg.patch_size),
            majority_downsample(&flipped.labels, size, mcfg.patch_size),
        ));
    }

    let lr_scale = if method == Method::Vspl {
        cfg.vspl_lr_scale
    } else {
        1.0
    };
    // the zero-lr limit is the documented null update; the optimizer state
    // itself requires a positive base rate
    let mut opt = if cfg.base_lr > 0.0 {
        Some(OptimizerState::new(
            cfg.base_lr * lr_scale,
            cfg.weight_decay,
            cfg.power,
            cfg.total_steps,
        )?)
    } else {
        None
    };

    let mut loss_trace = Vec::with_capacity(cfg.total_steps as usize);
    let mut step_seconds = Vec::with_capacity(cfg.total_steps as usize);
    let text_before_loop = model.text_encoder_invocations();
    let spatial_before_loop = model.spatial_encoder_invocations();

    for step in 0..cfg.total_steps {
        let started = Instant::now();
        let idxs: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..fewshot.len()))
            .collect();
        let flips: Vec<bool> = (0..cfg.batch_size).map(|_| rng.random_bool(0.5)).collect();

        let mut g = Graph::new();
        let nodes = model.bind(&mut g);

        let z_spatial_node = if method.learns_spatial_embeddings() {
            let d = g.constant(spatial.z_default.clone());
            let l = g.var(&spatial.z_learn)?;
            let omega = match cfg.weights_mode {
                WeightsMode::Learnable => Some(g.var(&spatial.weight_logits)?),
                WeightsMode::FixedHalf => None,
            };
            fuse_on(&mut g, d, l, omega)?
        } else if method == Method::Vspl {
            let pts = vspl
                .iter()
                .map(|v| g.var(v))
                .collect::<Result<Vec<_>, _>>()?;
            model.encode_spatial_nodes_on(&mut g, &nodes, &pts)?
        } else {
            g.constant(spatial.z_default.clone())
        };

        let z_text_node = if method.learns_semantic_embeddings() {
            let d = g.constant(semantic.z_default.clone());
            let l = g.var(&semantic.z_learn)?;
            let omega = match cfg.weights_mode {
                WeightsMode::Learnable => Some(g.var(&semantic.weight_logits)?),
                WeightsMode::FixedHalf => None,
            };
            fuse_on(&mut g, d, l, omega)?
        } else if method == Method::Coop {
            let ctx = g.var(context.as_ref().unwrap())?;
            model.encode_text_batch_on(&mut g, &nodes, &semantic.class_tokens, Some(ctx))?
        } else {
            g.constant(semantic.z_default.clone())
        };

        let mut losses = Vec::with_capacity(cfg.batch_size);
        for (slot, &i) in idxs.iter().enumerate() {
            let (ref z_orig, ref z_flip) = z_images[i];
            let z_img = g.constant(if flips[slot] { z_flip.clone() } else { z_orig.clone() });
            let dec = forward::decode(&mut g, &nodes, z_img, z_spatial_node, z_text_node)?;
            let tgt = if flips[slot] { &targets[i].1 } else { &targets[i].0 };
            losses.push(g.cross_entropy(dec.semantic_logits, tgt, None)?);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l)?;
        }
        let loss = g.scalar_mul(total, 1.0 / losses.len() as f64)?;
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(TrainError::NanLoss { step });
        }
        loss_trace.push(loss_value);

        let mut refs: Vec<&mut Variable> = Vec::new();
        if method.learns_spatial_embeddings() {
            refs.push(&mut spatial.z_learn);
            if cfg.weights_mode == WeightsMode::Learnable {
                refs.push(&mut spatial.weight_logits);
            }
        }
        if method.learns_semantic_embeddings() {
            refs.push(&mut semantic.z_learn);
            if cfg.weights_mode == WeightsMode::Learnable {
                refs.push(&mut semantic.weight_logits);
            }
        }
        if let Some(ctx) = context.as_mut() {
            refs.push(ctx);
        }
        for v in vspl.iter_mut() {
            refs.push(v);
        }
        g.backward(loss, &mut refs)?;
        match opt.as_mut() {
            Some(opt) => sgd_step(&mut refs, opt)?,
            None => refs.iter_mut().for_each(|v| v.zero_grad()),
        }

        if method == Method::Vspl {
            let limit = (size - 1) as f64;
            for v in vspl.iter_mut() {
                let clamped: Vec<f64> = v
                    .value()
                    .data()
                    .iter()
                    .map(|&c| c.clamp(1.0, limit))
                    .collect();
                v.set_value(Tensor::from_parts(vec![1, 2], clamped));
            }
        }
        step_seconds.push(started.elapsed().as_secs_f64());
    }
    let loop_text_invocations = model.text_encoder_invocations() - text_before_loop;
    let loop_spatial_invocations = model.spatial_encoder_invocations() - spatial_before_loop;

    // final prompts for decode
    let z_spatial = if method.learns_spatial_embeddings() {
        spatial.fused()?
    } else if method == Method::Vspl {
        let pts: Vec<(f64, f64)> = vspl
            .iter()
            .map(|v| (v.value().data()[0], v.value().data()[1]))
            .collect();
        model.encode_spatial_batch(&pts)?
    } else {
        spatial.z_default.clone()
    };
    let z_text = if method.learns_semantic_embeddings() {
        semantic.fused()?
    } else if method == Method::Coop {
        model.encode_text_batch(
            &semantic.class_tokens,
            Some(context.as_ref().unwrap().value()),
        )?
    } else {
        semantic.z_default.clone()
    };

    let vspl_points = if method == Method::Vspl {
        Some(
            vspl.iter()
                .map(|v| (v.value().data()[0], v.value().data()[1]))
                .collect(),
        )
    } else {
        None
    };
    Ok(TrainOutcome {
        z_spatial,
        z_text,
        loss_trace,
        step_seconds,
        spatial_set: Some(spatial),
        semantic_set: Some(semantic),
        context: context.take().map(|c| c.value().clone()),
        vspl_points,
        loop_text_invocations,
        loop_spatial_invocations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_splits, toy, Condition, SplitSpec};
    use crate::model::{pretrain, PretrainConfig};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            num_spatial_prompts: 4,
            vocab_size: 38,
            token_dim: 12,
            num_classes_pretrain: 6,
            fourier_bands: 4,
        }
    }

    fn tiny_frozen(seed: u64) -> FrozenModel {
        let corpus = tiny_dataset(0, 8);
        let (m, _) = pretrain(
            FrozenModel::init(tiny_cfg(), seed).unwrap(),
            &corpus,
            &Vocab::toy(),
            &PretrainConfig {
                steps: 4,
                batch_size: 2,
                seed,
                ..PretrainConfig::default()
            },
        )
        .unwrap();
        m
    }

    fn tiny_dataset(seed_base: u64, size: usize) -> Dataset {
        let mut scene = toy::scene(0.0, 0.0, Condition::Clean);
        scene.shape_half_extent = (2.0, 4.0);
        make_splits(
            &[SplitSpec {
                name: "tiny".into(),
                scene,
                size,
                seed_base,
            }],
            8,
        )
        .unwrap()
        .remove(0)
    }

    #[test]
    fn grid_requires_square_count() {
        let mut cfg = tiny_cfg();
        cfg.num_spatial_prompts = 5;
        assert!(matches!(
            build_default_spatial(&cfg).unwrap_err(),
            TrainError::NonSquarePrompts(5)
        ));
    }

    #[test]
    fn fuse_limits_and_midpoint() {
        let defaults = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let learnable = Tensor::new(vec![1, 2], vec![2.0, 4.0]).unwrap();

        // omega -> -inf: all default
        let w = Tensor::new(vec![1], vec![-1000.0]).unwrap();
        let out = fuse(&defaults, &learnable, &w, WeightsMode::Learnable).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);

        // omega -> +inf: all learnable
        let w = Tensor::new(vec![1], vec![1000.0]).unwrap();
        let out = fuse(&defaults, &learnable, &w, WeightsMode::Learnable).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0]);

        // omega = 0: midpoint
        let w = Tensor::zeros(vec![1]);
        let out = fuse(&defaults, &learnable, &w, WeightsMode::Learnable).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn fuse_shape_mismatch_rejected() {
        let defaults = Tensor::zeros(vec![2, 3]);
        let learnable = Tensor::zeros(vec![3, 3]);
        let w = Tensor::zeros(vec![2]);
        assert!(fuse(&defaults, &learnable, &w, WeightsMode::Learnable).is_err());
    }

    #[test]
    fn fused_rows_lie_on_the_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let defaults = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let learnable = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let omega = Tensor::randn(vec![3], 1.5, &mut rng);
        let out = fuse(&defaults, &learnable, &omega, WeightsMode::Learnable).unwrap();
        for r in 0..3 {
            let w = sigmoid(omega.data()[r]);
            assert!(w > 0.0 && w < 1.0);
            for c in 0..4 {
                let expect = defaults.at2(r, c) + w * (learnable.at2(r, c) - defaults.at2(r, c));
                assert!((out.at2(r, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_is_affine_in_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let defaults = Tensor::randn(vec![2, 3], 1.0, &mut rng);
        let learnable = Tensor::randn(vec![2, 3], 1.0, &mut rng);
        let omega = Tensor::randn(vec![2], 1.0, &mut rng);
        let alpha = 3.25;
        let scale = |t: &Tensor| {
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().map(|v| v * alpha).collect(),
            )
            .unwrap()
        };
        let a = fuse(&defaults, &learnable, &omega, WeightsMode::Learnable).unwrap();
        let b = fuse(
            &scale(&defaults),
            &scale(&learnable),
            &omega,
            WeightsMode::Learnable,
        )
        .unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((y - alpha * x).abs() < 1e-9);
        }
    }

    #[test]
    fn init_fused_prompts_equal_defaults_bitwise() {
        let model = tiny_frozen(40);
        let names = tiny_dataset(100, 4).class_names;
        let (spa, sem) =
            init_prompt_sets(&model, &names, &Vocab::toy(), WeightsMode::Learnable).unwrap();
        assert!(spa.fused().unwrap().bit_eq(&spa.z_default));
        assert!(sem.fused().unwrap().bit_eq(&sem.z_default));
        let (spa, sem) =
            init_prompt_sets(&model, &names, &Vocab::toy(), WeightsMode::FixedHalf).unwrap();
        assert!(spa.fused().unwrap().bit_eq(&spa.z_default));
        assert!(sem.fused().unwrap().bit_eq(&sem.z_default));
    }

    #[test]
    fn init_predictions_match_default_prompt_predictions() {
        let model = tiny_frozen(41);
        let ds = tiny_dataset(200, 3);
        let (spa, sem) =
            init_prompt_sets(&model, &ds.class_names, &Vocab::toy(), WeightsMode::Learnable)
                .unwrap();
        for s in &ds.samples {
            let z = model.encode_image(&s.image).unwrap();
            let with_defaults = model.decode(&z, &spa.z_default, &sem.z_default).unwrap();
            let with_fused = model
                .decode(&z, &spa.fused().unwrap(), &sem.fused().unwrap())
                .unwrap();
            assert!(
                with_defaults
                    .semantic_logits
                    .max_abs_diff(&with_fused.semantic_logits)
                    <= 1e-12
            );
        }
    }

    #[test]
    fn untokenizable_class_name_rejected() {
        let model = tiny_frozen(42);
        let err = init_prompt_sets(
            &model,
            &["submarine".to_string()],
            &Vocab::toy(),
            WeightsMode::Learnable,
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::Data(DataError::UnknownWord(_))));
    }

    fn quick_cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            batch_size: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn default_method_returns_caches_unchanged() {
        let model = tiny_frozen(43);
        let ds = tiny_dataset(300, 4);
        let out = train(
            Method::Default,
            &model,
            &ds,
            &Vocab::toy(),
            &quick_cfg(10),
            1,
        )
        .unwrap();
        assert!(out.loss_trace.is_empty());
        let (spa, sem) =
            init_prompt_sets(&model, &ds.class_names, &Vocab::toy(), WeightsMode::Learnable)
                .unwrap();
        assert!(out.z_spatial.bit_eq(&spa.z_default));
        assert!(out.z_text.bit_eq(&sem.z_default));
    }

    #[test]
    fn zero_lr_leaves_state_at_init() {
        let model = tiny_frozen(44);
        let ds = tiny_dataset(400, 4);
        let mut cfg = quick_cfg(5);
        cfg.base_lr = 0.0;
        let out = train(Method::SsPrompt, &model, &ds, &Vocab::toy(), &cfg, 2).unwrap();
        let spa = out.spatial_set.unwrap();
        let sem = out.semantic_set.unwrap();
        assert!(spa.z_learn.value().bit_eq(&spa.z_default));
        assert!(sem.z_learn.value().bit_eq(&sem.z_default));
        assert!(spa.weight_logits.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(out.loss_trace.len(), 5);
    }

    #[test]
    fn ssprompt_never_touches_encoders_after_init() {
        let model = tiny_frozen(45);
        let ds = tiny_dataset(500, 4);
        // the z_img cache is built from the image encoder, not prompt encoders
        model.reset_encoder_invocations();
        let out = train(
            Method::SsPrompt,
            &model,
            &ds,
            &Vocab::toy(),
            &quick_cfg(6),
            3,
        )
        .unwrap();
        // init_prompt_sets inside train performs exactly one batched pass per
        // prompt encoder; nothing else afterwards
        assert_eq!(model.text_encoder_invocations(), 1);
        assert_eq!(model.spatial_encoder_invocations(), 1);
        assert_eq!(out.loop_text_invocations, 0);
        assert_eq!(out.loop_spatial_invocations, 0);
        assert_eq!(out.loss_trace.len(), 6);
    }

    #[test]
    fn coop_invokes_text_encoder_once_per_step() {
        let model = tiny_frozen(46);
        let ds = tiny_dataset(600, 4);
        model.reset_encoder_invocations();
        let steps = 7;
        let out = train(
            Method::Coop,
            &model,
            &ds,
            &Vocab::toy(),
            &quick_cfg(steps),
            4,
        )
        .unwrap();
        // one init pass plus one per step plus the final export encode
        assert_eq!(model.text_encoder_invocations(), 1 + steps + 1);
        assert_eq!(out.loop_text_invocations, steps);
        assert_eq!(out.loop_spatial_invocations, 0);
    }

    #[test]
    fn fixed_half_never_changes_omega() {
        let model = tiny_frozen(47);
        let ds = tiny_dataset(700, 4);
        let mut cfg = quick_cfg(8);
        cfg.weights_mode = WeightsMode::FixedHalf;
        cfg.base_lr = 0.05;
        let out = train(Method::SsPrompt, &model, &ds, &Vocab::toy(), &cfg, 5).unwrap();
        let spa = out.spatial_set.unwrap();
        let sem = out.semantic_set.unwrap();
        assert!(spa.weight_logits.value().data().iter().all(|&v| v == 0.0));
        assert!(sem.weight_logits.value().data().iter().all(|&v| v == 0.0));
        // embeddings did move
        assert!(spa.z_learn.value().max_abs_diff(&spa.z_default) > 0.0);
    }

    #[test]
    fn vspl_coordinates_stay_strictly_inside() {
        let model = tiny_frozen(48);
        let ds = tiny_dataset(800, 4);
        let mut cfg = quick_cfg(12);
        cfg.base_lr = 0.05; // aggressive on purpose
        cfg.vspl_lr_scale = 8.0;
        let out = train(Method::Vspl, &model, &ds, &Vocab::toy(), &cfg, 6).unwrap();
        let size = model.config().image_size as f64;
        for (h, w) in out.vspl_points.unwrap() {
            assert!(h > 0.0 && h < size && w > 0.0 && w < size);
        }
    }

    #[test]
    fn freeze_audit_detects_single_bit_flip() {
        let model = tiny_frozen(49);
        let before = model.freeze_checksum().unwrap();
        let ds = tiny_dataset(900, 4);
        let _ = train(
            Method::Coop,
            &model,
            &ds,
            &Vocab::toy(),
            &quick_cfg(5),
            7,
        )
        .unwrap();
        let after = model.freeze_checksum().unwrap();
        assert!(freeze_audit(&model, before, after));
    }

    #[test]
    fn training_loss_gradients_match_finite_differences() {
        // gradient of the full loss w.r.t. the fusion weights on a seeded
        // mini instance, reverse mode vs central differences
        let model = tiny_frozen(50);
        let ds = tiny_dataset(1000, 2);
        let (spa, sem) =
            init_prompt_sets(&model, &ds.class_names, &Vocab::toy(), WeightsMode::Learnable)
                .unwrap();
        let sample = &ds.samples[0];
        let z_img = model.encode_image(&sample.image).unwrap();
        let tgt = majority_downsample(&sample.labels, 8, 4);

        let loss_at = |omega_spa: &Tensor, omega_sem: &Tensor| -> f64 {
            let mut g = Graph::new();
            let nodes = model.bind(&mut g);
            let ds_n = g.constant(spa.z_default.clone());
            let dl_n = g.constant(spa.z_learn.value().clone());
            let ow = g.constant(omega_spa.clone());
            let zs = fuse_on(&mut g, ds_n, dl_n, Some(ow)).unwrap();
            let dt_n = g.constant(sem.z_default.clone());
            let tl_n = g.constant(sem.z_learn.value().clone());
            let ot = g.constant(omega_sem.clone());
            let zt = fuse_on(&mut g, dt_n, tl_n, Some(ot)).unwrap();
            let zi = g.constant(z_img.clone());
            let dec = forward::decode(&mut g, &nodes, zi, zs, zt).unwrap();
            let loss = g.cross_entropy(dec.semantic_logits, &tgt, None).unwrap();
            g.value(loss).item()
        };

        // offset omegas so sigmoid isn't at its symmetric point
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let omega_spa = Tensor::randn(vec![4], 0.7, &mut rng);
        let omega_sem = Tensor::randn(vec![ds.class_names.len()], 0.7, &mut rng);

        // analytic
        let mut spa_var = Variable::new("spa.omega", omega_spa.clone(), true);
        let mut sem_var = Variable::new("sem.omega", omega_sem.clone(), true);
        let mut g = Graph::new();
        let nodes = model.bind(&mut g);
        let ds_n = g.constant(spa.z_default.clone());
        let dl_n = g.constant(spa.z_learn.value().clone());
        let ow = g.var(&spa_var).unwrap();
        let zs = fuse_on(&mut g, ds_n, dl_n, Some(ow)).unwrap();
        let dt_n = g.constant(sem.z_default.clone());
        let tl_n = g.constant(sem.z_learn.value().clone());
        let ot = g.var(&sem_var).unwrap();
        let zt = fuse_on(&mut g, dt_n, tl_n, Some(ot)).unwrap();
        let zi = g.constant(z_img.clone());
        let dec = forward::decode(&mut g, &nodes, zi, zs, zt).unwrap();
        let loss = g.cross_entropy(dec.semantic_logits, &tgt, None).unwrap();
        g.backward(loss, &mut [&mut spa_var, &mut sem_var]).unwrap();

        let num_spa = crate::gradcheck::finite_diff_grad(
            |probe| Ok(loss_at(probe, &omega_sem)),
            &omega_spa,
            1e-6,
        )
        .unwrap();
        let num_sem = crate::gradcheck::finite_diff_grad(
            |probe| Ok(loss_at(&omega_spa, probe)),
            &omega_sem,
            1e-6,
        )
        .unwrap();
        let mut worst: f64 = 0.0;
        for (a, n) in spa_var.grad().data().iter().zip(num_spa.data()) {
            worst = worst.max(crate::gradcheck::relative_error(*a, *n));
        }
        for (a, n) in sem_var.grad().data().iter().zip(num_sem.data()) {
            worst = worst.max(crate::gradcheck::relative_error(*a, *n));
        }
        assert!(worst < 1e-4, "worst relative error {worst:.3e}");
    }

    #[test]
    fn ssprompt_training_reduces_loss_on_toy_run() {
        let model = tiny_frozen(51);
        let ds = tiny_dataset(1100, 8);
        let mut cfg = quick_cfg(60);
        cfg.base_lr = 0.05;
        cfg.batch_size = 2;
        let out = train(Method::SsPrompt, &model, &ds, &Vocab::toy(), &cfg, 9).unwrap();
        let first = out.loss_trace.first().copied().unwrap();
        let last = out.loss_trace.last().copied().unwrap();
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn train_rejects_unfrozen_model_and_empty_dataset() {
        let unfrozen = FrozenModel::init(tiny_cfg(), 52).unwrap();
        let ds = tiny_dataset(1200, 2);
        assert!(matches!(
            train(
                Method::SsPrompt,
                &unfrozen,
                &ds,
                &Vocab::toy(),
                &quick_cfg(2),
                0
            )
            .unwrap_err(),
            TrainError::ModelNotFrozen
        ));
        let model = tiny_frozen(53);
        let empty = Dataset {
            samples: vec![],
            ..ds.clone()
        };
        assert!(matches!(
            train(
                Method::SsPrompt,
                &model,
                &empty,
                &Vocab::toy(),
                &quick_cfg(2),
                0
            )
            .unwrap_err(),
            TrainError::EmptyDataset
        ));
    }

    #[test]
    fn z_default_cache_bytes_survive_training() {
        let model = tiny_frozen(54);
        let ds = tiny_dataset(1300, 4);
        let (spa_init, sem_init) =
            init_prompt_sets(&model, &ds.class_names, &Vocab::toy(), WeightsMode::Learnable)
                .unwrap();
        let mut cfg = quick_cfg(20);
        cfg.base_lr = 0.05;
        let out = train(Method::SsPrompt, &model, &ds, &Vocab::toy(), &cfg, 11).unwrap();
        assert!(out
            .spatial_set
            .unwrap()
            .z_default
            .bit_eq(&spa_init.z_default));
        assert!(out
            .semantic_set
            .unwrap()
            .z_default
            .bit_eq(&sem_init.z_default));
    }
}
