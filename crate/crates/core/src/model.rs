//! The frozen promptable-segmentation surrogate: a patch image encoder, a
//! random-Fourier spatial prompt encoder, a token-table text prompt encoder,
//! and a single-layer query-key mask decoder with mask-pooled class scoring.
//!
//! Pretraining optimizes every parameter except the Fourier basis with
//! pixelwise cross-entropy against default prompts, then freezes the model;
//! prompt learning only ever reads it.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Graph, NodeId};
use crate::checkpoint;
use crate::data::{majority_downsample, ClassRole, Dataset, Vocab};
use crate::optim::{sgd_step, OptimizerState};
use crate::tensor::{Tensor, TensorError, Variable};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("image must be {expected:?}, got {got:?}")]
    WrongImageShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("spatial point ({h}, {w}) outside the open image bounds (0, {size})")]
    PointOutOfBounds { h: f64, w: f64, size: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    UnknownToken { id: usize, vocab: usize },
    #[error("empty token sequence")]
    EmptyTokens,
    #[error("{what}: expected {expected:?}, got {got:?}")]
    BadDims {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("model is not frozen")]
    NotFrozen,
    #[error("model is already frozen")]
    AlreadyFrozen,
    #[error("pretraining corpus is empty")]
    EmptyCorpus,
    #[error("corpus has {got} classes but the model supports {max}")]
    TooManyClasses { got: usize, max: usize },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("loss became non-finite at step {step}")]
    NanLoss { step: u64 },
    #[error("invalid model config: {0}")]
    BadConfig(String),
}

/// Architecture hyperparameters. Paper-scale values (D=512, N=100) are valid;
/// the defaults are scaled down so the full suite runs in minutes on a CPU.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Image height and width in pixels (square images).
    pub image_size: usize,
    pub patch_size: usize,
    /// Embedding dimension D.
    pub embed_dim: usize,
    /// Number of spatial prompts N; must be a perfect square.
    pub num_spatial_prompts: usize,
    pub vocab_size: usize,
    pub token_dim: usize,
    pub num_classes_pretrain: usize,
    /// Gaussian Fourier bands; 2*fourier_bands must equal embed_dim.
    pub fourier_bands: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 32,
            num_spatial_prompts: 16,
            vocab_size: 38,
            token_dim: 256,
            num_classes_pretrain: 6,
            fourier_bands: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(ModelError::BadConfig(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(ModelError::BadConfig(format!(
                "embed_dim {} must be positive and even",
                self.embed_dim
            )));
        }
        let root = (self.num_spatial_prompts as f64).sqrt().round() as usize;
        if root * root != self.num_spatial_prompts || self.num_spatial_prompts == 0 {
            return Err(ModelError::BadConfig(format!(
                "num_spatial_prompts {} must be a perfect square",
                self.num_spatial_prompts
            )));
        }
        if 2 * self.fourier_bands != self.embed_dim {
            return Err(ModelError::BadConfig(format!(
                "2*fourier_bands ({}) must equal embed_dim ({})",
                2 * self.fourier_bands,
                self.embed_dim
            )));
        }
        if self.vocab_size == 0 || self.token_dim == 0 || self.num_classes_pretrain == 0 {
            return Err(ModelError::BadConfig(
                "vocab_size, token_dim, num_classes_pretrain must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Patches per image.
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// The uniform default prompt grid with half-cell offset.
pub fn default_grid(cfg: &ModelConfig) -> Vec<(f64, f64)> {
    let root = (cfg.num_spatial_prompts as f64).sqrt().round() as usize;
    let cell = cfg.image_size as f64 / root as f64;
    let mut pts = Vec::with_capacity(cfg.num_spatial_prompts);
    for i in 0..root {
        for j in 0..root {
            pts.push(((i as f64 + 0.5) * cell, (j as f64 + 0.5) * cell));
        }
    }
    pts
}

/// All learned parameters. The Fourier basis is drawn once and never trained.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub patch_projection: Tensor,
    pub mixer: Tensor,
    pub fourier_basis: Tensor,
    pub spatial_linear: Tensor,
    pub token_table: Tensor,
    pub text_w1: Tensor,
    pub text_w2: Tensor,
    pub decoder_query_proj: Tensor,
    pub decoder_key_proj: Tensor,
    pub decoder_value_proj: Tensor,
}

const PARAM_NAMES: [&str; 10] = [
    "model.patch_projection",
    "model.mixer",
    "model.fourier_basis",
    "model.spatial_linear",
    "model.token_table",
    "model.text_w1",
    "model.text_w2",
    "model.decoder_query_proj",
    "model.decoder_key_proj",
    "model.decoder_value_proj",
];

impl ModelParams {
    fn init(cfg: &ModelConfig, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let pd = cfg.patch_dim();
        let td = cfg.token_dim;
        ModelParams {
            patch_projection: Tensor::randn(vec![pd, d], 1.0 / (pd as f64).sqrt(), &mut rng),
            mixer: Tensor::randn(vec![d, d], 1.0 / (d as f64).sqrt(), &mut rng),
            fourier_basis: Tensor::randn(vec![2, cfg.fourier_bands], 1.0, &mut rng),
            spatial_linear: Tensor::randn(vec![d, d], 1.0 / (d as f64).sqrt(), &mut rng),
            token_table: Tensor::randn(vec![cfg.vocab_size, td], 1.0, &mut rng),
            text_w1: Tensor::randn(vec![td, d], 1.0 / (td as f64).sqrt(), &mut rng),
            text_w2: Tensor::randn(vec![d, d], 1.0 / (d as f64).sqrt(), &mut rng),
            decoder_query_proj: Tensor::randn(vec![d, d], 1.0 / (d as f64).sqrt(), &mut rng),
            decoder_key_proj: Tensor::randn(vec![d, d], 1.0 / (d as f64).sqrt(), &mut rng),
            decoder_value_proj: Tensor::randn(vec![d, d], 1.0 / (d as f64).sqrt(), &mut rng),
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor); 10] {
        [
            (PARAM_NAMES[0], &self.patch_projection),
            (PARAM_NAMES[1], &self.mixer),
            (PARAM_NAMES[2], &self.fourier_basis),
            (PARAM_NAMES[3], &self.spatial_linear),
            (PARAM_NAMES[4], &self.token_table),
            (PARAM_NAMES[5], &self.text_w1),
            (PARAM_NAMES[6], &self.text_w2),
            (PARAM_NAMES[7], &self.decoder_query_proj),
            (PARAM_NAMES[8], &self.decoder_key_proj),
            (PARAM_NAMES[9], &self.decoder_value_proj),
        ]
    }
}

/// Decoder output for one image. `mask_logits[n][p]` scores patch p under
/// prompt n, `class_scores[n][k]` scores class k for prompt n's pooled
/// feature, and `semantic_logits[p][k]` is the per-patch class map read out
/// through pixel-to-prompt attention.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mask_logits: Tensor,
    pub class_scores: Tensor,
    pub semantic_logits: Tensor,
}

/// The surrogate model. Constructed untrained (all trainable), it becomes
/// immutable once `pretrain` freezes it; every prompt-learning and
/// evaluation path only reads it.
#[derive(Debug)]
pub struct FrozenModel {
    cfg: ModelConfig,
    params: ModelParams,
    frozen: bool,
    text_invocations: AtomicU64,
    spatial_invocations: AtomicU64,
}

/// Node handles for the model parameters on some graph.
#[derive(Debug, Clone, Copy)]
pub struct ParamNodes {
    pub patch_projection: NodeId,
    pub mixer: NodeId,
    pub fourier_basis: NodeId,
    pub spatial_linear: NodeId,
    pub token_table: NodeId,
    pub text_w1: NodeId,
    pub text_w2: NodeId,
    pub decoder_query_proj: NodeId,
    pub decoder_key_proj: NodeId,
    pub decoder_value_proj: NodeId,
}

impl FrozenModel {
    /// Fresh untrained model with seeded Gaussian parameters. Not yet frozen.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<FrozenModel, ModelError> {
        cfg.validate()?;
        let params = ModelParams::init(&cfg, seed);
        Ok(FrozenModel {
            cfg,
            params,
            frozen: false,
            text_invocations: AtomicU64::new(0),
            spatial_invocations: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn text_encoder_invocations(&self) -> u64 {
        self.text_invocations.load(Ordering::Relaxed)
    }

    pub fn spatial_encoder_invocations(&self) -> u64 {
        self.spatial_invocations.load(Ordering::Relaxed)
    }

    pub fn reset_encoder_invocations(&self) {
        self.text_invocations.store(0, Ordering::Relaxed);
        self.spatial_invocations.store(0, Ordering::Relaxed);
    }

    /// Named parameter map, the canonical form for checkpoints and checksums.
    pub fn named_params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .fields()
            .iter()
            .map(|(n, t)| (n.to_string(), (*t).clone()))
            .collect()
    }

    /// Checksum of the canonical serialization of all frozen parameters.
    pub fn freeze_checksum(&self) -> Result<u64, ModelError> {
        if !self.frozen {
            return Err(ModelError::NotFrozen);
        }
        Ok(checkpoint::freeze_checksum_of(&self.named_params()))
    }

    /// Bind every parameter as a constant on `g`.
    pub fn bind(&self, g: &mut Graph) -> ParamNodes {
        let f = self.params.fields();
        ParamNodes {
            patch_projection: g.constant(f[0].1.clone()),
            mixer: g.constant(f[1].1.clone()),
            fourier_basis: g.constant(f[2].1.clone()),
            spatial_linear: g.constant(f[3].1.clone()),
            token_table: g.constant(f[4].1.clone()),
            text_w1: g.constant(f[5].1.clone()),
            text_w2: g.constant(f[6].1.clone()),
            decoder_query_proj: g.constant(f[7].1.clone()),
            decoder_key_proj: g.constant(f[8].1.clone()),
            decoder_value_proj: g.constant(f[9].1.clone()),
        }
    }

    // ── eager wrappers ─────────────────────────────────────────────────

    /// Encode an `[H, W, 3]` image to patch embeddings `[P, D]`.
    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g);
        let out = forward::encode_image(&mut g, &nodes, &self.cfg, image)?;
        Ok(g.value(out).clone())
    }

    /// Encode one spatial point (pixel units, open bounds) to `[1, D]`.
    pub fn encode_spatial(&self, point: (f64, f64)) -> Result<Tensor, ModelError> {
        self.spatial_invocations.fetch_add(1, Ordering::Relaxed);
        let mut g = Graph::new();
        let nodes = self.bind(&mut g);
        let out = forward::encode_spatial_points(&mut g, &nodes, &self.cfg, &[point])?;
        Ok(g.value(out).clone())
    }

    /// Encode a batch of spatial points to `[len, D]`; one invocation.
    pub fn encode_spatial_batch(&self, points: &[(f64, f64)]) -> Result<Tensor, ModelError> {
        self.spatial_invocations.fetch_add(1, Ordering::Relaxed);
        let mut g = Graph::new();
        let nodes = self.bind(&mut g);
        let out = forward::encode_spatial_points(&mut g, &nodes, &self.cfg, points)?;
        Ok(g.value(out).clone())
    }

    /// Graph-path batch spatial encode for coordinate optimization; the
    /// points are `[1, 2]` nodes in raw pixel units. One invocation.
    pub fn encode_spatial_nodes_on(
        &self,
        g: &mut Graph,
        nodes: &ParamNodes,
        points: &[NodeId],
    ) -> Result<NodeId, ModelError> {
        self.spatial_invocations.fetch_add(1, Ordering::Relaxed);
        let rows = points
            .iter()
            .map(|&p| forward::encode_spatial_node(g, nodes, &self.cfg, p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(g.concat(&rows, 0)?)
    }

    /// Encode one token sequence (optionally with prepended context vectors,
    /// `[M, token_dim]`) to `[1, D]`.
    pub fn encode_text(
        &self,
        tokens: &[usize],
        context: Option<&Tensor>,
    ) -> Result<Tensor, ModelError> {
        self.text_invocations.fetch_add(1, Ordering::Relaxed);
        let mut g = Graph::new();
        let nodes = self.bind(&mut g);
        let ctx = context.map(|c| g.constant(c.clone()));
        let out = forward::encode_text_single(&mut g, &nodes, &self.cfg, tokens, ctx)?;
        Ok(g.value(out).clone())
    }

    /// Encode several sequences in one pass to `[len, D]`; one invocation.
    pub fn encode_text_batch(
        &self,
        sequences: &[Vec<usize>],
        context: Option<&Tensor>,
    ) -> Result<Tensor, ModelError> {
        self.text_invocations.fetch_add(1, Ordering::Relaxed);
        let mut g = Graph::new();
        let nodes = self.bind(&mut g);
        let ctx = context.map(|c| g.constant(c.clone()));
        let out = forward::encode_text_batch(&mut g, &nodes, &self.cfg, sequences, ctx)?;
        Ok(g.value(out).clone())
    }

    /// Graph-path batch text encode; `context` is a tracked node when the
    /// context tokens are being optimized. One invocation.
    pub fn encode_text_batch_on(
        &self,
        g: &mut Graph,
        nodes: &ParamNodes,
        sequences: &[Vec<usize>],
        context: Option<NodeId>,
    ) -> Result<NodeId, ModelError> {
        self.text_invocations.fetch_add(1, Ordering::Relaxed);
        forward::encode_text_batch(g, nodes, &self.cfg, sequences, context)
    }

    /// Full decode of prepared embeddings.
    pub fn decode(
        &self,
        z_img: &Tensor,
        z_spatial: &Tensor,
        z_text: &Tensor,
    ) -> Result<Prediction, ModelError> {
        let expected = vec![self.cfg.num_patches(), self.cfg.embed_dim];
        if z_img.shape() != expected.as_slice() {
            return Err(ModelError::BadDims {
                what: "decode z_img",
                expected,
                got: z_img.shape().to_vec(),
            });
        }
        let mut g = Graph::new();
        let nodes = self.bind(&mut g);
        let zi = g.constant(z_img.clone());
        let zs = g.constant(z_spatial.clone());
        let zt = g.constant(z_text.clone());
        let out = forward::decode(&mut g, &nodes, zi, zs, zt)?;
        Ok(Prediction {
            mask_logits: g.value(out.mask_logits).clone(),
            class_scores: g.value(out.class_scores).clone(),
            semantic_logits: g.value(out.semantic_logits).clone(),
        })
    }
}

/// Graph-level forward passes, shared between pretraining (parameters
/// tracked as variables) and frozen inference (parameters as constants).
pub mod forward {
    use super::*;

    /// Flatten non-overlapping patches row-major: `[P, patch_size^2 * 3]`.
    pub fn patches_of(cfg: &ModelConfig, image: &Tensor) -> Result<Tensor, ModelError> {
        let (h, ps) = (cfg.image_size, cfg.patch_size);
        let expected = vec![h, h, 3];
        if image.shape() != expected.as_slice() {
            return Err(ModelError::WrongImageShape {
                expected,
                got: image.shape().to_vec(),
            });
        }
        let grid = h / ps;
        let pd = cfg.patch_dim();
        let src = image.data();
        let mut out = vec![0.0; grid * grid * pd];
        for gy in 0..grid {
            for gx in 0..grid {
                let patch = gy * grid + gx;
                let mut w = patch * pd;
                for dy in 0..ps {
                    for dx in 0..ps {
                        let p = ((gy * ps + dy) * h + gx * ps + dx) * 3;
                        out[w..w + 3].copy_from_slice(&src[p..p + 3]);
                        w += 3;
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![grid * grid, pd], out))
    }

    /// Project flattened patches, then mix with relu: `[P, D]`.
    pub fn encode_image(
        g: &mut Graph,
        p: &ParamNodes,
        cfg: &ModelConfig,
        image: &Tensor,
    ) -> Result<NodeId, ModelError> {
        let patches = g.constant(patches_of(cfg, image)?);
        let proj = g.matmul(patches, p.patch_projection)?;
        let mixed = g.matmul(proj, p.mixer)?;
        Ok(g.relu(mixed)?)
    }

    /// Random-Fourier features of a tracked `[1, 2]` raw-pixel point, through
    /// the spatial linear layer: `[1, D]`. Differentiable in the point.
    pub fn encode_spatial_node(
        g: &mut Graph,
        p: &ParamNodes,
        cfg: &ModelConfig,
        point: NodeId,
    ) -> Result<NodeId, ModelError> {
        let norm = g.scalar_mul(point, 1.0 / cfg.image_size as f64)?;
        let proj = g.matmul(norm, p.fourier_basis)?;
        let ang = g.scalar_mul(proj, std::f64::consts::TAU)?;
        let s = g.sin(ang)?;
        let c = g.cos(ang)?;
        let feats = g.concat(&[s, c], 1)?;
        Ok(g.matmul(feats, p.spatial_linear)?)
    }

    /// Encode fixed points (pixel units, open bounds) to `[len, D]`.
    pub fn encode_spatial_points(
        g: &mut Graph,
        p: &ParamNodes,
        cfg: &ModelConfig,
        points: &[(f64, f64)],
    ) -> Result<NodeId, ModelError> {
        if points.is_empty() {
            return Err(TensorError::EmptyInput { op: "encode_spatial" }.into());
        }
        let size = cfg.image_size as f64;
        for &(h, w) in points {
            if !(h > 0.0 && h < size && w > 0.0 && w < size) {
                return Err(ModelError::PointOutOfBounds {
                    h,
                    w,
                    size: cfg.image_size,
                });
            }
        }
        let coords: Vec<f64> = points.iter().flat_map(|&(h, w)| [h, w]).collect();
        let node = g.constant(Tensor::from_parts(vec![points.len(), 2], coords));
        // same path as the tracked variant, batched over rows
        let norm = g.scalar_mul(node, 1.0 / size)?;
        let proj = g.matmul(norm, p.fourier_basis)?;
        let ang = g.scalar_mul(proj, std::f64::consts::TAU)?;
        let s = g.sin(ang)?;
        let c = g.cos(ang)?;
        let feats = g.concat(&[s, c], 1)?;
        Ok(g.matmul(feats, p.spatial_linear)?)
    }

    /// Look up token rows, prepend context if given, mean-pool, apply the
    /// two-layer relu MLP: `[1, D]`.
    pub fn encode_text_single(
        g: &mut Graph,
        p: &ParamNodes,
        cfg: &ModelConfig,
        tokens: &[usize],
        context: Option<NodeId>,
    ) -> Result<NodeId, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyTokens);
        }
        for &id in tokens {
            if id >= cfg.vocab_size {
                return Err(ModelError::UnknownToken {
                    id,
                    vocab: cfg.vocab_size,
                });
            }
        }
        let rows = g.gather_rows(p.token_table, tokens)?;
        let stacked = match context {
            Some(ctx) => g.concat(&[ctx, rows], 0)?,
            None => rows,
        };
        let len = g.value(stacked).shape()[0];
        let pool = g.constant(Tensor::full(vec![1, len], 1.0 / len as f64));
        let pooled = g.matmul(pool, stacked)?;
        let h = g.matmul(pooled, p.text_w1)?;
        let h = g.relu(h)?;
        Ok(g.matmul(h, p.text_w2)?)
    }

    /// Stack several single-sequence encodings to `[len, D]`.
    pub fn encode_text_batch(
        g: &mut Graph,
        p: &ParamNodes,
        cfg: &ModelConfig,
        sequences: &[Vec<usize>],
        context: Option<NodeId>,
    ) -> Result<NodeId, ModelError> {
        if sequences.is_empty() {
            return Err(TensorError::EmptyInput { op: "encode_text" }.into());
        }
        let rows = sequences
            .iter()
            .map(|seq| encode_text_single(g, p, cfg, seq, context))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(g.concat(&rows, 0)?)
    }

    pub struct DecodeNodes {
        pub mask_logits: NodeId,
        pub class_scores: NodeId,
        pub semantic_logits: NodeId,
    }

    /// Query-key mask attention with mask-pooled class scoring and a
    /// pixel-to-prompt softmax readout. Differentiable in the prompts.
    pub fn decode(
        g: &mut Graph,
        p: &ParamNodes,
        z_img: NodeId,
        z_spatial: NodeId,
        z_text: NodeId,
    ) -> Result<DecodeNodes, ModelError> {
        let d_img = g.value(z_img).shape().to_vec();
        let d_spa = g.value(z_spatial).shape().to_vec();
        let d_txt = g.value(z_text).shape().to_vec();
        if d_img.len() != 2 || d_spa.len() != 2 || d_txt.len() != 2 {
            return Err(ModelError::BadDims {
                what: "decode inputs must be rank 2",
                expected: vec![2],
                got: vec![d_img.len(), d_spa.len(), d_txt.len()],
            });
        }
        let d = d_img[1];
        if d_spa[1] != d || d_txt[1] != d {
            return Err(ModelError::BadDims {
                what: "decode embedding dims",
                expected: vec![d],
                got: vec![d_spa[1], d_txt[1]],
            });
        }
        let scale = 1.0 / (d as f64).sqrt();

        let q = g.matmul(z_spatial, p.decoder_query_proj)?;
        let keys = g.matmul(z_img, p.decoder_key_proj)?;
        let keys_t = g.transpose(keys)?;
        let raw = g.matmul(q, keys_t)?;
        let mask_logits = g.scalar_mul(raw, scale)?; // [N, P]

        let gate = g.sigmoid(mask_logits)?;
        let attn = g.row_normalize(gate)?;
        let values = g.matmul(z_img, p.decoder_value_proj)?;
        let pooled = g.matmul(attn, values)?; // [N, D]

        let z_text_t = g.transpose(z_text)?;
        let raw_scores = g.matmul(pooled, z_text_t)?;
        let class_scores = g.scalar_mul(raw_scores, scale)?; // [N, K]

        let mask_t = g.transpose(mask_logits)?; // [P, N]
        let pixel_attn = g.softmax(mask_t, 1)?;
        let semantic_logits = g.matmul(pixel_attn, class_scores)?; // [P, K]

        Ok(DecodeNodes {
            mask_logits,
            class_scores,
            semantic_logits,
        })
    }
}

// ── pretraining ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub power: f64,
    /// Text-supervision imbalance: background classes keep their text
    /// gradient with probability 1/imbalance_ratio per step.
    pub imbalance_ratio: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            batch_size: 4,
            base_lr: 3e-2,
            weight_decay: 1e-4,
            power: 0.9,
            imbalance_ratio: 20.0,
            seed: 0,
        }
    }
}

fn params_from_vars(vars: &[Variable]) -> ModelParams {
    let get = |name: &str| -> Tensor {
        vars.iter()
            .find(|v| v.name() == name)
            .expect("pretrain variable set is fixed")
            .value()
            .clone()
    };
    ModelParams {
        patch_projection: get(PARAM_NAMES[0]),
        mixer: get(PARAM_NAMES[1]),
        fourier_basis: get(PARAM_NAMES[2]),
        spatial_linear: get(PARAM_NAMES[3]),
        token_table: get(PARAM_NAMES[4]),
        text_w1: get(PARAM_NAMES[5]),
        text_w2: get(PARAM_NAMES[6]),
        decoder_query_proj: get(PARAM_NAMES[7]),
        decoder_key_proj: get(PARAM_NAMES[8]),
        decoder_value_proj: get(PARAM_NAMES[9]),
    }
}

fn bind_vars(g: &mut Graph, vars: &[Variable]) -> Result<ParamNodes, TensorError> {
    let mut ids = Vec::with_capacity(vars.len());
    for v in vars {
        ids.push(g.var(v)?);
    }
    Ok(ParamNodes {
        patch_projection: ids[0],
        mixer: ids[1],
        fourier_basis: ids[2],
        spatial_linear: ids[3],
        token_table: ids[4],
        text_w1: ids[5],
        text_w2: ids[6],
        decoder_query_proj: ids[7],
        decoder_key_proj: ids[8],
        decoder_value_proj: ids[9],
    })
}

/// Train every parameter except the Fourier basis with pixelwise
/// cross-entropy on the semantic read-out under default prompts, then freeze.
/// Background classes' text supervision is dropped with probability
/// `1 - 1/imbalance_ratio` per step: their text embeddings are computed from
/// current values but inserted as constants, so no gradient reaches their
/// text pathway that step.
pub fn pretrain(
    model: FrozenModel,
    corpus: &Dataset,
    vocab: &Vocab,
    cfg: &PretrainConfig,
) -> Result<(FrozenModel, Vec<f64>), ModelError> {
    if model.frozen {
        return Err(ModelError::AlreadyFrozen);
    }
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let mcfg = model.cfg.clone();
    if corpus.num_classes() > mcfg.num_classes_pretrain {
        return Err(ModelError::TooManyClasses {
            got: corpus.num_classes(),
            max: mcfg.num_classes_pretrain,
        });
    }
    let class_tokens: Vec<Vec<usize>> = corpus
        .class_names
        .iter()
        .map(|n| vocab.tokenize(n))
        .collect::<Result<_, _>>()?;
    for seq in &class_tokens {
        for &id in seq {
            if id >= mcfg.vocab_size {
                return Err(ModelError::UnknownToken {
                    id,
                    vocab: mcfg.vocab_size,
                });
            }
        }
    }

    // trainable variables for everything but the Fourier basis
    let fields = model.params.fields();
    let mut vars: Vec<Variable> = fields
        .iter()
        .map(|(name, t)| Variable::new(*name, (*t).clone(), *name != PARAM_NAMES[2]))
        .collect();

    let grid = default_grid(&mcfg);
    let patch = mcfg.patch_size;
    let size = mcfg.image_size;
    let keep_prob = 1.0 / cfg.imbalance_ratio;
    let mut opt = OptimizerState::new(cfg.base_lr, cfg.weight_decay, cfg.power, cfg.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps as usize);

    for step in 0..cfg.steps {
        // fixed draw order: batch indices, flips, per-class keep decisions
        let idxs: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..corpus.len()))
            .collect();
        let flips: Vec<bool> = (0..cfg.batch_size).map(|_| rng.random_bool(0.5)).collect();
        let supervised: Vec<bool> = corpus
            .class_roles
            .iter()
            .map(|role| {
                // one draw per class regardless of role keeps RNG consumption
                // independent of the role designation
                let u: f64 = rng.random_range(0.0..1.0);
                match role {
                    ClassRole::Foreground => true,
                    ClassRole::Background => u < keep_prob,
                }
            })
            .collect();

        let mut g = Graph::new();
        let nodes = bind_vars(&mut g, &vars)?;

        // semantic prompts: supervised classes flow through the tracked text
        // pathway, dropped ones are detached constants from current values
        let mut text_rows = Vec::with_capacity(class_tokens.len());
        for (c, seq) in class_tokens.iter().enumerate() {
            if supervised[c] {
                text_rows.push(forward::encode_text_single(&mut g, &nodes, &mcfg, seq, None)?);
            } else {
                let mut eager = Graph::new();
                let snapshot = params_from_vars(&vars);
                let frozen_view = FrozenModel {
                    cfg: mcfg.clone(),
                    params: snapshot,
                    frozen: true,
                    text_invocations: AtomicU64::new(0),
                    spatial_invocations: AtomicU64::new(0),
                };
                let en = frozen_view.bind(&mut eager);
                let row = forward::encode_text_single(&mut eager, &en, &mcfg, seq, None)?;
                let value = eager.value(row).clone();
                text_rows.push(g.constant(value));
            }
        }
        let z_text = g.concat(&text_rows, 0)?;
        let z_spatial = forward::encode_spatial_points(&mut g, &nodes, &mcfg, &grid)?;

        let mut losses = Vec::with_capacity(cfg.batch_size);
        for (slot, &i) in idxs.iter().enumerate() {
            let sample = if flips[slot] {
                corpus.samples[i].flipped_horizontal(size)
            } else {
                corpus.samples[i].clone()
            };
            let z_img = forward::encode_image(&mut g, &nodes, &mcfg, &sample.image)?;
            let dec = forward::decode(&mut g, &nodes, z_img, z_spatial, z_text)?;
            let targets = majority_downsample(&sample.labels, size, patch);
            losses.push(g.cross_entropy(dec.semantic_logits, &targets, None)?);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l)?;
        }
        let loss = g.scalar_mul(total, 1.0 / losses.len() as f64)?;
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(ModelError::NanLoss { step });
        }
        trace.push(loss_value);

        let mut refs: Vec<&mut Variable> = vars.iter_mut().collect();
        g.backward(loss, &mut refs)?;
        sgd_step(&mut refs, &mut opt)?;
    }

    let params = params_from_vars(&vars);
    Ok((
        FrozenModel {
            cfg: mcfg,
            params,
            frozen: true,
            text_invocations: AtomicU64::new(0),
            spatial_invocations: AtomicU64::new(0),
        },
        trace,
    ))
}

// ── checkpoint io ───────────────────────────────────────────────────────

/// Write a frozen model (parameters plus config scalars) to a checkpoint.
pub fn save_model(model: &FrozenModel, path: &std::path::Path) -> Result<(), ModelError> {
    let mut entries = model.named_params();
    let c = &model.cfg;
    for (k, v) in [
        ("cfg.image_size", c.image_size),
        ("cfg.patch_size", c.patch_size),
        ("cfg.embed_dim", c.embed_dim),
        ("cfg.num_spatial_prompts", c.num_spatial_prompts),
        ("cfg.vocab_size", c.vocab_size),
        ("cfg.token_dim", c.token_dim),
        ("cfg.num_classes_pretrain", c.num_classes_pretrain),
        ("cfg.fourier_bands", c.fourier_bands),
    ] {
        entries.insert(k.to_string(), Tensor::scalar(v as f64));
    }
    checkpoint::store_to_file(&entries, path).map_err(|e| ModelError::BadConfig(e.to_string()))
}

/// Load a frozen model back from a checkpoint.
pub fn load_model(path: &std::path::Path) -> Result<FrozenModel, ModelError> {
    let entries =
        checkpoint::load_from_file(path).map_err(|e| ModelError::BadConfig(e.to_string()))?;
    let scalar = |k: &str| -> Result<usize, ModelError> {
        entries
            .get(k)
            .map(|t| t.item() as usize)
            .ok_or_else(|| ModelError::BadConfig(format!("checkpoint missing `{k}`")))
    };
    let cfg = ModelConfig {
        image_size: scalar("cfg.image_size")?,
        patch_size: scalar("cfg.patch_size")?,
        embed_dim: scalar("cfg.embed_dim")?,
        num_spatial_prompts: scalar("cfg.num_spatial_prompts")?,
        vocab_size: scalar("cfg.vocab_size")?,
        token_dim: scalar("cfg.token_dim")?,
        num_classes_pretrain: scalar("cfg.num_classes_pretrain")?,
        fourier_bands: scalar("cfg.fourier_bands")?,
    };
    cfg.validate()?;
    let get = |k: &str| -> Result<Tensor, ModelError> {
        entries
            .get(k)
            .cloned()
            .ok_or_else(|| ModelError::BadConfig(format!("checkpoint missing `{k}`")))
    };
    let params = ModelParams {
        patch_projection: get(PARAM_NAMES[0])?,
        mixer: get(PARAM_NAMES[1])?,
        fourier_basis: get(PARAM_NAMES[2])?,
        spatial_linear: get(PARAM_NAMES[3])?,
        token_table: get(PARAM_NAMES[4])?,
        text_w1: get(PARAM_NAMES[5])?,
        text_w2: get(PARAM_NAMES[6])?,
        decoder_query_proj: get(PARAM_NAMES[7])?,
        decoder_key_proj: get(PARAM_NAMES[8])?,
        decoder_value_proj: get(PARAM_NAMES[9])?,
    };
    Ok(FrozenModel {
        cfg,
        params,
        frozen: true,
        text_invocations: AtomicU64::new(0),
        spatial_invocations: AtomicU64::new(0),
    })
}
