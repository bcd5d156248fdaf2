//! Central finite differences as an independent gradient oracle, plus the
//! battery that checks every graph op and the end-to-end prompt-learning
//! loss against it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::tensor::{Tensor, TensorError, Variable};

/// Per-element central difference `(f(x+eps*e_i) - f(x-eps*e_i)) / (2*eps)`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor, TensorError>
where
    F: FnMut(&Tensor) -> Result<f64, TensorError>,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(TensorError::NonFiniteEvaluation);
        }
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

/// Relative error with a floored denominator, the comparison used across the
/// whole gradient-checking suite.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Outcome of one checked expression.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

const EPS: f64 = 1e-6;

/// Compare reverse-mode gradients of `scalar_fn` against central differences
/// for one input tensor, returning the max relative error over elements.
///
/// `build` maps a graph plus the tracked input node to a scalar root.
fn check_expression(
    name: &str,
    x0: Tensor,
    build: &dyn Fn(&mut Graph, NodeId) -> Result<NodeId, TensorError>,
    report: &mut GradCheckReport,
) -> Result<(), TensorError> {
    // analytic
    let mut var = Variable::new("x", x0.clone(), true);
    let mut g = Graph::new();
    let xn = g.var(&var)?;
    let root = build(&mut g, xn)?;
    g.backward(root, &mut [&mut var])?;
    let analytic = var.grad().clone();

    // numeric
    let numeric = finite_diff_grad(
        |probe| {
            let mut g = Graph::new();
            let xn = g.constant(probe.clone());
            let root = build(&mut g, xn)?;
            Ok(g.value(root).item())
        },
        &x0,
        EPS,
    )?;

    let max_rel = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max);
    report.entries.push(GradCheckEntry {
        name: name.to_string(),
        max_rel_error: max_rel,
    });
    Ok(())
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Random inputs in [-2, 2], nudged away from the relu kink where the
/// one-sided derivative would make finite differences meaningless.
fn rand_tensor_off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = rand_tensor(shape, rng, -2.0, 2.0);
    for v in t.data_mut() {
        if v.abs() < 5e-2 {
            *v += if *v >= 0.0 { 5e-2 } else { -5e-2 };
        }
    }
    t
}

/// Reduce any op output to a scalar through a fixed random weighting so the
/// check is sensitive to every output element.
fn weighted_mean(
    g: &mut Graph,
    y: NodeId,
    weights: &Tensor,
) -> Result<NodeId, TensorError> {
    let w = g.constant(weights.clone());
    let prod = g.mul(y, w)?;
    g.mean(prod)
}

/// Run the per-op battery: every graph op on seeded random inputs, reverse
/// mode versus central differences.
pub fn check_all_ops(seed: u64) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();

    let w34 = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let w43 = rand_tensor(&[4, 3], &mut rng, -1.0, 1.0);
    let w35 = rand_tensor(&[3, 5], &mut rng, -1.0, 1.0);
    let other34 = rand_tensor(&[3, 4], &mut rng, -2.0, 2.0);
    let x34 = rand_tensor(&[3, 4], &mut rng, -2.0, 2.0);
    let x34_relu = rand_tensor_off_kink(&[3, 4], &mut rng);
    let x34_pos = rand_tensor(&[3, 4], &mut rng, 0.2, 2.0);
    let v3 = rand_tensor(&[3], &mut rng, -2.0, 2.0);

    // matmul: check both the left and the right operand.
    {
        let b = rand_tensor(&[4, 5], &mut rng, -1.0, 1.0);
        let w = w35.clone();
        check_expression(
            "matmul_lhs",
            x34.clone(),
            &move |g, x| {
                let bn = g.constant(b.clone());
                let y = g.matmul(x, bn)?;
                weighted_mean(g, y, &w)
            },
            &mut report,
        )?;
        let a = w34.clone();
        let w = w35.clone();
        check_expression(
            "matmul_rhs",
            rand_tensor(&[4, 5], &mut rng, -2.0, 2.0),
            &move |g, x| {
                let an = g.constant(a.clone());
                let y = g.matmul(an, x)?;
                weighted_mean(g, y, &w)
            },
            &mut report,
        )?;
    }

    {
        let w = rand_tensor(&[4, 3], &mut rng, -1.0, 1.0);
        check_expression(
            "transpose",
            x34.clone(),
            &move |g, x| {
                let y = g.transpose(x)?;
                weighted_mean(g, y, &w)
            },
            &mut report,
        )?;
    }

    for (name, op) in [
        ("add", 0usize),
        ("sub", 1),
        ("mul", 2),
        ("div", 3),
    ] {
        let other = if name == "div" {
            // keep denominators away from zero
            let mut t = other34.clone();
            for v in t.data_mut() {
                *v = v.signum().max(0.0).mul_add(2.0, -1.0) * (v.abs() + 0.5);
            }
            t
        } else {
            other34.clone()
        };
        let w = w34.clone();
        check_expression(
            name,
            x34.clone(),
            &move |g, x| {
                let o = g.constant(other.clone());
                let y = match op {
                    0 => g.add(x, o)?,
                    1 => g.sub(x, o)?,
                    2 => g.mul(x, o)?,
                    _ => g.div(x, o)?,
                };
                weighted_mean(g, y, &w)
            },
            &mut report,
        )?;
        // gradient w.r.t. the second operand as well
        let base = x34.clone();
        let w = w34.clone();
        let other_init = if name == "div" {
            rand_tensor(&[3, 4], &mut rng, 0.5, 2.0)
        } else {
            rand_tensor(&[3, 4], &mut rng, -2.0, 2.0)
        };
        check_expression(
            &format!("{name}_rhs"),
            other_init,
            &move |g, x| {
                let b = g.constant(base.clone());
                let y = match op {
                    0 => g.add(b, x)?,
                    1 => g.sub(b, x)?,
                    2 => g.mul(b, x)?,
                    _ => g.div(b, x)?,
                };
                weighted_mean(g, y, &w)
            },
            &mut report,
        )?;
    }

    {
        let w = w34.clone();
        check_expression(
            "scalar_mul",
            x34.clone(),
            &move |g, x| {
                let y = g.scalar_mul(x, -1.7)?;
                weighted_mean(g, y, &w)
            },
            &mut report,
        )?;
    }

    for (name, which) in [("sigmoid", 0usize), ("sin", 1), ("cos", 2)] {
        let w = w34.clone();
        check_expression(
            name,
            x34.clone(),
            &move |g, x| {
                let y = match which {
                    0 => g.sigmoid(x)?,
                    1 => g.sin(x)?,
                    _ => g.cos(x)?,
                };
                weighted_mean(g, y, &w)
            },
            &mut report,
        )?;
    }

    {
        let w = w34.clone();
        check_expression(
            "relu",
            x34_relu,
            &move |g, x| {
                let y = g.relu(x)?;
                weighted_mean(g, y, &w)
            },
            &mut report,
        )?;
    }

    for axis in [0usize, 1] {
        let w = w34.clone();
        check_expression(
            &format!("softmax_axis{axis}"),
            x34.clone(),
            &move |g, x| {
                let y = g.softmax(x, axis)?;
                weighted_mean(g, y, &w)
            },
            &mut report,
        )?;
    }

    check_expression("mean", x34.clone(), &move |g, x| g.mean(x), &mut report)?;

    {
        let tail = rand_tensor(&[2, 4], &mut rng, -2.0, 2.0);
        let w = rand_tensor(&[5, 4], &mut rng, -1.0, 1.0);
        check_expression(
            "concat_axis0",
            x34.clone(),
            &move |g, x| {
                let t = g.constant(tail.clone());
                let y = g.concat(&[x, t], 0)?;
                weighted_mean(g, y, &w)
            },
            &mut report,
        )?;
        let side = rand_tensor(&[3, 2], &mut rng, -2.0, 2.0);
        let w = rand_tensor(&[3, 6], &mut rng, -1.0, 1.0);
        check_expression(
            "concat_axis1",
            x34.clone(),
            &move |g, x| {
                let t = g.constant(side.clone());
                let y = g.concat(&[x, t], 1)?;
                weighted_mean(g, y, &w)
            },
            &mut report,
        )?;
    }

    {
        let scales = v3.clone();
        let w = w34.clone();
        check_expression(
            "row_scale_matrix",
            x34.clone(),
            &move |g, x| {
                let s = g.constant(scales.clone());
                let y = g.row_scale(x, s)?;
                weighted_mean(g, y, &w)
            },
            &mut report,
        )?;
        let mat = x34.clone();
        let w = w34.clone();
        check_expression(
            "row_scale_scales",
            v3.clone(),
            &move |g, s| {
                let m = g.constant(mat.clone());
                let y = g.row_scale(m, s)?;
                weighted_mean(g, y, &w)
            },
            &mut report,
        )?;
    }

    {
        let w = w34.clone();
        check_expression(
            "row_normalize",
            x34_pos,
            &move |g, x| {
                let y = g.row_normalize(x)?;
                weighted_mean(g, y, &w)
            },
            &mut report,
        )?;
    }

    {
        let rows = vec![2usize, 0, 2, 1];
        let w = rand_tensor(&[4, 4], &mut rng, -1.0, 1.0);
        check_expression(
            "gather_rows",
            x34.clone(),
            &move |g, x| {
                let y = g.gather_rows(x, &rows)?;
                weighted_mean(g, y, &w)
            },
            &mut report,
        )?;
    }

    {
        let targets = vec![1usize, 3, 0];
        check_expression(
            "cross_entropy",
            x34.clone(),
            &move |g, x| g.cross_entropy(x, &targets, None),
            &mut report,
        )?;
        let targets = vec![1usize, 9, 0];
        check_expression(
            "cross_entropy_ignore",
            x34.clone(),
            &move |g, x| g.cross_entropy(x, &targets, Some(9)),
            &mut report,
        )?;
    }

    // a deeper composite expression stressing the chain rule across ops
    {
        let w43c = w43.clone();
        check_expression(
            "composite",
            x34,
            &move |g, x| {
                let b = g.constant(w43c.clone());
                let h = g.matmul(x, b)?; // 3x3
                let s = g.sigmoid(h)?;
                let sm = g.softmax(s, 1)?;
                let ht = g.transpose(h)?;
                let prod = g.mul(sm, ht)?;
                g.mean(prod)
            },
            &mut report,
        )?;
    }

    Ok(report)
}

/// End-to-end check: the full prompt-learning loss on a seeded small
/// instance (4 patches, 4 spatial prompts, 3 classes), differentiated with
/// respect to both learnable embedding sets and both weight-logit vectors.
pub fn check_ssprompt_loss(seed: u64) -> Result<GradCheckReport, TensorError> {
    use crate::model::{forward, FrozenModel, ModelConfig};
    use crate::prompts::fuse_on;

    let cfg = ModelConfig {
        image_size: 8,
        patch_size: 4, // 4 patches
        embed_dim: 8,
        num_spatial_prompts: 4,
        vocab_size: 38,
        token_dim: 12,
        num_classes_pretrain: 3,
        fourier_bands: 4,
    };
    let model = FrozenModel::init(cfg.clone(), seed).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = cfg.num_spatial_prompts;
    let k = 3usize;
    let d = cfg.embed_dim;

    let image = {
        let data: Vec<f64> = (0..cfg.image_size * cfg.image_size * 3)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        Tensor::from_parts(vec![cfg.image_size, cfg.image_size, 3], data)
    };
    let z_img = {
        let mut g = Graph::new();
        let nodes = model.bind(&mut g);
        let out = forward::encode_image(&mut g, &nodes, &cfg, &image).expect("encode");
        g.value(out).clone()
    };
    let targets: Vec<usize> = (0..cfg.num_patches())
        .map(|_| rng.random_range(0..k))
        .collect();

    let z_s_default = Tensor::randn(vec![n, d], 0.8, &mut rng);
    let z_t_default = Tensor::randn(vec![k, d], 0.8, &mut rng);
    let z_s_learn0 = Tensor::randn(vec![n, d], 0.8, &mut rng);
    let z_t_learn0 = Tensor::randn(vec![k, d], 0.8, &mut rng);
    let omega_s0 = Tensor::randn(vec![n], 0.7, &mut rng);
    let omega_t0 = Tensor::randn(vec![k], 0.7, &mut rng);

    // loss as a function of the four leaves
    let eval_loss = |z_s_learn: &Tensor,
                     omega_s: &Tensor,
                     z_t_learn: &Tensor,
                     omega_t: &Tensor|
     -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let nodes = model.bind(&mut g);
        let ds = g.constant(z_s_default.clone());
        let ls = g.constant(z_s_learn.clone());
        let os = g.constant(omega_s.clone());
        let zs = fuse_on(&mut g, ds, ls, Some(os))?;
        let dt = g.constant(z_t_default.clone());
        let lt = g.constant(z_t_learn.clone());
        let ot = g.constant(omega_t.clone());
        let zt = fuse_on(&mut g, dt, lt, Some(ot))?;
        let zi = g.constant(z_img.clone());
        let dec = forward::decode(&mut g, &nodes, zi, zs, zt)
            .map_err(|_| TensorError::NonFiniteEvaluation)?;
        let loss = g.cross_entropy(dec.semantic_logits, &targets, None)?;
        Ok(g.value(loss).item())
    };

    // analytic gradients in one backward pass
    let mut v_zs = Variable::new("zs", z_s_learn0.clone(), true);
    let mut v_os = Variable::new("os", omega_s0.clone(), true);
    let mut v_zt = Variable::new("zt", z_t_learn0.clone(), true);
    let mut v_ot = Variable::new("ot", omega_t0.clone(), true);
    {
        let mut g = Graph::new();
        let nodes = model.bind(&mut g);
        let ds = g.constant(z_s_default.clone());
        let ls = g.var(&v_zs)?;
        let os = g.var(&v_os)?;
        let zs = fuse_on(&mut g, ds, ls, Some(os))?;
        let dt = g.constant(z_t_default.clone());
        let lt = g.var(&v_zt)?;
        let ot = g.var(&v_ot)?;
        let zt = fuse_on(&mut g, dt, lt, Some(ot))?;
        let zi = g.constant(z_img.clone());
        let dec = forward::decode(&mut g, &nodes, zi, zs, zt)
            .map_err(|_| TensorError::NonFiniteEvaluation)?;
        let loss = g.cross_entropy(dec.semantic_logits, &targets, None)?;
        g.backward(loss, &mut [&mut v_zs, &mut v_os, &mut v_zt, &mut v_ot])?;
    }

    let mut report = GradCheckReport::default();
    let mut push = |name: &str, analytic: &Tensor, numeric: &Tensor| {
        let max_rel = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max);
        report.entries.push(GradCheckEntry {
            name: name.to_string(),
            max_rel_error: max_rel,
        });
    };

    let n_zs = finite_diff_grad(
        |probe| eval_loss(probe, &omega_s0, &z_t_learn0, &omega_t0),
        &z_s_learn0,
        EPS,
    )?;
    push("loss_d_spatial_embeddings", v_zs.grad(), &n_zs);
    let n_os = finite_diff_grad(
        |probe| eval_loss(&z_s_learn0, probe, &z_t_learn0, &omega_t0),
        &omega_s0,
        EPS,
    )?;
    push("loss_d_spatial_weights", v_os.grad(), &n_os);
    let n_zt = finite_diff_grad(
        |probe| eval_loss(&z_s_learn0, &omega_s0, probe, &omega_t0),
        &z_t_learn0,
        EPS,
    )?;
    push("loss_d_semantic_embeddings", v_zt.grad(), &n_zt);
    let n_ot = finite_diff_grad(
        |probe| eval_loss(&z_s_learn0, &omega_s0, &z_t_learn0, probe),
        &omega_t0,
        EPS,
    )?;
    push("loss_d_semantic_weights", v_ot.grad(), &n_ot);

    Ok(report)
}
