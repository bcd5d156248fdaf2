//! Command implementations behind the `ssprompt` binary: pretraining, prompt
//! learning, evaluation, the gradient-check battery, and the canned
//! experiment suites with CSV and SVG outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ssprompt_core::checkpoint::{self, CheckpointError};
use ssprompt_core::config::{ConfigError, RunConfig};
use ssprompt_core::data::{self, Condition, DataError, Vocab};
use ssprompt_core::eval::{evaluate, time_training, weight_report, EvalError};
use ssprompt_core::gradcheck;
use ssprompt_core::model::{load_model, pretrain, save_model, FrozenModel, ModelError};
use ssprompt_core::prompts::{
    init_prompt_sets, train, Method, TrainError, WeightsMode,
};
use ssprompt_core::tensor::Tensor;

pub mod csvio;
pub mod plan;
pub mod svg;

use csvio::{median, results_csv, summary_csv, ResultRow};
use plan::ExperimentPlan;

/// Exit codes: 2 missing file, 3 config/schema violation, 4 non-finite loss
/// abort, 1 anything else.
#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Model(ModelError),
    Train(TrainError),
    Eval(EvalError),
    Data(DataError),
    Checkpoint(CheckpointError),
    Io(std::io::Error),
    MissingFile(PathBuf),
    Message(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e}"),
            CliError::Model(e) => write!(f, "model error: {e}"),
            CliError::Train(e) => write!(f, "training error: {e}"),
            CliError::Eval(e) => write!(f, "evaluation error: {e}"),
            CliError::Data(e) => write!(f, "data error: {e}"),
            CliError::Checkpoint(e) => write!(f, "checkpoint error: {e}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
            CliError::MissingFile(p) => write!(f, "missing file: {}", p.display()),
            CliError::Message(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingFile(_) => 2,
            CliError::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 2,
            CliError::Config(_) => 3,
            CliError::Message(_) => 3,
            CliError::Model(ModelError::NanLoss { .. }) => 4,
            CliError::Train(TrainError::NanLoss { .. }) => 4,
            CliError::Eval(EvalError::Train(TrainError::NanLoss { .. })) => 4,
            _ => 1,
        }
    }
}

macro_rules! wrap {
    ($variant:ident, $ty:ty) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::$variant(e)
            }
        }
    };
}
wrap!(Config, ConfigError);
wrap!(Model, ModelError);
wrap!(Train, TrainError);
wrap!(Eval, EvalError);
wrap!(Data, DataError);
wrap!(Checkpoint, CheckpointError);
wrap!(Io, std::io::Error);

fn require_file(path: &Path) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    Ok(())
}

/// Evaluation worker threads: SSPROMPT_THREADS, else up to 8 cores.
pub fn eval_threads() -> usize {
    if let Ok(v) = std::env::var("SSPROMPT_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get().min(8))
        .unwrap_or(1)
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let cfg = match path {
        Some(p) => {
            require_file(p)?;
            RunConfig::from_file(p)?
        }
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_frozen(path: &Path) -> Result<FrozenModel, CliError> {
    require_file(path)?;
    Ok(load_model(path)?)
}

fn write_out(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn dataset_condition(cfg: &RunConfig, dataset: &str, condition: &str) -> Result<Condition, CliError> {
    match dataset {
        "source" => Ok(Condition::Clean),
        "downstream" => {
            if condition == "config" {
                Ok(cfg.data.condition)
            } else {
                Ok(Condition::parse(condition)?)
            }
        }
        other => Err(CliError::Message(format!(
            "unknown dataset `{other}` (expected source|downstream)"
        ))),
    }
}

// ── single-run commands ─────────────────────────────────────────────────

pub fn cmd_pretrain(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.pretrain.seed = s;
    }
    let (corpus, _) = cfg.build_pretrain()?;
    let model = FrozenModel::init(cfg.model.clone(), cfg.pretrain.seed)?;
    let (model, trace) = pretrain(model, &corpus, &Vocab::toy(), &cfg.pretrain)?;
    save_model(&model, out)?;
    cfg.write_file(&out.with_extension("cfg"))?;
    println!(
        "pretrained {} steps, loss {:.4} -> {:.4}, checksum {:#018x}",
        cfg.pretrain.steps,
        trace.first().copied().unwrap_or(f64::NAN),
        trace.last().copied().unwrap_or(f64::NAN),
        model.freeze_checksum()?
    );
    println!("wrote {}", out.display());
    Ok(())
}

const METHOD_IDS: [(Method, f64); 6] = [
    (Method::Default, 0.0),
    (Method::SpaPrompt, 1.0),
    (Method::SemPrompt, 2.0),
    (Method::SsPrompt, 3.0),
    (Method::Coop, 4.0),
    (Method::Vspl, 5.0),
];

fn method_id(m: Method) -> f64 {
    METHOD_IDS.iter().find(|(k, _)| *k == m).unwrap().1
}

fn method_from_id(id: f64) -> Option<Method> {
    METHOD_IDS
        .iter()
        .find(|(_, v)| *v == id)
        .map(|(m, _)| *m)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_learn(
    method_name: &str,
    model_path: &Path,
    dataset: &str,
    condition: &str,
    shots: usize,
    seed: u64,
    out: &Path,
    weights: &str,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    let method = Method::parse(method_name)
        .ok_or_else(|| CliError::Message(format!("unknown method `{method_name}`")))?;
    cfg.train.weights_mode = match weights {
        "learnable" => WeightsMode::Learnable,
        "fixed_half" => WeightsMode::FixedHalf,
        other => return Err(CliError::Message(format!("unknown weights mode `{other}`"))),
    };
    let model = load_frozen(model_path)?;
    let cond = dataset_condition(&cfg, dataset, condition)?;
    let (pool, _) = match dataset {
        "source" => cfg.build_pretrain()?,
        _ => cfg.build_downstream(cond)?,
    };
    let fewshot = if method == Method::Default {
        pool
    } else {
        data::few_shot_sample(&pool, shots, seed)?
    };
    let vocab = Vocab::toy();
    let outcome = train(method, &model, &fewshot, &vocab, &cfg.train, seed)?;

    let mut entries = BTreeMap::new();
    entries.insert("prompts.z_spatial".to_string(), outcome.z_spatial.clone());
    entries.insert("prompts.z_text".to_string(), outcome.z_text.clone());
    entries.insert("meta.method_id".to_string(), Tensor::scalar(method_id(method)));
    entries.insert("meta.shots".to_string(), Tensor::scalar(shots as f64));
    entries.insert("meta.seed".to_string(), Tensor::scalar(seed as f64));
    if let Some(set) = &outcome.spatial_set {
        entries.insert("spa.z_learn".to_string(), set.z_learn.value().clone());
        entries.insert("spa.omega".to_string(), set.weight_logits.value().clone());
    }
    if let Some(set) = &outcome.semantic_set {
        entries.insert("sem.z_learn".to_string(), set.z_learn.value().clone());
        entries.insert("sem.omega".to_string(), set.weight_logits.value().clone());
    }
    if let Some(ctx) = &outcome.context {
        entries.insert("coop.context".to_string(), ctx.clone());
    }
    if let Some(points) = &outcome.vspl_points {
        let flat: Vec<f64> = points.iter().flat_map(|&(h, w)| [h, w]).collect();
        entries.insert(
            "vspl.points".to_string(),
            Tensor::new(vec![points.len(), 2], flat).map_err(TrainError::from)?,
        );
    }
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    checkpoint::store_to_file(&entries, out)?;
    println!(
        "trained {} for {} steps, final loss {}; wrote {}",
        method.label(),
        outcome.loss_trace.len(),
        outcome
            .loss_trace
            .last()
            .map(|l| format!("{l:.4}"))
            .unwrap_or_else(|| "-".into()),
        out.display()
    );
    Ok(())
}

pub fn cmd_eval(
    model_path: &Path,
    prompts_path: Option<&Path>,
    dataset: &str,
    condition: &str,
    out: &Path,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let model = load_frozen(model_path)?;
    let cond = dataset_condition(&cfg, dataset, condition)?;
    let eval_split = match dataset {
        "source" => cfg.build_pretrain()?.1,
        _ => cfg.build_downstream(cond)?.1,
    };

    let (z_spatial, z_text, method, shots, seed) = match prompts_path {
        Some(p) => {
            require_file(p)?;
            let entries = checkpoint::load_from_file(p)?;
            let get = |k: &str| -> Result<Tensor, CliError> {
                entries
                    .get(k)
                    .cloned()
                    .ok_or_else(|| CliError::Checkpoint(CheckpointError::MissingEntry(k.into())))
            };
            let method = method_from_id(get("meta.method_id")?.item())
                .ok_or_else(|| CliError::Message("bad method id in prompts file".into()))?;
            (
                get("prompts.z_spatial")?,
                get("prompts.z_text")?,
                method.label().to_string(),
                get("meta.shots")?.item() as usize,
                get("meta.seed")?.item() as u64,
            )
        }
        None => {
            let (spa, sem) = init_prompt_sets(
                &model,
                &eval_split.class_names,
                &Vocab::toy(),
                WeightsMode::Learnable,
            )?;
            (spa.z_default, sem.z_default, "default".to_string(), 0, 0)
        }
    };

    let outcome = evaluate(&model, &z_spatial, &z_text, &eval_split, eval_threads())?;
    let row = ResultRow {
        method,
        dataset: dataset.to_string(),
        condition: cond.label(),
        shots,
        seed,
        miou: outcome.miou,
        per_class_ious: outcome.per_class_iou.clone(),
        step_time_ms: 0.0,
        mem_bytes: 0,
    };
    write_out(out, &results_csv(&[row]))?;
    println!("mIoU {:.4}; wrote {}", outcome.miou, out.display());
    Ok(())
}

/// Gate value used by the gradient-check command and the acceptance suite.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub struct GradcheckSummary {
    pub max_rel_error: f64,
    pub checks: usize,
    pub seconds: f64,
}

pub fn cmd_gradcheck(seed: u64) -> Result<GradcheckSummary, CliError> {
    let started = std::time::Instant::now();
    let ops = gradcheck::check_all_ops(seed).map_err(TrainError::from)?;
    let loss = gradcheck::check_ssprompt_loss(seed).map_err(TrainError::from)?;
    for entry in ops.entries.iter().chain(&loss.entries) {
        println!("  {:<28} {:.3e}", entry.name, entry.max_rel_error);
    }
    let max = ops.max_rel_error().max(loss.max_rel_error());
    let seconds = started.elapsed().as_secs_f64();
    let checks = ops.entries.len() + loss.entries.len();
    println!(
        "max relative error {max:.3e} over {checks} checks in {seconds:.2}s (tolerance {GRADCHECK_TOLERANCE:.0e})"
    );
    if max >= GRADCHECK_TOLERANCE {
        return Err(CliError::Message(format!(
            "gradient check failed: {max:.3e} >= {GRADCHECK_TOLERANCE:.0e}"
        )));
    }
    Ok(GradcheckSummary {
        max_rel_error: max,
        checks,
        seconds,
    })
}

// ── experiment suites ───────────────────────────────────────────────────

fn seeds_from(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base + i).collect()
}

fn rows_from_results(results: &[plan::CellResult], dataset: &str) -> Vec<ResultRow> {
    results
        .iter()
        .map(|r| ResultRow {
            method: r.cell.label.clone(),
            dataset: dataset.to_string(),
            condition: r.cell.condition.label(),
            shots: r.cell.shots,
            seed: r.cell.seed,
            miou: r.miou,
            per_class_ious: r.per_class.clone(),
            step_time_ms: 0.0,
            mem_bytes: 0,
        })
        .collect()
}

fn medians_by_label(results: &[plan::CellResult]) -> Vec<(String, f64)> {
    let mut order: Vec<String> = Vec::new();
    let mut by_label: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in results {
        if !by_label.contains_key(&r.cell.label) {
            order.push(r.cell.label.clone());
        }
        by_label.entry(r.cell.label.clone()).or_default().push(r.miou);
    }
    order
        .into_iter()
        .map(|label| {
            let m = median(&by_label[&label]);
            (label, m)
        })
        .collect()
}

fn write_audit(dir: &Path, before: u64, after: u64) -> Result<(), CliError> {
    let ok = before == after;
    write_out(
        &dir.join("audit.txt"),
        &format!("freeze_checksum_before={before:#018x}\nfreeze_checksum_after={after:#018x}\nok={ok}\n"),
    )?;
    if !ok {
        return Err(CliError::Message(
            "frozen model changed during the experiment run".into(),
        ));
    }
    Ok(())
}

fn run_suite(
    model_path: &Path,
    out_dir: &Path,
    config: Option<&Path>,
    cells: impl Fn(&RunConfig, &[u64]) -> Vec<plan::Cell>,
    seeds: &[u64],
    plots: bool,
) -> Result<(RunConfig, Vec<plan::CellResult>, FrozenModel), CliError> {
    let cfg = load_config(config)?;
    let model = load_frozen(model_path)?;
    let plan = ExperimentPlan {
        cells: cells(&cfg, seeds),
        out_dir: out_dir.to_path_buf(),
        plots,
    };
    plan.validate(&model, &cfg)?;
    let before = model.freeze_checksum()?;
    let results = plan.run(&model, &cfg, &Vocab::toy(), eval_threads())?;
    let after = model.freeze_checksum()?;
    cfg.write_file(&out_dir.join("config.cfg"))?;
    write_out(&out_dir.join("results.csv"), &results_csv(&rows_from_results(&results, "downstream")))?;
    write_audit(out_dir, before, after)?;
    Ok((cfg, results, model))
}

pub fn cmd_ablate(
    model_path: &Path,
    out_dir: &Path,
    config: Option<&Path>,
    seed: u64,
    seeds: usize,
    plots: bool,
) -> Result<(), CliError> {
    let seed_list = seeds_from(seed, seeds);
    let (_, results, _) = run_suite(
        model_path,
        out_dir,
        config,
        |cfg, s| plan::ablation_cells(cfg.data.condition, 16, s),
        &seed_list,
        plots,
    )?;
    let medians = medians_by_label(&results);
    write_out(
        &out_dir.join("summary.csv"),
        &summary_csv("method,median_miou", &medians),
    )?;
    if plots {
        write_out(
            &out_dir.join("ablate.svg"),
            &svg::bar_chart("median mIoU by ablation row", &medians),
        )?;
    }
    for (label, m) in &medians {
        println!("{label:>20}  median mIoU {m:.4}");
    }
    Ok(())
}

pub fn cmd_vspl(
    model_path: &Path,
    out_dir: &Path,
    config: Option<&Path>,
    seed: u64,
    seeds: usize,
    plots: bool,
) -> Result<(), CliError> {
    let seed_list = seeds_from(seed, seeds);
    let (_, results, _) = run_suite(
        model_path,
        out_dir,
        config,
        |cfg, s| plan::vspl_cells(cfg.data.condition, 16, s),
        &seed_list,
        plots,
    )?;
    let medians = medians_by_label(&results);
    write_out(
        &out_dir.join("summary.csv"),
        &summary_csv("method,median_miou", &medians),
    )?;
    if plots {
        write_out(
            &out_dir.join("vspl.svg"),
            &svg::bar_chart("coordinate vs embedding spatial prompt learning", &medians),
        )?;
    }
    for (label, m) in &medians {
        println!("{label:>12}  median mIoU {m:.4}");
    }
    Ok(())
}

pub fn cmd_shots(
    model_path: &Path,
    out_dir: &Path,
    config: Option<&Path>,
    seed: u64,
    seeds: usize,
    plots: bool,
) -> Result<(), CliError> {
    let ks = [4usize, 8, 12, 16];
    let seed_list = seeds_from(seed, seeds);
    let (_, results, _) = run_suite(
        model_path,
        out_dir,
        config,
        |cfg, s| plan::shots_cells(cfg.data.condition, &ks, s),
        &seed_list,
        plots,
    )?;
    let medians = medians_by_label(&results);
    write_out(
        &out_dir.join("summary.csv"),
        &summary_csv("method,median_miou", &medians),
    )?;
    if plots {
        let sweep: Vec<f64> = ks
            .iter()
            .map(|k| {
                medians
                    .iter()
                    .find(|(l, _)| l == &format!("ssprompt@{k}"))
                    .map(|(_, m)| *m)
                    .unwrap_or(f64::NAN)
            })
            .collect();
        let default = medians
            .iter()
            .find(|(l, _)| l == "default")
            .map(|(_, m)| *m)
            .unwrap_or(0.0);
        write_out(
            &out_dir.join("shots.svg"),
            &svg::line_chart(
                "mIoU versus shots",
                &[4.0, 8.0, 12.0, 16.0],
                &[
                    ("ssprompt".to_string(), sweep),
                    ("default".to_string(), vec![default; 4]),
                ],
            ),
        )?;
    }
    for (label, m) in &medians {
        println!("{label:>14}  median mIoU {m:.4}");
    }
    Ok(())
}

pub fn cmd_conditions(
    model_path: &Path,
    out_dir: &Path,
    config: Option<&Path>,
    seed: u64,
    seeds: usize,
    plots: bool,
) -> Result<(), CliError> {
    let conditions = [
        Condition::Clean,
        Condition::Fog(0.5),
        Condition::Night,
        Condition::Rain(8),
        Condition::Snow(40),
    ];
    let seed_list = seeds_from(seed, seeds);
    let (_, results, _) = run_suite(
        model_path,
        out_dir,
        config,
        |_, s| plan::condition_cells(&conditions, 16, s),
        &seed_list,
        plots,
    )?;
    let medians = medians_by_label(&results);
    write_out(
        &out_dir.join("summary.csv"),
        &summary_csv("method,median_miou", &medians),
    )?;
    if plots {
        write_out(
            &out_dir.join("conditions.svg"),
            &svg::bar_chart("median mIoU by condition", &medians),
        )?;
    }
    for (label, m) in &medians {
        println!("{label:>18}  median mIoU {m:.4}");
    }
    Ok(())
}

pub fn cmd_bench(
    model_path: &Path,
    out_dir: &Path,
    config: Option<&Path>,
    seed: u64,
    steps: u64,
    warmup: u64,
    plots: bool,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let model = load_frozen(model_path)?;
    std::fs::create_dir_all(out_dir)?;
    let vocab = Vocab::toy();
    let (pool, eval_split) = cfg.build_downstream(cfg.data.condition)?;
    let fewshot = data::few_shot_sample(&pool, 16, seed)?;

    let mut rows = Vec::new();
    let mut counters = String::from("method,steps,text_encoder_invocations,spatial_encoder_invocations\n");
    let mut times = String::from("method,mean_step_ms,std_step_ms\n");
    let mut bars = Vec::new();
    for method in [Method::SsPrompt, Method::Coop] {
        let stats = time_training(method, &model, &fewshot, &vocab, &cfg.train, steps, warmup, seed)?;
        // a deterministic short run for the mIoU column
        let mut short = cfg.train.clone();
        short.total_steps = steps;
        let outcome = train(method, &model, &fewshot, &vocab, &short, seed)?;
        let eval = evaluate(&model, &outcome.z_spatial, &outcome.z_text, &eval_split, eval_threads())?;
        rows.push(ResultRow {
            method: method.label().to_string(),
            dataset: "downstream".to_string(),
            condition: cfg.data.condition.label(),
            shots: 16,
            seed,
            miou: eval.miou,
            per_class_ious: eval.per_class_iou.clone(),
            step_time_ms: 0.0,
            mem_bytes: stats.peak_tensor_bytes as u64,
        });
        counters.push_str(&format!(
            "{},{},{},{}\n",
            method.label(),
            steps,
            stats.text_encoder_invocations,
            stats.spatial_encoder_invocations
        ));
        times.push_str(&format!(
            "{},{},{}\n",
            method.label(),
            stats.mean_step_ms,
            stats.std_step_ms
        ));
        bars.push((method.label().to_string(), stats.mean_step_ms));
        println!(
            "{:>9}: {:.3} ms/step (std {:.3}), peak {} bytes, text {} spatial {} invocations over the loop",
            method.label(),
            stats.mean_step_ms,
            stats.std_step_ms,
            stats.peak_tensor_bytes,
            stats.text_encoder_invocations,
            stats.spatial_encoder_invocations,
        );
    }
    cfg.write_file(&out_dir.join("config.cfg"))?;
    write_out(&out_dir.join("results.csv"), &results_csv(&rows))?;
    write_out(&out_dir.join("counters.csv"), &counters)?;
    write_out(&out_dir.join("bench_times.csv"), &times)?;
    if plots {
        write_out(
            &out_dir.join("bench.svg"),
            &svg::bar_chart("mean per-step wall time (ms)", &bars),
        )?;
    }
    Ok(())
}

/// Weight-bias report after semantic prompt learning against the biased
/// checkpoint, over several seeds.
pub fn cmd_weights(
    model_path: &Path,
    out_dir: &Path,
    config: Option<&Path>,
    seed: u64,
    seeds: usize,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let model = load_frozen(model_path)?;
    std::fs::create_dir_all(out_dir)?;
    let vocab = Vocab::toy();
    let (pool, _) = cfg.build_downstream(cfg.data.condition)?;
    let mut csv = String::from("seed,class,role,w,encoder_side_w\n");
    let mut wins = 0usize;
    let seed_list = seeds_from(seed, seeds);
    for &s in &seed_list {
        let fewshot = data::few_shot_sample(&pool, 16, s)?;
        let outcome = train(Method::SemPrompt, &model, &fewshot, &vocab, &cfg.train, s)?;
        let set = outcome.semantic_set.as_ref().unwrap();
        let report = weight_report(set, &pool.class_roles);
        for (c, w) in report.per_class_w.iter().enumerate() {
            let role = match pool.class_roles[c] {
                data::ClassRole::Foreground => "foreground",
                data::ClassRole::Background => "background",
            };
            csv.push_str(&format!(
                "{s},{},{role},{w},{}\n",
                pool.class_names[c],
                1.0 - w
            ));
        }
        let (fg, bg) = (
            report.mean_encoder_side_frequent,
            report.mean_encoder_side_rare,
        );
        if let (Some(fg), Some(bg)) = (fg, bg) {
            if fg > bg {
                wins += 1;
            }
            println!("seed {s}: encoder-side weight fg {fg:.4} bg {bg:.4}");
        }
    }
    cfg.write_file(&out_dir.join("config.cfg"))?;
    write_out(&out_dir.join("weights.csv"), &csv)?;
    println!("frequent > rare encoder-side weight in {wins}/{} seeds", seed_list.len());
    Ok(())
}

pub fn cmd_export(
    dataset: &str,
    condition: &str,
    split: &str,
    index: usize,
    out_prefix: &Path,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let cond = dataset_condition(&cfg, dataset, condition)?;
    let (pool, eval_split) = match dataset {
        "source" => cfg.build_pretrain()?,
        _ => cfg.build_downstream(cond)?,
    };
    let ds = match split {
        "train" | "pool" => pool,
        "eval" => eval_split,
        other => {
            return Err(CliError::Message(format!(
                "unknown split `{other}` (expected train|eval)"
            )))
        }
    };
    let sample = ds
        .samples
        .get(index)
        .ok_or_else(|| CliError::Message(format!("index {index} outside split of {}", ds.len())))?;
    let size = cfg.model.image_size;
    if let Some(dir) = out_prefix.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let ppm = out_prefix.with_extension("ppm");
    let labels = out_prefix.with_extension("labels.txt");
    data::write_ppm(sample, size, &ppm)?;
    data::write_label_map(sample, size, &labels)?;
    println!("wrote {} and {}", ppm.display(), labels.display());
    Ok(())
}
