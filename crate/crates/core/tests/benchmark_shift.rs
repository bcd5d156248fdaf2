//! Seeded full-benchmark comparisons: pretraining gain, domain-shift
//! behavior of the default prompts, and the condition analogs.

use std::sync::OnceLock;

use ssprompt_core::config::RunConfig;
use ssprompt_core::data::{Condition, Vocab};
use ssprompt_core::eval::evaluate;
use ssprompt_core::model::{pretrain, FrozenModel};
use ssprompt_core::prompts::{init_prompt_sets, WeightsMode};
use ssprompt_core::tensor::Tensor;

struct Shared {
    model: FrozenModel,
    source_miou: f64,
    z_spatial: Tensor,
    z_text: Tensor,
}

fn shared() -> &'static Shared {
    static SHARED: OnceLock<Shared> = OnceLock::new();
    SHARED.get_or_init(|| {
        let cfg = RunConfig::default();
        let (corpus, source_eval) = cfg.build_pretrain().unwrap();
        let mut pcfg = cfg.pretrain.clone();
        pcfg.seed = 7;
        let (model, _) = pretrain(
            FrozenModel::init(cfg.model.clone(), 7).unwrap(),
            &corpus,
            &Vocab::toy(),
            &pcfg,
        )
        .unwrap();
        let (spa, sem) = init_prompt_sets(
            &model,
            &source_eval.class_names,
            &Vocab::toy(),
            WeightsMode::Learnable,
        )
        .unwrap();
        let src = evaluate(&model, &spa.z_default, &sem.z_default, &source_eval, 4).unwrap();
        Shared {
            model,
            source_miou: src.miou,
            z_spatial: spa.z_default,
            z_text: sem.z_default,
        }
    })
}

#[test]
fn pretraining_beats_the_untrained_model() {
    let s = shared();
    let cfg = RunConfig::default();
    let (_, source_eval) = cfg.build_pretrain().unwrap();

    // the untrained model evaluates with its own (random) default prompts
    let raw = FrozenModel::init(cfg.model.clone(), 7).unwrap();
    let grid = ssprompt_core::model::default_grid(raw.config());
    let z_s = raw.encode_spatial_batch(&grid).unwrap();
    let names: Vec<Vec<usize>> = source_eval
        .class_names
        .iter()
        .map(|n| Vocab::toy().tokenize(n).unwrap())
        .collect();
    let z_t = raw.encode_text_batch(&names, None).unwrap();
    let untrained = evaluate(&raw, &z_s, &z_t, &source_eval, 4).unwrap();

    assert!(
        s.source_miou > untrained.miou,
        "pretrained {:.4} !> untrained {:.4}",
        s.source_miou,
        untrained.miou
    );
}

#[test]
fn zero_shift_downstream_matches_source_within_two_points() {
    let s = shared();
    let mut cfg = RunConfig::default();
    cfg.data.palette_shift = 0.0;
    cfg.data.noise_downstream = cfg.data.noise_source;
    let (_, eval_split) = cfg.build_downstream(Condition::Clean).unwrap();
    let out = evaluate(&s.model, &s.z_spatial, &s.z_text, &eval_split, 4).unwrap();
    assert!(
        (out.miou - s.source_miou).abs() <= 0.02,
        "zero-shift {:.4} vs source {:.4}",
        out.miou,
        s.source_miou
    );
}

#[test]
fn night_condition_degrades_default_prompts() {
    let s = shared();
    let mut cfg = RunConfig::default();
    cfg.data.palette_shift = 0.0;
    cfg.data.noise_downstream = cfg.data.noise_source;
    let (_, clean_eval) = cfg.build_downstream(Condition::Clean).unwrap();
    let (_, night_eval) = cfg.build_downstream(Condition::Night).unwrap();
    let clean = evaluate(&s.model, &s.z_spatial, &s.z_text, &clean_eval, 4).unwrap();
    let night = evaluate(&s.model, &s.z_spatial, &s.z_text, &night_eval, 4).unwrap();
    assert!(
        night.miou < clean.miou,
        "night {:.4} !< clean {:.4}",
        night.miou,
        clean.miou
    );
}

#[test]
fn duplicating_the_dataset_leaves_miou_unchanged() {
    let s = shared();
    let mut cfg = RunConfig::default();
    cfg.data.eval_size = 16;
    let (_, eval_split) = cfg.build_downstream(Condition::Clean).unwrap();
    let single = evaluate(&s.model, &s.z_spatial, &s.z_text, &eval_split, 2).unwrap();
    let mut doubled = eval_split.clone();
    doubled.samples.extend(eval_split.samples.iter().cloned());
    let double = evaluate(&s.model, &s.z_spatial, &s.z_text, &doubled, 2).unwrap();
    assert_eq!(single.miou, double.miou);
}
