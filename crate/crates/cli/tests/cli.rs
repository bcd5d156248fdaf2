//! Binary-level tests on a scaled-down configuration: every command runs
//! through the real argument surface, and outputs are checked for content,
//! determinism, and error codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use ssprompt_core::checkpoint;
use ssprompt_core::data::Vocab;
use ssprompt_core::model::load_model;
use ssprompt_core::prompts::{init_prompt_sets, WeightsMode};

const TINY_CONFIG: &str = "\
model.image_size=16
model.patch_size=4
model.embed_dim=16
model.fourier_bands=8
model.num_spatial_prompts=4
model.token_dim=32
pretrain.steps=200
pretrain.batch_size=4
pretrain.base_lr=0.03
data.pretrain_size=24
data.pretrain_eval_size=8
data.pool_size=32
data.eval_size=16
train.total_steps=40
train.base_lr=0.05
";

struct Workbench {
    dir: tempfile::TempDir,
}

impl Workbench {
    fn config(&self) -> PathBuf {
        self.dir.path().join("tiny.cfg")
    }

    fn model(&self) -> PathBuf {
        self.dir.path().join("model.ckpt")
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ssprompt"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn ssprompt");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// One shared tiny pretrained checkpoint for the whole test binary.
fn bench() -> &'static Workbench {
    static SHARED: OnceLock<Workbench> = OnceLock::new();
    SHARED.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let wb = Workbench { dir };
        std::fs::write(wb.config(), TINY_CONFIG).unwrap();
        run_ok(bin().args([
            "pretrain",
            "--config",
            wb.config().to_str().unwrap(),
            "--out",
            wb.model().to_str().unwrap(),
            "--seed",
            "7",
        ]));
        wb
    })
}

fn args_eval(wb: &Workbench, out: &Path, prompts: Option<&Path>) -> Vec<String> {
    let mut v = vec![
        "eval".to_string(),
        "--model".into(),
        wb.model().display().to_string(),
        "--out".into(),
        out.display().to_string(),
        "--config".into(),
        wb.config().display().to_string(),
    ];
    if let Some(p) = prompts {
        v.push("--prompts".into());
        v.push(p.display().to_string());
    }
    v
}

#[test]
fn default_eval_matches_committed_fixture() {
    let wb = bench();
    let out = wb.path("eval_default.csv");
    run_ok(bin().args(args_eval(wb, &out, None)));
    let actual = std::fs::read_to_string(&out).unwrap();

    let fixture = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/eval_default_tiny.csv");
    if std::env::var("SSPROMPT_BLESS").is_ok() {
        std::fs::create_dir_all(fixture.parent().unwrap()).unwrap();
        std::fs::write(&fixture, &actual).unwrap();
        eprintln!("blessed eval_default_tiny.csv");
        return;
    }
    let expected = std::fs::read_to_string(&fixture)
        .expect("fixture missing; run with SSPROMPT_BLESS=1");
    assert_eq!(expected, actual, "default-prompt eval drifted byte-wise");
}

#[test]
fn eval_is_byte_idempotent() {
    let wb = bench();
    let (a, b) = (wb.path("idem_a.csv"), wb.path("idem_b.csv"));
    run_ok(bin().args(args_eval(wb, &a, None)));
    run_ok(bin().args(args_eval(wb, &b, None)));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn learn_default_writes_encoded_defaults() {
    let wb = bench();
    let out = wb.path("prompts_default.ckpt");
    run_ok(bin().args([
        "learn",
        "--method",
        "default",
        "--model",
        wb.model().to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--config",
        wb.config().to_str().unwrap(),
    ]));
    let entries = checkpoint::load_from_file(&out).unwrap();

    let model = load_model(&wb.model()).unwrap();
    let names: Vec<String> = ["backdrop", "crate", "disk", "wedge", "brick", "puck"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let (spa, sem) =
        init_prompt_sets(&model, &names, &Vocab::toy(), WeightsMode::Learnable).unwrap();
    assert!(entries["prompts.z_spatial"].bit_eq(&spa.z_default));
    assert!(entries["prompts.z_text"].bit_eq(&sem.z_default));
}

#[test]
fn learn_and_eval_roundtrip_is_deterministic() {
    let wb = bench();
    let (p1, p2) = (wb.path("p1.ckpt"), wb.path("p2.ckpt"));
    for p in [&p1, &p2] {
        run_ok(bin().args([
            "learn",
            "--method",
            "ssprompt",
            "--model",
            wb.model().to_str().unwrap(),
            "--shots",
            "8",
            "--seed",
            "3",
            "--out",
            p.to_str().unwrap(),
            "--config",
            wb.config().to_str().unwrap(),
        ]));
    }
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let out = wb.path("eval_learned.csv");
    run_ok(bin().args(args_eval(wb, &out, Some(&p1))));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("ssprompt,downstream,clean,8,3,"));
}

#[test]
fn missing_model_exits_2() {
    let wb = bench();
    let out = bin()
        .args([
            "eval",
            "--model",
            wb.path("nope.ckpt").to_str().unwrap(),
            "--out",
            wb.path("x.csv").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_3() {
    let wb = bench();
    let bad = wb.path("bad.cfg");
    std::fs::write(&bad, "model.embed_dims=16\n").unwrap();
    let out = bin()
        .args([
            "eval",
            "--model",
            wb.model().to_str().unwrap(),
            "--out",
            wb.path("x.csv").to_str().unwrap(),
            "--config",
            bad.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn corrupted_prompts_checkpoint_is_rejected() {
    let wb = bench();
    let p = wb.path("tocorrupt.ckpt");
    run_ok(bin().args([
        "learn",
        "--method",
        "default",
        "--model",
        wb.model().to_str().unwrap(),
        "--out",
        p.to_str().unwrap(),
        "--config",
        wb.config().to_str().unwrap(),
    ]));
    let mut bytes = std::fs::read(&p).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(&p, bytes).unwrap();
    let out = bin()
        .args(args_eval(wb, &wb.path("x.csv"), Some(&p)))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

#[test]
fn ablate_suite_outputs_are_complete_and_wellformed() {
    let wb = bench();
    let dir = wb.path("ablate");
    run_ok(bin().args([
        "ablate",
        "--model",
        wb.model().to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--config",
        wb.config().to_str().unwrap(),
        "--seeds",
        "2",
    ]));
    for f in ["results.csv", "summary.csv", "config.cfg", "audit.txt", "ablate.svg"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let results = std::fs::read_to_string(dir.join("results.csv")).unwrap();
    assert!(results.starts_with(ssprompt_cli::csvio::RESULTS_HEADER));
    // 6 rows x 2 seeds plus header
    assert_eq!(results.lines().count(), 13);
    let svg = std::fs::read_to_string(dir.join("ablate.svg")).unwrap();
    ssprompt_cli::svg::check_wellformed(&svg).unwrap();
    let audit = std::fs::read_to_string(dir.join("audit.txt")).unwrap();
    assert!(audit.contains("ok=true"));
}

#[test]
fn export_writes_ppm_and_labels() {
    let wb = bench();
    let prefix = wb.path("scene");
    run_ok(bin().args([
        "export",
        "--index",
        "2",
        "--out",
        prefix.to_str().unwrap(),
        "--config",
        wb.config().to_str().unwrap(),
    ]));
    let ppm = std::fs::read(wb.path("scene.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n16 16\n255\n"));
    let labels = std::fs::read_to_string(wb.path("scene.labels.txt")).unwrap();
    assert_eq!(labels.lines().count(), 16);
}

#[test]
fn gradcheck_command_passes_gate() {
    let out = run_ok(bin().args(["gradcheck", "--seed", "3"]));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("max relative error"), "{text}");
}
