use std::path::Path;
use std::process::Command;

use cmmp::checkpoint::Checkpoint;
use cmmp::formats::{read_json, Report};
use cmmp::manifest::{sha256_tree, Manifest};

const TINY: &str = "\
synth.image_size = 48
synth.train_images = 24
synth.test_images = 12
synth.pretrain_images = 16
encoder.image_size = 48
encoder.patch_size = 16
encoder.image_width = 16
encoder.image_heads = 2
encoder.text_width = 16
encoder.text_heads = 2
encoder.embed_dim = 16
pretrain.epochs = 1
pretrain.batch_size = 8
prompts.d_ins = 8
prompts.spi_layers = 1
prompts.spi_heads = 2
prompts.context_length = 2
gsp.k = 4
train.epochs = 1
";

fn cmmp(run: &Path, args: &[&str]) -> (i32, String) {
    let cfg = run.join("tiny.cfg");
    if !cfg.exists() {
        std::fs::write(&cfg, TINY).unwrap();
    }
    let out = Command::new(env!("CARGO_BIN_EXE_cmmp")).args(args).arg("--config").arg(&cfg).env("CMMP_RUN_ROOT", run).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn ok(run: &Path, args: &[&str]) {
    let (code, err) = cmmp(run, args);
    assert_eq!(code, 0, "{args:?}: {err}");
}

#[test]
fn oracle_predictions_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    for c in [&["synth"][..], &["split"], &["predict", "--oracle"], &["eval"]] {
        ok(run, c);
    }
    let r: Report = read_json(&run.join("report.json")).unwrap();
    for v in [r.map_unseen, r.map_seen, r.map_full, r.hm] {
        assert_eq!(v, Some(1.0));
    }
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["synth"]);
    ok(b.path(), &["synth"]);
    assert_eq!(sha256_tree(&a.path().join("data")).unwrap(), sha256_tree(&b.path().join("data")).unwrap());
}

#[test]
fn manifest_hash_follows_relevant_config() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    ok(run, &["synth"]);
    let hash = |extra: &[&str]| {
        let mut args = vec!["split"];
        args.extend_from_slice(extra);
        ok(run, &args);
        Manifest::read_for(&run.join("split.json")).unwrap().config_hash
    };
    let base = hash(&[]);
    assert_eq!(hash(&[]), base);
    assert_eq!(hash(&["--set", "train.epochs=7"]), base);
    assert_ne!(hash(&["--set", "split.count=3"]), base);
    assert_ne!(hash(&["--set", "seed=1"]), base);
}

#[test]
fn full_pipeline_with_exit_codes_and_split_guard() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    assert_eq!(cmmp(run, &["pretrain"]).0, 2, "missing data is a validation error");
    assert_eq!(cmmp(run, &["split", "--set", "no.such.key=1"]).0, 1);
    assert_eq!(cmmp(run, &["no-such-command"]).0, 1);
    for c in [&["synth"][..], &["pretrain"], &["split"], &["gsp-fit"], &["train"], &["predict"], &["eval"], &["plot"]] {
        ok(run, c);
    }
    for f in ["model.ckpt", "predictions.jsonl", "report.json", "train_log.jsonl", "plots/pr_curves.svg", "plots/map_bars.svg"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for k in ["l_cls", "l_cc", "total"] {
        assert!(first[k].is_f64(), "{k}");
    }

    let bytes = std::fs::read(run.join("model.ckpt")).unwrap();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);

    let (code, err) = cmmp(run, &["train", "--set", "pretrain.lr=0.001"]);
    assert_eq!(code, 2, "stale foundation must not be reused silently: {err}");
    assert!(err.contains("cmmp pretrain") || err.contains("different configuration"), "{err}");

    ok(run, &["split", "--set", "split.count=5", "--out", run.join("other.json").to_str().unwrap()]);
    let (code, err) = cmmp(run, &["eval", "--split", run.join("other.json").to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("different split"), "{err}");

    let (code, err) = cmmp(run, &["train", "--set", "train.lr=1e200", "--out", run.join("bad.ckpt").to_str().unwrap()]);
    assert_eq!(code, 3, "{err}");
    assert!(run.join("bad.ckpt.failure.json").exists());
}
