use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
preset = "quick"
seed = 3

[data]
toy_images = 60

[proxy]
force = true

[proxy.run]
iterations = 5

[phase1]
kmeans_init = 64
usage_every = 2

[phase1.run]
iterations = 3
batch_size = 8

[phase2.run]
iterations = 2
batch_size = 8

[ar.run]
iterations = 3
batch_size = 8

[nar.run]
iterations = 3
batch_size = 8

[sample]
count = 8

[ablation]
generation = false
"#;

fn vqtok(args: &[&str], out: &Path, config: Option<&Path>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_vqtok"));
    c.arg("--out").arg(out).env("RUST_LOG", "warn").env_remove("VQTOK_DATA_ROOT");
    if let Some(p) = config {
        c.arg("--config").arg(p);
    }
    c.args(args).output().expect("run vqtok")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn manifest_value(path: &Path, key: &str) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing from {}", path.display()))
        .to_string()
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[phase1.loss]\ngama = 0.5\n").unwrap();
    assert_eq!(vqtok(&["show-config"], dir.path(), Some(&bad)).status.code(), Some(1));
    let o = vqtok(&["--override", "phase1.run.iterationz=2", "show-config"], dir.path(), None);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(vqtok(&["no-such-command"], dir.path(), None).status.code(), Some(1));
    assert_eq!(vqtok(&["--preset", "huge", "show-config"], dir.path(), None).status.code(), Some(1));
    assert_eq!(vqtok(&["--help"], dir.path(), None).status.code(), Some(0));
}

#[test]
fn show_config_applies_seed_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let o = vqtok(
        &["--preset", "quick", "--seed", "9", "--override", "phase1.loss.gamma=0.0", "show-config"],
        dir.path(),
        None,
    );
    let text = ok(&o);
    assert!(text.contains("seed = 9"));
    let cfg = vqtok::pipeline::PipelineConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.phase1.loss.gamma, 0.0);
    assert_eq!(cfg.phase1.run.seed, 9);
}

#[test]
fn missing_artifacts_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = vqtok(&["--preset", "quick", "train-tokenizer"], dir.path(), None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ingest_folder_with_data_root() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = dir.path().join("imgs");
    ok(&vqtok(
        &["make-toy", "--dir", imgs.to_str().unwrap(), "--images", "30", "--size", "16"],
        dir.path(),
        None,
    ));
    std::fs::write(imgs.join("broken.png"), b"not a png").unwrap();
    let run = |out: &Path| {
        let o = Command::new(env!("CARGO_BIN_EXE_vqtok"))
            .args(["--preset", "quick", "--out"])
            .arg(out)
            .args(["ingest", "--folder", "imgs"])
            .env("VQTOK_DATA_ROOT", dir.path())
            .env("RUST_LOG", "error")
            .output()
            .unwrap();
        ok(&o);
        manifest_value(&out.join("runs/ingest.txt"), "summary.train_digest")
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    assert_eq!(a, b);
    let m = dir.path().join("a/runs/ingest.txt");
    assert_eq!(manifest_value(&m, "summary.images"), "30");
    assert_eq!(manifest_value(&m, "summary.skipped"), "1");
    assert_eq!(manifest_value(&m, "summary.val"), "3");
}

#[test]
fn full_pipeline_tiny() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    let step = |args: &[&str]| ok(&vqtok(args, &out, Some(&cfg)));
    step(&["ingest"]);
    step(&["train-proxy"]);
    step(&["train-tokenizer"]);
    let tok1 = manifest_value(&out.join("runs/train-tokenizer.txt"), "summary.token_digest");
    step(&["finetune-decoder"]);
    step(&["train-transformer", "--kind", "ar"]);
    step(&["train-transformer", "--kind", "nar"]);
    step(&["sample", "--kind", "ar"]);
    step(&["sample", "--kind", "nar"]);
    let viz = step(&["visualize"]);
    assert!(viz.contains("mean_top1"));
    let eval = step(&["evaluate"]);
    assert!(eval.contains("rfid_phase2") && eval.contains("gfid_nar_phase1"));
    let table = step(&["ablate", "usage"]);
    for row in ["baseline", "+fn", "+kmeans", "+entropy"] {
        assert!(table.contains(row), "{table}");
    }

    for f in [
        "data/manifest.txt",
        "proxy/manifest.txt",
        "tokenizer/phase1/manifest.txt",
        "tokenizer/phase2/manifest.txt",
        "transformer/ar/manifest.txt",
        "transformer/nar/manifest.txt",
        "samples/ar.json",
        "samples/ar.png",
        "viz/comparison.png",
        "viz/comparison.json",
        "eval/results.jsonl",
        "eval/val_loss_curves.csv",
        "ablation/usage/rows.csv",
        "metrics/phase1.jsonl",
        "runs/finetune-decoder.txt",
        "runs/ablate-usage.config.toml",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let frozen = out.join("runs/finetune-decoder.txt");
    let parent = out.join("tokenizer/phase1/manifest.txt");
    assert_eq!(
        manifest_value(&frozen, "summary.encoder_digest"),
        manifest_value(&parent, "encoder_digest")
    );

    // same config and seed reproduce the tokenizer
    step(&["train-tokenizer"]);
    assert_eq!(
        manifest_value(&out.join("runs/train-tokenizer.txt"), "summary.token_digest"),
        tok1
    );
}
