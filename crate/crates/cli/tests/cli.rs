use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data.train]
num_classes = 6
images_per_class = 3
image_size = 32

[data.eval]
num_classes = 4
images_per_class = 3
image_size = 32

[encoder]
hidden_channels = [4, 8, 8]
output_dim = 16

[lit]
templates = 4
dim = 16
input_dim = 16

[whitening]
dim = 8

[train]
epochs = 2
batches_per_epoch = 2
tuples_per_batch = 2
negatives = 2

[asmk]
codebook_size = 8
codebook_samples = 500
scales = [1.414, 1.0, 0.707]

[diagnose]
redundancy_ks = [1, 2]
heatmap_images = 1

[ablate]
budgets = [2, 4, 8]
losses = ["super+attn"]
match_tuples = 10
"#;

fn superfeat(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_superfeat"))
        .args(args)
        .env("SUPERFEAT_RUN_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = superfeat(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

fn only_run_dir(root: &Path) -> std::path::PathBuf {
    let dirs: Vec<_> = std::fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

fn full_pipeline(root: &Path, cfg: &str) -> String {
    for cmd in ["gen-data", "fit-whitening", "train", "fit-codebook", "index"] {
        ok(root, &[cmd, "-c", cfg, "--seed", "3"]);
    }
    let hits = ok(
        root,
        &["search", "-c", cfg, "--seed", "3", "--query", "c002_01", "--top", "3"],
    );
    assert!(hits.lines().next().unwrap().contains("c002_01"), "{hits}");
    ok(root, &["eval", "-c", cfg, "--seed", "3"]);
    std::fs::read_to_string(only_run_dir(root).join("eval.csv")).unwrap()
}

#[test]
fn seeded_pipeline_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let a = full_pipeline(&tmp.path().join("a"), &cfg);
    let b = full_pipeline(&tmp.path().join("b"), &cfg);
    assert!(a.starts_with("metric,value\nmap,"), "{a}");
    assert!(a.contains("index_sha256"));
    assert_eq!(a, b);
    let run = only_run_dir(&tmp.path().join("a"));
    for f in [
        "model.ckpt",
        "model.ckpt.json",
        "metrics.ndjson",
        "codebook.bin",
        "index.asmk",
        "eval_queries.csv",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.ndjson")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
}

#[test]
fn diagnose_and_ablate_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("runs");
    let cfg = write_config(tmp.path());
    for cmd in ["gen-data", "train", "diagnose"] {
        ok(&root, &[cmd, "-c", &cfg]);
    }
    ok(&root, &["ablate", "-c", &cfg, "--only", "budget"]);
    ok(&root, &["ablate", "-c", &cfg, "--only", "constraints"]);
    let run = only_run_dir(&root);
    for f in [
        "attention_correlation.csv",
        "redundancy.csv",
        "per_scale.csv",
        "match_counts.csv",
    ] {
        assert!(run.join("diagnose").join(f).exists(), "{f}");
    }
    let pngs = std::fs::read_dir(run.join("diagnose/heatmaps"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 1 + 4);

    let budget = std::fs::read_to_string(run.join("ablate/budget.csv")).unwrap();
    let clusters: Vec<f64> = budget
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(clusters.len(), 3);
    assert!(clusters.windows(2).all(|w| w[0] <= w[1]), "{budget}");
    let constraints = std::fs::read_to_string(run.join("ablate/constraints.csv")).unwrap();
    assert_eq!(constraints.lines().count(), 9);
}

#[test]
fn unknown_key_exits_with_two_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[lit]\ntemplatez = 4\n").unwrap();
    let out = superfeat(tmp.path(), &["train", "-c", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lit.templatez"));

    let out = superfeat(tmp.path(), &["eval", "--set", "asmk.alpha=-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("asmk.alpha"));
}

#[test]
fn missing_artifact_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = superfeat(tmp.path(), &["index", "-c", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("MissingArtifact"));
}

#[test]
fn every_subcommand_has_help() {
    let tmp = tempfile::tempdir().unwrap();
    for cmd in [
        "gen-data",
        "fit-whitening",
        "train",
        "fit-codebook",
        "index",
        "search",
        "eval",
        "diagnose",
        "ablate",
        "show-config",
    ] {
        let out = superfeat(tmp.path(), &[cmd, "--help"]);
        assert!(out.status.success(), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("--set"), "{cmd}");
    }
}
