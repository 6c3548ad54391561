use std::fs;
use std::path::Path;

use serde_json::json;
use vmat_latent::cli::{run, same_csv_outputs, EXIT_CONFIG, EXIT_MISSING, EXIT_OK};

fn tiny_config() -> serde_json::Value {
    json!({
        "generator": { "n_arcs": 24 },
        "pca_dims": [2, 4],
        "training": {
            "grid": [
                { "variational": false, "k": 2, "d": 4 },
                { "variational": true, "k": 2, "d": 4, "alpha": 0.01 }
            ],
            "schedule": { "max_epochs": 1, "batch_size": 8 }
        },
        "position": {
            "spaces": ["full_dao", "pca_d4", "vae_k2_d4_a0.01"],
            "trials": 2,
            "t_d": [0.01, 0.1],
            "stopping": { "max_iterations": 40 }
        },
        "dose": {
            "phantom": { "extents": [6, 6, 6] },
            "spaces": ["full_dao", "vae_k2_d4_a0.01"],
            "trials": 1,
            "iterations": 20
        },
        "traverse": { "model": "vae_k2_d4_a0.01", "dim": 1, "range": [-1.0, 1.0], "frames": 3 }
    })
}

fn write_config(dir: &Path, value: &serde_json::Value) -> String {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(value).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

fn cmd(command: &str, config: &str, out: &Path, extra: &[&str]) -> i32 {
    let mut args = vec!["vmat-latent", command, "--config", config, "--out"];
    let out = out.to_string_lossy().into_owned();
    args.push(&out);
    args.extend_from_slice(extra);
    run(args)
}

fn data_lines(p: &Path) -> usize {
    fs::read_to_string(p).unwrap().lines().filter(|l| !l.trim().is_empty()).count()
}

fn csv_rows(p: &Path) -> Vec<String> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(str::to_owned)
        .collect()
}

fn pipeline(root: &Path, out: &Path) {
    let config = write_config(root, &tiny_config());
    for c in ["gen-data", "fit-pca", "train", "eval-recon", "opt-position", "opt-dose", "traverse", "report"] {
        assert_eq!(cmd(c, &config, out, &["--seed", "3"]), EXIT_OK, "{c}");
    }
}

#[test]
fn full_pipeline_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    pipeline(root.path(), &a);

    assert_eq!(data_lines(&a.join("data/train.jsonl")), 21);
    assert_eq!(data_lines(&a.join("data/val.jsonl")), 3);
    assert_eq!(csv_rows(&a.join("recon_errors.csv")).len(), 4);
    assert_eq!(csv_rows(&a.join("pca_sweep.csv")).len(), 2);
    assert_eq!(csv_rows(&a.join("position/summary.csv")).len(), 6);
    assert_eq!(csv_rows(&a.join("dose/summary.csv")).len(), 2);
    let conv = fs::read_to_string(a.join("position/convergence.svg")).unwrap();
    assert_eq!(conv.matches("class=\"series\"").count(), 6);
    let strip = fs::read_to_string(a.join("traverse.svg")).unwrap();
    assert_eq!(strip.matches("class=\"panel\"").count(), 3);
    assert!(a.join("dose/dose_slice.svg").is_file());
    assert!(fs::read_to_string(a.join("report.md")).unwrap().contains("## Dose-based optimization"));
    let header = fs::read_to_string(a.join("recon_errors.csv")).unwrap();
    assert!(header.starts_with("# config_sha256="));

    pipeline(root.path(), &b);
    assert!(same_csv_outputs(&a, &b).unwrap());
    assert_eq!(
        fs::read(a.join("data/train.jsonl")).unwrap(),
        fs::read(b.join("data/train.jsonl")).unwrap()
    );
}

#[test]
fn exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("out");
    let config = write_config(root.path(), &tiny_config());

    let bad = root.path().join("bad.json");
    fs::write(&bad, "{ \"seed\": \"zero\" }").unwrap();
    assert_eq!(cmd("gen-data", &bad.to_string_lossy(), &out, &[]), EXIT_CONFIG);
    let unknown = root.path().join("unknown.json");
    fs::write(&unknown, "{ \"no_such_field\": 1 }").unwrap();
    assert_eq!(cmd("gen-data", &unknown.to_string_lossy(), &out, &[]), EXIT_CONFIG);
    assert_eq!(run(["vmat-latent", "no-such-command"]), EXIT_CONFIG);

    assert_eq!(cmd("eval-recon", &config, &out, &[]), EXIT_MISSING);
    assert_eq!(cmd("report", &config, &out, &[]), EXIT_MISSING);
    assert_eq!(cmd("gen-data", &config, &out, &[]), EXIT_OK);
    assert_eq!(cmd("traverse", &config, &out, &[]), EXIT_MISSING);
    assert_eq!(cmd("opt-position", &config, &out, &[]), EXIT_MISSING);

    assert_eq!(cmd("train", &config, &out, &[]), EXIT_OK);
    assert_eq!(cmd("traverse", &config, &out, &["--dim", "4"]), EXIT_CONFIG);
    assert_eq!(cmd("traverse", &config, &out, &["--dim", "0", "--range", "0", "0"]), EXIT_OK);
    fs::write(out.join("models/vae_k2_d4_a0.01.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(cmd("traverse", &config, &out, &[]), EXIT_MISSING);

    fs::write(out.join("data/val.jsonl"), "").unwrap();
    assert_eq!(cmd("eval-recon", &config, &out, &[]), EXIT_CONFIG);
}

#[test]
fn zero_range_traversal_repeats_one_frame() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("out");
    let mut cfg = tiny_config();
    cfg["training"]["grid"] = json!([{ "variational": true, "k": 2, "d": 4, "alpha": 0.01 }]);
    let config = write_config(root.path(), &cfg);
    assert_eq!(cmd("gen-data", &config, &out, &[]), EXIT_OK);
    assert_eq!(cmd("train", &config, &out, &[]), EXIT_OK);
    assert_eq!(cmd("traverse", &config, &out, &["--range", "0", "0", "--frames", "4"]), EXIT_OK);
    let svg = fs::read_to_string(out.join("traverse.svg")).unwrap();
    let panels: Vec<&str> = svg.split("class=\"panel\"").skip(1).map(|p| p.split_once('>').unwrap().1).collect();
    assert_eq!(panels.len(), 4);
    let body = |p: &str| p.split("<text").next().unwrap().to_owned();
    assert!(panels.iter().all(|p| body(p) == body(panels[0])));
}
