use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use faultline::data::DATA_ENV;
use faultline::model::load_checkpoint;
use faultline::textinit::{average_embeddings, load_embeddings};
use serde_json::Value;
use tempfile::TempDir;

const BLOBS: &str = "[data]\ndataset = blobs\nblob_classes = 4\nblob_samples = 200\nblob_dim = 12\nblob_std = 0.5\n";

fn faultline(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faultline"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn faultline")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = faultline(dir, args);
    assert!(
        out.status.success(),
        "faultline {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Temp dir with a blobs config and two trained models under `o/`.
fn trained_blobs(lr: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("blobs.cfg"), BLOBS).unwrap();
    ok(
        dir.path(),
        &[
            "--seed", "3", "--config", "blobs.cfg", "--out", "o", "train", "--arch", "mlp-s", "--epochs", "2",
            "--embeddings", "synth", "--latent", "16", "--lr", lr,
        ],
    );
    dir
}

fn mnist_dir() -> Option<PathBuf> {
    let root = std::env::var_os(DATA_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    let dir = root.join("mnist");
    dir.join("t10k-images-idx3-ubyte").exists().then_some(dir)
}

#[test]
fn train_writes_both_heads() {
    let dir = trained_blobs("0.05");
    let o = dir.path().join("o");
    for id in ["mlp-s-baseline-s3", "mlp-s-multi-description-s3"] {
        assert!(o.join(format!("{id}.flnt")).exists());
        let eval = json(o.join(format!("{id}_eval.json")));
        assert!(eval["accuracy"].as_f64().unwrap() > 0.8, "{eval}");
        assert_eq!(eval["config_hash"].as_str().unwrap().len(), 64);
        let loss = fs::read_to_string(o.join(format!("{id}_loss.csv"))).unwrap();
        assert_eq!(loss.lines().next(), Some("epoch,loss"));
        assert_eq!(loss.lines().count(), 3);
    }
}

#[test]
fn zero_rate_keeps_projection_at_averaged_embeddings() {
    let dir = trained_blobs("0");
    let o = dir.path().join("o");
    let table = load_embeddings(o.join("embeddings.flem")).unwrap();
    assert_eq!(table.descriptions(), 4);
    let model = load_checkpoint(o.join("mlp-s-multi-description-s3.flnt")).unwrap();
    let last = &model.layers()[model.last_layer()];
    let weight = last.params()[0];
    assert!(weight.bits_eq(&average_embeddings(&table).unwrap()));
    assert!(last.params()[1].data().iter().all(|&b| b == 0.0));
}

#[test]
fn inject_is_thread_invariant_and_replays_from_manifest() {
    let dir = trained_blobs("0.05");
    let p = dir.path();
    let ckpt = "o/mlp-s-multi-description-s3.flnt";
    let mut runs = Vec::new();
    for (threads, out) in [("1", "a"), ("3", "b")] {
        ok(
            p,
            &[
                "--seed", "9", "--config", "blobs.cfg", "--threads", threads, "--out", out, "inject", "--checkpoint",
                ckpt, "-n", "16", "--layers", "last", "--outcomes",
            ],
        );
        runs.push(fs::read(p.join(out).join("mlp-s-multi-description-s3_campaign.json")).unwrap());
    }
    assert_eq!(runs[0], runs[1]);

    let report = json(p.join("a/mlp-s-multi-description-s3_campaign.json"));
    assert_eq!(report["head"], "split");
    assert_eq!(report["fused_head"], true);
    let layers = report["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 1);
    assert_eq!(layers[0]["outcomes"].as_array().unwrap().len(), 16);
    let csv = fs::read_to_string(p.join("a/mlp-s-multi-description-s3_layer_reliability.csv")).unwrap();
    assert!(csv.starts_with("model,layer,n,mean_dloss,mismatch_rate\nmlp-s-multi-description-s3,"));

    ok(p, &["--config", "a/mlp-s-multi-description-s3_inject_manifest.cfg", "--out", "c", "inject"]);
    assert_eq!(fs::read(p.join("c/mlp-s-multi-description-s3_campaign.json")).unwrap(), runs[0]);
}

#[test]
fn missing_seed_is_reported_as_json() {
    let dir = TempDir::new().unwrap();
    let out = faultline(dir.path(), &["--json", "train", "--dataset", "blobs"]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(err["ok"], false);
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("seed"));
}

#[test]
fn config_errors_carry_their_line() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("bad.cfg"), "[run]\nseed = 1\n\nthis is not a pair\n").unwrap();
    let out = faultline(dir.path(), &["--json", "--config", "bad.cfg", "embed-gen"]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(err["error"]["line"], 4);
}

#[test]
fn empty_layer_filter_is_an_error() {
    let dir = trained_blobs("0.05");
    let out = faultline(
        dir.path(),
        &["--seed", "1", "--config", "blobs.cfg", "inject", "--checkpoint", "o/mlp-s-baseline-s3.flnt", "-n", "4", "--layers", ","],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("selects no layers"));
}

#[test]
fn profile_sweep_and_report() {
    let dir = trained_blobs("0.05");
    let p = dir.path();
    let ckpts = "o/mlp-s-baseline-s3.flnt,o/mlp-s-multi-description-s3.flnt";
    ok(p, &["--seed", "3", "--config", "blobs.cfg", "--out", "o", "profile", "--checkpoints", ckpts]);
    let ranges = fs::read_to_string(p.join("o/ranges.csv")).unwrap();
    assert!(ranges.starts_with("model,layer,max_abs,mean_abs\n"));
    assert_eq!(ranges.lines().count(), 1 + 2 + 2);

    ok(p, &["--seed", "3", "--config", "blobs.cfg", "--out", "o", "sweep", "--checkpoints", ckpts, "--deltas", "0,50,100"]);
    let sweep = fs::read_to_string(p.join("o/sweep.csv")).unwrap();
    assert!(sweep.starts_with("model,delta,accuracy\n"));
    assert_eq!(sweep.lines().count(), 1 + 6);

    for id in ["mlp-s-baseline-s3", "mlp-s-multi-description-s3"] {
        ok(
            p,
            &["--seed", "4", "--config", "blobs.cfg", "--out", "o", "inject", "--checkpoint", &format!("o/{id}.flnt"), "-n", "64",
              "--layers", "all"],
        );
    }
    ok(
        p,
        &[
            "--out", "o", "report", "--baseline", "o/mlp-s-baseline-s3_campaign.json", "--ours",
            "o/mlp-s-multi-description-s3_campaign.json", "--baseline-eval", "o/mlp-s-baseline-s3_eval.json",
            "--ours-eval", "o/mlp-s-multi-description-s3_eval.json",
        ],
    );
    let cmp = fs::read_to_string(p.join("o/comparison.csv")).unwrap();
    assert!(cmp.starts_with("metric,baseline,ours,value\n"));
    assert!(cmp.contains("\nreliability_last_layer,"));
    assert!(cmp.contains("\ntop2diff,"));
}

#[test]
fn embed_gen_is_seeded() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    for out in ["a", "b"] {
        ok(p, &["--seed", "2", "--out", out, "embed-gen", "--classes", "cat,dog,eel", "--descriptions", "3", "--dim", "8"]);
    }
    let a = fs::read(p.join("a/embeddings.flem")).unwrap();
    assert_eq!(a, fs::read(p.join("b/embeddings.flem")).unwrap());
    let table = load_embeddings(p.join("a/embeddings.flem")).unwrap();
    assert_eq!((table.classes(), table.descriptions(), table.dim()), (3, 3, 8));
}

#[test]
fn cam_on_an_mnist_subset() {
    let Some(mnist) = mnist_dir() else {
        eprintln!("MNIST not found; set {DATA_ENV}");
        return;
    };
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let data = mnist.display().to_string();
    ok(
        p,
        &[
            "--seed", "1", "--out", "o", "train", "--data", &data, "--train-limit", "512", "--eval-limit", "64",
            "--arch", "cnn-s", "--head", "baseline", "--epochs", "1",
        ],
    );
    ok(
        p,
        &[
            "--seed", "1", "--out", "o", "cam", "--data", &data, "--eval-limit", "64", "--checkpoint",
            "o/cnn-s-baseline-s1.flnt", "--sample", "3", "--flips", "10",
        ],
    );
    let o = p.join("o");
    for stem in ["cnn-s-baseline-s1_s3", "cnn-s-baseline-s1_s3_perturbed"] {
        let pgm = fs::read(o.join(format!("{stem}_cam.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n28 28\n255\n"));
        assert_eq!(pgm.len(), b"P5\n28 28\n255\n".len() + 28 * 28);
        assert!(o.join(format!("{stem}_image.pgm")).exists());
        let side = json(o.join(format!("{stem}.json")));
        assert_eq!(side["width"], 28);
        assert_eq!(side["weights"].as_array().unwrap().len(), 32);
    }
}
