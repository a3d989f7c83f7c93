use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const TINY: &str = r#"
epochs = 1
batch_size = 2
seed = 3
[network]
encoder_channels = [4, 4, 6, 6, 6, 6]
detector_channels = [6, 8]
detector_convs_per_stage = 2
head_channels = 6
tracker_hidden = [8, 6]
"#;

fn rdt(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rdt"))
        .args(args)
        .env("RDT_RUN_ROOT", root)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

/// Digest of every file under `dir`, keyed by relative path.
fn tree_digest(dir: &Path) -> String {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(std::fs::read(&f).unwrap());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn prepare(root: &Path) {
    std::fs::write(root.join("tiny.toml"), TINY).unwrap();
    ok(&rdt(&["generate", "--out", "data", "--n-train", "4", "--n-test", "2", "--seed", "5", "--k-min", "6", "--k-max", "9"], root));
    ok(&rdt(&["train", "--data", "data", "--out", "run", "--config", "tiny.toml", "--quiet"], root));
    ok(&rdt(
        &["predict", "--checkpoint", "run/checkpoints/epoch_001.ckpt", "--data", "data", "--out", "run/predictions"],
        root,
    ));
}

#[test]
fn generate_is_deterministic_and_uses_run_root() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    ok(&rdt(&["generate", "--out", "a", "--n-train", "2", "--n-test", "1", "--seed", "9"], r));
    ok(&rdt(&["generate", "--out", "b", "--n-train", "2", "--n-test", "1", "--seed", "9"], r));
    ok(&rdt(&["generate", "--out", "c", "--n-train", "2", "--n-test", "1", "--seed", "10"], r));
    assert!(r.join("a/manifest.json").exists());
    assert_eq!(tree_digest(&r.join("a")), tree_digest(&r.join("b")));
    assert_ne!(tree_digest(&r.join("a")), tree_digest(&r.join("c")));
}

#[test]
fn train_predict_eval_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    prepare(r);
    for sub in ["checkpoints", "predictions", "reports", "logs"] {
        assert!(r.join("run").join(sub).is_dir(), "missing {sub}");
    }
    assert!(r.join("run/config.json").exists());
    assert!(!std::fs::read_to_string(r.join("run/logs/train.jsonl")).unwrap().is_empty());

    std::fs::write(r.join("loose.toml"), "[[criterion]]\nmetric = \"ed.lde_avg.median_px\"\nmax = 1000.0\n").unwrap();
    std::fs::write(r.join("strict.toml"), "[[criterion]]\nmetric = \"es.lde_avg.median_px\"\nmax = 0.0\n").unwrap();
    std::fs::write(r.join("bogus.toml"), "[[criterion]]\nmetric = \"no.such.metric\"\nmax = 1.0\n").unwrap();
    let eval = |crit: &str| {
        rdt(
            &["eval", "--data", "data", "--predictions", "run/predictions", "--out", "run/reports", "--criteria", crit],
            r,
        )
    };
    let pass = eval("loose.toml");
    ok(&pass);
    assert!(String::from_utf8_lossy(&pass.stdout).contains("PASS"));
    assert!(r.join("run/reports/errors_table.csv").exists());

    let fail = eval("strict.toml");
    assert_eq!(fail.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&fail.stdout).contains("FAIL"));

    assert_eq!(eval("bogus.toml").status.code(), Some(2));
}

#[test]
fn train_refuses_a_different_config_in_an_existing_run() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    prepare(r);
    let again = rdt(&["train", "--data", "data", "--out", "run", "--config", "tiny.toml", "--seed", "4", "--quiet"], r);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("different configuration"));
}

#[test]
fn report_writes_overlays() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    prepare(r);
    ok(&rdt(&["report", "--data", "data", "--predictions", "run/predictions", "--out", "run/reports"], r));
    let overlays: Vec<_> = std::fs::read_dir(r.join("run/reports/overlays")).unwrap().collect();
    assert_eq!(overlays.len(), 4, "two test sequences, ED and ES each");
}
