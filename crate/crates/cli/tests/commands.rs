use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cmc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmc"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn summary(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 1, "one summary line: {stdout}");
    serde_json::from_str(lines[0]).unwrap()
}

fn small_world(dir: &Path) {
    let out = cmc(
        &["gen-world", "--out-dir", "w", "--seed", "4", "--images", "60", "--sentences", "80", "--eval-images", "20", "--feature-dim", "8"],
        dir,
    );
    summary(&out);
}

#[test]
fn gallery_header_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    small_world(dir.path());
    let s = summary(&cmc(
        &["build-gallery", "--detections", "w/detections.jsonl", "--out", "g.jsonl", "--min-conf", "0.7", "--max-per-concept", "3"],
        dir.path(),
    ));
    assert_eq!(s["config"]["min_confidence"], 0.7);
    let text = std::fs::read_to_string(dir.path().join("g.jsonl")).unwrap();
    let header: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(header.to_string().contains("0.7"), "{header}");
    assert!(s["entries"].as_u64().unwrap() <= 3 * s["concepts"].as_u64().unwrap());
}

#[test]
fn augment_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    small_world(dir.path());
    summary(&cmc(&["build-gallery", "--detections", "w/detections.jsonl", "--out", "g.jsonl"], dir.path()));
    let run = |seed: &str, out: &str| {
        summary(&cmc(
            &["augment", "--corpus", "w/corpus.txt", "--gallery", "g.jsonl", "--pairs", "w/pairs.jsonl", "--out", out, "--seed", seed],
            dir.path(),
        ));
        std::fs::read(dir.path().join(out)).unwrap()
    };
    let a = run("9", "a.jsonl");
    let b = run("9", "b.jsonl");
    let c = run("10", "c.jsonl");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn pretrain_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    small_world(dir.path());
    std::fs::write(dir.path().join("run.cfg"), "# small run\nsteps = 50\nhidden = 16\nheads = 2\n").unwrap();
    let s = summary(&cmc(
        &[
            "pretrain", "--corpus", "w/corpus.txt", "--detections", "w/detections.jsonl", "--pairs", "w/pairs.jsonl",
            "--out", "ck.txt", "--metrics", "m.jsonl", "--config", "run.cfg", "--steps", "3", "--set", "text_batch=4",
            "--set", "image_batch=4",
        ],
        dir.path(),
    ));
    // Flags win over the file.
    assert_eq!(s["steps"], 3);
    assert_eq!(s["config"]["model"]["hidden"], 16);
    assert_eq!(s["config"]["train"]["text_batch"], 4);
    let metrics = std::fs::read_to_string(dir.path().join("m.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    for line in metrics.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        for key in ["step", "total", "mlm", "cl", "mtm"] {
            assert!(!v[key].is_null(), "{key} missing from {line}");
        }
    }
    let e = summary(&cmc(
        &["eval-retrieval", "--checkpoint", "ck.txt", "--world", "w/world.json", "--batches", "2", "--batch-size", "8", "--probes", "10"],
        dir.path(),
    ));
    let r1 = e["r1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r1));
    assert!(e["r5"].as_f64().unwrap() >= r1);
}

#[test]
fn grad_check_passes_and_flags_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let s = summary(&cmc(&["grad-check", "--coords", "10"], dir.path()));
    assert_eq!(s["passed"], true);
    let out = cmc(&["grad-check", "--coords", "10", "--corrupt", "layer0.w1"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["worst_tensor"], "layer0.w1");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cmc(&["augment"], dir.path()).status.code(), Some(2));
    assert_eq!(cmc(&["no-such-command"], dir.path()).status.code(), Some(2));
    let out = cmc(&["build-gallery", "--detections", "missing.jsonl", "--out", "g.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));
    assert!(out.stdout.is_empty());
    let out = cmc(&["pretrain", "--corpus", "c", "--detections", "d", "--out", "o", "--metrics", "m", "--set", "bogus=1"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}
