//! End-to-end command tests against the built binary.

use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vae-anomaly"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_counts_and_determinism() {
    let t = tempfile::tempdir().unwrap();
    let args = ["synth", "--kind", "blobs", "--n", "600", "--image-size", "32", "--anomaly-rate", "0.25", "--seed", "7"];
    let a = run(t.path(), &[&args[..], &["--out", "a"]].concat());
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert!(stdout(&a).trim().ends_with("manifest.jsonl"));
    let m = std::fs::read_to_string(t.path().join("a/manifest.jsonl")).unwrap();
    assert_eq!(m.matches("\"label\":\"normal\"").count(), 450);
    assert_eq!(m.matches("\"label\":\"anomaly\"").count(), 150);
    assert_eq!(code(&run(t.path(), &[&args[..], &["--out", "b"]].concat())), 0);
    assert_eq!(read_dir_sorted(&t.path().join("a")), read_dir_sorted(&t.path().join("b")));

    let bad = run(t.path(), &["synth", "--kind", "noise", "--out", "c"]);
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("blobs"));
}

#[test]
fn config_defaults_and_strictness() {
    let t = tempfile::tempdir().unwrap();
    let o = run(t.path(), &["config", "--dump-defaults"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["model"]["beta"], 0.01);
    assert_eq!(v["model"]["latent_dim"], 300);
    assert_eq!(v["train"]["learning_rate"], 1e-4);
    assert_eq!(v["train"]["batch_size"], 32);
    assert_eq!(v["train"]["epochs"], 40);
    assert_eq!(v["score"]["L"], 15);

    std::fs::write(t.path().join("bad.json"), r#"{"model": {"latent": 3}}"#).unwrap();
    let o = run(t.path(), &["config", "--check", "bad.json"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("latent"));
    let o = run(t.path(), &["train", "--config", "bad.json", "--manifest", "m.jsonl"]);
    assert_eq!(code(&o), 2);

    std::fs::write(t.path().join("ok.json"), r#"{"train": {"epochs": 2}}"#).unwrap();
    let o = run(t.path(), &["config", "--check", "ok.json"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("\"epochs\": 2"));
}

#[test]
fn help_lists_defaults() {
    let t = tempfile::tempdir().unwrap();
    let train = stdout(&run(t.path(), &["train", "--help"]));
    for d in ["40", "32", "0.0001", "0.01", "300"] {
        assert!(train.contains(&format!("[default: {d}]")), "train help lacks {d}:\n{train}");
    }
    let score = stdout(&run(t.path(), &["score", "--help"]));
    assert!(score.contains("[default: 15]") && score.contains("[default: all]"));
    for cmd in ["synth", "eval", "reconstruct", "config"] {
        assert_eq!(code(&run(t.path(), &[cmd, "--help"])), 0);
    }
}

#[test]
fn missing_manifest_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let o = run(t.path(), &["train", "--manifest", "nowhere/manifest.jsonl"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nowhere/manifest.jsonl"));
}

/// Small corpus and a 2-epoch model trained on it.
fn trained(t: &Path) {
    let o = run(t, &["synth", "--n", "60", "--image-size", "16", "--seed", "1", "--out", "d"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(
        t,
        &[
            "train", "--manifest", "d/manifest.jsonl", "--image-size", "16", "--base-channels", "4", "--latent-dim",
            "4", "--epochs", "2", "--batch-size", "8", "--out", "run",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["final.ckpt", "best.ckpt", "train_log.jsonl"] {
        assert!(t.join("run").join(f).is_file(), "{f}");
    }
}

#[test]
fn score_eval_reconstruct_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let t = t.path();
    trained(t);
    let score = |out: &str| {
        run(t, &["score", "--checkpoint", "run/best.ckpt", "--manifest", "d/manifest.jsonl", "--scores", "all", "-L", "3", "--seed", "5", "--out", out])
    };
    let o = score("s1.csv");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&score("s2.csv")), 0);
    let s1 = std::fs::read_to_string(t.join("s1.csv")).unwrap();
    assert_eq!(s1, std::fs::read_to_string(t.join("s2.csv")).unwrap());
    assert_eq!(s1.lines().next().unwrap().split(',').count(), 7);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(t.join("s1.json")).unwrap()).unwrap();
    assert_eq!(meta["L"], 3);

    let o = run(t, &["score", "--checkpoint", "run/best.ckpt", "--manifest", "d/manifest.jsonl", "--scores", "vae,bogus", "--out", "x.csv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("iwae_reconst"), "{}", stderr(&o));

    let o = run(t, &["eval", "s1.csv", "s2.csv", "--manifest", "d/manifest.jsonl", "--out", "ev"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("s_iwae"));
    let ev: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(t.join("ev/eval.json")).unwrap()).unwrap();
    assert_eq!(ev["note"], "mean over 2 runs");

    let rec = |out: &str| run(t, &["reconstruct", "--checkpoint", "run/final.ckpt", "--manifest", "d/manifest.jsonl", "--n", "3", "--out", out]);
    assert_eq!(code(&rec("g1.ppm")), 0);
    assert_eq!(code(&rec("g2.ppm")), 0);
    let g = std::fs::read(t.join("g1.ppm")).unwrap();
    assert_eq!(g, std::fs::read(t.join("g2.ppm")).unwrap());
    // 2·16 + 2 wide, 3·16 + 2·2 high
    assert!(g.starts_with(b"P6\n34 52\n255\n"));
    assert_eq!(g.len(), b"P6\n34 52\n255\n".len() + 34 * 52 * 3);

    let o = run(t, &["reconstruct", "--checkpoint", "run/final.ckpt", "--manifest", "d/manifest.jsonl", "--n", "500", "--out", "g3.ppm"]);
    assert_eq!(code(&o), 1);

    // an unreadable image is reported, the rest are scored, exit 1
    let m = std::fs::read_to_string(t.join("d/manifest.jsonl")).unwrap();
    let victim = m
        .lines()
        .find(|l| l.contains("test_anomaly"))
        .and_then(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .unwrap()["path"]
        .as_str()
        .unwrap()
        .to_string();
    std::fs::write(t.join("d").join(&victim), b"P6\n16 16\n255\n").unwrap();
    let o = score("s3.csv");
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains(&victim));
    let s3 = std::fs::read_to_string(t.join("s3.csv")).unwrap();
    assert_eq!(s3.lines().count(), s1.lines().count() - 1);
}

#[test]
fn eval_on_handmade_scores() {
    let t = tempfile::tempdir().unwrap();
    let t = t.path();
    let manifest = [
        r#"{"path":"n1.ppm","label":"normal","split":"test_normal"}"#,
        r#"{"path":"n2.ppm","label":"normal","split":"test_normal"}"#,
        r#"{"path":"a1.ppm","label":"anomaly","split":"test_anomaly"}"#,
    ]
    .join("\n");
    std::fs::write(t.join("m.jsonl"), manifest).unwrap();
    std::fs::write(t.join("s.csv"), "image_id,s_vae\nn1.ppm,1.0\nn2.ppm,2.0\na1.ppm,9.0\n").unwrap();
    let o = run(t, &["eval", "s.csv", "--manifest", "m.jsonl", "--out", "ev"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("1.000"));

    for r in 0..5 {
        std::fs::write(t.join(format!("r{r}.csv")), format!("image_id,s_vae\nn1.ppm,{r}\nn2.ppm,2.5\na1.ppm,3.0\n")).unwrap();
    }
    let runs: Vec<String> = (0..5).map(|r| format!("r{r}.csv")).collect();
    let mut args: Vec<&str> = vec!["eval"];
    args.extend(runs.iter().map(String::as_str));
    args.extend(["--manifest", "m.jsonl", "--out", "ev5"]);
    assert_eq!(code(&run(t, &args)), 0);
    let ev: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(t.join("ev5/eval.json")).unwrap()).unwrap();
    assert_eq!(ev["note"], "mean over 5 runs");

    std::fs::write(t.join("neg.csv"), "image_id,s_vae\nn1.ppm,1.0\nn2.ppm,2.0\n").unwrap();
    let o = run(t, &["eval", "neg.csv", "--manifest", "m.jsonl", "--out", "ev2"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("metric"), "{}", stderr(&o));

    std::fs::write(t.join("odd.csv"), "image_id,s_vae\nn1.ppm,1.0\nzz.ppm,2.0\na1.ppm,3.0\n").unwrap();
    let o = run(t, &["eval", "odd.csv", "--manifest", "m.jsonl", "--out", "ev3"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("zz.ppm"));
}
