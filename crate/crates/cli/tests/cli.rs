use std::path::Path;
use std::process::{Command, Output};

use oescn::data::{save_dataset, Dataset, Provenance};
use oescn::nn::Checkpoint;
use oescn::signal::TrialRecording;

fn oescn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oescn"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = oescn(dir, args);
    assert!(
        out.status.success(),
        "`oescn {}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(dir: &Path, rel: &str) -> String {
    std::fs::read_to_string(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

const SMALL: &str = r#"{ "model": { "fc_sizes": [16, 4] } }"#;

fn small_dataset(dir: &Path) {
    std::fs::write(dir.join("small.json"), SMALL).unwrap();
    ok(dir, &["synth", "--preset", "desk", "--seed", "1", "--trials-per-class", "5", "--samples", "1000", "-o", "d.bin"]);
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(oescn(dir.path(), &["--help"]).status.success());
    for sub in ["synth", "extract", "train", "evaluate", "ablate", "attn-dump"] {
        assert!(oescn(dir.path(), &[sub, "--help"]).status.success(), "{sub} --help");
    }
    assert_ne!(oescn(dir.path(), &["train", "--no-such-flag"]).status.code(), Some(0));
    assert_eq!(oescn(dir.path(), &["synth", "--classes", "0", "-o", "x.bin"]).status.code(), Some(2));
    assert!(!dir.path().join("x.bin").exists());
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a.bin", "b.bin"] {
        ok(d, &["synth", "--preset", "band-structured", "--seed", "9", "--trials-per-class", "2", "--samples", "600", "-o", out]);
    }
    assert_eq!(std::fs::read(d.join("a.bin")).unwrap(), std::fs::read(d.join("b.bin")).unwrap());
    // Sidecars differ only in the output names they list.
    assert_eq!(read(d, "a.bin.json"), read(d, "b.bin.json").replace("b.bin", "a.bin"));
    ok(d, &["synth", "--preset", "band-structured", "--seed", "10", "--trials-per-class", "2", "--samples", "600", "-o", "c.bin"]);
    assert_ne!(std::fs::read(d.join("a.bin")).unwrap(), std::fs::read(d.join("c.bin")).unwrap());
}

#[test]
fn extract_reports_band_layout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    let stdout = ok(d, &["extract", "--data", "d.bin", "-o", "f"]);
    assert!(stdout.contains("P = 70"), "{stdout}");
    assert!(stdout.contains("K = 299"), "{stdout}");
    assert!(stdout.contains("69/65/60/55/50"), "{stdout}");
    let layout = read(d, "f/layout.csv");
    assert!(layout.ends_with("total,,,299,\n"));
    let ck = Checkpoint::load(&d.join("f/features.bin")).unwrap();
    assert_eq!(ck.grids.len(), 20);
    assert_eq!(ck.grid("trial0.s").unwrap().shape(), &[8, 299]);
}

#[test]
fn zero_signal_gives_zero_features() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let trial = |label| TrialRecording {
        samples: vec![0.0; 2 * 1000],
        channels: 2,
        len: 1000,
        rate_hz: 1000.0,
        label,
        subject_id: "zero".into(),
    };
    let ds = Dataset {
        trials: vec![trial(0), trial(1)],
        n_classes: 2,
        channels: 2,
        len: 1000,
        rate_hz: 1000.0,
        subject_id: "zero".into(),
        provenance: Provenance::File,
    };
    save_dataset(&ds, &d.join("z.bin")).unwrap();
    ok(d, &["extract", "--data", "z.bin", "-o", "f"]);
    let ck = Checkpoint::load(&d.join("f/features.bin")).unwrap();
    assert!(ck.grids.iter().all(|(_, g)| g.as_slice().iter().all(|&v| v == 0.0)));
}

#[test]
fn train_writes_fold_rows_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    ok(d, &["train", "--data", "d.bin", "--config", "small.json", "--epochs", "1", "--batch-size", "4", "-o", "run"]);
    let report = read(d, "run/report.csv");
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "variant,fold,n_train,n_validation,accuracy,final_loss");
    assert_eq!(lines.len(), 1 + 10 + 2);
    assert!(lines[1..11].iter().enumerate().all(|(f, l)| l.starts_with(&format!("OESCN,{f},18,2,"))));
    assert!(lines[11].starts_with("OESCN,mean,"));
    assert!(lines[12].starts_with("OESCN,std,"));
    for f in 0..10 {
        assert!(d.join(format!("run/fold{f}.ckpt")).exists());
    }
    let folds = read(d, "run/folds.csv");
    assert_eq!(folds.lines().count(), 21);
    let manifest: serde_json::Value = serde_json::from_str(&read(d, "run/manifest.json")).unwrap();
    assert_eq!(manifest["command"], "train");
}

#[test]
fn ablation_shares_one_fold_plan() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    ok(d, &["ablate", "--data", "d.bin", "--config", "small.json", "--folds", "2", "--epochs", "1", "--batch-size", "4", "--no-checkpoints", "-o", "abl"]);
    let plans: Vec<String> = ["OESCN", "OESCN_a1", "OESCN_a2"].iter().map(|v| read(d, &format!("abl/{v}/folds.csv"))).collect();
    assert!(plans.windows(2).all(|w| w[0] == w[1]));
    let table = read(d, "abl/ablation.csv");
    for v in ["OESCN,", "OESCN_a1,", "OESCN_a2,"] {
        assert_eq!(table.lines().filter(|l| l.starts_with(v)).count(), 4, "{v} rows in\n{table}");
    }
    assert!(!d.join("abl/OESCN/fold0.ckpt").exists());
}

#[test]
fn evaluate_and_attention_dump() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    ok(d, &["train", "--data", "d.bin", "--config", "small.json", "--folds", "2", "--epochs", "1", "--batch-size", "4", "-o", "run"]);
    ok(d, &["evaluate", "--data", "d.bin", "--checkpoint", "run/fold0.ckpt", "-o", "eval"]);
    let eval = read(d, "eval/evaluation.csv");
    assert!(eval.starts_with("variant,fold,n_train,n_validation,accuracy,final_loss\n"));
    assert_eq!(read(d, "eval/predictions.csv").lines().count(), 1 + 10);

    ok(d, &["attn-dump", "--data", "d.bin", "--checkpoint", "run/fold0.ckpt", "--trial", "3", "-o", "attn"]);
    for (i, b) in [69usize, 65, 60, 55, 50].into_iter().enumerate() {
        let m: Vec<Vec<f64>> = read(d, &format!("attn/local{i}.csv"))
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(m.len(), b);
        assert!(m.iter().all(|r| r.len() == b));
        for j in 0..b {
            let sum: f64 = m.iter().map(|r| r[j]).sum();
            assert!((sum - 1.0).abs() < 1e-6, "local{i} column {j} sums to {sum}");
        }
    }
    assert_eq!(read(d, "attn/global.csv").lines().count(), 299);
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("junk.bin"), b"definitely not a dataset").unwrap();
    assert_eq!(oescn(d, &["extract", "--data", "junk.bin", "-o", "f"]).status.code(), Some(3));
    assert_eq!(oescn(d, &["extract", "--data", "missing.bin", "-o", "f"]).status.code(), Some(3));
    small_dataset(d);
    std::fs::write(d.join("bad.json"), r#"{ "nonsense": {} }"#).unwrap();
    assert_eq!(oescn(d, &["train", "--data", "d.bin", "--config", "bad.json", "-o", "r"]).status.code(), Some(2));
    let out = oescn(d, &["train", "--data", "d.bin", "--config", "small.json", "--folds", "2", "--epochs", "3", "--batch-size", "4", "--lr", "1e300", "-o", "r"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
