use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_zo-dsgt");

fn write_config(dir: &Path, alpha0: f64, reps: usize) -> std::path::PathBuf {
    let path = dir.join("cfg.json");
    let text = format!(
        r#"{{
            "objective": {{"kind": "quadratic", "dim": 3, "condition": 2.0, "center_spread": 0.5, "noise_variance": 0.01, "seed": 4}},
            "topology": {{"n": 4, "p": 0.7, "seed": 1}},
            "algorithm": {{"algorithm": "onepoint_dsgt", "alpha0": {alpha0}, "upsilon1": 0.75, "gamma0": 1.0,
                          "upsilon2": 0.25, "seed": 9, "max_iters": 1500}},
            "stride": 25, "reps": {reps}
        }}"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().unwrap()
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0.5, 1);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--quiet",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["trace.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let header = std::fs::read_to_string(a.join("trace.csv")).unwrap();
    assert!(header.starts_with("k,loss,divergence,consensus,cum_regret\n"));

    let c = dir.path().join("c");
    let o = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        c.to_str().unwrap(),
        "--seed",
        "10",
        "--quiet",
    ]);
    assert!(o.status.success());
    assert_ne!(
        std::fs::read(a.join("trace.csv")).unwrap(),
        std::fs::read(c.join("trace.csv")).unwrap()
    );
}

#[test]
fn invalid_config_exits_2_with_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0.5, 1);
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("\"upsilon1\": 0.75", "\"upsilon1\": 1.5");
    std::fs::write(&cfg, text).unwrap();
    let o = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("upsilon1"));
    assert!(!dir.path().join("o").join("trace.csv").exists());

    let missing = run(&["run", "--config", dir.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn divergence_exits_3_and_keeps_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 1e6, 2);
    let out = dir.path().join("o");
    let o = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("trace.csv").exists());
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["completed_reps"], 0);
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&a, &b] {
        let o = run(&[
            "gen-data",
            "--n-samples",
            "50",
            "--dim",
            "3",
            "--seed",
            "2",
            "--out",
            p.to_str().unwrap(),
            "--quiet",
        ]);
        assert!(o.status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(std::fs::read_to_string(&a).unwrap().starts_with("f0,f1,f2,label\n"));
}
