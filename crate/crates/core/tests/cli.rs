use std::path::Path;
use std::process::{Command, Output};

const EXE: &str = env!("CARGO_BIN_EXE_fairlora");

fn fairlora(args: &[&str]) -> Output {
    Command::new(EXE)
        .args(args)
        .env_remove("FAIRLORA_SEED")
        .output()
        .unwrap()
}

fn write_spec(dir: &Path, strategies: &str, seeds: &str) -> String {
    let spec = format!(
        r#"{{
  "strategies": {strategies},
  "seeds": {seeds},
  "gen": {{"n": 400, "beta": 0.8}},
  "train": {{"lr": 0.001, "epochs": 1, "adv_rounds": 1, "adv_sen_epochs": 1, "adv_task_epochs": 1}},
  "backbone": {{"pretrain_steps": 40}}
}}"#
    );
    let path = dir.join("spec.json");
    std::fs::write(&path, spec).unwrap();
    path.to_str().unwrap().to_string()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn single_cell_run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), r#"["erm"]"#, "[0]");
    let out = dir.path().join("out");
    let o = fairlora(&["run", "--spec", &spec, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let results = String::from_utf8(read(&out.join("results.csv"))).unwrap();
    assert!(results.lines().skip(1).all(|l| l.starts_with("erm,0,")));
    assert!(results.lines().count() > 1);
    for f in [
        "summary.csv",
        "summary.md",
        "spec.json",
        "runs/erm_seed0/manifest.json",
        "runs/erm_seed0/transcript.json",
        "runs/erm_seed0/report.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn identical_spec_gives_identical_csv_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), r#"["erm", "unl", "orth", "adv"]"#, "[0, 1]");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = fairlora(&[
            "run",
            "--spec",
            &spec,
            "--out",
            out.to_str().unwrap(),
            "--format",
            "csv",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["results.csv", "summary.csv", "summary.md"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    for s in ["erm", "unl", "orth", "adv"] {
        let f = format!("runs/{s}_seed1/manifest.json");
        assert_eq!(read(&a.join(&f)), read(&b.join(&f)), "{f}");
    }
}

#[test]
fn markdown_summary_has_exactly_the_table_columns() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), r#"["erm", "orth"]"#, "[0]");
    let o = fairlora(&["run", "--spec", &spec, "--format", "md"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let md = String::from_utf8(o.stdout).unwrap();
    let headers: Vec<&str> = md.lines().filter(|l| l.starts_with("| Strategy")).collect();
    let split = |l: &str| {
        l.trim_matches('|')
            .split('|')
            .map(str::trim)
            .skip(1)
            .map(String::from)
            .collect::<Vec<_>>()
    };
    let thresholded = ["ACC", "BA", "PPV", "TPR", "FPR", "F1"];
    let expected: [Vec<String>; 4] = [
        ["ACC ↑", "BA ↑", "PPV ↑", "TPR ↑", "FPR ↓", "F1 ↑"]
            .map(String::from)
            .to_vec(),
        thresholded
            .iter()
            .map(|m| format!("Δ{m} ↓"))
            .chain(["DP ↓".to_string()])
            .collect(),
        thresholded
            .iter()
            .chain(&["DP"])
            .map(|m| format!("{m} ratio ↑"))
            .collect(),
        [
            "ROC_AUC ↑",
            "PR_AUC ↑",
            "ΔROC_AUC ↓",
            "ΔPR_AUC ↓",
            "ROC_AUC ratio ↑",
            "PR_AUC ratio ↑",
        ]
        .map(String::from)
        .to_vec(),
    ];
    assert_eq!(headers.len(), 4, "{md}");
    for (h, want) in headers.iter().zip(&expected) {
        assert_eq!(&split(h), want);
    }
    assert!(md.contains("| Erm |") && md.contains("| Orth |"), "{md}");
}

#[test]
fn seed_override_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), r#"["erm"]"#, "[0, 1, 2]");
    let out = dir.path().join("out");
    let o = Command::new(EXE)
        .args(["run", "--spec", &spec, "--out", out.to_str().unwrap()])
        .env("FAIRLORA_SEED", "5")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("runs/erm_seed5").exists());
    assert!(!out.join("runs/erm_seed0").exists());
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(
        fairlora(&["run", "--spec", missing.to_str().unwrap()]).status.code(),
        Some(8)
    );

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"strategies": [], "seeds": [0]}"#).unwrap();
    let o = fairlora(&["run", "--spec", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("spec"));

    let wide = dir.path().join("wide.json");
    std::fs::write(&wide, r#"{"gen": {"features": 12}, "seeds": [0]}"#).unwrap();
    assert_eq!(
        fairlora(&["run", "--spec", wide.to_str().unwrap()]).status.code(),
        Some(4)
    );

    let scores = dir.path().join("scores.csv");
    std::fs::write(&scores, "score,label,group\n0.9,1,0\n0.2,0,0\n").unwrap();
    let o = fairlora(&["eval", "--scores", scores.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    let transcript = dir.path().join("t.json");
    std::fs::write(&transcript, "{").unwrap();
    assert_ne!(
        fairlora(&["audit", "--transcript", transcript.to_str().unwrap()])
            .status
            .code(),
        Some(0)
    );
}

#[test]
fn gen_data_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen.json");
    std::fs::write(&gen, r#"{"n": 200}"#).unwrap();
    let out = dir.path().join("data");
    let o = fairlora(&[
        "gen-data",
        "--spec",
        gen.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let header = String::from_utf8(read(&out.join("sd_train.csv"))).unwrap();
    let header = header.lines().next().unwrap();
    assert!(header.ends_with(",label") && header.starts_with("feature_0,"));
    assert!(out.join("co_train.csv").exists() && out.join("eval_sidecar.json").exists());

    let scores = dir.path().join("scores.csv");
    std::fs::write(&scores, "score,label,group\n0.9,1,0\n0.2,0,0\n0.7,1,1\n0.6,0,1\n").unwrap();
    let o = fairlora(&["eval", "--scores", scores.to_str().unwrap(), "--format", "csv"]);
    assert!(o.status.success());
    let csv = String::from_utf8(o.stdout).unwrap();
    assert!(csv.contains("diff_FPR,1,5"), "{csv}");
    assert!(csv.contains("ACC,0.75,"), "{csv}");
}
