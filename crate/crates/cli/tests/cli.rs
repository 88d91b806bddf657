use std::path::{Path, PathBuf};
use std::process::Command;

use qfbsde_cli::{run_config, validate, ExperimentConfig, RunManifest, RunOptions};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qfbsde"))
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs().join(name)).unwrap()
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let mut rd = csv::Reader::from_path(path).unwrap();
    let idx = rd
        .headers()
        .unwrap()
        .iter()
        .position(|h| h == name)
        .unwrap();
    rd.records()
        .map(|r| r.unwrap()[idx].parse().unwrap())
        .collect()
}

#[test]
fn minimal_config_gives_unit_surface() {
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out: Some(dir.path().into()),
        ..Default::default()
    };
    let m = run_config(load("minimal.toml"), &opts).unwrap();
    let u = column(&dir.path().join("surface.csv"), "u");
    assert_eq!(u.len(), 18);
    assert!(u.iter().all(|v| (v - 1.0).abs() <= 1e-12), "{u:?}");
    let s = m.solver.unwrap();
    assert!((s.start_value - 1.0).abs() <= 1e-12);
    let listed: Vec<&str> = m.artifacts.iter().map(|a| a.file.as_str()).collect();
    for f in ["convergence.csv", "surface.csv", "nodes.csv"] {
        assert!(listed.contains(&f), "{listed:?}");
    }
    let on_disk = RunManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(on_disk.artifacts, m.artifacts);
}

#[test]
fn binary_run_exits_zero_and_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "run",
            configs().join("minimal.toml").to_str().unwrap(),
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["scenario"], "minimal");
}

fn small_entropic() -> ExperimentConfig {
    let mut c = load("entropic_representation.toml");
    c.grid.steps = 20;
    c.grid.paths = 3000;
    c.study.representation = None;
    c.study.nodes = vec![qfbsde_cli::config::NodeConfig {
        t: 0.5,
        x: vec![0.2],
        m: vec![0.0],
    }];
    c
}

#[test]
fn seeded_runs_are_byte_identical_across_thread_counts() {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut sums = Vec::new();
    for (dir, threads) in dirs.iter().zip([1usize, 1, 3]) {
        let opts = RunOptions {
            seed: Some(42),
            out: Some(dir.path().into()),
            threads,
        };
        let m = run_config(small_entropic(), &opts).unwrap();
        assert_eq!(m.seed, 42);
        sums.push(
            m.artifacts
                .iter()
                .map(|a| (a.file.clone(), a.sha256.clone()))
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(sums[0], sums[1]);
    assert_eq!(sums[0], sums[2]);
    for a in &sums[0] {
        let x = std::fs::read(dirs[0].path().join(&a.0)).unwrap();
        let y = std::fs::read(dirs[2].path().join(&a.0)).unwrap();
        assert_eq!(x, y, "{}", a.0);
    }
}

#[test]
fn invalid_config_exits_two_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(configs().join("minimal.toml"))
        .unwrap()
        .replace("paths = 500", "paths = 0");
    std::fs::write(&path, text).unwrap();
    let out = bin()
        .arg("run")
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "validation");

    std::fs::write(&path, "scenario = 3").unwrap();
    let out = bin().arg("validate").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn memory_budget_breach_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.toml");
    let text = std::fs::read_to_string(configs().join("minimal.toml"))
        .unwrap()
        .replace("dim = 1", "dim = 1\nmemory_budget_mb = 1")
        .replace("paths = 500", "paths = 100000");
    std::fs::write(&path, text).unwrap();
    let out = bin()
        .arg("run")
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "capacity");
}

#[test]
fn validate_reports_hypothesis_and_market_issues() {
    let clean = validate(&load("minimal.toml"));
    assert!(clean.is_clean(), "{clean:?}");
    let unbounded = validate(&load("switching_brownian.toml"));
    assert!(unbounded.is_ok());
    assert!(unbounded.warnings.iter().any(|w| w.contains("H1")));
    let mut c = load("complete_market.toml");
    c.market.as_mut().unwrap().k = 2;
    let r = validate(&c);
    assert!(
        r.errors.iter().any(|e| e.contains("we assume k ≤ d")),
        "{r:?}"
    );

    let out = bin()
        .arg("validate")
        .arg(configs().join("switching_brownian.toml"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["errors"].as_array().unwrap().len(), 0);
    assert_eq!(v["warnings"].as_array().unwrap().len(), 1);
}

#[test]
fn every_shipped_config_validates() {
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let r = validate(&ExperimentConfig::load(&path).unwrap());
        assert!(r.is_ok(), "{}: {r:?}", path.display());
    }
}

#[test]
fn refinement_residual_decreases_across_the_ladder() {
    let mut c = load("bracket_refinement.toml");
    c.grid.steps = 25;
    c.grid.paths = 1000;
    c.study.refinement.as_mut().unwrap().ladder = vec![25, 100, 400];
    let dir = tempfile::tempdir().unwrap();
    let m = run_config(
        c,
        &RunOptions {
            out: Some(dir.path().into()),
            ..Default::default()
        },
    )
    .unwrap();
    let res = column(&dir.path().join("refinement.csv"), "bracket_median");
    assert_eq!(res.len(), 3);
    for w in res.windows(2) {
        assert!(w[1] <= w[0] * 1.1, "{res:?}");
    }
    let slope = m.studies["refinement.bracket_slope"];
    assert!(slope < -0.2, "{slope}");
}

#[test]
fn plotdata_emits_long_format_and_flags_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out: Some(dir.path().into()),
        ..Default::default()
    };
    run_config(load("minimal.toml"), &opts).unwrap();
    let manifest = dir.path().join("manifest.json");
    let target = dir.path().join("plot.csv");
    let out = bin()
        .arg("plotdata")
        .arg(&manifest)
        .arg("--out")
        .arg(&target)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(&target).unwrap();
    assert!(text.starts_with("series,xaxis,x,y\n"));
    let slices: std::collections::BTreeSet<&str> = text
        .lines()
        .filter(|l| l.starts_with("u[t=0.5;"))
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(slices.len(), 3, "{text}");

    std::fs::remove_file(dir.path().join("surface.csv")).unwrap();
    let out = bin().arg("plotdata").arg(&manifest).output().unwrap();
    assert!(!out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "manifest");
}
