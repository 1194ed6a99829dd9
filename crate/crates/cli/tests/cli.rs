//! Exit-code and surface checks for the binary.

use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mvflow")
}

fn tmp(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("mvflow_cli_{}_{}", std::process::id(), name));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn invalid_config_exits_one() {
    let dir = tmp("badcfg");
    let cfg = dir.join("bad.toml");
    std::fs::write(&cfg, "[run]\nm_ladder = [5.0, 2.0]\n").unwrap();
    let out = Command::new(bin())
        .args(["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("m_ladder"), "stderr: {err}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn unknown_family_exits_one_with_field_path() {
    let dir = tmp("badfam");
    let cfg = dir.join("bad.toml");
    std::fs::write(&cfg, "[coefficients]\nfamily = \"mystery\"\n").unwrap();
    let out = Command::new(bin())
        .args(["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("coefficients.family"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn zero_family_simulate_succeeds_with_clean_manifest() {
    let dir = tmp("zero");
    let cfg = dir.join("run.toml");
    std::fs::write(
        &cfg,
        "[coefficients]\nfamily = \"zero\"\n\n[time]\nn_steps = 50\n\n[grid]\npoints = 11\n\n[ensemble]\nreplicas = 8\n",
    )
    .unwrap();
    let out_dir = dir.join("out");
    let out = Command::new(bin())
        .args(["simulate", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(out_dir.join("run_manifest.toml")).unwrap();
    assert!(manifest.contains("\"flow.diverged_replicas\" = 0"));
    // Constant state over all knots for the zero family.
    let field = std::fs::read_to_string(out_dir.join("flow_field.tsv")).unwrap();
    let mut lines = field.lines();
    let header = lines.next().unwrap();
    let xi = header.split('\t').position(|c| c == "x0").unwrap();
    let pi = header.split('\t').position(|c| c == "phi0").unwrap();
    for line in lines {
        let cells: Vec<&str> = line.split('\t').collect();
        assert_eq!(cells[xi], cells[pi], "state moved for the zero family");
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn converge_requires_three_levels() {
    let dir = tmp("levels");
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, "[experiment]\nlevels = 2\n\n[ensemble]\nreplicas = 8\n").unwrap();
    let out = Command::new(bin())
        .args(["converge", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    std::fs::remove_dir_all(&dir).ok();
}
