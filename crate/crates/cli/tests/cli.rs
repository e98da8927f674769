use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vmf_pmle::io::{read_dataset, read_model};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vmf-pmle"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn spec(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("specs").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn sample_then_fit_recovers_kappa() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("x.csv");
    let model = dir.path().join("m.json");
    let out = run(&["--seed", "11", "--out", s(&data), "sample", "--d", "3", "--kappa", "10", "--mu", "0,0.6,-0.8", "--n", "5000"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["--seed", "1", "--out", s(&model), "fit", "--data", s(&data), "--p", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("pll=") && stdout.contains("iterations=") && stdout.contains("converged="));
    let (mix, meta) = read_model(&model).unwrap();
    let kappa = mix.components()[0].kappa();
    assert!((kappa - 10.0).abs() < 1.0, "kappa = {kappa}");
    assert!((meta.unwrap().psi_n - 1.0 / 5000.0).abs() < 1e-18);
}

#[test]
fn outputs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<PathBuf> = (0..4).map(|i| dir.path().join(format!("f{i}"))).collect();
    for p in &paths[..2] {
        let out = run(&["--seed", "5", "--out", s(p), "sample", "--d", "2", "--kappa", "3", "--n", "100"]);
        assert!(out.status.success());
    }
    assert_eq!(fs::read(&paths[0]).unwrap(), fs::read(&paths[1]).unwrap());
    for p in &paths[2..] {
        let out = run(&["--seed", "9", "--threads", "2", "--out", s(p), "fit", "--data", s(&paths[0]), "--p", "2"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(fs::read(&paths[2]).unwrap(), fs::read(&paths[3]).unwrap());
}

#[test]
fn zeta_penalty_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("x.csv");
    let model = dir.path().join("m.json");
    assert!(run(&["--out", s(&data), "sample", "--d", "2", "--kappa", "4", "--n", "100"]).status.success());
    let out = run(&["--out", s(&model), "fit", "--data", s(&data), "--p", "2", "--psi", "zeta=1.0"]);
    assert!(out.status.success());
    let meta = read_model(&model).unwrap().1.unwrap();
    assert!((meta.psi_n - 0.01).abs() < 1e-15);
}

#[test]
fn labels_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.json");
    fs::write(
        &model,
        r#"{"d": 2, "p": 2, "weights": [0.5, 0.5], "components": [{"mu": [1.0, 0.0], "kappa": 5.0}, {"mu": [0.0, 1.0], "kappa": 1.0}]}"#,
    )
    .unwrap();
    let data = dir.path().join("x.csv");
    let labels = dir.path().join("x.labels");
    let out = run(&["--out", s(&data), "sample", "--model", s(&model), "--n", "30", "--labels", s(&labels)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_dataset(&data, false).unwrap().points.len(), 30);
    let text = fs::read_to_string(&labels).unwrap();
    assert_eq!(text.lines().count(), 30);
    assert!(text.lines().all(|l| l == "0" || l == "1"));
}

#[test]
fn usage_errors_exit_2() {
    let out = run(&["sample", "--d", "2", "--kappa", "1", "--n", "0"]);
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("x.csv");
    assert!(run(&["--out", s(&data), "sample", "--d", "2", "--kappa", "1", "--n", "3"]).status.success());
    let out = run(&["fit", "--data", s(&data), "--p", "4"]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(run(&["fit"]).status.code(), Some(2));
    assert_eq!(run(&["fit", "--data", s(&data), "--p", "1", "--psi", "zeta=-1"]).status.code(), Some(2));
}

#[test]
fn bad_rows_exit_3_and_name_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("x.csv");
    fs::write(&data, "# d=2 n=3\n1,0\n0,1\n0.3,0.3\n").unwrap();
    let out = run(&["fit", "--data", s(&data), "--p", "1"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("row 3") && err.contains("line 4"), "{err}");

    let out = run(&["--out", s(&dir.path().join("m.json")), "fit", "--data", s(&data), "--p", "1", "--renormalize"]);
    assert!(out.status.success());
    let meta = read_model(&dir.path().join("m.json")).unwrap().1.unwrap();
    assert!(meta.renormalized);
}

#[test]
fn simulate_smoke_spec() {
    let dir = tempfile::tempdir().unwrap();
    let start = std::time::Instant::now();
    let out = run(&["--out", s(dir.path()), "simulate", "--spec", s(&spec("smoke.spec"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(start.elapsed().as_secs_f64() < 10.0);
    let csv = fs::read_to_string(dir.path().join("table.csv")).unwrap();
    assert!(csv.starts_with("d,n,replications,failures,statistic,pi1,mu1,mu2,kappa1,kappa2\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(dir.path().join("d2_n200.csv").exists());
    let text = fs::read_to_string(dir.path().join("table.txt")).unwrap();
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn bundled_specs_parse() {
    for name in ["table1_d2.spec", "table1_d3.spec", "table2_d3.spec"] {
        let specs = vmf_pmle::io::read_experiment_specs(&spec(name)).unwrap();
        assert_eq!(specs.len(), 3);
        assert_eq!(specs[0].replications, 500);
    }
    let t1 = &vmf_pmle::io::read_experiment_specs(&spec("table1_d2.spec")).unwrap()[0];
    let cols = t1.column_names();
    assert_eq!(cols, ["pi1", "mu1", "mu2", "kappa1", "kappa2"]);
}

#[test]
fn unknown_spec_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.spec");
    let text = fs::read_to_string(spec("smoke.spec")).unwrap().replace("seed = 1", "seed = 1\nreplicates = 4");
    fs::write(&path, text).unwrap();
    let out = run(&["simulate", "--spec", s(&path)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stderr).unwrap().contains("replicates"));
}

fn trace(args: &[&str]) -> Vec<(u64, f64, f64)> {
    let out = run(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("q,loglik,penalized_loglik"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn degeneracy_traces() {
    let rows = trace(&["degeneracy", "--q-max", "1"]);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].0, 1);

    let rows = trace(&["degeneracy", "--q-max", "10000"]);
    let tail = &rows[rows.len() - 6..];
    assert!(tail.windows(2).all(|w| w[1].1 > w[0].1));

    let rows = trace(&["degeneracy", "--q-max", "100000", "--psi", "zeta=1"]);
    let best = rows
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .2.total_cmp(&b.1 .2))
        .unwrap()
        .0;
    assert!(best < rows.len() - 1);
}

#[test]
fn check_penalty_reports() {
    let out = run(&["check-penalty", "--d", "2"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("C1 pass\nC2 pass\n"));
    let out = run(&["check-penalty", "--d", "2", "--psi", "psi=0"]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("C3 fail"));
}
