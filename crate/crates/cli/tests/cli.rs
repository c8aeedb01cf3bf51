use std::fs;
use std::process::{Command, Output};

fn dircol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dircol")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn unknown_subcommand_is_usage_error() {
    assert_eq!(dircol(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dircol(&[]).status.code(), Some(2));
    assert_eq!(dircol(&["structure", "--method", "xx"]).status.code(), Some(2));
}

#[test]
fn bad_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"n_instances": 0}"#).unwrap();
    let o = dircol(&["crane", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = dircol(&["crane", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn convergence_writes_csv_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("conv.csv");
    let o = dircol(&["convergence", "--d", "2", "--family", "gauss", "--N", "10,20,40,80,160", "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,family,d,N,h,error,slope");
    assert_eq!(lines.len(), 11);
    let col = |l: &str, i: usize| l.split(',').nth(i).unwrap().to_string();
    for l in &lines[1..] {
        let slope: f64 = col(l, 6).parse().unwrap();
        assert!((slope - 4.0).abs() < 0.3, "{l}");
    }
    // PC error below SC error at every N
    for k in 0..5 {
        let sc: f64 = col(lines[1 + k], 5).parse().unwrap();
        let pc: f64 = col(lines[6 + k], 5).parse().unwrap();
        assert!(pc <= sc, "N row {k}: pc {pc} sc {sc}");
    }
}

#[test]
fn convergence_single_n_leaves_slope_empty() {
    let o = dircol(&["convergence", "--d", "2", "--family", "radau", "--N", "10"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().skip(1).all(|l| l.ends_with(',')));
}

#[test]
fn structure_reports_counts_and_flags() {
    let o = dircol(&["structure", "--N", "20", "--d", "2", "--method", "pc", "--beta0"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["n_var"], 184);
    assert_eq!(v["closed_form"]["n_var"], 184);
    assert_eq!(v["closed_form"]["n_constraints"], 212);
    assert_eq!(v["closed_form"]["jac_nnz"], 1128);
    assert_eq!(v["assumption_violated"], false);
    // exit status follows the match flag
    let expected = if v["match"] == true { 0 } else { 1 };
    assert_eq!(o.status.code(), Some(expected));

    let o = dircol(&["structure", "--method", "pc"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["assumption_violated"], true);
    assert_eq!(v["beta"], 0.1);
}

#[test]
fn structure_writes_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.json");
    dircol(&["structure", "--method", "sc", "--family", "gauss", "--d", "3", "--N", "5", "--output", out.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["family"], "gauss");
    assert_eq!(v["N"], 5);
    assert_eq!(v["d"], 3);
}

fn small_config(dir: &std::path::Path) -> String {
    let cfg = dir.join("cfg.json");
    fs::write(
        &cfg,
        r#"{"instances": [{"r0": 0.0, "theta0": 0.0}, {"r0": 1.0, "theta0": 0.3}, {"r0": -2.5, "theta0": -0.9}],
            "configs": [{"method": "sc", "family": "gauss", "d": 2}, {"method": "pc", "family": "gauss", "d": 2}]}"#,
    )
    .unwrap();
    cfg.to_str().unwrap().to_string()
}

#[test]
fn crane_writes_rows_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("runs.csv");
    let o = dircol(&["crane", "--config", &cfg, "--output", out.to_str().unwrap()]);
    assert!(matches!(o.status.code(), Some(0) | Some(1)));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "instance,method,d,family,objective,error,iterations,ms_per_iter,status");
    assert_eq!(lines.len(), 1 + 3 + 6);
    assert!(lines[1..].iter().all(|l| l.ends_with(",optimal")));
    let summary = fs::read_to_string(dir.path().join("runs_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.starts_with("method,d,family,geomean_abs_error,mean_ms_per_iter"));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("PASS solved sc-gauss-2"), "{stderr}");
}

#[test]
fn crane_body_is_reproducible_modulo_timing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"configs": [{"method": "pc", "family": "radau", "d": 2}]}"#).unwrap();
    let run = |seed: &str| {
        let o = dircol(&["crane", "--config", cfg.to_str().unwrap(), "--n-instances", "4", "--seed", seed]);
        stdout(&o)
            .lines()
            .map(|l| {
                let mut f: Vec<&str> = l.split(',').collect();
                f[7] = "";
                f.join(",")
            })
            .collect::<Vec<_>>()
    };
    let a = run("11");
    assert_eq!(a.len(), 1 + 4 + 4);
    assert_eq!(a, run("11"));
    assert_ne!(a, run("12"));
}

#[test]
fn bench_points_parse() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("pareto.csv");
    let o = dircol(&["bench", "--config", &cfg, "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "label,log10_abs_error,ms_per_iter");
    assert_eq!(lines.len(), 1 + 6);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        assert!(f[0] == "sc-gauss-2" || f[0] == "pc-gauss-2");
        assert!(f[1].parse::<f64>().unwrap().is_finite());
        assert!(f[2].parse::<f64>().unwrap() >= 0.0);
    }
}
