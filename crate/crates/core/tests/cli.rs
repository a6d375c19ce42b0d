use std::path::Path;
use std::process::{Command, Output};

use mixkvq::io::{write_dump, TensorDump};
use mixkvq::PlantedSpec;

fn mixkvq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixkvq")).args(args).output().unwrap()
}

fn stderr_line(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(text.lines().count(), 1, "diagnostic should be one line: {text:?}");
    text.trim_end().to_owned()
}

const SMALL: [&str; 8] = ["--planted", "16,96,2,2,0", "--group-size", "8", "--residual-len", "32", "--sink-len", "4"];

fn with<'a>(head: &[&'a str], out: &'a str) -> Vec<&'a str> {
    let mut v = head.to_vec();
    v.extend_from_slice(&SMALL);
    v.extend_from_slice(&["--out", out]);
    v
}

fn csv_column(path: &Path, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].to_owned()).collect()
}

#[test]
fn run_full_precision_has_zero_output_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = mixkvq(&with(&["run", "--policy", "full-precision", "--seeds", "3"], out));
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let errs = csv_column(&dir.path().join("report.csv"), "output_error");
    assert_eq!(errs.len(), 3);
    assert!(errs.iter().all(|e| e.parse::<f64>().unwrap() < 1e-9));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["records"].as_array().unwrap().len(), 3);
    assert!(csv_column(&dir.path().join("timing.csv"), "wall_time_s").len() == 3);
}

#[test]
fn compare_run_reports_are_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let out = d.path().to_str().unwrap();
        let res = mixkvq(&with(&["run", "--policy", "salience", "--compare", "error-only", "--seeds", "4"], out));
        assert!(res.status.success());
    }
    for f in ["report.csv", "report.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let labels = csv_column(&a.path().join("report.csv"), "policy_label");
    assert_eq!(labels.iter().filter(|l| *l == "salience").count(), 4);
    assert_eq!(labels.iter().filter(|l| *l == "error-only").count(), 4);
}

#[test]
fn search_writes_plot_ready_frontier() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = mixkvq(&with(&["search", "--grid", "4", "--seeds", "2", "--budget", "2.8"], out));
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let frontier = std::fs::read_to_string(dir.path().join("frontier.csv")).unwrap();
    assert_eq!(frontier.lines().next().unwrap(), "x_b_eff,y_fidelity,tau_bf16,tau_uint4");
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("search.json")).unwrap()).unwrap();
    assert!(json["selected"]["b_eff"].as_f64().unwrap() <= 2.8);
    assert_eq!(json["evaluations"].as_array().unwrap().len(), 10 + 2);
}

#[test]
fn stats_reports_low_correlation_for_disjoint_outliers() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = mixkvq(&["stats", "--planted", "64,512,4,4,0", "--out", out]);
    assert!(res.status.success());
    let header = std::fs::read_to_string(dir.path().join("channel_stats.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), "channel,importance,sensitivity,salience,tier");
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("stats_summary.json")).unwrap()).unwrap();
    assert!(json["pearson_importance_sensitivity"].as_f64().unwrap() < 0.3);
}

#[test]
fn stats_and_run_accept_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let inst = PlantedSpec { dim: 8, tokens: 40, n_outlier_scale: 1, n_outlier_query: 1, overlap: 0 }.generate(2).unwrap().instance;
    let mut dump = TensorDump::new();
    dump.insert_instance("layer0.head0", &inst);
    let path = dir.path().join("t.mkvq");
    write_dump(&dump, &path).unwrap();
    let p = path.to_str().unwrap();
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    assert!(mixkvq(&["stats", "--dump", p, "--section", "layer0.head0", "--out", o]).status.success());
    let res = mixkvq(&["run", "--dump", p, "--group-size", "4", "--residual-len", "8", "--sink-len", "2", "--out", o]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();

    let res = mixkvq(&["run", "--thresholds", "0.5,0.9", "--out", out]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr_line(&res).starts_with("error: invalid-config:"));

    let res = mixkvq(&["run", "--group-size", "0", "--out", out]);
    assert_eq!(res.status.code(), Some(2));
    stderr_line(&res);

    let res = mixkvq(&["run", "--policy", "nonsense", "--out", out]);
    assert_eq!(res.status.code(), Some(2));
    stderr_line(&res);

    let res = mixkvq(&["run", "--no-such-flag"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr_line(&res).starts_with("error: invalid-args:"));

    let res = mixkvq(&["run", "--dump", "/definitely/not/here.mkvq", "--out", out]);
    assert_eq!(res.status.code(), Some(3));
    assert!(stderr_line(&res).starts_with("error: missing-dump:"));

    let res = mixkvq(&["stats", "--dump", "/definitely/not/here.mkvq", "--out", out]);
    assert_eq!(res.status.code(), Some(3));

    let res = mixkvq(&with(&["search", "--grid", "2", "--seeds", "1", "--budget", "1.5"], out));
    assert_eq!(res.status.code(), Some(4));
    assert!(stderr_line(&res).starts_with("error: budget-infeasible:"));

    let bad = dir.path().join("bad.mkvq");
    std::fs::write(&bad, b"XXXX\x01\x00\x00\x00\x00\x00").unwrap();
    let res = mixkvq(&["stats", "--dump", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr_line(&res).starts_with("error: unsupported-format:"));
}

#[test]
fn config_file_drives_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    let out = dir.path().join("out");
    std::fs::write(
        &cfg,
        format!(
            "seeds = 2\nout = {:?}\n[cache]\ngroup_size = 8\nresidual_len = 16\nsink_len = 0\n[source.planted]\ndim = 8\ntokens = 48\nn_outlier_scale = 1\nn_outlier_query = 1\n[task.run]\npolicy = \"fixed-4\"\n",
            out.to_str().unwrap()
        ),
    )
    .unwrap();
    let res = mixkvq(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let labels = csv_column(&out.join("report.csv"), "policy_label");
    assert_eq!(labels, vec!["fixed-4", "fixed-4"]);
    let bits = csv_column(&out.join("report.csv"), "b_eff");
    assert!(bits.iter().all(|b| b == "4"));
}
