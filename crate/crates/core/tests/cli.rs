use std::path::Path;
use std::process::{Command, Output};

use glmix::io::{default_columns, write_dataset};
use glmix::simgen::{find_scenario, replicate_dataset};

fn glmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glmix")).args(args).output().unwrap()
}

fn write_csv(dir: &Path, id: &str, n: usize) -> String {
    let spec = find_scenario(id).unwrap().with_n(n);
    let data = replicate_dataset(&spec, 5, 0).unwrap();
    let path = dir.join(format!("{id}.csv"));
    write_dataset(std::fs::File::create(&path).unwrap(), &data, &default_columns(data.p(), data.q())).unwrap();
    path.to_str().unwrap().to_string()
}

fn report_without_timing(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("wall_time_secs");
    v
}

#[test]
fn test_command_is_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_csv(dir.path(), "normal-s1-strong", 300);
    let mut reports = Vec::new();
    for (k, threads) in ["1", "3"].iter().enumerate() {
        let out = dir.path().join(format!("r{k}.json"));
        let o = glmix(&[
            "test", "--input", &csv, "--response", "y", "--x", "x1,x2", "--z", "z1", "--family", "normal", "--m0", "1",
            "--restarts", "3", "--mc-draws", "2000", "--seed", "42", "--threads", threads, "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("p-value"));
        reports.push(report_without_timing(&out));
    }
    assert_eq!(reports[0], reports[1]);
    assert!(reports[0]["pvalue"].as_f64().unwrap() < 0.01);
}

#[test]
fn json_goes_to_stdout_without_out() {
    let o = glmix(&["scenarios"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 28);
    assert!(String::from_utf8_lossy(&o.stderr).contains("tree-s1"));
}

#[test]
fn sequential_and_predict_run() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_csv(dir.path(), "normal-s1-null", 200);
    let o = glmix(&[
        "sequential", "--input", &csv, "--response", "y", "--x", "x1,x2", "--z", "z1", "--family", "normal",
        "--restarts", "2", "--mc-draws", "1000", "--m-max", "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["selected_m"].as_u64().unwrap() >= 1);

    let csv = write_csv(dir.path(), "tree-s3", 200);
    let o = glmix(&["predict", "--input", &csv, "--response", "y", "--x", "x1,x2", "--family", "logit", "--restarts", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["folds"].as_array().unwrap().len(), 5);
}

#[test]
fn simulate_and_tune_accept_scenarios() {
    let o = glmix(&["simulate", "normal-s1-strong", "--reps", "3", "--n", "200", "--mc-draws", "1000", "--restarts", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["reps"], 3);

    let o = glmix(&["tune", "normal-s1-null", "--reps", "10", "--n", "100", "--c-grid", "1,3"]);
    assert_eq!(o.status.code(), Some(2), "tuning needs enough replicates");
}

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.csv");
    let base = ["--response", "y", "--x", "a", "--family", "logit"];
    let run = |input: &str| {
        let mut args = vec!["test", "--input", input];
        args.extend_from_slice(&base);
        glmix(&args)
    };
    assert_eq!(run(missing.to_str().unwrap()).status.code(), Some(1));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "y,a\n1,2\n0,oops\n").unwrap();
    let o = run(bad.to_str().unwrap());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 2"));

    let sep = dir.path().join("sep.csv");
    std::fs::write(&sep, "y,a\n1,1\n1,2\n1,3\n1,4\n").unwrap();
    assert_eq!(run(sep.to_str().unwrap()).status.code(), Some(4));

    assert_eq!(glmix(&["simulate", "normal-s1-null", "--reps", "0"]).status.code(), Some(2));
    let o = glmix(&["simulate", "no-such-scenario"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("normal-s1-null"));
    assert_eq!(glmix(&["test", "--bogus"]).status.code(), Some(2));
}
