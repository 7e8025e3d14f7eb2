use std::ffi::CStr;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use glmix_ffi::*;

fn last_error() -> String {
    let p = glmix_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// Two well separated normal groups on an intercept, n = 200.
fn two_groups() -> (Vec<f64>, Vec<f64>) {
    let n = 200;
    let mut y = Vec::with_capacity(n);
    let mut state = 12345u64;
    for i in 0..n {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let u = (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
        y.push(if i % 2 == 0 { 0.0 } else { 4.0 } + u);
    }
    (y, vec![1.0; n])
}

#[test]
fn dataset_and_test_round_trip() {
    let (y, x) = two_groups();
    let mut data = ptr::null_mut();
    let st = unsafe {
        glmix_dataset_new(GlmixFamily::Normal as i32, 1.0, y.as_ptr(), y.len(), x.as_ptr(), 1, ptr::null(), 0, &mut data)
    };
    assert_eq!(st, GlmixStatus::Ok);
    let mut cfg = glmix_test_config_default();
    cfg.restarts = 3;
    cfg.mc_draws = 2000;
    cfg.seed = 7;
    let mut report = ptr::null_mut();
    assert_eq!(unsafe { glmix_run_test(data, 1, &cfg, &mut report) }, GlmixStatus::Ok);

    let (mut stat, mut pval, mut len) = (0.0, 0.0, 0usize);
    unsafe {
        assert_eq!(glmix_report_statistic(report, &mut stat), GlmixStatus::Ok);
        assert_eq!(glmix_report_pvalue(report, &mut pval), GlmixStatus::Ok);
        assert_eq!(glmix_report_weights(report, ptr::null_mut(), 0, &mut len), GlmixStatus::Ok);
    }
    assert!(stat > 10.0 && pval < 0.01, "stat {stat} p {pval}");
    assert!(len >= 2);
    let mut w = vec![0.0; len];
    let mut small = [0.0; 1];
    unsafe {
        assert_eq!(glmix_report_weights(report, small.as_mut_ptr(), 1, &mut len), GlmixStatus::Usage);
        assert_eq!(glmix_report_weights(report, w.as_mut_ptr(), w.len(), &mut len), GlmixStatus::Ok);
    }
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { glmix_report_to_json(report, &mut json) }, GlmixStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["statistic"].as_f64().unwrap().to_bits(), stat.to_bits());
    unsafe {
        glmix_string_free(json);
        glmix_report_free(report);
        glmix_dataset_free(data);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let y = [0.0, 1.0, 2.0];
    let x = [1.0; 3];
    let mut data = ptr::null_mut();
    let st = unsafe { glmix_dataset_new(GlmixFamily::Logit as i32, 1.0, y.as_ptr(), 3, x.as_ptr(), 1, ptr::null(), 0, &mut data) };
    assert_eq!(st, GlmixStatus::Usage);
    assert!(data.is_null());
    assert!(!last_error().is_empty());

    let st = unsafe { glmix_dataset_new(9, 1.0, y.as_ptr(), 3, x.as_ptr(), 1, ptr::null(), 0, &mut data) };
    assert_eq!(st, GlmixStatus::Usage);
    assert!(last_error().contains("family"));

    let st = unsafe { glmix_dataset_new(0, 1.0, ptr::null(), 3, x.as_ptr(), 1, ptr::null(), 0, &mut data) };
    assert_eq!(st, GlmixStatus::NullPointer);

    let mut v = 0.0;
    assert_eq!(unsafe { glmix_report_pvalue(ptr::null(), &mut v) }, GlmixStatus::NullPointer);
    // A successful call clears the message.
    assert_eq!(unsafe { glmix_chibar_pvalue(1.0, [0.5, 0.5].as_ptr(), 2, &mut v) }, GlmixStatus::Ok);
    assert!(glmix_last_error_message().is_null());
}

#[test]
fn nnqp_and_chibar_helpers() {
    // Q = I: the solution is the positive part of w.
    let q = [1.0, 0.0, 0.0, 1.0];
    let w = [1.5, -2.0];
    let (mut v, mut obj) = ([0.0; 2], 0.0);
    assert_eq!(unsafe { glmix_nnqp_solve(q.as_ptr(), 2, w.as_ptr(), v.as_mut_ptr(), &mut obj) }, GlmixStatus::Ok);
    assert_eq!(v, [1.5, 0.0]);
    assert!((obj - 2.25).abs() < 1e-12);

    // Weight one on chi2_1: P(chi2_1 > 3.841459) = 0.05.
    let mut p = 0.0;
    assert_eq!(unsafe { glmix_chibar_pvalue(3.841458820694124, [0.0, 1.0].as_ptr(), 2, &mut p) }, GlmixStatus::Ok);
    assert!((p - 0.05).abs() < 1e-9);
    assert_eq!(unsafe { glmix_chibar_pvalue(1.0, [-0.1].as_ptr(), 1, &mut p) }, GlmixStatus::Usage);
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir().join("libglmix_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library");
        return;
    }
    let dir = tempfile_dir();
    let src = dir.join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "glmix.h"
int main(void) {
    double q[4] = {2.0, 0.0, 0.0, 1.0}, w[2] = {1.0, -1.0}, v[2], obj;
    if (glmix_nnqp_solve(q, 2, w, v, &obj) != GLMIX_STATUS_OK) return 1;
    double y[2] = {0.0, 2.0}, x[2] = {1.0, 1.0};
    GlmixDataset *d = NULL;
    if (glmix_dataset_new(GLMIX_FAMILY_LOGIT, 1.0, y, 2, x, 1, NULL, 0, &d) != GLMIX_STATUS_USAGE) return 2;
    if (glmix_last_error_message() == NULL) return 3;
    printf("%.6f %.6f %s\n", v[0], v[1], glmix_version());
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{:?}", out);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("0.500000 0.000000"));
}

fn tempfile_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("ffi-smoke");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
