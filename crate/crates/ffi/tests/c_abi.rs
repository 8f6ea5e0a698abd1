use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use skillscope::attention::{AttentionConfig, FusionConfig};
use skillscope::backbone::BackboneConfig;
use skillscope::model::{prepare_all, ModelConfig};
use skillscope::session::save_sessions;
use skillscope::synth::{generate, GeneratorConfig};
use skillscope::training::{train_prepared, TrainConfig};
use skillscope_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    sessions: PathBuf,
    model: PathBuf,
    expected: Vec<f64>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let set = generate(&GeneratorConfig { n_sessions: 12, seed: 4, ..Default::default() }).unwrap();
    let sessions = dir.path().join("sessions.jsonl");
    save_sessions(&set.dataset, &sessions).unwrap();
    let data = prepare_all(set.dataset.sessions(), &Default::default(), &Default::default()).unwrap();
    let cfg = ModelConfig {
        backbone: BackboneConfig { hidden_dim: 4, num_layers: 2, ..Default::default() },
        attention: AttentionConfig { heads: 1, ..Default::default() },
        fusion: FusionConfig { hidden: vec![4], ..Default::default() },
        standardize_frames: true,
    };
    let train = TrainConfig { epochs: 1, accumulate: 4, ..Default::default() };
    let (model, _) = train_prepared(&data, &cfg, &Default::default(), &Default::default(), &train).unwrap();
    let path = dir.path().join("model.skm");
    model.save(&path).unwrap();
    let expected = data.iter().map(|s| model.predict(s).unwrap().score).collect();
    Fixture { _dir: dir, sessions, model: path, expected }
}

fn c(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(sk_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn version_and_feature_names() {
    let v = unsafe { CStr::from_ptr(sk_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    assert_eq!(sk_global_feature_count(), 19);
    let name = unsafe { CStr::from_ptr(sk_global_feature_name(17)) }.to_str().unwrap();
    assert_eq!(name, "completion_time");
    assert!(sk_global_feature_name(19).is_null());
}

#[test]
fn predictions_match_the_rust_api() {
    let fx = fixture();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(sk_dataset_load(c(&fx.sessions).as_ptr(), true, &mut ds), SkStatus::Ok);
        let mut model = ptr::null_mut();
        assert_eq!(sk_model_load(c(&fx.model).as_ptr(), &mut model), SkStatus::Ok);

        let mut n = 0usize;
        assert_eq!(sk_dataset_len(ds, &mut n), SkStatus::Ok);
        assert_eq!(n, 12);
        for (i, want) in fx.expected.iter().enumerate() {
            let mut score = 0.0;
            assert_eq!(sk_predict(model, ds, i, &mut score), SkStatus::Ok);
            assert_eq!(score, *want);
        }

        let mut frames = 0usize;
        assert_eq!(sk_dataset_frame_count(ds, 0, &mut frames), SkStatus::Ok);
        let mut imp = vec![0.0; frames];
        let mut len = 0usize;
        assert_eq!(sk_temporal_importance(model, ds, 0, imp.as_mut_ptr(), imp.len(), &mut len), SkStatus::Ok);
        assert_eq!(len, frames);
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let mut small = [0.0; 3];
        assert_eq!(
            sk_temporal_importance(model, ds, 0, small.as_mut_ptr(), 3, &mut len),
            SkStatus::BufferTooSmall
        );
        assert_eq!(len, frames);

        let mut g = [0.0; 19];
        assert_eq!(sk_global_features(ptr::null(), ds, 0, g.as_mut_ptr(), 19, &mut len), SkStatus::Ok);
        assert!((g[17] - frames as f64 / 30.0).abs() < 1e-12);

        let (mut phi, mut se, mut base) = ([0.0; 19], [0.0; 19], 0.0);
        assert_eq!(
            sk_shap(model, ds, ds, 0, 200, 1, phi.as_mut_ptr(), se.as_mut_ptr(), 19, &mut len, &mut base),
            SkStatus::Ok
        );
        assert_eq!(len, 19);
        let gap = phi.iter().sum::<f64>() + base - fx.expected[0];
        assert!(gap.abs() < 1.0, "gap {gap}");

        let mut buf = [0 as std::ffi::c_char; 32];
        assert_eq!(sk_dataset_session_id(ds, 2, buf.as_mut_ptr(), buf.len(), &mut len), SkStatus::Ok);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), "synth-0002");
        assert_eq!(sk_dataset_session_id(ds, 2, buf.as_mut_ptr(), 4, &mut len), SkStatus::BufferTooSmall);
        assert_eq!(len, 10);

        sk_model_free(model);
        sk_dataset_free(ds);
    }
}

#[test]
fn errors_are_reported_with_messages() {
    unsafe {
        let mut ds = ptr::null_mut();
        let missing = CString::new("/nonexistent/sessions.jsonl").unwrap();
        assert_eq!(sk_dataset_load(missing.as_ptr(), false, &mut ds), SkStatus::Io);
        assert!(ds.is_null());
        assert!(last_error().contains("/nonexistent/sessions.jsonl"));

        assert_eq!(sk_dataset_load(ptr::null(), false, &mut ds), SkStatus::NullPointer);
        let mut n = 0usize;
        assert_eq!(sk_dataset_len(ptr::null(), &mut n), SkStatus::NullPointer);
        assert!(last_error().contains("dataset"));

        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, "{\"session_id\": 1}\n").unwrap();
        assert_eq!(sk_dataset_load(c(&bad).as_ptr(), false, &mut ds), SkStatus::Parse);
        assert!(last_error().contains(":1:"));

        let fx = fixture();
        assert_eq!(sk_dataset_load(c(&fx.sessions).as_ptr(), false, &mut ds), SkStatus::Ok);
        let mut model = ptr::null_mut();
        assert_eq!(sk_model_load(c(&fx.sessions).as_ptr(), &mut model), SkStatus::Model);
        assert_eq!(sk_model_load(c(&fx.model).as_ptr(), &mut model), SkStatus::Ok);
        let mut score = 0.0;
        assert_eq!(sk_predict(model, ds, 99, &mut score), SkStatus::OutOfRange);
        sk_model_free(model);
        sk_dataset_free(ds);
        sk_dataset_free(ptr::null_mut());
    }
}

/// Compiles a C program against the generated header and static library.
#[test]
fn header_compiles_and_links_from_c() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header_dir = root.join("include");
    assert!(header_dir.join("skillscope.h").exists());
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libskillscope_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include <string.h>
#include "skillscope.h"
int main(void) {
    SkDataset *ds = NULL;
    if (sk_dataset_load("/nonexistent.jsonl", false, &ds) != SK_STATUS_IO) return 1;
    if (ds != NULL || strlen(sk_last_error()) == 0) return 2;
    if (sk_global_feature_count() != 19) return 3;
    printf("%s %s\n", sk_version(), sk_global_feature_name(17));
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let status = std::process::Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let out = std::process::Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status.code());
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        format!("{} completion_time", env!("CARGO_PKG_VERSION"))
    );
}
