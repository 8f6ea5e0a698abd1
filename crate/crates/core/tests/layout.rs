use skillscope::frame::{build_feature_matrix, channel_layout, PreprocessConfig};
use skillscope::globals::{global_feature_names, COMPLETION_TIME_INDEX, INTERHAND_CORRELATION_INDEX};
use skillscope::session::{load_sessions, save_sessions, validate_session, LoadOptions};
use skillscope::synth::{generate, GeneratorConfig};

fn golden(name: &str) -> Vec<String> {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(path).unwrap().lines().map(str::to_owned).collect()
}

#[test]
fn channel_layout_matches_golden_file() {
    assert_eq!(channel_layout(), golden("channel_layout.txt"));
}

#[test]
fn global_feature_names_match_golden_file() {
    let names = global_feature_names();
    assert_eq!(names, golden("global_features.txt"));
    assert_eq!(names[COMPLETION_TIME_INDEX], "completion_time");
    assert_eq!(names[INTERHAND_CORRELATION_INDEX], "interhand_correlation");
}

#[test]
fn saved_sessions_reload_identically_and_featurize_deterministically() {
    let set = generate(&GeneratorConfig { n_sessions: 6, seed: 12, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    save_sessions(&set.dataset, &path).unwrap();
    let back = load_sessions(&path, LoadOptions::default()).unwrap();
    assert_eq!(back, set.dataset);
    let cfg = PreprocessConfig::default();
    for s in back.sessions() {
        assert!(validate_session(s).is_empty());
        let a = build_feature_matrix(s, &cfg).unwrap();
        let b = build_feature_matrix(s, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows(), 150);
        assert_eq!(a.frames(), s.len());
        assert!(a.data().iter().all(|v| v.is_finite()));
    }
}
