#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skillscope::attention::{AttentionConfig, FusionConfig};
use skillscope::backbone::BackboneConfig;
use skillscope::explain::{
    exact_shapley, explain_global, shap_sampling, temporal_report, ShapConfig, TemporalConfig,
};
use skillscope::model::{prepare_all, ModelConfig};
use skillscope::session::{BoundingBox, FrameObservation, HandPose, ObjectClass, SessionRecording, SimulatorKind};
use skillscope::synth::{generate, GeneratorConfig};
use skillscope::training::{train_prepared, TrainConfig};
use skillscope::SkillModel;

fn background(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

const CFG: ShapConfig = ShapConfig { n_samples: 2000, seed: 21 };

#[test]
fn local_accuracy_within_three_standard_errors() {
    let f = (4usize, |x: &[f64]| (x[0] * x[1]).tanh() + x[2].exp() - 0.3 * x[3] * x[0]);
    let bg = background(4, 25, 1);
    let x = [0.8, -0.4, 0.3, 1.1];
    let est = shap_sampling(&f, &x, &bg, &CFG).unwrap();
    let gap = est.values.iter().sum::<f64>() + est.base_value - est.prediction;
    assert!(gap.abs() <= 3.0 * est.sum_std_error, "gap {gap}, se {}", est.sum_std_error);
    let exact = exact_shapley(&f, &x, &bg).unwrap();
    let exact_gap = exact.iter().sum::<f64>() + est.base_value - est.prediction;
    assert!(exact_gap.abs() < 1e-12);
}

#[test]
fn symmetric_features_get_equal_attributions() {
    let f = (3usize, |x: &[f64]| x[0].sin() + x[1].sin() + x[0] * x[1] + 0.5 * x[2]);
    let mut bg = background(3, 30, 2);
    for r in &mut bg {
        r[1] = r[0];
    }
    let x = [0.7, 0.7, -0.2];
    let exact = exact_shapley(&f, &x, &bg).unwrap();
    assert!((exact[0] - exact[1]).abs() < 1e-12);
    let est = shap_sampling(&f, &x, &bg, &CFG).unwrap();
    let se = (est.std_errors[0].powi(2) + est.std_errors[1].powi(2)).sqrt();
    assert!((est.values[0] - est.values[1]).abs() <= 3.0 * se);
}

#[test]
fn ignored_feature_gets_zero() {
    let f = (3usize, |x: &[f64]| x[0] * x[1] + x[0].cos());
    let bg = background(3, 20, 3);
    let x = [0.4, -0.9, 0.6];
    assert_eq!(exact_shapley(&f, &x, &bg).unwrap()[2], 0.0);
    let est = shap_sampling(&f, &x, &bg, &CFG).unwrap();
    assert!(est.values[2].abs() <= 3.0 * est.std_errors[2]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sampling_agrees_with_exact_on_random_quadratics(
        coef in prop::collection::vec(-1.0f64..1.0, 9),
        x in prop::collection::vec(-1.0f64..1.0, 3),
        seed in 0u64..1000,
    ) {
        let f = (3usize, move |z: &[f64]| {
            let mut v = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    v += coef[i * 3 + j] * z[i] * z[j];
                }
            }
            v
        });
        let bg = background(3, 10, seed);
        let exact = exact_shapley(&f, &x, &bg).unwrap();
        let est = shap_sampling(&f, &x, &bg, &ShapConfig { n_samples: 4000, seed }).unwrap();
        for i in 0..3 {
            // 4 SE keeps the family-wise false-alarm rate over 72 comparisons low.
            prop_assert!((est.values[i] - exact[i]).abs() <= 4.0 * est.std_errors[i] + 1e-12);
        }
    }
}

fn tiny_trained() -> (SkillModel, Vec<skillscope::model::PreparedSession>) {
    let gen = GeneratorConfig { n_sessions: 24, seed: 5, ..Default::default() };
    let set = generate(&gen).unwrap();
    let data = prepare_all(set.dataset.sessions(), &Default::default(), &Default::default()).unwrap();
    let cfg = ModelConfig {
        backbone: BackboneConfig { hidden_dim: 4, num_layers: 2, dropout: 0.0, ..Default::default() },
        attention: AttentionConfig { heads: 2, ..Default::default() },
        fusion: FusionConfig { hidden: vec![4], ..Default::default() },
        standardize_frames: true,
    };
    let train = TrainConfig { epochs: 2, accumulate: 4, ..Default::default() };
    let (model, _) = train_prepared(&data, &cfg, &Default::default(), &Default::default(), &train).unwrap();
    (model, data)
}

#[test]
fn global_attribution_on_a_trained_model_is_locally_accurate() {
    let (model, data) = tiny_trained();
    let a = explain_global(&model, &data[1..], &data[0], &ShapConfig { n_samples: 500, seed: 2 }).unwrap();
    assert_eq!(a.values.len(), 19);
    assert!((a.prediction - model.predict(&data[0]).unwrap().score).abs() < 1e-12);
    let total_se = a.std_errors.iter().map(|s| s * s).sum::<f64>().sqrt();
    let gap = a.values.iter().sum::<f64>() + a.base_value - a.prediction;
    // per-feature SEs bound the sum's SE loosely; contributions are correlated
    assert!(gap.abs() <= 3.0 * 19f64.sqrt() * total_se + 1e-9, "gap {gap}");
}

fn constant_session(frames: usize) -> SessionRecording {
    let mut obs = FrameObservation::default();
    for c in ObjectClass::ALL {
        obs.set_box(c, Some(BoundingBox::new(0.5, 0.5, 0.1, 0.1)));
    }
    let pose = HandPose { keypoints: vec![[0.01, 0.02, 0.3]; 21] };
    obs.left_pose = Some(pose.clone());
    obs.right_pose = Some(pose);
    SessionRecording {
        session_id: "still".into(),
        simulator: SimulatorKind::Suturing,
        fps: 30.0,
        frames: vec![obs; frames],
        expert_score: Some(5),
    }
}

#[test]
fn temporal_report_is_deterministic_and_uniform_on_constant_input() {
    let (model, _) = tiny_trained();
    let s = constant_session(40);
    let a = temporal_report(&s, &model, &TemporalConfig::default()).unwrap();
    let b = temporal_report(&s, &model, &TemporalConfig::default()).unwrap();
    assert_eq!(a, b);
    // zero padding at the sequence ends breaks exact constancy there
    let rf = skillscope::backbone::receptive_field(&model.config.backbone);
    let edge = rf / 2;
    let interior = &a.importance[edge..40 - edge];
    let first = interior[0];
    assert!(interior.iter().all(|w| (w - first).abs() < 1e-12));
    assert!((a.importance.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
