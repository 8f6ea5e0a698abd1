use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skillscope::attention::{AttentionConfig, FusionConfig};
use skillscope::autodiff::{AdamConfig, Tape, Tensor};
use skillscope::backbone::BackboneConfig;
use skillscope::model::{prepare_all, ModelConfig, PreparedSession};
use skillscope::synth::{generate, GeneratorConfig};
use skillscope::training::{
    fit, init_rng, sord_targets, split_and_cv, train_prepared, CvConfig, SearchGrid, TrainConfig,
};
use skillscope::{RunConfig, SkillModel};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { hidden_dim: 3, num_layers: 2, dropout: 0.0, ..Default::default() },
        attention: AttentionConfig { heads: 1, ..Default::default() },
        fusion: FusionConfig { hidden: vec![4], ..Default::default() },
        standardize_frames: false,
    }
}

fn two_frame_session() -> PreparedSession {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut globals = [0.0; 19];
    globals.iter_mut().for_each(|g| *g = rng.random_range(0.0..1.0));
    PreparedSession {
        session_id: "toy".into(),
        fps: 30.0,
        features: Tensor::matrix(150, 2, (0..300).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        globals,
        score: Some(7),
    }
}

fn synthetic(n: usize, seed: u64) -> (RunConfig, Vec<PreparedSession>) {
    let cfg = RunConfig::default().with_seed(seed);
    let set = generate(&GeneratorConfig { n_sessions: n, ..cfg.synth.clone() }).unwrap();
    let data = prepare_all(set.dataset.sessions(), &cfg.preprocess, &cfg.globals).unwrap();
    (cfg, data)
}

#[test]
fn zero_epochs_leave_initialization() {
    let data = vec![two_frame_session()];
    let cfg = TrainConfig { epochs: 0, seed: 5, ..Default::default() };
    let (model, log) = train_prepared(&data, &tiny_model(), &Default::default(), &Default::default(), &cfg).unwrap();
    let init = SkillModel::init(&tiny_model(), &Default::default(), &Default::default(), &mut init_rng(5)).unwrap();
    assert_eq!(model.store.tensors(), init.store.tensors());
    assert!(log.epoch_losses.is_empty());
}

/// Loss of the (already normalized) toy sample as a function of the parameters.
fn loss_at(model: &SkillModel, x: &Tensor, g: &Tensor, targets: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let vars = model.store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let gv = tape.constant(g.clone());
    let out = model
        .forward(&mut tape, &vars, xv, gv, false, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    let l = tape.soft_cross_entropy(out.logits, targets).unwrap();
    tape.value(l).item()
}

#[test]
fn single_step_matches_scripted_adam_trace() {
    let sample = two_frame_session();
    let adam = AdamConfig { lr: 0.05, ..Default::default() };
    let cfg = TrainConfig { epochs: 1, seed: 8, adam, ..Default::default() };
    let init_cfg = tiny_model();

    let mut reference = SkillModel::init(&init_cfg, &Default::default(), &Default::default(), &mut init_rng(8)).unwrap();
    reference.fit_normalization(std::slice::from_ref(&sample));
    let x = reference.normalize_frames(&sample.features).unwrap();
    let g = Tensor::vector(reference.normalize_globals(&sample.globals));
    let targets = sord_targets(7, &cfg.sord).unwrap();

    let (trained, log) = train_prepared(std::slice::from_ref(&sample), &init_cfg, &Default::default(), &Default::default(), &cfg).unwrap();
    assert!((log.epoch_losses[0] - loss_at(&reference, &x, &g, &targets)).abs() < 1e-12);

    // Finite-difference gradient, then the first bias-corrected Adam step:
    // m_hat = g, v_hat = g^2, so delta = -lr * g / (|g| + eps).
    let h = 1e-6;
    let mut probe = reference.clone();
    let mut checked = 0;
    for k in 0..reference.store.len() {
        for i in 0..reference.store.tensors()[k].len() {
            let id = probe.store.tensors()[k].data()[i];
            probe.store.tensors_mut()[k].data_mut()[i] = id + h;
            let up = loss_at(&probe, &x, &g, &targets);
            probe.store.tensors_mut()[k].data_mut()[i] = id - h;
            let down = loss_at(&probe, &x, &g, &targets);
            probe.store.tensors_mut()[k].data_mut()[i] = id;
            let grad = (up - down) / (2.0 * h);
            let delta = trained.store.tensors()[k].data()[i] - id;
            assert!(delta.abs() <= adam.lr * (1.0 + 1e-12));
            if grad.abs() > 1e-5 {
                let want = -adam.lr * grad / (grad.abs() + adam.eps);
                assert!(
                    (delta - want).abs() < 1e-6 * adam.lr,
                    "{}[{i}]: delta {delta} vs scripted {want}",
                    reference.store.names()[k]
                );
                checked += 1;
            }
        }
    }
    assert!(checked > 100, "only {checked} coordinates had a measurable gradient");
}

#[test]
fn training_reduces_loss_on_synthetic_sessions() {
    let (run, data) = synthetic(200, 3);
    let model_cfg = ModelConfig {
        backbone: BackboneConfig { hidden_dim: 8, num_layers: 3, dropout: 0.0, ..Default::default() },
        attention: AttentionConfig { heads: 2, ..Default::default() },
        fusion: FusionConfig { hidden: vec![8], ..Default::default() },
        standardize_frames: true,
    };
    let cfg = TrainConfig {
        epochs: 4,
        accumulate: 16,
        adam: AdamConfig { lr: 0.01, ..Default::default() },
        seed: run.train.seed,
        ..Default::default()
    };
    let mut model = SkillModel::init(&model_cfg, &run.preprocess, &run.globals, &mut init_rng(cfg.seed)).unwrap();
    let log = fit(&mut model, &data, &cfg).unwrap();
    let (first, last) = (log.epoch_losses[0], *log.epoch_losses.last().unwrap());
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn degenerate_learning_rate_is_not_selected() {
    let (run, data) = synthetic(80, 4);
    let model_cfg = ModelConfig {
        backbone: BackboneConfig { hidden_dim: 4, num_layers: 2, dropout: 0.0, ..Default::default() },
        attention: AttentionConfig { heads: 1, ..Default::default() },
        fusion: FusionConfig { hidden: vec![4], ..Default::default() },
        standardize_frames: true,
    };
    let train = TrainConfig { epochs: 15, accumulate: 8, seed: run.train.seed, ..Default::default() };
    let grid = SearchGrid {
        hidden_dim: vec![4],
        num_layers: vec![2],
        heads: vec![1],
        lr: vec![0.0, 0.02],
        alpha: vec![1.0],
        dropout: vec![0.0],
    };
    let cv = CvConfig { seed: run.cv.seed, ..Default::default() };
    let out = split_and_cv(&data, &model_cfg, &run.preprocess, &run.globals, &train, &grid, &cv).unwrap();
    assert_eq!(out.best.lr, 0.02, "grid results: {:?}", out.grid);
    assert_eq!(out.split.test.len(), 24);
    assert_eq!(out.test_report.n, 24);
    assert!(out.test_report.pearson_r > 0.5, "test r {}", out.test_report.pearson_r);
}
