use std::path::Path;

use pcc::checkpoint::Checkpoint;
use pcc::data::{overfit_set, SamplePair};
use pcc::train::{
    evaluate, fit, read_log, FitOptions, TrainConfig, TrainState, FINAL_CHECKPOINT,
    LAST_CHECKPOINT, LOG_NAME,
};
use pcc::ModelConfig;

fn data() -> Vec<SamplePair> {
    overfit_set(&["sphere", "torus"], 2, 96, 64, 0).unwrap()
}

fn train(steps: u64) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        base_lr: 1e-3,
        checkpoint_every: 4,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn run(dir: &Path, steps: u64, stop_at: Option<u64>) -> TrainState {
    let mut state = TrainState::new(ModelConfig::tiny(), train(steps)).unwrap();
    fit(
        &mut state,
        &data(),
        FitOptions {
            out_dir: Some(dir.to_path_buf()),
            stop_at,
            ..FitOptions::default()
        },
    )
    .unwrap();
    state
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = run(a.path(), 12, None);
    let sb = run(b.path(), 12, None);
    for name in [LOG_NAME, LAST_CHECKPOINT, FINAL_CHECKPOINT] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs");
    }
    assert_eq!(read_log(&a.path().join(LOG_NAME)).unwrap().len(), 12);
    assert_eq!(
        evaluate(&sa.model, &data()).unwrap(),
        evaluate(&sb.model, &data()).unwrap()
    );
}

#[test]
fn different_seed_changes_the_run() {
    let a = tempfile::tempdir().unwrap();
    run(a.path(), 3, None);
    let mut state = TrainState::new(
        ModelConfig::tiny(),
        TrainConfig {
            seed: 6,
            ..train(3)
        },
    )
    .unwrap();
    fit(&mut state, &data(), FitOptions::default()).unwrap();
    let other = Checkpoint::from_state(&state).to_bytes();
    assert_ne!(
        std::fs::read(a.path().join(FINAL_CHECKPOINT)).unwrap(),
        other
    );
}

#[test]
fn resume_matches_uninterrupted_run() {
    let whole = tempfile::tempdir().unwrap();
    run(whole.path(), 10, None);

    let split = tempfile::tempdir().unwrap();
    let first = run(split.path(), 10, Some(4));
    assert_eq!(first.step, 4);
    let ckpt = Checkpoint::read(&split.path().join(LAST_CHECKPOINT)).unwrap();
    let mut resumed = ckpt.train_state().unwrap();
    fit(
        &mut resumed,
        &data(),
        FitOptions {
            out_dir: Some(split.path().to_path_buf()),
            ..FitOptions::default()
        },
    )
    .unwrap();
    for name in [LOG_NAME, FINAL_CHECKPOINT] {
        let x = std::fs::read(whole.path().join(name)).unwrap();
        let y = std::fs::read(split.path().join(name)).unwrap();
        assert!(x == y, "{name} differs after resume");
    }
}

#[test]
fn no_dead_parameters_in_a_smoke_run() {
    let pairs = data();
    let mut state = TrainState::new(ModelConfig::tiny(), train(50)).unwrap();
    let mut alive = vec![false; state.model.params.len()];
    for step in 1..=50 {
        let item = state.batch_indices(step, pairs.len())[0];
        let seeds = state.seeds.step_seeds(step, 0, true);
        let (_, _, grads) =
            TrainState::sample_gradients(&state.model, &pairs[item], seeds).unwrap();
        for (a, g) in alive.iter_mut().zip(&grads) {
            *a |= g.as_ref().is_some_and(|g| g.iter().any(|v| *v != 0.0));
        }
        state.train_step(&pairs).unwrap();
    }
    let dead: Vec<&str> = state
        .model
        .params
        .iter()
        .zip(&alive)
        .filter(|(_, a)| !**a)
        .map(|((n, _), _)| n)
        .collect();
    assert!(dead.is_empty(), "never received a gradient: {dead:?}");
}

#[test]
fn training_lowers_the_loss() {
    let mut state = TrainState::new(ModelConfig::tiny(), train(60)).unwrap();
    let log = fit(&mut state, &data(), FitOptions::default()).unwrap();
    let head: f64 = log[..5].iter().map(|r| r.loss()).sum();
    let tail: f64 = log[55..].iter().map(|r| r.loss()).sum();
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let pairs = data();
    let samples = pairs.iter().map(|p| {
        (
            p.category.as_str(),
            pcc::metrics::sample_metrics(&p.complete, &p.complete).unwrap(),
        )
    });
    let report = pcc::metrics::MetricsReport::from_samples(samples);
    assert_eq!((report.cd_l1, report.cd_l2, report.fscore), (0.0, 0.0, 1.0));
}
