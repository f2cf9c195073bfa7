//! Trains a small model for 10 steps in one go and again with a checkpoint
//! round trip after step 4, then compares the final checkpoints byte for byte.

use pcc::checkpoint::Checkpoint;
use pcc::data::overfit_set;
use pcc::train::{fit, FitOptions, TrainConfig, TrainState};
use pcc::ModelConfig;

fn main() -> pcc::Result<()> {
    let data = overfit_set(&["sphere", "torus"], 2, 256, 256, 0)?;
    let train = TrainConfig {
        total_steps: 10,
        base_lr: 1e-3,
        ..TrainConfig::default()
    };
    let model = ModelConfig::tiny();

    let mut whole = TrainState::new(model.clone(), train.clone())?;
    fit(&mut whole, &data, FitOptions::default())?;

    let mut first = TrainState::new(model, train)?;
    fit(
        &mut first,
        &data,
        FitOptions {
            stop_at: Some(4),
            ..FitOptions::default()
        },
    )?;
    let path = std::env::temp_dir().join("pcc-resume-example.ckpt");
    Checkpoint::from_state(&first).write(&path)?;
    let mut resumed = Checkpoint::read(&path)?.train_state()?;
    let rest = fit(&mut resumed, &data, FitOptions::default())?;
    for r in &rest {
        println!("{}", r.to_json());
    }
    let a = Checkpoint::from_state(&whole).to_bytes();
    let b = Checkpoint::from_state(&resumed).to_bytes();
    println!("checkpoint {} bytes, identical: {}", a.len(), a == b);
    Ok(())
}
