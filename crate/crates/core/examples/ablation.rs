//! Trains the full model and the two ablations (no template fusion, no
//! correspondence pooling) on the overfit set and compares final metrics.
//!
//! `cargo run --release --example ablation -- [steps]`

use pcc::data::overfit_set;
use pcc::train::{evaluate, fit, FitOptions, TrainConfig, TrainState};
use pcc::ModelConfig;

fn main() -> pcc::Result<()> {
    let steps = std::env::args()
        .nth(1)
        .map_or(300, |s| s.parse().expect("steps"));
    let base = ModelConfig::default();
    let data = overfit_set(&["sphere", "torus"], 4, 2048, base.dense_points(), 0)?;
    let variants = [
        ("full", base.clone()),
        (
            "no template guide",
            ModelConfig {
                template_guide: false,
                ..base.clone()
            },
        ),
        (
            "no corres pooling",
            ModelConfig {
                corres_pooling: false,
                ..base
            },
        ),
    ];
    println!(
        "{:<20} {:>10} {:>10} {:>8}",
        "variant", "CD-l1", "CD-l2", "F@1%"
    );
    for (name, model) in variants {
        let train = TrainConfig {
            total_steps: steps,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(model, train)?;
        fit(&mut state, &data, FitOptions::default())?;
        let r = evaluate(&state.model, &data)?;
        println!(
            "{name:<20} {:>10.5} {:>10.6} {:>8.4}",
            r.cd_l1, r.cd_l2, r.fscore
        );
    }
    Ok(())
}
