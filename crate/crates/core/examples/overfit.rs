//! Overfits the default model on 8 synthetic pairs (2 shapes x 4 crops) and
//! reports the final metrics on those pairs.
//!
//! `cargo run --release --example overfit -- [steps] [out_dir|-] [key=value ...]`
//!
//! Trailing `key=value` pairs override configuration keys, e.g.
//! `model.template_guide=false`.

use std::time::Instant;

use pcc::config::RunConfig;
use pcc::data::overfit_set;
use pcc::train::{evaluate, fit, FitOptions, TrainState};

fn main() -> pcc::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(2000, |s| s.parse().expect("steps"));
    let out_dir = args
        .next()
        .filter(|s| s != "-")
        .map(std::path::PathBuf::from);
    let mut cfg = RunConfig::default();
    cfg.train.total_steps = steps;
    cfg.train.eval_every = 250;
    cfg.train.deterministic = false;
    for kv in args {
        cfg.apply_override(&kv)?;
    }
    let n = cfg.model.dense_points();
    let pairs = overfit_set(&["sphere", "torus"], 4, 2048, n, 0)?;
    let mut state = TrainState::new(cfg.model, cfg.train)?;
    let start = Instant::now();
    let mut stdout = std::io::stdout();
    let log = fit(
        &mut state,
        &pairs,
        FitOptions {
            out_dir,
            progress: Some(&mut stdout),
            stop_at: None,
        },
    )?;
    let report = evaluate(&state.model, &pairs)?;
    print!("{}", report.to_table());
    let at = |step: u64| log.iter().find(|r| r.step == step).map(|r| r.loss());
    println!(
        "loss@50 {:?} final {:?} wall {:.1?}",
        at(50),
        log.last().map(|r| r.loss()),
        start.elapsed()
    );
    Ok(())
}
