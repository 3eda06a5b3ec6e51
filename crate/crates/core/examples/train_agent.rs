//! Trains the policy on the one-knob tiny fixture, saves the checkpoint, and
//! deploys it from every start point.
//!
//! cargo run --example train_agent

use l2o_tune::agent::Checkpoint;
use l2o_tune::bench::fixture::{grid_max, FixtureId};
use l2o_tune::trainer::{train_with_progress, tune};
use l2o_tune::{rng, Objective, TuningVector};

fn main() -> l2o_tune::Result<()> {
    let id = FixtureId::Tiny1x8;
    let obj = id.build(42)?;
    let (xmax, fmax) = grid_max(&obj)?;
    println!("grid maximum f{xmax} = {fmax:.4}");

    let config = id.train_config(42);
    let out = train_with_progress(obj.space(), &obj, &config, |p| {
        if p.update % 50 == 0 {
            println!("update {:>3}: mean best-f {:.4}", p.update, p.mean_best_f);
        }
    })?;

    let path = std::env::temp_dir().join("l2o_tiny_checkpoint.json");
    out.best.save(&path)?;
    let ckpt = Checkpoint::load(&path)?;
    let mut r = rng::seeded(1);
    for start in 0..8 {
        let x0 = TuningVector(vec![start as f64]);
        let (x, f, _) = tune(&ckpt, &obj, config.episode_length, &x0, &mut r)?;
        println!("from {x0}: best {x} f {f:.4}");
    }
    Ok(())
}
