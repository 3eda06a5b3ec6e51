//! Powell (default and budget-matched), TPE and random search on a
//! two-knob integer bump, against the exhaustive optimum.
//!
//! cargo run --example baselines

use l2o_tune::baselines::{powell, random_search, tpe, BaselineBudget, TpeConfig};
use l2o_tune::bench::fixture::grid_max;
use l2o_tune::surrogate::{Aggregation, DeviceProfile, GroundTruthObjective};
use l2o_tune::{rng, KnobSpec, SearchSpace, TuningVector};

fn main() -> l2o_tune::Result<()> {
    let space = SearchSpace::new(vec![KnobSpec::integer("a", 0, 31), KnobSpec::integer("b", 0, 31)])?;
    let bump = |id: &str, at: [f64; 2], amplitude, width| DeviceProfile {
        id: id.into(),
        optimum: TuningVector(at.to_vec()),
        amplitude,
        width,
        noise_std: 0.0,
        n_rows: 1,
    };
    let devices = vec![
        bump("wide", [8.0, 20.0], 0.6, 0.6),
        bump("sharp", [25.0, 6.0], 1.0, 0.15),
    ];
    let obj = GroundTruthObjective::new(space.clone(), devices, Aggregation::Mean)?;
    let (xmax, fmax) = grid_max(&obj)?;
    println!("grid maximum f{xmax} = {fmax:.4}");

    let x0 = space.sample_uniform(&mut rng::seeded(5));
    let budget = BaselineBudget::evaluations(51);
    let runs = [
        ("powell_default", powell(&obj, &x0, &BaselineBudget::powell_default())?),
        ("powell_budget", powell(&obj, &x0, &budget)?),
        ("tpe", tpe(&obj, &budget, &TpeConfig::default(), Some(&x0))?),
        ("random", random_search(&obj, &budget, &mut rng::seeded(5), Some(&x0))?),
    ];
    for (name, res) in runs {
        println!(
            "{name:<15} best f{} = {:.4} after {:>4} evaluations ({:.2} ms)",
            res.best_x,
            res.best_f,
            res.evaluations,
            res.seconds * 1e3
        );
    }
    Ok(())
}
