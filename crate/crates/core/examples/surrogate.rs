//! Synthetic device measurements, per-device MLP fits, and the aggregated
//! surrogate objective.
//!
//! cargo run --example surrogate

use l2o_tune::surrogate::{
    gen_datasets, train_surrogate, Aggregation, FamilyConfig, FitConfig, GroundTruthObjective, ProfileSet,
};
use l2o_tune::{rng, KnobSpec, Objective, SearchSpace, TuningVector};

fn main() -> l2o_tune::Result<()> {
    let space = SearchSpace::new(vec![KnobSpec::integer("k1", 0, 15), KnobSpec::integer("k2", 0, 15)])?;
    let family = FamilyConfig {
        n_devices: 4,
        n_rows: 600,
        ..FamilyConfig::default()
    };
    let profiles = ProfileSet::random_family(&space, &family, &mut rng::seeded(1))?;
    let datasets = gen_datasets(&space, &profiles, 2)?;
    let fit = FitConfig {
        epochs: 600,
        ..FitConfig::default()
    };
    let (surrogate, reports) = train_surrogate(&space, &datasets, Aggregation::Mean, &fit)?;
    for (p, r) in profiles.devices.iter().zip(&reports) {
        println!(
            "{}: optimum {} amplitude {:.3} width {:.3} -> training rmse {:.4}",
            p.id, p.optimum, p.amplitude, p.width, r.final_rmse
        );
    }

    let truth = GroundTruthObjective::new(space.clone(), profiles.devices.clone(), Aggregation::Mean)?;
    for x in [[0.0, 0.0], [8.0, 8.0], [15.0, 3.0]] {
        let x = TuningVector(x.to_vec());
        println!(
            "f{x}: surrogate {:.4}, ground truth {:.4}",
            surrogate.evaluate(&x)?,
            truth.evaluate(&x)?
        );
    }
    println!("{} surrogate evaluations", surrogate.evaluations());
    Ok(())
}
