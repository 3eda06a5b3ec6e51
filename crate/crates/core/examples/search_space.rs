//! Building a knob space, validating points and mapping them to the
//! normalized cube the policy and surrogates work in.
//!
//! cargo run --example search_space

use l2o_tune::{rng, KnobSpec, SearchSpace, TuningVector};

fn main() -> l2o_tune::Result<()> {
    let space = SearchSpace::new(vec![
        KnobSpec::integer("bias_trim", 0, 15),
        KnobSpec::integer("drive", -4, 4),
        KnobSpec::continuous("vref", 0.6, 1.2),
    ])?;
    println!("{}", serde_json::to_string_pretty(&space).unwrap());
    println!("space hash {}", space.hash());

    let x = TuningVector(vec![7.0, -1.0, 0.9]);
    let y = space.normalize(&x)?;
    println!("{x} -> {y:?} -> {}", space.denormalize(&y)?);

    // Out-of-range normalized values clamp; integers round half away from zero.
    println!(
        "denormalize([1.4, 0.26, -3]) = {}",
        space.denormalize(&[1.4, 0.26, -3.0])?
    );

    for bad in [vec![16.0, 0.0, 1.0], vec![3.5, 0.0, 1.0], vec![1.0, 0.0]] {
        let v = space.violations(&TuningVector(bad.clone()));
        println!(
            "{bad:?}: {}",
            v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
        );
    }

    let mut r = rng::seeded(7);
    for _ in 0..3 {
        println!("sample {}", space.sample_uniform(&mut r));
    }
    Ok(())
}
