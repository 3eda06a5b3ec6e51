//! One episode of an untrained LSTM policy, its per-knob distributions, and
//! the REINFORCE gradient of that episode.
//!
//! cargo run --example policy

use l2o_tune::agent::{policy_step, trajectory_grad, AgentState, KnobDistribution, PolicyParams, StateVariant};
use l2o_tune::trainer::{returns, rollout, RewardMode, Standardizer};
use l2o_tune::{rng, FnObjective, KnobSpec, SearchSpace, TuningVector};

fn main() -> l2o_tune::Result<()> {
    let space = SearchSpace::new(vec![KnobSpec::integer("k", 0, 5), KnobSpec::continuous("c", -1.0, 1.0)])?;
    let s = space.clone();
    let obj = FnObjective::new(space.clone(), move |x: &TuningVector| {
        let y = s.normalize(x).unwrap();
        -(y[0] - 0.4).powi(2) - (y[1] + 0.3).powi(2)
    });
    let params = PolicyParams::init(&space, 8, StateVariant::Recurrent, 3)?;
    println!("{} parameters", params.num_params());

    let mut r = rng::seeded(11);
    let x0 = space.sample_uniform(&mut r);
    let traj = rollout(
        &params,
        &obj,
        5,
        &x0,
        RewardMode::Telescoping,
        &Standardizer::default(),
        &mut r,
    )?;
    println!("x0 {} f {:.4}", traj.x0, traj.f0);
    let mut state = AgentState::zeros(params.hidden);
    for (t, step) in traj.steps.iter().enumerate() {
        let (dist, next) = policy_step(&params, &state, &step.obs)?;
        state = next;
        let summary: Vec<String> = dist
            .knobs
            .iter()
            .map(|k| match k {
                KnobDistribution::Categorical { probs, .. } => format!("p={probs:.2?}"),
                KnobDistribution::Gaussian { mean, log_std } => format!("N({mean:.2}, e^{log_std:.2})"),
            })
            .collect();
        println!(
            "t={} x {} f {:.4} r {:+.4} logp {:.3} [{}]",
            t + 1,
            step.x,
            step.f,
            step.reward,
            step.log_prob,
            summary.join(", ")
        );
    }
    let ret = returns(&traj, 1.0);
    let grad = trajectory_grad(&params, &traj, &ret)?;
    println!("returns {ret:.4?}; gradient norm {:.4}", grad.norm());
    Ok(())
}
