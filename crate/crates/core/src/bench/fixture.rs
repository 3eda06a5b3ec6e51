//! Built-in synthetic problems. `bump4x16` is the reference tuning problem:
//! four integer knobs with 16 settings each and eight devices, each a noisy
//! Gaussian bump, learned by MLP surrogates and averaged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::rng;
use crate::search_space::{KnobSpec, SearchSpace, TuningVector};
use crate::surrogate::{
    gen_datasets, train_surrogate, Aggregation, DeviceProfile, FamilyConfig, FitConfig, GroundTruthObjective,
    ProfileSet, SurrogateObjective,
};
use crate::trainer::TrainConfig;

pub const FIXTURE_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixtureId {
    /// 4 integer knobs in `[0, 15]`, 8 devices, MLP surrogates, mean aggregation.
    Bump4x16,
    /// 1 integer knob in `[0, 15]`, one noiseless bump.
    Bump1x16,
    /// 1 integer knob in `[0, 7]`, one narrow noiseless bump.
    Tiny1x8,
}

impl FixtureId {
    pub const ALL: [FixtureId; 3] = [FixtureId::Bump4x16, FixtureId::Bump1x16, FixtureId::Tiny1x8];

    pub fn name(self) -> &'static str {
        match self {
            FixtureId::Bump4x16 => "bump4x16",
            FixtureId::Bump1x16 => "bump1x16",
            FixtureId::Tiny1x8 => "tiny1x8",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fixture `{s}`")))
    }

    pub fn space(self) -> SearchSpace {
        let knobs = match self {
            FixtureId::Bump4x16 => (1..=4).map(|i| KnobSpec::integer(format!("k{i}"), 0, 15)).collect(),
            FixtureId::Bump1x16 => vec![KnobSpec::integer("k1", 0, 15)],
            FixtureId::Tiny1x8 => vec![KnobSpec::integer("k1", 0, 7)],
        };
        SearchSpace::new(knobs).expect("fixture spaces are valid")
    }

    /// Device profiles; the optima are placed by `seed`.
    pub fn profiles(self, seed: u64) -> Result<ProfileSet> {
        let space = self.space();
        let mut r = rng::child(seed, &[0]);
        match self {
            FixtureId::Bump4x16 => ProfileSet::random_family(&space, &FamilyConfig::default(), &mut r),
            FixtureId::Bump1x16 | FixtureId::Tiny1x8 => {
                let width = if self == FixtureId::Tiny1x8 { 0.25 } else { 0.3 };
                Ok(ProfileSet {
                    devices: vec![DeviceProfile {
                        id: "dev0".into(),
                        optimum: space.sample_uniform(&mut r),
                        amplitude: 1.0,
                        width,
                        noise_std: 0.0,
                        n_rows: 500,
                    }],
                })
            }
        }
    }

    /// Surrogate training settings used for the fixture.
    pub fn fit_config(seed: u64) -> FitConfig {
        FitConfig {
            seed,
            ..FitConfig::default()
        }
    }

    /// Agent training settings for the fixture. Only the defaults' learning
    /// rate and discount change (plus episode length and update count for the
    /// tiny instance).
    pub fn train_config(self, seed: u64) -> TrainConfig {
        let base = TrainConfig {
            learning_rate: 0.03,
            discount: 0.5,
            seed,
            ..TrainConfig::default()
        };
        match self {
            FixtureId::Tiny1x8 => TrainConfig {
                episode_length: 3,
                total_updates: 300,
                ..base
            },
            _ => base,
        }
    }

    /// Builds the fixture objective: trained surrogates for `bump4x16`, the
    /// exact ground truth for the one-knob fixtures.
    pub fn build(self, seed: u64) -> Result<FixtureObjective> {
        let space = self.space();
        let profiles = self.profiles(seed)?;
        match self {
            FixtureId::Bump4x16 => {
                let data = gen_datasets(&space, &profiles, rng::derive_seed(seed, &[1]))?;
                let (obj, _) = train_surrogate(&space, &data, Aggregation::Mean, &Self::fit_config(seed))?;
                Ok(FixtureObjective::Surrogate(obj))
            }
            _ => Ok(FixtureObjective::GroundTruth(GroundTruthObjective::new(
                space,
                profiles.devices,
                Aggregation::Mean,
            )?)),
        }
    }
}

#[derive(Debug)]
pub enum FixtureObjective {
    Surrogate(SurrogateObjective),
    GroundTruth(GroundTruthObjective),
}

impl Objective for FixtureObjective {
    fn space(&self) -> &SearchSpace {
        match self {
            FixtureObjective::Surrogate(o) => o.space(),
            FixtureObjective::GroundTruth(o) => o.space(),
        }
    }

    fn evaluate(&self, x: &TuningVector) -> Result<f64> {
        match self {
            FixtureObjective::Surrogate(o) => o.evaluate(x),
            FixtureObjective::GroundTruth(o) => o.evaluate(x),
        }
    }

    fn evaluations(&self) -> u64 {
        match self {
            FixtureObjective::Surrogate(o) => o.evaluations(),
            FixtureObjective::GroundTruth(o) => o.evaluations(),
        }
    }
}

/// Exhaustive maximum over an integer space.
pub fn grid_max<O: Objective + ?Sized>(obj: &O) -> Result<(TuningVector, f64)> {
    let grid = obj
        .space()
        .enumerate_grid()
        .ok_or_else(|| Error::Config("grid search needs an all-integer space".into()))?;
    let mut best: Option<(TuningVector, f64)> = None;
    for x in grid {
        let f = obj.evaluate(&x)?;
        if best.as_ref().is_none_or(|b| f > b.1) {
            best = Some((x, f));
        }
    }
    Ok(best.expect("grid is non-empty"))
}
