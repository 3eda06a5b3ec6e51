//! The environment: per-device neural models aggregated into one objective.

mod mlp;
mod synthetic;

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use mlp::{fit, FitConfig, FitOptimizer, FitReport, Layer, MlpModel};
pub use synthetic::{
    gen_synthetic_device_data, DeviceDataset, DeviceProfile, FamilyConfig, GroundTruthObjective, ProfileSet,
};

use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::rng;
use crate::search_space::{SearchSpace, TuningVector};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Min,
}

impl Aggregation {
    pub fn apply(self, values: &[f64]) -> f64 {
        match self {
            Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Aggregation::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }
}

/// Fits one device model on the normalized knob values of `data`.
pub fn train_device_model(
    data: &DeviceDataset,
    space: &SearchSpace,
    config: &FitConfig,
) -> Result<(MlpModel, FitReport)> {
    data.check(space)?;
    let inputs = data
        .rows
        .iter()
        .map(|(x, _)| space.normalize(x))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<f64> = data.rows.iter().map(|(_, f)| *f).collect();
    fit(&inputs, &targets, config)
}

/// Generates one dataset per profile. Device `i` draws from its own stream
/// `child(seed, [i])`, so the output does not depend on the thread count.
pub fn gen_datasets(space: &SearchSpace, profiles: &ProfileSet, seed: u64) -> Result<Vec<DeviceDataset>> {
    profiles
        .devices
        .par_iter()
        .enumerate()
        .map(|(i, p)| gen_synthetic_device_data(space, p, &mut rng::child(seed, &[i as u64])))
        .collect()
}

/// Trains one model per dataset (in parallel, device `i` seeded with
/// `derive_seed(config.seed, [i])`) and aggregates them.
pub fn train_surrogate(
    space: &SearchSpace,
    datasets: &[DeviceDataset],
    aggregation: Aggregation,
    config: &FitConfig,
) -> Result<(SurrogateObjective, Vec<FitReport>)> {
    if datasets.is_empty() {
        return Err(Error::Config("need at least one device dataset".into()));
    }
    let fitted = datasets
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let cfg = FitConfig {
                seed: rng::derive_seed(config.seed, &[i as u64]),
                ..config.clone()
            };
            train_device_model(d, space, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let (models, reports): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
    Ok((SurrogateObjective::new(space.clone(), models, aggregation)?, reports))
}

/// `f(x)`: the aggregate of all device models evaluated at `normalize(x)`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(try_from = "RawSurrogate", into = "RawSurrogate")]
pub struct SurrogateObjective {
    space: SearchSpace,
    devices: Vec<MlpModel>,
    aggregation: Aggregation,
    counter: AtomicU64,
}

#[derive(Serialize, Deserialize)]
struct RawSurrogate {
    space_hash: String,
    space: SearchSpace,
    aggregation: Aggregation,
    devices: Vec<MlpModel>,
}

impl TryFrom<RawSurrogate> for SurrogateObjective {
    type Error = Error;

    fn try_from(raw: RawSurrogate) -> Result<Self> {
        if raw.space_hash != raw.space.hash() {
            return Err(Error::SchemaMismatch(
                "surrogate space_hash does not match its space".into(),
            ));
        }
        SurrogateObjective::new(raw.space, raw.devices, raw.aggregation)
    }
}

impl From<SurrogateObjective> for RawSurrogate {
    fn from(s: SurrogateObjective) -> Self {
        RawSurrogate {
            space_hash: s.space.hash(),
            space: s.space,
            aggregation: s.aggregation,
            devices: s.devices,
        }
    }
}

impl Clone for SurrogateObjective {
    fn clone(&self) -> Self {
        SurrogateObjective {
            space: self.space.clone(),
            devices: self.devices.clone(),
            aggregation: self.aggregation,
            counter: AtomicU64::new(0),
        }
    }
}

impl PartialEq for SurrogateObjective {
    fn eq(&self, other: &Self) -> bool {
        self.space == other.space && self.devices == other.devices && self.aggregation == other.aggregation
    }
}

impl SurrogateObjective {
    pub fn new(space: SearchSpace, devices: Vec<MlpModel>, aggregation: Aggregation) -> Result<Self> {
        if devices.is_empty() {
            return Err(Error::Config("surrogate needs at least one device model".into()));
        }
        if let Some(m) = devices.iter().find(|m| m.input_dim() != space.dim()) {
            return Err(Error::Dimension {
                expected: space.dim(),
                actual: m.input_dim(),
            });
        }
        Ok(SurrogateObjective {
            space,
            devices,
            aggregation,
            counter: AtomicU64::new(0),
        })
    }

    pub fn devices(&self) -> &[MlpModel] {
        &self.devices
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn aggregate_eval(&self, x: &TuningVector) -> Result<f64> {
        let y = self.space.normalize(x)?;
        let outputs = self.devices.iter().map(|m| m.forward(&y)).collect::<Result<Vec<_>>>()?;
        self.counter.fetch_add(1, Ordering::Relaxed);
        Ok(self.aggregation.apply(&outputs))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&RawSurrogate::from(self.clone()))?;
        std::fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl Objective for SurrogateObjective {
    fn space(&self) -> &SearchSpace {
        &self.space
    }

    fn evaluate(&self, x: &TuningVector) -> Result<f64> {
        self.aggregate_eval(x)
    }

    fn evaluations(&self) -> u64 {
        self.counter.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::search_space::KnobSpec;

    fn constant_model(d: usize, c: f64) -> MlpModel {
        MlpModel::new(vec![
            Layer {
                rows: 1,
                cols: d,
                weights: vec![0.0; d],
                bias: vec![0.0],
            },
            Layer {
                rows: 1,
                cols: 1,
                weights: vec![0.0],
                bias: vec![c],
            },
        ])
        .unwrap()
    }

    fn space1() -> SearchSpace {
        SearchSpace::new(vec![KnobSpec::integer("k", 0, 7)]).unwrap()
    }

    #[test]
    fn aggregation_examples() {
        let s = space1();
        let x: TuningVector = vec![3.0].into();
        let devs = vec![constant_model(1, 1.0), constant_model(1, 3.0)];
        let mean = SurrogateObjective::new(s.clone(), devs.clone(), Aggregation::Mean).unwrap();
        assert_eq!(mean.aggregate_eval(&x).unwrap(), 2.0);
        let min = SurrogateObjective::new(s.clone(), devs, Aggregation::Min).unwrap();
        assert_eq!(min.aggregate_eval(&x).unwrap(), 1.0);

        let m = MlpModel::init(1, &[4], 3).unwrap();
        let single = SurrogateObjective::new(s.clone(), vec![m.clone()], Aggregation::Mean).unwrap();
        assert_eq!(
            single.aggregate_eval(&x).unwrap(),
            m.forward(&s.normalize(&x).unwrap()).unwrap()
        );
    }

    #[test]
    fn invalid_points_are_not_counted() {
        let obj = SurrogateObjective::new(space1(), vec![constant_model(1, 1.0)], Aggregation::Mean).unwrap();
        assert!(obj.aggregate_eval(&vec![8.0].into()).is_err());
        assert_eq!(obj.evaluations(), 0);
        obj.aggregate_eval(&vec![2.0].into()).unwrap();
        assert_eq!(obj.evaluations(), 1);
    }

    #[test]
    fn concurrent_evaluations_are_all_counted() {
        let obj =
            SurrogateObjective::new(space1(), vec![MlpModel::init(1, &[4], 0).unwrap()], Aggregation::Mean).unwrap();
        std::thread::scope(|s| {
            for t in 0..8 {
                let obj = &obj;
                s.spawn(move || {
                    for i in 0..500 {
                        obj.aggregate_eval(&vec![((t + i) % 8) as f64].into()).unwrap();
                    }
                });
            }
        });
        assert_eq!(obj.evaluations(), 4000);
    }

    #[test]
    fn mean_is_permutation_invariant() {
        let s = space1();
        let devs: Vec<MlpModel> = (0..4).map(|i| MlpModel::init(1, &[3], i).unwrap()).collect();
        let mut rev = devs.clone();
        rev.reverse();
        let a = SurrogateObjective::new(s.clone(), devs, Aggregation::Mean).unwrap();
        let b = SurrogateObjective::new(s.clone(), rev, Aggregation::Mean).unwrap();
        for v in 0..8 {
            let x: TuningVector = vec![v as f64].into();
            assert!((a.aggregate_eval(&x).unwrap() - b.aggregate_eval(&x).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(SurrogateObjective::new(space1(), vec![constant_model(2, 0.0)], Aggregation::Mean).is_err());
    }

    #[test]
    fn json_round_trip_and_hash_guard() {
        let obj =
            SurrogateObjective::new(space1(), vec![MlpModel::init(1, &[3], 1).unwrap()], Aggregation::Min).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        obj.save(&p).unwrap();
        assert_eq!(SurrogateObjective::load(&p).unwrap(), obj);

        let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        v["space_hash"] = "deadbeef".into();
        assert!(serde_json::from_value::<SurrogateObjective>(v).is_err());
        assert!(matches!(
            SurrogateObjective::load(&dir.path().join("nope.json")),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn bump_fit_reaches_five_percent_rmse() {
        let space = SearchSpace::new(vec![KnobSpec::integer("k1", 0, 15), KnobSpec::integer("k2", 0, 15)]).unwrap();
        let profile = DeviceProfile {
            id: "d0".into(),
            optimum: vec![10.0, 5.0].into(),
            amplitude: 1.0,
            width: 0.5,
            noise_std: 0.0,
            n_rows: 500,
        };
        let data = gen_synthetic_device_data(&space, &profile, &mut rng::seeded(42)).unwrap();
        let cfg = FitConfig {
            seed: 42,
            ..FitConfig::default()
        };
        let (model, report) = train_device_model(&data, &space, &cfg).unwrap();
        assert!(
            report.final_rmse <= 0.05 * profile.amplitude,
            "rmse = {}",
            report.final_rmse
        );
        assert_eq!(model.train_rmse(), Some(report.final_rmse));
    }

    #[test]
    fn small_step_gradient_descent_is_monotone() {
        let space = SearchSpace::new(vec![KnobSpec::integer("k1", 0, 15), KnobSpec::integer("k2", 0, 15)]).unwrap();
        let profile = DeviceProfile {
            id: "d0".into(),
            optimum: vec![4.0, 9.0].into(),
            amplitude: 1.0,
            width: 0.5,
            noise_std: 0.05,
            n_rows: 200,
        };
        let data = gen_synthetic_device_data(&space, &profile, &mut rng::seeded(1)).unwrap();
        let cfg = FitConfig {
            hidden: vec![16, 16],
            learning_rate: 0.05,
            epochs: 300,
            seed: 1,
            optimizer: FitOptimizer::Gd,
        };
        let (_, report) = train_device_model(&data, &space, &cfg).unwrap();
        for w in report.loss_history.windows(2) {
            assert!(w[1] <= w[0], "loss increased: {} -> {}", w[0], w[1]);
        }
        assert!(report.loss_history.last().unwrap() < &report.loss_history[0]);
    }
}
