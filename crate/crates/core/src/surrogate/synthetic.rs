//! Synthetic device measurements: one Gaussian bump per device, plus noise.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Aggregation;
use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::rng::Rng;
use crate::search_space::{SearchSpace, TuningVector};

/// Ground truth of one device: `amplitude * exp(-|y - y_opt|^2 / (2 width^2))`
/// on normalized coordinates, observed with Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub id: String,
    pub optimum: TuningVector,
    pub amplitude: f64,
    pub width: f64,
    pub noise_std: f64,
    pub n_rows: usize,
}

impl DeviceProfile {
    pub fn check(&self, space: &SearchSpace) -> Result<()> {
        space.validate(&self.optimum)?;
        let bad = |msg: &str| Err(Error::Config(format!("device `{}`: {msg}", self.id)));
        if !self.amplitude.is_finite() {
            return bad("amplitude must be finite");
        }
        if !self.width.is_finite() || self.width <= 0.0 {
            return bad("width must be positive");
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return bad("noise_std must be non-negative");
        }
        if self.n_rows == 0 {
            return bad("n_rows must be at least 1");
        }
        Ok(())
    }

    pub fn ground_truth(&self, space: &SearchSpace, x: &TuningVector) -> Result<f64> {
        let y = space.normalize(x)?;
        let c = space.normalize(&self.optimum)?;
        let d2: f64 = y.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
        Ok(self.amplitude * (-d2 / (2.0 * self.width * self.width)).exp())
    }
}

/// A set of device profiles, as read by `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    pub devices: Vec<DeviceProfile>,
}

/// Knobs for [`ProfileSet::random_family`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyConfig {
    pub n_devices: usize,
    pub n_rows: usize,
    /// Noise std as a fraction of each device's amplitude.
    pub noise_fraction: f64,
    /// Half-width (normalized units) of the region around the shared center
    /// in which device optima fall.
    pub spread: f64,
    pub width_range: (f64, f64),
    pub amplitude_range: (f64, f64),
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig {
            n_devices: 8,
            n_rows: 2000,
            noise_fraction: 0.05,
            spread: 0.35,
            width_range: (0.35, 0.6),
            amplitude_range: (0.8, 1.2),
        }
    }
}

impl ProfileSet {
    /// Devices whose optima scatter around a common, randomly placed center,
    /// mimicking process variation across a lot.
    pub fn random_family(space: &SearchSpace, config: &FamilyConfig, rng: &mut Rng) -> Result<Self> {
        if config.n_devices == 0 {
            return Err(Error::Config("family needs at least one device".into()));
        }
        let inner = (1.0 - config.spread).max(0.0);
        let center: Vec<f64> = (0..space.dim()).map(|_| rng.random_range(-inner..=inner)).collect();
        let devices = (0..config.n_devices)
            .map(|i| {
                let y: Vec<f64> = center
                    .iter()
                    .map(|c| c + rng.random_range(-config.spread..=config.spread))
                    .collect();
                let amplitude = rng.random_range(config.amplitude_range.0..=config.amplitude_range.1);
                let width = rng.random_range(config.width_range.0..=config.width_range.1);
                Ok(DeviceProfile {
                    id: format!("dev{i}"),
                    optimum: space.denormalize(&y)?,
                    amplitude,
                    width,
                    noise_std: config.noise_fraction * amplitude,
                    n_rows: config.n_rows,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ProfileSet { devices })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceDataset {
    pub device_id: String,
    pub rows: Vec<(TuningVector, f64)>,
}

pub fn gen_synthetic_device_data(space: &SearchSpace, profile: &DeviceProfile, rng: &mut Rng) -> Result<DeviceDataset> {
    profile.check(space)?;
    let noise = Normal::new(0.0, profile.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let rows = (0..profile.n_rows)
        .map(|_| {
            let x = space.sample_uniform(rng);
            let g = profile.ground_truth(space, &x)?;
            let e = if profile.noise_std > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            Ok((x, g + e))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DeviceDataset {
        device_id: profile.id.clone(),
        rows,
    })
}

impl DeviceDataset {
    pub fn check(&self, space: &SearchSpace) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Config(format!("dataset `{}` has no rows", self.device_id)));
        }
        for (x, f) in &self.rows {
            space.validate(x)?;
            if !f.is_finite() {
                return Err(Error::NonFinite(format!("performance in dataset `{}`", self.device_id)));
            }
        }
        Ok(())
    }

    /// Header `<knob names...>,performance`, one row per measurement.
    pub fn write_csv(&self, space: &SearchSpace, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = space.knobs().iter().map(|k| k.name.as_str()).collect();
        header.push("performance");
        w.write_record(&header)?;
        for (x, f) in &self.rows {
            let mut rec: Vec<String> = x.values().iter().map(|v| v.to_string()).collect();
            rec.push(f.to_string());
            w.write_record(&rec)?;
        }
        w.flush()
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(())
    }

    pub fn read_csv(space: &SearchSpace, path: &Path, device_id: impl Into<String>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let expected: Vec<&str> = space
            .knobs()
            .iter()
            .map(|k| k.name.as_str())
            .chain(std::iter::once("performance"))
            .collect();
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(Error::SchemaMismatch(format!(
                "{}: header does not match the search space knobs",
                path.display()
            )));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let (x, f) = vals.split_at(space.dim());
            rows.push((TuningVector(x.to_vec()), f[0]));
        }
        let ds = DeviceDataset {
            device_id: device_id.into(),
            rows,
        };
        ds.check(space)?;
        Ok(ds)
    }
}

/// The noiseless aggregate of device ground truths, as an [`Objective`].
#[derive(Debug)]
pub struct GroundTruthObjective {
    space: SearchSpace,
    devices: Vec<DeviceProfile>,
    aggregation: Aggregation,
    counter: AtomicU64,
}

impl GroundTruthObjective {
    pub fn new(space: SearchSpace, devices: Vec<DeviceProfile>, aggregation: Aggregation) -> Result<Self> {
        if devices.is_empty() {
            return Err(Error::Config("objective needs at least one device".into()));
        }
        for d in &devices {
            d.check(&space)?;
        }
        Ok(GroundTruthObjective {
            space,
            devices,
            aggregation,
            counter: AtomicU64::new(0),
        })
    }
}

impl Objective for GroundTruthObjective {
    fn space(&self) -> &SearchSpace {
        &self.space
    }

    fn evaluate(&self, x: &TuningVector) -> Result<f64> {
        let values = self
            .devices
            .iter()
            .map(|d| d.ground_truth(&self.space, x))
            .collect::<Result<Vec<_>>>()?;
        self.counter.fetch_add(1, Ordering::Relaxed);
        Ok(self.aggregation.apply(&values))
    }

    fn evaluations(&self) -> u64 {
        self.counter.load(Ordering::Relaxed)
    }
}
