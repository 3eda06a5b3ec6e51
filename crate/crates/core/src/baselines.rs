//! Classical optimizers compared against the learned policy: Powell's
//! direction-set method, a Tree-structured Parzen Estimator and uniform random
//! search. All of them maximize through [`Objective`] and stop at
//! `max_evaluations` exactly.

use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::rng::{self, Rng};
use crate::search_space::{KnobSpec, SearchSpace, TuningVector};

/// Evaluation cap for "default" Powell runs, which otherwise stop on tolerance.
pub const POWELL_SAFETY_LIMIT: usize = 10_000;
pub const POWELL_DEFAULT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineBudget {
    pub max_evaluations: usize,
    pub tolerance: f64,
}

impl BaselineBudget {
    pub fn evaluations(max_evaluations: usize) -> Self {
        BaselineBudget {
            max_evaluations,
            tolerance: POWELL_DEFAULT_TOLERANCE,
        }
    }

    pub fn powell_default() -> Self {
        Self::evaluations(POWELL_SAFETY_LIMIT)
    }

    fn check(&self) -> Result<()> {
        if self.max_evaluations == 0 {
            return Err(Error::Config("budget must allow at least one evaluation".into()));
        }
        if self.tolerance.is_nan() || self.tolerance < 0.0 {
            return Err(Error::Config("tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub best_x: TuningVector,
    pub best_f: f64,
    pub evaluations: usize,
    pub seconds: f64,
    /// `(evaluation index, f)` for every evaluation, in order.
    pub trace: Vec<(usize, f64)>,
}

/// Budgeted, traced access to the objective.
struct Tracker<'a, O: ?Sized> {
    obj: &'a O,
    max: usize,
    trace: Vec<(usize, f64)>,
    best: Option<(TuningVector, f64)>,
}

impl<'a, O: Objective + ?Sized> Tracker<'a, O> {
    fn new(obj: &'a O, budget: &BaselineBudget) -> Self {
        Tracker {
            obj,
            max: budget.max_evaluations,
            trace: Vec::new(),
            best: None,
        }
    }

    fn exhausted(&self) -> bool {
        self.trace.len() >= self.max
    }

    /// `None` once the budget is spent.
    fn eval(&mut self, x: &TuningVector) -> Result<Option<f64>> {
        if self.exhausted() {
            return Ok(None);
        }
        let f = self.obj.evaluate(x)?;
        if !f.is_finite() {
            return Err(Error::NonFinite("objective value".into()));
        }
        self.trace.push((self.trace.len(), f));
        if self.best.as_ref().is_none_or(|(_, b)| f > *b) {
            self.best = Some((x.clone(), f));
        }
        Ok(Some(f))
    }

    fn finish(self, start: Instant) -> OptimizationResult {
        let (best_x, best_f) = self.best.expect("at least one evaluation");
        OptimizationResult {
            best_x,
            best_f,
            evaluations: self.trace.len(),
            seconds: start.elapsed().as_secs_f64(),
            trace: self.trace,
        }
    }
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Powell state on the normalized cube.
struct PowellRun<'a, 'b, O: ?Sized> {
    space: &'a SearchSpace,
    tracker: &'b mut Tracker<'a, O>,
    tol: f64,
}

impl<O: Objective + ?Sized> PowellRun<'_, '_, O> {
    fn f(&mut self, y: &[f64]) -> Result<Option<f64>> {
        let x = self.space.denormalize(y)?;
        self.tracker.eval(&x)
    }

    /// Range of `alpha` keeping `y + alpha * u` inside `[-1, 1]^D`.
    fn feasible(y: &[f64], u: &[f64]) -> (f64, f64) {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for (&yi, &ui) in y.iter().zip(u) {
            if ui.abs() < 1e-15 {
                continue;
            }
            let a = (-1.0 - yi) / ui;
            let b = (1.0 - yi) / ui;
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
        (lo.min(0.0), hi.max(0.0))
    }

    /// Golden-section maximization along `u` over the feasible segment.
    /// Returns the best point seen (the start point if nothing beats it).
    fn line_search(&mut self, y: &[f64], fy: f64, u: &[f64]) -> Result<(Vec<f64>, f64)> {
        let at = |alpha: f64| -> Vec<f64> { y.iter().zip(u).map(|(a, b)| (a + alpha * b).clamp(-1.0, 1.0)).collect() };
        let (mut a, mut b) = Self::feasible(y, u);
        let mut best = (0.0, fy);
        if b - a <= self.tol {
            return Ok((y.to_vec(), fy));
        }
        let mut c = b - INV_PHI * (b - a);
        let mut d = a + INV_PHI * (b - a);
        let Some(mut fc) = self.f(&at(c))? else {
            return Ok((y.to_vec(), fy));
        };
        if fc > best.1 {
            best = (c, fc);
        }
        let Some(mut fd) = self.f(&at(d))? else {
            return Ok((at(best.0), best.1));
        };
        if fd > best.1 {
            best = (d, fd);
        }
        while b - a > self.tol {
            let left = fc > fd;
            let probe = if left {
                b = d;
                d = c;
                fd = fc;
                c = b - INV_PHI * (b - a);
                c
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + INV_PHI * (b - a);
                d
            };
            let Some(fp) = self.f(&at(probe))? else { break };
            if left {
                fc = fp;
            } else {
                fd = fp;
            }
            if fp > best.1 {
                best = (probe, fp);
            }
        }
        Ok((at(best.0), best.1))
    }
}

/// Powell's direction-set method maximizing `f` on the continuous relaxation
/// of the normalized cube. Integer knobs are rounded at evaluation time.
pub fn powell<O: Objective + ?Sized>(
    obj: &O,
    x0: &TuningVector,
    budget: &BaselineBudget,
) -> Result<OptimizationResult> {
    budget.check()?;
    let space = obj.space();
    let start = Instant::now();
    let mut tracker = Tracker::new(obj, budget);
    let mut y = space.normalize(x0)?;
    let d = space.dim();
    let mut run = PowellRun {
        space,
        tracker: &mut tracker,
        tol: budget.tolerance.max(1e-12),
    };
    let mut fy = run.f(&y)?.expect("budget allows one evaluation");
    let mut dirs: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    while !run.tracker.exhausted() {
        let (y_start, f_start) = (y.clone(), fy);
        let (mut biggest, mut biggest_idx) = (0.0, 0);
        for (i, u) in dirs.iter().enumerate() {
            let before = fy;
            (y, fy) = run.line_search(&y, fy, u)?;
            if fy - before > biggest {
                biggest = fy - before;
                biggest_idx = i;
            }
            if run.tracker.exhausted() {
                break;
            }
        }
        if fy - f_start < budget.tolerance || run.tracker.exhausted() {
            break;
        }
        let disp: Vec<f64> = y.iter().zip(&y_start).map(|(a, b)| a - b).collect();
        let len = disp.iter().map(|v| v * v).sum::<f64>().sqrt();
        if len > 1e-15 {
            let u: Vec<f64> = disp.iter().map(|v| v / len).collect();
            (y, fy) = run.line_search(&y, fy, &u)?;
            dirs[biggest_idx] = dirs[d - 1].clone();
            dirs[d - 1] = u;
        }
    }
    Ok(tracker.finish(start))
}

pub fn random_search<O: Objective + ?Sized>(
    obj: &O,
    budget: &BaselineBudget,
    r: &mut Rng,
    initial: Option<&TuningVector>,
) -> Result<OptimizationResult> {
    budget.check()?;
    let start = Instant::now();
    let mut tracker = Tracker::new(obj, budget);
    for i in 0..budget.max_evaluations {
        let x = match (i, initial) {
            (0, Some(x0)) => x0.clone(),
            _ => obj.space().sample_uniform(r),
        };
        tracker.eval(&x)?;
    }
    Ok(tracker.finish(start))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpeConfig {
    /// Fraction of trials (best first) forming the "good" density.
    pub gamma: f64,
    pub n_startup: usize,
    pub n_candidates: usize,
    pub seed: u64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        TpeConfig {
            gamma: 0.25,
            n_startup: 10,
            n_candidates: 24,
            seed: 0,
        }
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// One-dimensional Parzen mixture of truncated Gaussians with equal weights.
/// Integer knobs are scored by the mass of the unit cell around each value.
#[derive(Debug, Clone, PartialEq)]
pub struct ParzenEstimator {
    pub centers: Vec<f64>,
    pub bandwidth: f64,
    lower: f64,
    upper: f64,
    integer: bool,
}

impl ParzenEstimator {
    pub fn new(knob: &KnobSpec, observations: &[f64]) -> Self {
        let n = observations.len().max(1) as f64;
        let mut bandwidth = knob.width() / n.sqrt();
        if knob.is_integer() {
            bandwidth = bandwidth.max(1.0);
        } else {
            bandwidth = bandwidth.max(1e-3 * knob.width());
        }
        let (lower, upper) = if knob.is_integer() {
            (knob.lower - 0.5, knob.upper + 0.5)
        } else {
            (knob.lower, knob.upper)
        };
        ParzenEstimator {
            centers: observations.to_vec(),
            bandwidth,
            lower,
            upper,
            integer: knob.is_integer(),
        }
    }

    fn support_mass(&self, mu: f64) -> f64 {
        let s = self.bandwidth;
        std_normal_cdf((self.upper - mu) / s) - std_normal_cdf((self.lower - mu) / s)
    }

    /// Density (continuous) or cell mass (integer) at `x`. An estimator with
    /// no observations is uniform.
    pub fn density(&self, x: f64) -> f64 {
        if self.centers.is_empty() {
            return 1.0 / (self.upper - self.lower);
        }
        let s = self.bandwidth;
        let total: f64 = self
            .centers
            .iter()
            .map(|&mu| {
                let z = self.support_mass(mu);
                let raw = if self.integer {
                    std_normal_cdf((x + 0.5 - mu) / s) - std_normal_cdf((x - 0.5 - mu) / s)
                } else {
                    let t = (x - mu) / s;
                    (-0.5 * t * t).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
                };
                raw / z
            })
            .sum();
        total / self.centers.len() as f64
    }

    pub fn sample(&self, r: &mut Rng) -> f64 {
        let v = if self.centers.is_empty() {
            r.random_range(self.lower..=self.upper)
        } else {
            let mu = self.centers[r.random_range(0..self.centers.len())];
            let mut v = None;
            for _ in 0..1000 {
                let eps: f64 = StandardNormal.sample(r);
                let cand = mu + self.bandwidth * eps;
                if (self.lower..=self.upper).contains(&cand) {
                    v = Some(cand);
                    break;
                }
            }
            v.unwrap_or(mu)
        };
        if self.integer {
            v.round().clamp(self.lower + 0.5, self.upper - 0.5)
        } else {
            v.clamp(self.lower, self.upper)
        }
    }
}

/// Per-knob good/bad densities fitted to a trial history.
#[derive(Debug, Clone)]
pub struct TpeModel {
    pub good: Vec<ParzenEstimator>,
    pub bad: Vec<ParzenEstimator>,
}

impl TpeModel {
    /// Splits `history` at the `gamma` quantile of `f` (largest values are good).
    pub fn fit(space: &SearchSpace, history: &[(TuningVector, f64)], gamma: f64) -> Self {
        let mut order: Vec<usize> = (0..history.len()).collect();
        order.sort_by(|&a, &b| history[b].1.total_cmp(&history[a].1).then(a.cmp(&b)));
        let n = history.len();
        let n_good = ((gamma * n as f64).ceil() as usize).clamp(1.min(n), n.saturating_sub(1).max(1));
        let (good_idx, bad_idx) = order.split_at(n_good.min(n));
        let build = |idx: &[usize]| -> Vec<ParzenEstimator> {
            space
                .knobs()
                .iter()
                .enumerate()
                .map(|(j, k)| {
                    let obs: Vec<f64> = idx.iter().map(|&i| history[i].0 .0[j]).collect();
                    ParzenEstimator::new(k, &obs)
                })
                .collect()
        };
        TpeModel {
            good: build(good_idx),
            bad: build(bad_idx),
        }
    }

    /// For each knob independently, draws candidates from the good density
    /// and keeps the one maximizing `l(x) / g(x)`.
    pub fn propose(&self, n_candidates: usize, r: &mut Rng) -> TuningVector {
        let values = self
            .good
            .iter()
            .zip(&self.bad)
            .map(|(l, g)| {
                let mut best = (f64::NEG_INFINITY, 0.0);
                for _ in 0..n_candidates.max(1) {
                    let c = l.sample(r);
                    let score = l.density(c).ln() - g.density(c).ln();
                    if score > best.0 {
                        best = (score, c);
                    }
                }
                best.1
            })
            .collect();
        TuningVector(values)
    }
}

pub fn tpe<O: Objective + ?Sized>(
    obj: &O,
    budget: &BaselineBudget,
    config: &TpeConfig,
    initial: Option<&TuningVector>,
) -> Result<OptimizationResult> {
    budget.check()?;
    if !(config.gamma > 0.0 && config.gamma < 1.0) {
        return Err(Error::Config("tpe gamma must lie in (0, 1)".into()));
    }
    if config.n_startup == 0 || config.n_candidates == 0 {
        return Err(Error::Config("tpe needs n_startup >= 1 and n_candidates >= 1".into()));
    }
    if budget.max_evaluations < config.n_startup {
        return Err(Error::Config("tpe budget must cover the startup trials".into()));
    }
    let space = obj.space();
    let start = Instant::now();
    let mut r = rng::seeded(config.seed);
    let mut tracker = Tracker::new(obj, budget);
    let mut history: Vec<(TuningVector, f64)> = Vec::new();
    for i in 0..budget.max_evaluations {
        let x = match (i, initial) {
            (0, Some(x0)) => x0.clone(),
            _ if i < config.n_startup => space.sample_uniform(&mut r),
            _ => TpeModel::fit(space, &history, config.gamma).propose(config.n_candidates, &mut r),
        };
        let f = tracker.eval(&x)?.expect("loop bounded by budget");
        history.push((x, f));
    }
    Ok(tracker.finish(start))
}
