//! The outer reinforcement-learning loop.
//!
//! Episodes start from a fresh uniform point, run the policy for `T` steps
//! against the objective and are scored by performance improvement. Batches
//! of episodes drive REINFORCE updates with a moving-average baseline, an
//! entropy bonus and global-norm gradient clipping.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{
    policy_step, sample_action, trajectory_grad_with_entropy, AgentState, Checkpoint, Observation, PolicyParams,
    RawSample, StateVariant,
};
use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::rng::{self, Rng};
use crate::search_space::{SearchSpace, TuningVector};

pub const GRAD_CLIP_NORM: f64 = 5.0;

const TAG_INIT: u64 = 1;
const TAG_ROLLOUT: u64 = 2;

/// Running mean and standard deviation of observed objective values
/// (Welford). Frozen into checkpoints for deployment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Standardizer {
    pub fn update(&mut self, f: f64) {
        self.count += 1;
        let delta = f - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (f - self.mean);
    }

    pub fn std(&self) -> f64 {
        if self.count < 2 {
            return 1.0;
        }
        let s = (self.m2 / self.count as f64).sqrt();
        if s > 1e-12 {
            s
        } else {
            1.0
        }
    }

    pub fn apply(&self, f: f64) -> f64 {
        (f - self.mean) / self.std()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// `r_t = f_t - f_{t-1}`; the undiscounted return is `f_T - f_0`.
    #[default]
    Telescoping,
    /// `r_t = max(0, f_t - best_{<t})`.
    BestImprovement,
}

pub fn reward(mode: RewardMode, f_t: f64, f_prev: f64, best_before: f64) -> f64 {
    match mode {
        RewardMode::Telescoping => f_t - f_prev,
        RewardMode::BestImprovement => (f_t - best_before).max(0.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub obs: Observation,
    pub raw: Vec<RawSample>,
    pub x: TuningVector,
    pub f: f64,
    pub log_prob: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub x0: TuningVector,
    pub f0: f64,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// Largest objective value seen, including the starting point.
    pub fn best(&self) -> (TuningVector, f64) {
        let mut best = (&self.x0, self.f0);
        for s in &self.steps {
            if s.f > best.1 {
                best = (&s.x, s.f);
            }
        }
        (best.0.clone(), best.1)
    }
}

/// One episode of `t_max` policy steps from `x0`. Uses exactly `t_max + 1`
/// objective evaluations.
pub fn rollout<O: Objective + ?Sized>(
    params: &PolicyParams,
    obj: &O,
    t_max: usize,
    x0: &TuningVector,
    mode: RewardMode,
    standardizer: &Standardizer,
    r: &mut Rng,
) -> Result<Trajectory> {
    let space = obj.space();
    space.validate(x0)?;
    if t_max == 0 {
        return Err(Error::Config("episode length must be at least 1".into()));
    }
    let f0 = obj.evaluate(x0)?;
    let mut obs = Observation::new(space, x0, f0, standardizer)?;
    let mut state = AgentState::zeros(params.hidden);
    let (mut prev, mut best) = (f0, f0);
    let mut steps = Vec::with_capacity(t_max);
    for _ in 0..t_max {
        let (dist, next) = policy_step(params, &state, &obs)?;
        state = next;
        let action = sample_action(&dist, space, r)?;
        let f = obj.evaluate(&action.x)?;
        if !f.is_finite() {
            return Err(Error::NonFinite("objective value during rollout".into()));
        }
        let rew = reward(mode, f, prev, best);
        let next_obs = Observation::new(space, &action.x, f, standardizer)?;
        steps.push(TrajectoryStep {
            obs: std::mem::replace(&mut obs, next_obs),
            raw: action.raw,
            x: action.x,
            f,
            log_prob: action.log_prob,
            reward: rew,
        });
        prev = f;
        best = best.max(f);
    }
    Ok(Trajectory {
        x0: x0.clone(),
        f0,
        steps,
    })
}

/// Discounted return-to-go per step.
pub fn returns(traj: &Trajectory, discount: f64) -> Vec<f64> {
    let mut out = vec![0.0; traj.steps.len()];
    let mut acc = 0.0;
    for (o, s) in out.iter_mut().zip(&traj.steps).rev() {
        acc = s.reward + discount * acc;
        *o = acc;
    }
    out
}

pub fn returns_and_advantages(traj: &Trajectory, discount: f64, baseline: f64) -> Vec<f64> {
    returns(traj, discount).into_iter().map(|r| r - baseline).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episode_length: usize,
    pub batch_size: usize,
    pub total_updates: usize,
    pub learning_rate: f64,
    pub discount: f64,
    pub reward_mode: RewardMode,
    pub baseline_decay: f64,
    pub seed: u64,
    /// Initial entropy-bonus weight; decays linearly to zero over training.
    pub entropy_weight: f64,
    pub hidden_size: usize,
    pub state_variant: StateVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episode_length: 50,
            batch_size: 16,
            total_updates: 2000,
            learning_rate: 3e-3,
            discount: 1.0,
            reward_mode: RewardMode::Telescoping,
            baseline_decay: 0.9,
            seed: 0,
            entropy_weight: 0.01,
            hidden_size: 32,
            state_variant: StateVariant::Recurrent,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.episode_length == 0 || self.batch_size == 0 || self.hidden_size == 0 {
            return bad("episode_length, batch_size and hidden_size must be positive");
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return bad("learning_rate must be non-negative");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad("baseline_decay must lie in [0, 1)");
        }
        if self.entropy_weight.is_nan() || self.entropy_weight < 0.0 {
            return bad("entropy_weight must be non-negative");
        }
        Ok(())
    }
}

/// Exponentially weighted moving average of batch mean returns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Baseline {
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    pub baseline: f64,
    pub mean_return: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One REINFORCE ascent step on the batch mean of the per-episode gradients.
/// The baseline in effect is the moving average from previous batches (the
/// first batch uses its own mean); it is refreshed afterwards.
pub fn reinforce_update(
    params: &PolicyParams,
    batch: &[Trajectory],
    config: &TrainConfig,
    baseline: &mut Baseline,
    entropy_weight: f64,
) -> Result<(PolicyParams, UpdateStats)> {
    if batch.is_empty() {
        return Err(Error::Config("reinforce_update needs a non-empty batch".into()));
    }
    let batch_returns: Vec<f64> = batch
        .iter()
        .map(|t| returns(t, config.discount).first().copied().unwrap_or(0.0))
        .collect();
    let mean_return = batch_returns.iter().sum::<f64>() / batch.len() as f64;
    let b = baseline.value.unwrap_or(mean_return);

    let grads = batch
        .par_iter()
        .map(|t| {
            let adv = returns_and_advantages(t, config.discount, b);
            trajectory_grad_with_entropy(params, t, &adv, entropy_weight)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = params.zeros_like();
    for g in &grads {
        grad.add_scaled(1.0 / batch.len() as f64, g);
    }
    let norm = grad.norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite("policy gradient".into()));
    }
    let clipped = norm > GRAD_CLIP_NORM;
    if clipped {
        grad.scale(GRAD_CLIP_NORM / norm);
    }
    let mut next = params.clone();
    next.add_scaled(config.learning_rate, &grad);

    baseline.value = Some(match baseline.value {
        Some(v) => config.baseline_decay * v + (1.0 - config.baseline_decay) * mean_return,
        None => mean_return,
    });
    Ok((
        next,
        UpdateStats {
            baseline: b,
            mean_return,
            grad_norm: norm,
            clipped,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub update: usize,
    pub mean_return: f64,
    pub mean_best_f: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    /// Mean of `mean_best_f` over the first (`tail = false`) or last
    /// `fraction` of updates, at least one point.
    pub fn window_mean_best_f(&self, fraction: f64, tail: bool) -> Option<f64> {
        let n = self.points.len();
        if n == 0 {
            return None;
        }
        let k = ((n as f64 * fraction).round() as usize).clamp(1, n);
        let slice = if tail { &self.points[n - k..] } else { &self.points[..k] };
        Some(slice.iter().map(|p| p.mean_best_f).sum::<f64>() / k as f64)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["update", "mean_return", "mean_best_f", "seconds"])?;
        for p in &self.points {
            w.write_record([
                p.update.to_string(),
                p.mean_return.to_string(),
                p.mean_best_f.to_string(),
                p.seconds.to_string(),
            ])?;
        }
        w.flush()
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the latest update with the highest mean best-f.
    pub best: Checkpoint,
    pub best_update: Option<usize>,
    pub last: Checkpoint,
    pub curve: LearningCurve,
}

/// Rolls out one batch on `params`; episode `e` of update `u` always uses the
/// same random stream, whichever thread runs it.
pub fn rollout_batch<O: Objective + ?Sized>(
    params: &PolicyParams,
    obj: &O,
    config: &TrainConfig,
    standardizer: &Standardizer,
    update: usize,
) -> Result<Vec<Trajectory>> {
    (0..config.batch_size)
        .into_par_iter()
        .map(|e| {
            let mut r = rng::child(config.seed, &[TAG_ROLLOUT, update as u64, e as u64]);
            let x0 = obj.space().sample_uniform(&mut r);
            rollout(
                params,
                obj,
                config.episode_length,
                &x0,
                config.reward_mode,
                standardizer,
                &mut r,
            )
        })
        .collect()
}

/// Trains a fresh policy on `obj`. Parallelism follows the ambient rayon pool;
/// results are identical for any pool size.
pub fn train<O: Objective + ?Sized>(space: &SearchSpace, obj: &O, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(space, obj, config, |_| {})
}

pub fn train_with_progress<O: Objective + ?Sized>(
    space: &SearchSpace,
    obj: &O,
    config: &TrainConfig,
    mut progress: impl FnMut(&CurvePoint),
) -> Result<TrainOutcome> {
    config.check()?;
    if obj.space() != space {
        return Err(Error::SchemaMismatch(
            "objective was built for a different search space".into(),
        ));
    }
    let mut params = PolicyParams::init(
        space,
        config.hidden_size,
        config.state_variant,
        rng::derive_seed(config.seed, &[TAG_INIT]),
    )?;
    let mut standardizer = Standardizer::default();
    let mut baseline = Baseline::default();
    let mut curve = LearningCurve::default();
    let mut best = Checkpoint::new(space, params.clone(), standardizer.clone())?;
    let mut best_score = f64::NEG_INFINITY;
    let mut best_update = None;
    let start = Instant::now();

    for u in 0..config.total_updates {
        let entropy_weight = config.entropy_weight * (1.0 - u as f64 / config.total_updates as f64);
        let batch = rollout_batch(&params, obj, config, &standardizer, u)?;
        let n = batch.len() as f64;
        let mean_best_f = batch.iter().map(|t| t.best().1).sum::<f64>() / n;
        let mean_return = batch.iter().map(Trajectory::total_reward).sum::<f64>() / n;
        if mean_best_f >= best_score {
            best_score = mean_best_f;
            best_update = Some(u);
            best = Checkpoint::new(space, params.clone(), standardizer.clone())?;
        }

        let (next, stats) = reinforce_update(&params, &batch, config, &mut baseline, entropy_weight)?;
        log::debug!(
            "update {u}: mean best-f {mean_best_f:.5}, grad norm {:.4}",
            stats.grad_norm
        );
        params = next;
        for t in &batch {
            standardizer.update(t.f0);
            t.steps.iter().for_each(|s| standardizer.update(s.f));
        }
        let point = CurvePoint {
            update: u,
            mean_return,
            mean_best_f,
            seconds: start.elapsed().as_secs_f64(),
        };
        progress(&point);
        curve.points.push(point);
    }
    let last = Checkpoint::new(space, params, standardizer)?;
    if best_update.is_none() {
        best = last.clone();
    }
    Ok(TrainOutcome {
        best,
        best_update,
        last,
        curve,
    })
}

/// Deploys a checkpoint: one stochastic rollout from `x0`, reporting the best
/// point it visited.
pub fn tune<O: Objective + ?Sized>(
    checkpoint: &Checkpoint,
    obj: &O,
    t_max: usize,
    x0: &TuningVector,
    r: &mut Rng,
) -> Result<(TuningVector, f64, Trajectory)> {
    checkpoint.check(obj.space())?;
    let traj = rollout(
        &checkpoint.params,
        obj,
        t_max,
        x0,
        RewardMode::Telescoping,
        &checkpoint.standardizer,
        r,
    )?;
    let (x, f) = traj.best();
    Ok((x, f, traj))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n")
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
