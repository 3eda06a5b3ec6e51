//! The learned tuning law: a two-layer LSTM policy over knob settings.
//!
//! Each step the policy reads the previous point (normalized) and its
//! standardized objective value, advances both LSTM layers, and emits one
//! distribution per knob from the top hidden vector: a categorical over every
//! admissible value for integer knobs, and a tanh-squashed Gaussian for
//! continuous knobs. Proposals are absolute points, never increments.
//!
//! Gradients of `sum_t A_t log pi(a_t | s_t)` (plus an optional entropy bonus)
//! are computed by replaying a recorded trajectory and running reverse-mode
//! differentiation through time by hand.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::search_space::{KnobKind, SearchSpace, TuningVector};
use crate::trainer::{Standardizer, Trajectory};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// How much of the recurrent state the policy sees.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateVariant {
    /// `s_t = (x_{t-1}, f(x_{t-1}), h_{t-1})`.
    #[default]
    Recurrent,
    /// `s_t = (x_{t-1}, f(x_{t-1}))`: the incoming state is zeroed every step.
    Memoryless,
}

/// One LSTM layer. Gate blocks are stacked in the order input, forget,
/// output, candidate; matrices are row-major with `4 * hidden` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    pub input: usize,
    pub hidden: usize,
    pub w_ih: Vec<f64>,
    pub w_hh: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Logits over `lower, lower + 1, ..., lower + rows - 1`.
    Categorical,
    /// Two outputs: mean and log-std of the pre-squash Gaussian.
    Gaussian,
}

/// Affine map from the top hidden vector to one knob's distribution parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub kind: HeadKind,
    pub rows: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// The policy parameters `theta`. Gradients share this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub hidden: usize,
    pub dim: usize,
    pub variant: StateVariant,
    pub lstm1: LstmLayer,
    pub lstm2: LstmLayer,
    pub heads: Vec<Head>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub h1: Vec<f64>,
    pub c1: Vec<f64>,
    pub h2: Vec<f64>,
    pub c2: Vec<f64>,
}

impl AgentState {
    pub fn zeros(hidden: usize) -> Self {
        AgentState {
            h1: vec![0.0; hidden],
            c1: vec![0.0; hidden],
            h2: vec![0.0; hidden],
            c2: vec![0.0; hidden],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub prev_x: Vec<f64>,
    pub prev_f: f64,
}

impl Observation {
    pub fn new(space: &SearchSpace, x: &TuningVector, f: f64, standardizer: &Standardizer) -> Result<Self> {
        Ok(Observation {
            prev_x: space.normalize(x)?,
            prev_f: standardizer.apply(f),
        })
    }

    fn encode(&self) -> Vec<f64> {
        let mut v = self.prev_x.clone();
        v.push(self.prev_f);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KnobDistribution {
    Categorical {
        logits: Vec<f64>,
        probs: Vec<f64>,
    },
    /// `log_std` is already clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    Gaussian {
        mean: f64,
        log_std: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub knobs: Vec<KnobDistribution>,
}

/// The raw draw behind one knob value: a category index, or the pre-squash
/// Gaussian sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawSample {
    Index(usize),
    Gaussian(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledAction {
    pub x: TuningVector,
    pub raw: Vec<RawSample>,
    /// Sum over knobs of the log mass (categorical) or the log density of the
    /// pre-squash Gaussian sample.
    pub log_prob: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matvec_add(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (row, o) in w.chunks_exact(cols).zip(out.iter_mut()) {
        *o += crate::linalg::dot(row, x);
    }
}

/// `out += w^T d` for row-major `w` with `d.len()` rows.
fn matvec_t_add(w: &[f64], cols: usize, d: &[f64], out: &mut [f64]) {
    for (row, &di) in w.chunks_exact(cols).zip(d) {
        if di != 0.0 {
            out.iter_mut().zip(row).for_each(|(o, a)| *o += a * di);
        }
    }
}

/// `g += d x^T`.
fn outer_add(g: &mut [f64], cols: usize, d: &[f64], x: &[f64]) {
    for (row, &di) in g.chunks_exact_mut(cols).zip(d) {
        if di != 0.0 {
            row.iter_mut().zip(x).for_each(|(gi, xi)| *gi += di * xi);
        }
    }
}

/// Forward values of one LSTM layer at one step, kept for the backward pass.
#[derive(Debug, Clone)]
struct LstmCache {
    input: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates `[i, f, o, g]`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

impl LstmLayer {
    fn init(input: usize, hidden: usize, r: &mut Rng) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        let mut u = |n: usize| -> Vec<f64> { (0..n).map(|_| r.random_range(-k..=k)).collect() };
        let w_ih = u(4 * hidden * input);
        let w_hh = u(4 * hidden * hidden);
        let mut bias = u(4 * hidden);
        bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        LstmLayer {
            input,
            hidden,
            w_ih,
            w_hh,
            bias,
        }
    }

    fn zeros_like(&self) -> Self {
        LstmLayer {
            input: self.input,
            hidden: self.hidden,
            w_ih: vec![0.0; self.w_ih.len()],
            w_hh: vec![0.0; self.w_hh.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn check(&self, name: &str) -> Result<()> {
        let h = self.hidden;
        if self.w_ih.len() != 4 * h * self.input || self.w_hh.len() != 4 * h * h || self.bias.len() != 4 * h {
            return Err(Error::Config(format!(
                "{name}: array sizes do not match input {} / hidden {h}",
                self.input
            )));
        }
        Ok(())
    }

    fn forward(&self, input: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>, LstmCache) {
        let h = self.hidden;
        let mut a = self.bias.clone();
        matvec_add(&self.w_ih, self.input, input, &mut a);
        matvec_add(&self.w_hh, h, h_prev, &mut a);
        for (j, v) in a.iter_mut().enumerate() {
            *v = if j < 3 * h { sigmoid(*v) } else { v.tanh() };
        }
        let (i, rest) = a.split_at(h);
        let (f, rest) = rest.split_at(h);
        let (o, g) = rest.split_at(h);
        let c: Vec<f64> = (0..h).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h_new: Vec<f64> = (0..h).map(|k| o[k] * tanh_c[k]).collect();
        let cache = LstmCache {
            input: input.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            gates: a,
            tanh_c,
        };
        (h_new, c, cache)
    }

    /// Accumulates parameter gradients into `grad` given adjoints of the new
    /// hidden and cell states; returns adjoints of (input, h_prev, c_prev).
    fn backward(
        &self,
        cache: &LstmCache,
        dh: &[f64],
        dc_next: &[f64],
        grad: &mut LstmLayer,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = self.hidden;
        let g = &cache.gates;
        let mut da = vec![0.0; 4 * h];
        let mut dc_prev = vec![0.0; h];
        for k in 0..h {
            let (gi, gf, go, gg) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
            let tc = cache.tanh_c[k];
            let dc = dc_next[k] + dh[k] * go * (1.0 - tc * tc);
            da[k] = dc * gg * gi * (1.0 - gi);
            da[h + k] = dc * cache.c_prev[k] * gf * (1.0 - gf);
            da[2 * h + k] = dh[k] * tc * go * (1.0 - go);
            da[3 * h + k] = dc * gi * (1.0 - gg * gg);
            dc_prev[k] = dc * gf;
        }
        outer_add(&mut grad.w_ih, self.input, &da, &cache.input);
        outer_add(&mut grad.w_hh, h, &da, &cache.h_prev);
        grad.bias.iter_mut().zip(&da).for_each(|(b, d)| *b += d);
        let mut d_input = vec![0.0; self.input];
        matvec_t_add(&self.w_ih, self.input, &da, &mut d_input);
        let mut dh_prev = vec![0.0; h];
        matvec_t_add(&self.w_hh, h, &da, &mut dh_prev);
        (d_input, dh_prev, dc_prev)
    }
}

impl Head {
    fn output(&self, h2: &[f64], hidden: usize) -> Vec<f64> {
        let mut z = self.bias.clone();
        matvec_add(&self.weights, hidden, h2, &mut z);
        z
    }
}

/// Everything `policy_step` computed, kept for backpropagation.
#[derive(Debug, Clone)]
struct StepCache {
    l1: LstmCache,
    l2: LstmCache,
    h2: Vec<f64>,
    head_out: Vec<Vec<f64>>,
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

impl KnobDistribution {
    fn from_head(kind: HeadKind, z: &[f64]) -> Self {
        match kind {
            HeadKind::Categorical => {
                let probs = log_softmax(z).into_iter().map(f64::exp).collect();
                KnobDistribution::Categorical {
                    logits: z.to_vec(),
                    probs,
                }
            }
            HeadKind::Gaussian => KnobDistribution::Gaussian {
                mean: z[0],
                log_std: z[1].clamp(LOG_STD_MIN, LOG_STD_MAX),
            },
        }
    }

    pub fn log_prob(&self, raw: RawSample) -> Result<f64> {
        match (self, raw) {
            (KnobDistribution::Categorical { logits, .. }, RawSample::Index(k)) if k < logits.len() => {
                Ok(log_softmax(logits)[k])
            }
            (KnobDistribution::Gaussian { mean, log_std }, RawSample::Gaussian(u)) => {
                let z = (u - mean) * (-log_std).exp();
                Ok(-0.5 * z * z - log_std - HALF_LN_2PI)
            }
            _ => Err(Error::Config("raw sample does not match the knob distribution".into())),
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            KnobDistribution::Categorical { logits, .. } => {
                -log_softmax(logits).iter().map(|lp| lp.exp() * lp).sum::<f64>()
            }
            KnobDistribution::Gaussian { log_std, .. } => log_std + 0.5 + HALF_LN_2PI,
        }
    }
}

impl ActionDistribution {
    pub fn log_prob(&self, raw: &[RawSample]) -> Result<f64> {
        if raw.len() != self.knobs.len() {
            return Err(Error::Dimension {
                expected: self.knobs.len(),
                actual: raw.len(),
            });
        }
        self.knobs.iter().zip(raw).map(|(d, &r)| d.log_prob(r)).sum()
    }

    pub fn entropy(&self) -> f64 {
        self.knobs.iter().map(KnobDistribution::entropy).sum()
    }

    fn check_space(&self, space: &SearchSpace) -> Result<()> {
        if self.knobs.len() != space.dim() {
            return Err(Error::Dimension {
                expected: space.dim(),
                actual: self.knobs.len(),
            });
        }
        for (d, k) in self.knobs.iter().zip(space.knobs()) {
            let ok = match d {
                KnobDistribution::Categorical { logits, .. } => k.cardinality() == Some(logits.len()),
                KnobDistribution::Gaussian { .. } => k.kind == KnobKind::Continuous,
            };
            if !ok {
                return Err(Error::SchemaMismatch(format!(
                    "distribution does not fit knob `{}`",
                    k.name
                )));
            }
        }
        Ok(())
    }
}

fn squash(space_lower: f64, space_upper: f64, u: f64) -> f64 {
    let v = space_lower + (u.tanh() + 1.0) * 0.5 * (space_upper - space_lower);
    v.clamp(space_lower, space_upper)
}

/// Draws one point; knobs are sampled independently.
pub fn sample_action(dist: &ActionDistribution, space: &SearchSpace, r: &mut Rng) -> Result<SampledAction> {
    dist.check_space(space)?;
    let mut values = Vec::with_capacity(space.dim());
    let mut raw = Vec::with_capacity(space.dim());
    for (d, k) in dist.knobs.iter().zip(space.knobs()) {
        match d {
            KnobDistribution::Categorical { probs, .. } => {
                let u: f64 = r.random();
                let mut acc = 0.0;
                let mut idx = probs.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        idx = i;
                        break;
                    }
                }
                // Never return a zero-mass index through round-off at the tail.
                while probs[idx] == 0.0 && idx > 0 {
                    idx -= 1;
                }
                values.push(k.lower + idx as f64);
                raw.push(RawSample::Index(idx));
            }
            KnobDistribution::Gaussian { mean, log_std } => {
                let eps: f64 = StandardNormal.sample(r);
                let u = mean + log_std.exp() * eps;
                values.push(squash(k.lower, k.upper, u));
                raw.push(RawSample::Gaussian(u));
            }
        }
    }
    let log_prob = dist.log_prob(&raw)?;
    Ok(SampledAction {
        x: TuningVector(values),
        raw,
        log_prob,
    })
}

/// Deterministic mode: most likely value per integer knob (lowest index on
/// ties), squashed mean per continuous knob.
pub fn greedy_action(dist: &ActionDistribution, space: &SearchSpace) -> Result<TuningVector> {
    dist.check_space(space)?;
    let values = dist
        .knobs
        .iter()
        .zip(space.knobs())
        .map(|(d, k)| match d {
            KnobDistribution::Categorical { logits, .. } => {
                let mut best = 0;
                for (i, v) in logits.iter().enumerate() {
                    if *v > logits[best] {
                        best = i;
                    }
                }
                k.lower + best as f64
            }
            KnobDistribution::Gaussian { mean, .. } => squash(k.lower, k.upper, *mean),
        })
        .collect();
    Ok(TuningVector(values))
}

impl PolicyParams {
    /// Uniform `[-1/sqrt(H), 1/sqrt(H)]` initialization with forget-gate bias 1.
    pub fn init(space: &SearchSpace, hidden: usize, variant: StateVariant, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("hidden size must be positive".into()));
        }
        let mut r = rng::seeded(seed);
        let dim = space.dim();
        let lstm1 = LstmLayer::init(dim + 1, hidden, &mut r);
        let lstm2 = LstmLayer::init(hidden, hidden, &mut r);
        let k = 1.0 / (hidden as f64).sqrt();
        let heads = space
            .knobs()
            .iter()
            .map(|knob| {
                let (kind, rows) = match knob.cardinality() {
                    Some(n) => (HeadKind::Categorical, n),
                    None => (HeadKind::Gaussian, 2),
                };
                Head {
                    kind,
                    rows,
                    weights: (0..rows * hidden).map(|_| r.random_range(-k..=k)).collect(),
                    bias: (0..rows).map(|_| r.random_range(-k..=k)).collect(),
                }
            })
            .collect();
        Ok(PolicyParams {
            hidden,
            dim,
            variant,
            lstm1,
            lstm2,
            heads,
        })
    }

    pub fn zeros_like(&self) -> Self {
        PolicyParams {
            hidden: self.hidden,
            dim: self.dim,
            variant: self.variant,
            lstm1: self.lstm1.zeros_like(),
            lstm2: self.lstm2.zeros_like(),
            heads: self
                .heads
                .iter()
                .map(|h| Head {
                    kind: h.kind,
                    rows: h.rows,
                    weights: vec![0.0; h.weights.len()],
                    bias: vec![0.0; h.bias.len()],
                })
                .collect(),
        }
    }

    /// Checks internal shape consistency and agreement with `space`.
    pub fn check(&self, space: &SearchSpace) -> Result<()> {
        if self.dim != space.dim() || self.heads.len() != space.dim() {
            return Err(Error::SchemaMismatch(format!(
                "policy built for {} knobs, space has {}",
                self.dim,
                space.dim()
            )));
        }
        if self.lstm1.input != self.dim + 1 || self.lstm1.hidden != self.hidden {
            return Err(Error::Config("lstm1 shape does not match (dim + 1, hidden)".into()));
        }
        if self.lstm2.input != self.hidden || self.lstm2.hidden != self.hidden {
            return Err(Error::Config("lstm2 shape does not match (hidden, hidden)".into()));
        }
        self.lstm1.check("lstm1")?;
        self.lstm2.check("lstm2")?;
        for (h, k) in self.heads.iter().zip(space.knobs()) {
            let expected = match k.cardinality() {
                Some(n) => (HeadKind::Categorical, n),
                None => (HeadKind::Gaussian, 2),
            };
            if (h.kind, h.rows) != expected {
                return Err(Error::SchemaMismatch(format!(
                    "head for knob `{}` has the wrong kind or size",
                    k.name
                )));
            }
            if h.weights.len() != h.rows * self.hidden || h.bias.len() != h.rows {
                return Err(Error::Config(format!(
                    "head for knob `{}` has malformed arrays",
                    k.name
                )));
            }
        }
        if !self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("policy parameters".into()));
        }
        Ok(())
    }

    /// Parameter arrays in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![
            &self.lstm1.w_ih,
            &self.lstm1.w_hh,
            &self.lstm1.bias,
            &self.lstm2.w_ih,
            &self.lstm2.w_hh,
            &self.lstm2.bias,
        ];
        for h in &self.heads {
            v.push(&h.weights);
            v.push(&h.bias);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![
            &mut self.lstm1.w_ih,
            &mut self.lstm1.w_hh,
            &mut self.lstm1.bias,
            &mut self.lstm2.w_ih,
            &mut self.lstm2.w_hh,
            &mut self.lstm2.bias,
        ];
        for h in &mut self.heads {
            v.push(&mut h.weights);
            v.push(&mut h.bias);
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &PolicyParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += alpha * y);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn step_cached(
        &self,
        state: &AgentState,
        obs: &Observation,
    ) -> Result<(ActionDistribution, AgentState, StepCache)> {
        if obs.prev_x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: obs.prev_x.len(),
            });
        }
        let hsz = self.hidden;
        if [&state.h1, &state.c1, &state.h2, &state.c2]
            .iter()
            .any(|v| v.len() != hsz)
        {
            return Err(Error::Dimension {
                expected: hsz,
                actual: state.h1.len(),
            });
        }
        let zeros = AgentState::zeros(hsz);
        let prev = match self.variant {
            StateVariant::Recurrent => state,
            StateVariant::Memoryless => &zeros,
        };
        let input = obs.encode();
        let (h1, c1, l1) = self.lstm1.forward(&input, &prev.h1, &prev.c1);
        let (h2, c2, l2) = self.lstm2.forward(&h1, &prev.h2, &prev.c2);
        let head_out: Vec<Vec<f64>> = self.heads.iter().map(|h| h.output(&h2, hsz)).collect();
        let knobs = self
            .heads
            .iter()
            .zip(&head_out)
            .map(|(h, z)| KnobDistribution::from_head(h.kind, z))
            .collect();
        let next = AgentState {
            h1,
            c1,
            h2: h2.clone(),
            c2,
        };
        let finite = [&next.h1, &next.c1, &next.h2, &next.c2]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
            && head_out.iter().flatten().all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("policy step (hidden state or head output)".into()));
        }
        Ok((ActionDistribution { knobs }, next, StepCache { l1, l2, h2, head_out }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// One policy step: two stacked LSTM layers followed by the per-knob heads.
pub fn policy_step(
    params: &PolicyParams,
    state: &AgentState,
    obs: &Observation,
) -> Result<(ActionDistribution, AgentState)> {
    params.step_cached(state, obs).map(|(d, s, _)| (d, s))
}

/// Adjoint of `adv * log pi(raw) + entropy_weight * H` with respect to the
/// head outputs `z` of one knob.
fn head_adjoint(kind: HeadKind, z: &[f64], raw: RawSample, adv: f64, entropy_weight: f64) -> Result<Vec<f64>> {
    match (kind, raw) {
        (HeadKind::Categorical, RawSample::Index(a)) if a < z.len() => {
            let logp = log_softmax(z);
            let entropy = -logp.iter().map(|lp| lp.exp() * lp).sum::<f64>();
            Ok(logp
                .iter()
                .enumerate()
                .map(|(k, lp)| {
                    let p = lp.exp();
                    let onehot = if k == a { 1.0 } else { 0.0 };
                    adv * (onehot - p) - entropy_weight * p * (lp + entropy)
                })
                .collect())
        }
        (HeadKind::Gaussian, RawSample::Gaussian(u)) => {
            let mean = z[0];
            let clamped = !(LOG_STD_MIN..=LOG_STD_MAX).contains(&z[1]);
            let log_std = z[1].clamp(LOG_STD_MIN, LOG_STD_MAX);
            let inv_var = (-2.0 * log_std).exp();
            let d_mean = adv * (u - mean) * inv_var;
            let d_log_std = if clamped {
                0.0
            } else {
                adv * ((u - mean).powi(2) * inv_var - 1.0) + entropy_weight
            };
            Ok(vec![d_mean, d_log_std])
        }
        _ => Err(Error::SchemaMismatch(
            "recorded action does not match the policy heads".into(),
        )),
    }
}

/// Gradient of `sum_t advantages[t] * log pi(a_t | s_t)` with respect to the
/// parameters, by full backpropagation through time over the replayed episode.
pub fn trajectory_grad(params: &PolicyParams, trajectory: &Trajectory, advantages: &[f64]) -> Result<PolicyParams> {
    trajectory_grad_with_entropy(params, trajectory, advantages, 0.0)
}

/// As [`trajectory_grad`], with `entropy_weight * sum_t H(pi(. | s_t))` added
/// to the differentiated objective.
pub fn trajectory_grad_with_entropy(
    params: &PolicyParams,
    trajectory: &Trajectory,
    advantages: &[f64],
    entropy_weight: f64,
) -> Result<PolicyParams> {
    let steps = &trajectory.steps;
    if advantages.len() != steps.len() {
        return Err(Error::Dimension {
            expected: steps.len(),
            actual: advantages.len(),
        });
    }
    let mut grad = params.zeros_like();
    if steps.is_empty() {
        return Ok(grad);
    }

    let mut state = AgentState::zeros(params.hidden);
    let mut caches = Vec::with_capacity(steps.len());
    for step in steps {
        let (_, next, cache) = params.step_cached(&state, &step.obs)?;
        if step.raw.len() != params.heads.len() {
            return Err(Error::SchemaMismatch(
                "recorded action length does not match the policy".into(),
            ));
        }
        caches.push(cache);
        state = next;
    }

    let h = params.hidden;
    let recurrent = params.variant == StateVariant::Recurrent;
    let mut dh1_next = vec![0.0; h];
    let mut dc1_next = vec![0.0; h];
    let mut dh2_next = vec![0.0; h];
    let mut dc2_next = vec![0.0; h];
    for (t, (step, cache)) in steps.iter().zip(&caches).enumerate().rev() {
        let mut dh2 = dh2_next.clone();
        for ((head, ghead), (z, &raw)) in params
            .heads
            .iter()
            .zip(grad.heads.iter_mut())
            .zip(cache.head_out.iter().zip(&step.raw))
        {
            let dz = head_adjoint(head.kind, z, raw, advantages[t], entropy_weight)?;
            outer_add(&mut ghead.weights, h, &dz, &cache.h2);
            ghead.bias.iter_mut().zip(&dz).for_each(|(b, d)| *b += d);
            matvec_t_add(&head.weights, h, &dz, &mut dh2);
        }
        let (d_h1_from_2, dh2_prev, dc2_prev) = params.lstm2.backward(&cache.l2, &dh2, &dc2_next, &mut grad.lstm2);
        let dh1: Vec<f64> = d_h1_from_2.iter().zip(&dh1_next).map(|(a, b)| a + b).collect();
        let (_, dh1_prev, dc1_prev) = params.lstm1.backward(&cache.l1, &dh1, &dc1_next, &mut grad.lstm1);
        if recurrent {
            dh1_next = dh1_prev;
            dc1_next = dc1_prev;
            dh2_next = dh2_prev;
            dc2_next = dc2_prev;
        }
    }
    if !grad.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("trajectory gradient".into()));
    }
    Ok(grad)
}

/// A trained policy together with the frozen observation statistics and the
/// hash of the space it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub space_hash: String,
    pub hidden: usize,
    pub dim: usize,
    pub head_shapes: Vec<usize>,
    pub state_variant: StateVariant,
    pub standardizer: Standardizer,
    pub params: PolicyParams,
}

impl Checkpoint {
    pub fn new(space: &SearchSpace, params: PolicyParams, standardizer: Standardizer) -> Result<Self> {
        params.check(space)?;
        Ok(Checkpoint {
            space_hash: space.hash(),
            hidden: params.hidden,
            dim: params.dim,
            head_shapes: params.heads.iter().map(|h| h.rows).collect(),
            state_variant: params.variant,
            standardizer,
            params,
        })
    }

    /// Fails with a schema mismatch unless the checkpoint belongs to `space`.
    pub fn check(&self, space: &SearchSpace) -> Result<()> {
        if self.space_hash != space.hash() {
            return Err(Error::SchemaMismatch(format!(
                "checkpoint space hash {} does not match {}",
                self.space_hash,
                space.hash()
            )));
        }
        self.params.check(space)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
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
