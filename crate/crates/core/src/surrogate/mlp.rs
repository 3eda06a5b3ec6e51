//! Feed-forward device models: tanh hidden layers, identity output.

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One affine layer, `weights` row-major with shape `[rows = out, cols = in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.cols)
                .zip(&self.bias)
                .map(|(row, b)| crate::linalg::dot(row, input) + b),
        );
    }

    fn as_matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.rows, self.cols), self.weights.clone())
            .expect("layer shape checked at construction")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMlp", into = "RawMlp")]
pub struct MlpModel {
    layers: Vec<Layer>,
    train_rmse: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMlp {
    layers: Vec<Layer>,
    #[serde(default)]
    train_rmse: Option<f64>,
}

impl TryFrom<RawMlp> for MlpModel {
    type Error = Error;

    fn try_from(raw: RawMlp) -> Result<Self> {
        let mut m = MlpModel::new(raw.layers)?;
        m.train_rmse = raw.train_rmse;
        Ok(m)
    }
}

impl From<MlpModel> for RawMlp {
    fn from(m: MlpModel) -> Self {
        RawMlp {
            layers: m.layers,
            train_rmse: m.train_rmse,
        }
    }
}

impl MlpModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let bad = |msg: String| Err(Error::Config(format!("mlp: {msg}")));
        if layers.len() < 2 {
            return bad("at least one hidden layer is required".into());
        }
        for (i, l) in layers.iter().enumerate() {
            if l.rows == 0 || l.cols == 0 {
                return bad(format!("layer {i} has an empty dimension"));
            }
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return bad(format!("layer {i} arrays do not match shape {}x{}", l.rows, l.cols));
            }
            if i > 0 && l.cols != layers[i - 1].rows {
                return bad(format!(
                    "layer {i} input {} != previous output {}",
                    l.cols,
                    layers[i - 1].rows
                ));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("mlp layer {i} parameters")));
            }
        }
        if layers.last().map(|l| l.rows) != Some(1) {
            return bad("output dimension must be 1".into());
        }
        Ok(MlpModel {
            layers,
            train_rmse: None,
        })
    }

    /// Xavier-uniform weights and zero biases.
    pub fn init(input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (cols, rows) = (w[0], w[1]);
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                Layer {
                    rows,
                    cols,
                    weights: (0..rows * cols).map(|_| r.random_range(-limit..=limit)).collect(),
                    bias: vec![0.0; rows],
                }
            })
            .collect();
        MlpModel::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn train_rmse(&self) -> Option<f64> {
        self.train_rmse
    }

    pub fn forward(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: y.len(),
            });
        }
        let mut cur = y.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitOptimizer {
    /// Plain gradient descent.
    Gd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: FitOptimizer,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            hidden: vec![32, 32],
            learning_rate: 0.01,
            epochs: 1500,
            seed: 0,
            optimizer: FitOptimizer::Adam,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    /// Training MSE before each epoch's update.
    pub loss_history: Vec<f64>,
    pub final_rmse: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Full-batch MSE regression of `targets` on the normalized `inputs`. The step
/// size decays linearly to a tenth of `learning_rate` over the run.
pub fn fit(inputs: &[Vec<f64>], targets: &[f64], config: &FitConfig) -> Result<(MlpModel, FitReport)> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::Config(
            "fit needs a non-empty dataset with one target per row".into(),
        ));
    }
    if config.hidden.is_empty() || config.hidden.contains(&0) {
        return Err(Error::Config("fit needs at least one non-empty hidden layer".into()));
    }
    if config.learning_rate.is_nan() || config.learning_rate < 0.0 {
        return Err(Error::Config("learning rate must be non-negative".into()));
    }
    let d = inputs[0].len();
    let n = inputs.len();
    let x = Array2::from_shape_vec((n, d), inputs.iter().flatten().copied().collect())
        .map_err(|_| Error::Config("ragged input rows".into()))?;
    let y = Array1::from(targets.to_vec());

    let mut model = MlpModel::init(d, &config.hidden, config.seed)?;
    let last = model.layers.len() - 1;
    // Start from the constant predictor at the target mean.
    model.layers[last].weights.iter_mut().for_each(|w| *w = 0.0);
    model.layers[last].bias[0] = y.mean().unwrap_or(0.0);

    let mut weights: Vec<Array2<f64>> = model.layers.iter().map(Layer::as_matrix).collect();
    let mut biases: Vec<Array1<f64>> = model.layers.iter().map(|l| Array1::from(l.bias.clone())).collect();
    let mut adam: Vec<(Adam, Adam)> = weights
        .iter()
        .map(|w| {
            let z = |len| Adam {
                m: vec![0.0; len],
                v: vec![0.0; len],
                t: 0,
            };
            (z(w.len()), z(w.nrows()))
        })
        .collect();

    let forward = |weights: &[Array2<f64>], biases: &[Array1<f64>]| {
        let mut acts = vec![x.clone()];
        for (i, (w, b)) in weights.iter().zip(biases).enumerate() {
            let mut z = acts[i].dot(&w.t()) + b;
            if i < last {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        acts
    };
    let mse = |out: &Array2<f64>| out.column(0).iter().zip(&y).map(|(o, t)| (o - t).powi(2)).sum::<f64>() / n as f64;

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let acts = forward(&weights, &biases);
        let loss = mse(&acts[last + 1]);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("surrogate training loss at epoch {epoch}")));
        }
        history.push(loss);

        let mut delta = acts[last + 1].clone();
        delta
            .column_mut(0)
            .zip_mut_with(&y, |o, t| *o = 2.0 * (*o - t) / n as f64);
        for i in (0..=last).rev() {
            let grad_w = delta.t().dot(&acts[i]);
            let grad_b = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut back = delta.dot(&weights[i]);
                back.zip_mut_with(&acts[i], |g, a| *g *= 1.0 - a * a);
                delta = back;
            }
            let lr = config.learning_rate * (1.0 - 0.9 * epoch as f64 / config.epochs as f64);
            let (aw, ab) = &mut adam[i];
            let grad_w: Vec<f64> = grad_w.iter().copied().collect();
            step(
                config.optimizer,
                lr,
                aw,
                weights[i].as_slice_mut().expect("standard layout"),
                &grad_w,
            );
            step(
                config.optimizer,
                lr,
                ab,
                biases[i].as_slice_mut().expect("contiguous"),
                &grad_b.to_vec(),
            );
        }
    }
    let final_loss = mse(&forward(&weights, &biases)[last + 1]);
    if !final_loss.is_finite() {
        return Err(Error::NonFinite("surrogate training loss after final epoch".into()));
    }

    for (layer, (w, b)) in model.layers.iter_mut().zip(weights.iter().zip(&biases)) {
        layer.weights = w.iter().copied().collect();
        layer.bias = b.to_vec();
    }
    let rmse = final_loss.sqrt();
    model.train_rmse = Some(rmse);
    Ok((
        model,
        FitReport {
            loss_history: history,
            final_rmse: rmse,
        },
    ))
}

fn step(optimizer: FitOptimizer, lr: f64, state: &mut Adam, params: &mut [f64], grad: &[f64]) {
    match optimizer {
        FitOptimizer::Gd => params.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g),
        FitOptimizer::Adam => {
            const B1: f64 = 0.9;
            const B2: f64 = 0.999;
            state.t += 1;
            let c1 = 1.0 - B1.powi(state.t);
            let c2 = 1.0 - B2.powi(state.t);
            for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
                *m = B1 * *m + (1.0 - B1) * g;
                *v = B2 * *v + (1.0 - B2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_net(d: usize, h: usize) -> MlpModel {
        MlpModel::new(vec![
            Layer {
                rows: h,
                cols: d,
                weights: vec![0.0; h * d],
                bias: vec![0.0; h],
            },
            Layer {
                rows: 1,
                cols: h,
                weights: vec![0.0; h],
                bias: vec![0.0],
            },
        ])
        .unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let m = zero_net(3, 5);
        assert_eq!(m.forward(&[0.3, -0.9, 1.0]).unwrap(), 0.0);
        assert_eq!(m.forward(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn output_bias_passes_through() {
        let m = MlpModel::new(vec![
            Layer {
                rows: 1,
                cols: 2,
                weights: vec![1.0, -1.0],
                bias: vec![0.0],
            },
            Layer {
                rows: 1,
                cols: 1,
                weights: vec![0.7],
                bias: vec![2.5],
            },
        ])
        .unwrap();
        // pre-activation x0 - x1 = 0 for equal inputs
        assert_eq!(m.forward(&[0.4, 0.4]).unwrap(), 2.5);
    }

    #[test]
    fn matches_hand_computed_2_4_1() {
        let w1 = [0.5, -0.3, 0.1, 0.8, -0.7, 0.2, 0.05, -0.45];
        let b1 = [0.1, -0.2, 0.0, 0.3];
        let w2 = [1.2, -0.6, 0.9, 0.4];
        let b2 = -0.15;
        let m = MlpModel::new(vec![
            Layer {
                rows: 4,
                cols: 2,
                weights: w1.to_vec(),
                bias: b1.to_vec(),
            },
            Layer {
                rows: 1,
                cols: 4,
                weights: w2.to_vec(),
                bias: vec![b2],
            },
        ])
        .unwrap();
        let x = [0.6, -0.25];
        let h0 = (0.5 * 0.6 + -0.3 * -0.25 + 0.1_f64).tanh();
        let h1 = (0.1 * 0.6 + 0.8 * -0.25 - 0.2_f64).tanh();
        let h2 = (-0.7 * 0.6 + 0.2 * -0.25 + 0.0_f64).tanh();
        let h3 = (0.05 * 0.6 + -0.45 * -0.25 + 0.3_f64).tanh();
        let expected = 1.2 * h0 - 0.6 * h1 + 0.9 * h2 + 0.4 * h3 + b2;
        assert!((m.forward(&x).unwrap() - expected).abs() < 1e-15);
        assert!(matches!(m.forward(&[0.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn rejects_malformed_layers() {
        assert!(MlpModel::new(vec![Layer {
            rows: 1,
            cols: 2,
            weights: vec![0.0; 2],
            bias: vec![0.0]
        }])
        .is_err());
        let bad_chain = vec![
            Layer {
                rows: 3,
                cols: 2,
                weights: vec![0.0; 6],
                bias: vec![0.0; 3],
            },
            Layer {
                rows: 1,
                cols: 2,
                weights: vec![0.0; 2],
                bias: vec![0.0],
            },
        ];
        assert!(MlpModel::new(bad_chain).is_err());
        let nan = vec![
            Layer {
                rows: 1,
                cols: 1,
                weights: vec![f64::NAN],
                bias: vec![0.0],
            },
            Layer {
                rows: 1,
                cols: 1,
                weights: vec![1.0],
                bias: vec![0.0],
            },
        ];
        assert!(matches!(MlpModel::new(nan), Err(Error::NonFinite(_))));
    }

    #[test]
    fn fits_constant_targets() {
        let inputs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 10.0 - 1.0, 0.5]).collect();
        let targets = vec![3.25; 20];
        let cfg = FitConfig {
            hidden: vec![8],
            epochs: 1000,
            ..FitConfig::default()
        };
        let (m, report) = fit(&inputs, &targets, &cfg).unwrap();
        for x in &inputs {
            let v = m.forward(x).unwrap();
            assert!((v - 3.25).abs() < 1e-3, "{v} rmse {}", report.final_rmse);
        }
        assert!(report.final_rmse < 1e-3, "rmse = {}", report.final_rmse);
    }

    #[test]
    fn fit_is_deterministic() {
        let inputs: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64 * 0.37).sin()]).collect();
        let targets: Vec<f64> = inputs.iter().map(|x| x[0] * x[0]).collect();
        let cfg = FitConfig {
            hidden: vec![6, 6],
            epochs: 50,
            seed: 5,
            ..FitConfig::default()
        };
        let a = fit(&inputs, &targets, &cfg).unwrap().0;
        let b = fit(&inputs, &targets, &cfg).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn diverging_training_is_reported() {
        let inputs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let targets: Vec<f64> = (0..10).map(|i| 1e3 * i as f64).collect();
        let cfg = FitConfig {
            hidden: vec![4],
            epochs: 500,
            learning_rate: 1e3,
            optimizer: FitOptimizer::Gd,
            ..FitConfig::default()
        };
        assert!(matches!(fit(&inputs, &targets, &cfg), Err(Error::NonFinite(_))));
    }

    #[test]
    fn json_round_trip_preserves_shapes() {
        let m = MlpModel::init(3, &[4, 2], 1).unwrap();
        let back: MlpModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.layers()[1].rows, 2);
    }
}
