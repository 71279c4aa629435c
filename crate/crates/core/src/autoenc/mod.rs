//! Autoencoder architectures and the float reference forward pass.
//!
//! Three architectures share one layer representation:
//!
//! * `M1`: `l -> 8 (relu) -> l (linear)`
//! * `M2`: `l -> 8 (relu) -> 8 (relu) -> l (linear)`
//! * `M3`: 1-D CNN, `conv(16, k=3) -> pool(2) -> conv(8, k=3) -> pool(2) ->
//!   dense 8 (relu) -> dense l (linear)`
//!
//! Dropout sits after the last hidden layer and is active only in training.
//! Parameters are stored as `f64` but kept on the `f32` grid after training
//! so that the `LAM1` container round-trips them exactly.

mod layers;
mod train;

pub use layers::{Activation, Layer};
pub use train::{fit, train, TrainConfig, TrainMeta};

use rand::Rng;
use thiserror::Error;

use crate::matrix::Matrix;
use crate::rng;

pub const HIDDEN: usize = 8;
pub const DEFAULT_DROPOUT: f64 = 0.2;

#[derive(Debug, Error)]
pub enum AutoencError {
    #[error("unsupported architecture: {0}")]
    Unsupported(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("loss became non-finite at epoch {epoch}; lower the learning rate (currently {learning_rate})")]
    NonFiniteLoss { epoch: usize, learning_rate: f64 },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Arch {
    M1,
    M2,
    M3,
}

impl Arch {
    pub fn tag(self) -> u8 {
        match self {
            Arch::M1 => 1,
            Arch::M2 => 2,
            Arch::M3 => 3,
        }
    }

    pub fn from_tag(t: u8) -> Option<Arch> {
        match t {
            1 => Some(Arch::M1),
            2 => Some(Arch::M2),
            3 => Some(Arch::M3),
            _ => None,
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = AutoencError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "M1" => Ok(Arch::M1),
            "M2" => Ok(Arch::M2),
            "M3" => Ok(Arch::M3),
            _ => Err(AutoencError::Unsupported(s.to_string())),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "M{}", self.tag())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderModel {
    pub arch: Arch,
    pub input_dim: usize,
    pub layers: Vec<Layer>,
    /// Dropout rate applied to the input of the final layer during training.
    pub dropout_rate: f64,
    pub train_meta: Option<TrainMeta>,
}

/// Per-layer activations recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `inputs[k]` is what layer `k` consumed (after dropout, if any).
    pub inputs: Vec<Vec<f64>>,
    /// `pre[k]` is layer `k`'s pre-activation output.
    pub pre: Vec<Vec<f64>>,
    /// Layer outputs after activation.
    pub outputs: Vec<Vec<f64>>,
    /// Winning input index per output, for pooling layers.
    pub argmax: Vec<Vec<usize>>,
    pub masks: Option<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

fn glorot<R: Rng>(r: &mut R, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| to_f32_grid(r.gen_range(-limit..=limit))).collect()
}

pub(crate) fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

fn dense<R: Rng>(r: &mut R, input: usize, output: usize, activation: Activation) -> Layer {
    Layer::Dense {
        input,
        output,
        weights: glorot(r, input * output, input, output),
        biases: vec![0.0; output],
        activation,
    }
}

/// Create a freshly initialized model: Glorot-uniform weights, zero biases.
pub fn init_model(arch: Arch, input_dim: usize, seed: u64) -> Result<AutoencoderModel, AutoencError> {
    if input_dim < 2 {
        return Err(AutoencError::Unsupported(format!("input dimension {input_dim} < 2")));
    }
    let mut r = rng::chacha(rng::derive(seed, rng::tag("init")));
    let l = input_dim;
    let layers = match arch {
        Arch::M1 => vec![dense(&mut r, l, HIDDEN, Activation::Relu), dense(&mut r, HIDDEN, l, Activation::Linear)],
        Arch::M2 => vec![
            dense(&mut r, l, HIDDEN, Activation::Relu),
            dense(&mut r, HIDDEN, HIDDEN, Activation::Relu),
            dense(&mut r, HIDDEN, l, Activation::Linear),
        ],
        Arch::M3 => {
            if l % 4 != 0 {
                return Err(AutoencError::Unsupported(format!(
                    "M3 needs an input dimension divisible by 4, got {l}"
                )));
            }
            let conv = |r: &mut _, cin: usize, cout: usize, length: usize| Layer::Conv1d {
                channels_in: cin,
                channels_out: cout,
                kernel: 3,
                length,
                weights: glorot(r, cout * cin * 3, cin * 3, cout * 3),
                biases: vec![0.0; cout],
                activation: Activation::Relu,
            };
            vec![
                conv(&mut r, 1, 16, l),
                Layer::MaxPool1d { channels: 16, length: l, width: 2 },
                conv(&mut r, 16, 8, l / 2),
                Layer::MaxPool1d { channels: 8, length: l / 2, width: 2 },
                dense(&mut r, 8 * (l / 4), HIDDEN, Activation::Relu),
                dense(&mut r, HIDDEN, l, Activation::Linear),
            ]
        }
    };
    Ok(AutoencoderModel {
        arch,
        input_dim,
        layers,
        dropout_rate: DEFAULT_DROPOUT,
        train_meta: None,
    })
}

/// Fill `values` with inverted-dropout scaling: each entry is zeroed with
/// probability `rate`, survivors are multiplied by `1 / (1 - rate)`.
/// Returns the mask that was applied.
pub fn apply_dropout<R: Rng>(values: &mut [f64], rate: f64, r: &mut R) -> Vec<f64> {
    let keep = 1.0 - rate;
    let mask: Vec<f64> = values
        .iter()
        .map(|_| if r.gen::<f64>() < rate { 0.0 } else { 1.0 / keep })
        .collect();
    values.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
    mask
}

impl AutoencoderModel {
    /// Assemble a model from explicit layers (fixtures, deserialization).
    pub fn from_layers(
        arch: Arch,
        input_dim: usize,
        layers: Vec<Layer>,
        dropout_rate: f64,
    ) -> Result<Self, AutoencError> {
        let first = layers.first().map(Layer::input_len);
        let last = layers.last().map(Layer::output_len);
        if first != Some(input_dim) || last != Some(input_dim) {
            return Err(AutoencError::Unsupported("first input and last output must equal input_dim".into()));
        }
        for w in layers.windows(2) {
            if w[0].output_len() != w[1].input_len() {
                return Err(AutoencError::DimensionMismatch {
                    expected: w[0].output_len(),
                    got: w[1].input_len(),
                });
            }
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(AutoencError::Unsupported(format!("dropout rate {dropout_rate}")));
        }
        Ok(AutoencoderModel {
            arch,
            input_dim,
            layers,
            dropout_rate,
            train_meta: None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights().len()).sum()
    }

    pub fn bias_count(&self) -> usize {
        self.layers.iter().map(|l| l.biases().len()).sum()
    }

    /// `(fan_in, fan_out)` of each parameterized layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().filter_map(Layer::shape).collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights());
            out.extend_from_slice(l.biases());
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count());
        let mut at = 0;
        for l in &mut self.layers {
            let (w, b) = l.params_mut();
            w.copy_from_slice(&params[at..at + w.len()]);
            at += w.len();
            b.copy_from_slice(&params[at..at + b.len()]);
            at += b.len();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.flat_params().iter().all(|p| p.is_finite())
    }

    fn dropout_site(&self) -> usize {
        self.layers.len() - 1
    }

    /// Forward pass recording every intermediate. With `dropout` set, the
    /// input of the final layer is passed through inverted dropout.
    pub fn forward_trace<R: Rng>(&self, x: &[f64], dropout: Option<&mut R>) -> ForwardTrace {
        let n = self.layers.len();
        let mut t = ForwardTrace {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
            argmax: Vec::with_capacity(n),
            masks: None,
        };
        let mut cur = x.to_vec();
        let mut dropout = dropout;
        for (k, layer) in self.layers.iter().enumerate() {
            if k == self.dropout_site() && self.dropout_rate > 0.0 {
                if let Some(r) = dropout.as_deref_mut() {
                    t.masks = Some(apply_dropout(&mut cur, self.dropout_rate, r));
                }
            }
            let (pre, arg) = layer.forward_pre(&cur);
            let out = layer.activation().apply(&pre);
            t.inputs.push(cur);
            t.pre.push(pre);
            t.argmax.push(arg);
            cur = out.clone();
            t.outputs.push(out);
        }
        t
    }

    /// Eval-mode forward pass (no dropout).
    pub fn reconstruct(&self, s: &[f64]) -> Result<Vec<f64>, AutoencError> {
        if s.len() != self.input_dim {
            return Err(AutoencError::DimensionMismatch {
                expected: self.input_dim,
                got: s.len(),
            });
        }
        let mut cur = s.to_vec();
        for layer in &self.layers {
            let (pre, _) = layer.forward_pre(&cur);
            cur = layer.activation().apply(&pre);
        }
        Ok(cur)
    }

    /// Reconstruction error of each row.
    pub fn errors(&self, m: &Matrix) -> Result<Vec<f64>, AutoencError> {
        m.iter_rows()
            .map(|row| Ok(reconstruction_error(&self.reconstruct(row)?, row)?))
            .collect()
    }

    /// Mean-squared loss over a batch and its flat gradient, with dropout
    /// disabled. `inputs` and `targets` must have equal shapes.
    pub fn loss_and_gradient(&self, inputs: &Matrix, targets: &Matrix) -> (f64, Vec<f64>) {
        train::batch_gradient::<rand_chacha::ChaCha8Rng>(self, inputs, targets, &(0..inputs.rows()).collect::<Vec<_>>(), None)
    }

    /// Loss only, dropout disabled.
    pub fn loss(&self, inputs: &Matrix, targets: &Matrix) -> f64 {
        let mut total = 0.0;
        for (x, y) in inputs.iter_rows().zip(targets.iter_rows()) {
            let out = self.reconstruct(x).expect("dimension checked by caller");
            total += out.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        total / (inputs.rows() * inputs.cols()) as f64
    }

    pub(crate) fn snap_to_f32(&mut self) {
        for l in &mut self.layers {
            let (w, b) = l.params_mut();
            w.iter_mut().chain(b.iter_mut()).for_each(|p| *p = to_f32_grid(*p));
        }
    }
}

/// Mean over features of squared differences.
pub fn reconstruction_error(s_hat: &[f64], s: &[f64]) -> Result<f64, AutoencError> {
    if s_hat.len() != s.len() {
        return Err(AutoencError::DimensionMismatch {
            expected: s.len(),
            got: s_hat.len(),
        });
    }
    if s.is_empty() {
        return Ok(0.0);
    }
    Ok(s_hat.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn m1_and_m2_shapes() {
        let m1 = init_model(Arch::M1, 512, 1).unwrap();
        assert_eq!(m1.layer_shapes(), vec![(512, 8), (8, 512)]);
        let m2 = init_model(Arch::M2, 128, 1).unwrap();
        assert_eq!(m2.layer_shapes(), vec![(128, 8), (8, 8), (8, 128)]);
        assert!(m1.layers.iter().all(|l| l.biases().iter().all(|b| *b == 0.0)));
    }

    #[test]
    fn m3_shape_and_constraints() {
        let m3 = init_model(Arch::M3, 64, 1).unwrap();
        assert_eq!(m3.reconstruct(&[0.5; 64]).unwrap().len(), 64);
        assert!(init_model(Arch::M3, 66, 1).is_err());
        assert!(init_model(Arch::M1, 1, 1).is_err());
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(init_model(Arch::M1, 32, 9).unwrap(), init_model(Arch::M1, 32, 9).unwrap());
        assert_ne!(init_model(Arch::M1, 32, 9).unwrap(), init_model(Arch::M1, 32, 10).unwrap());
    }

    #[test]
    fn zero_model_outputs_zero() {
        let mut m = init_model(Arch::M2, 16, 3).unwrap();
        let zeros = vec![0.0; m.param_count()];
        m.set_flat_params(&zeros);
        assert_eq!(m.reconstruct(&[0.7; 16]).unwrap(), vec![0.0; 16]);
    }

    #[test]
    fn identity_fixture_reproduces_input() {
        let l = 5;
        let mut w = vec![0.0; l * l];
        (0..l).for_each(|i| w[i * l + i] = 1.0);
        let layer = Layer::Dense {
            input: l,
            output: l,
            weights: w,
            biases: vec![0.0; l],
            activation: Activation::Linear,
        };
        let m = AutoencoderModel::from_layers(Arch::M1, l, vec![layer], 0.0).unwrap();
        let s = [0.1, 0.9, 0.3, 0.0, 1.0];
        assert_eq!(m.reconstruct(&s).unwrap(), s.to_vec());
        assert!(m.reconstruct(&s[..4]).is_err());
    }

    #[test]
    fn reconstruction_error_examples() {
        assert_eq!(reconstruction_error(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert_eq!(reconstruction_error(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(reconstruction_error(&[0.5, 0.5], &[0.25, 0.75]).unwrap(), 0.0625);
        assert!(reconstruction_error(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn hidden_relu_activations_are_non_negative() {
        for arch in [Arch::M1, Arch::M2, Arch::M3] {
            let m = init_model(arch, 16, 4).unwrap();
            let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
            let t = m.forward_trace::<rand_chacha::ChaCha8Rng>(&x, None);
            for (layer, out) in m.layers.iter().zip(&t.outputs) {
                if layer.activation() == Activation::Relu {
                    assert!(out.iter().all(|v| *v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let m = init_model(Arch::M1, 8, 5).unwrap();
        let x = [0.2, 0.4, 0.6, 0.8, 0.1, 0.3, 0.5, 0.7];
        let clean = m.forward_trace::<rand_chacha::ChaCha8Rng>(&x, None);
        let target = clean.inputs[1].clone();
        let mut r = rng::chacha(1);
        let trials = 20_000;
        let mut acc = vec![0.0; target.len()];
        for _ in 0..trials {
            let t = m.forward_trace(&x, Some(&mut r));
            acc.iter_mut().zip(&t.inputs[1]).for_each(|(a, v)| *a += v);
        }
        for (a, want) in acc.iter().zip(&target) {
            let mean = a / trials as f64;
            if want.abs() > 1e-9 {
                assert!((mean - want).abs() <= 0.02 * want.abs(), "{mean} vs {want}");
            } else {
                assert_eq!(mean, 0.0);
            }
        }
        // Without dropout the pass is deterministic.
        assert_eq!(m.reconstruct(&x).unwrap(), m.reconstruct(&x).unwrap());
    }
}
