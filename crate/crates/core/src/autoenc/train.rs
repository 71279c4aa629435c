//! Denoising MSE training with Adam.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AutoencError, AutoencoderModel};
use crate::matrix::Matrix;
use crate::rng;
use crate::trace::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    #[serde(with = "crate::rng::seed_hex")]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AutoencError> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(AutoencError::InvalidConfig(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMeta {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub final_train_mse: f64,
    /// Mean training-mode loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Loss and flat gradient over the rows `idx`. Dropout masks are drawn from
/// `dropout` when given.
pub(crate) fn batch_gradient<R: Rng>(
    model: &AutoencoderModel,
    inputs: &Matrix,
    targets: &Matrix,
    idx: &[usize],
    mut dropout: Option<&mut R>,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; model.param_count()];
    let l = targets.cols();
    let scale = 1.0 / (idx.len() * l) as f64;
    let mut loss = 0.0;
    // Offsets of each layer's weights/biases in the flat gradient.
    let mut offsets = Vec::with_capacity(model.layers.len());
    let mut at = 0;
    for layer in &model.layers {
        let w = layer.weights().len();
        offsets.push((at, at + w, at + w + layer.biases().len()));
        at += layer.param_count();
    }

    for &row in idx {
        let x = inputs.row(row);
        let y = targets.row(row);
        let t = model.forward_trace(x, dropout.as_deref_mut());
        let out = t.output();
        let mut d: Vec<f64> = out
            .iter()
            .zip(y)
            .map(|(o, y)| {
                let e = o - y;
                loss += e * e;
                2.0 * e * scale
            })
            .collect();
        for k in (0..model.layers.len()).rev() {
            let (w0, b0, b1) = offsets[k];
            let (gw, gb) = grad[w0..b1].split_at_mut(b0 - w0);
            let mut dx = model.layers[k].backward(&t.inputs[k], &t.pre[k], &t.argmax[k], &d, gw, gb);
            if k + 1 == model.layers.len() {
                if let Some(mask) = &t.masks {
                    dx.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
                }
            }
            d = dx;
        }
    }
    (loss * scale, grad)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

/// Fit `model` to map noisy training rows onto their clean counterparts.
pub fn train(model: &AutoencoderModel, data: &Dataset, cfg: &TrainConfig) -> Result<AutoencoderModel, AutoencError> {
    fit(model, &data.train_noisy, &data.train, cfg)
}

/// Same as [`train`] over explicit input/target matrices.
pub fn fit(
    model: &AutoencoderModel,
    inputs: &Matrix,
    targets: &Matrix,
    cfg: &TrainConfig,
) -> Result<AutoencoderModel, AutoencError> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(AutoencError::EmptyTrainingSet);
    }
    if targets.cols() != model.input_dim || inputs.cols() != model.input_dim {
        return Err(AutoencError::DimensionMismatch {
            expected: model.input_dim,
            got: targets.cols(),
        });
    }
    if inputs.rows() != targets.rows() {
        return Err(AutoencError::DimensionMismatch {
            expected: targets.rows(),
            got: inputs.rows(),
        });
    }

    let mut m = model.clone();
    let mut params = m.flat_params();
    let mut adam = Adam::new(params.len());
    let mut order: Vec<usize> = (0..targets.rows()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut r = rng::chacha(rng::derive_all(cfg.seed, &[rng::tag("epoch"), epoch as u64]));
        order.shuffle(&mut r);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad) = batch_gradient(&m, inputs, targets, batch, Some(&mut r));
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(AutoencError::NonFiniteLoss {
                    epoch,
                    learning_rate: cfg.learning_rate,
                });
            }
            total += loss * batch.len() as f64;
            adam.step(&mut params, &grad, cfg);
            m.set_flat_params(&params);
        }
        epoch_losses.push(total / targets.rows() as f64);
    }

    m.snap_to_f32();
    let final_train_mse = m.loss(inputs, targets);
    if !final_train_mse.is_finite() {
        return Err(AutoencError::NonFiniteLoss {
            epoch: cfg.epochs,
            learning_rate: cfg.learning_rate,
        });
    }
    m.train_meta = Some(TrainMeta {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        final_train_mse,
        epoch_losses,
    });
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoenc::{init_model, Arch};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = rng::chacha(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen::<f64>()).collect())
    }

    #[test]
    fn constant_rows_are_fit_tightly() {
        let c: Vec<f64> = (0..16).map(|i| 0.1 + 0.05 * i as f64).collect();
        let data = Matrix::from_rows(16, std::iter::repeat(c.as_slice()).take(640));
        let model = init_model(Arch::M1, 16, 3).unwrap();
        let cfg = TrainConfig { seed: 3, ..TrainConfig::default() };
        let trained = fit(&model, &data, &data, &cfg).unwrap();
        let mse = trained.train_meta.as_ref().unwrap().final_train_mse;
        assert!(mse < 1e-4, "final mse {mse}");
    }

    #[test]
    fn training_is_deterministic() {
        let x = random_matrix(100, 8, 1);
        let model = init_model(Arch::M2, 8, 1).unwrap();
        let cfg = TrainConfig { epochs: 5, seed: 11, ..TrainConfig::default() };
        let a = fit(&model, &x, &x, &cfg).unwrap();
        let b = fit(&model, &x, &x, &cfg).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        assert!(a.all_finite());
    }

    #[test]
    fn diverging_run_reports_learning_rate() {
        let mut x = random_matrix(64, 8, 2);
        x.as_mut_slice().iter_mut().for_each(|v| *v *= 1e200);
        let model = init_model(Arch::M1, 8, 1).unwrap();
        let cfg = TrainConfig { epochs: 3, learning_rate: 1e3, ..TrainConfig::default() };
        match fit(&model, &x, &x, &cfg) {
            Err(AutoencError::NonFiniteLoss { learning_rate, .. }) => assert_eq!(learning_rate, 1e3),
            other => panic!("expected non-finite loss, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = random_matrix(10, 6, 2);
        let model = init_model(Arch::M1, 8, 1).unwrap();
        assert!(fit(&model, &x, &x, &TrainConfig::default()).is_err());
        let empty = Matrix::zeros(0, 8);
        assert!(matches!(
            fit(&model, &empty, &empty, &TrainConfig::default()),
            Err(AutoencError::EmptyTrainingSet)
        ));
    }

    fn finite_difference_check(arch: Arch, l: usize, seed: u64) {
        let model = init_model(arch, l, seed).unwrap();
        // Non-zero biases so that the check exercises them too.
        let mut p = model.flat_params();
        let mut r = rng::chacha(seed + 100);
        p.iter_mut().for_each(|v| *v += r.gen_range(-0.1..0.1));
        let mut model = model;
        model.set_flat_params(&p);
        let x = random_matrix(4, l, seed + 1);
        let y = random_matrix(4, l, seed + 2);
        let (_, grad) = model.loss_and_gradient(&x, &y);
        let h = 1e-4;
        for i in 0..p.len() {
            let mut plus = model.clone();
            let mut q = p.clone();
            q[i] += h;
            plus.set_flat_params(&q);
            let mut minus = model.clone();
            q[i] -= 2.0 * h;
            minus.set_flat_params(&q);
            let fd = (plus.loss(&x, &y) - minus.loss(&x, &y)) / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-6);
            assert!((grad[i] - fd).abs() / denom < 1e-3, "{arch} param {i}: analytic {} fd {fd}", grad[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_difference_check(Arch::M1, 6, 1);
        finite_difference_check(Arch::M2, 8, 2);
        finite_difference_check(Arch::M3, 8, 3);
    }
}
