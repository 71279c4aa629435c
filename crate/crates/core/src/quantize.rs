//! Post-training int8 quantization and integer inference.
//!
//! Weights are per-tensor symmetric int8 (zero point 0), activations are
//! asymmetric int8 calibrated from data, biases are int32 at
//! `input_scale * weight_scale`. Rounding is half away from zero.

use sha2::{Digest, Sha256};

use crate::autoenc::{Activation, Arch, AutoencoderModel, Layer};
use crate::matrix::Matrix;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum QuantizeError {
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("calibration data contains non-finite values")]
    NonFinite,
    #[error("float and quantized models differ in architecture")]
    ArchMismatch,
}

/// Affine int8 parameters of one activation boundary: `real = scale * (q - zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QParams {
    pub scale: f32,
    pub zero_point: i8,
}

impl QParams {
    /// Range parameters covering `[min, max]` widened to include zero.
    pub fn from_range(min: f64, max: f64) -> Self {
        let min = min.min(0.0);
        let max = max.max(0.0);
        let mut scale = ((max - min) / 255.0) as f32;
        if !(scale > 0.0) {
            scale = 1.0;
        }
        let zp = (-128.0 - min / scale as f64).round().clamp(-128.0, 127.0);
        QParams {
            scale,
            zero_point: zp as i8,
        }
    }

    pub fn quantize(&self, x: f64) -> i8 {
        (x / self.scale as f64 + self.zero_point as f64).round().clamp(-128.0, 127.0) as i8
    }

    pub fn dequantize(&self, q: i8) -> f64 {
        self.scale as f64 * (q as i32 - self.zero_point as i32) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QLayer {
    Dense {
        input: usize,
        output: usize,
        weights_q: Vec<i8>,
        weight_scale: f32,
        bias_q: Vec<i32>,
        bias_scale: f32,
        activation: Activation,
    },
    Conv1d {
        channels_in: usize,
        channels_out: usize,
        kernel: usize,
        length: usize,
        weights_q: Vec<i8>,
        weight_scale: f32,
        bias_q: Vec<i32>,
        bias_scale: f32,
        activation: Activation,
    },
    MaxPool1d {
        channels: usize,
        length: usize,
        width: usize,
    },
}

impl QLayer {
    pub fn weights_q(&self) -> &[i8] {
        match self {
            QLayer::Dense { weights_q, .. } | QLayer::Conv1d { weights_q, .. } => weights_q,
            QLayer::MaxPool1d { .. } => &[],
        }
    }

    pub fn bias_q(&self) -> &[i32] {
        match self {
            QLayer::Dense { bias_q, .. } | QLayer::Conv1d { bias_q, .. } => bias_q,
            QLayer::MaxPool1d { .. } => &[],
        }
    }

    /// `(weight_scale, bias_scale)` for parameterized layers.
    pub fn scales(&self) -> Option<(f32, f32)> {
        match self {
            QLayer::Dense { weight_scale, bias_scale, .. } | QLayer::Conv1d { weight_scale, bias_scale, .. } => {
                Some((*weight_scale, *bias_scale))
            }
            QLayer::MaxPool1d { .. } => None,
        }
    }

    pub fn input_len(&self) -> usize {
        match self {
            QLayer::Dense { input, .. } => *input,
            QLayer::Conv1d { channels_in, length, .. } => channels_in * length,
            QLayer::MaxPool1d { channels, length, .. } => channels * length,
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            QLayer::Dense { output, .. } => *output,
            QLayer::Conv1d { channels_out, length, .. } => channels_out * length,
            QLayer::MaxPool1d { channels, length, width } => channels * (length / width),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub arch: Arch,
    pub input_dim: usize,
    pub layers: Vec<QLayer>,
    /// `activations[0]` is the input boundary, `activations[k + 1]` the
    /// output of layer `k`.
    pub activations: Vec<QParams>,
    /// SHA-256 of the float model the weights came from.
    pub source_digest: [u8; 32],
}

/// Per-tensor symmetric quantization into [-127, 127]. An all-zero tensor
/// gets scale 1.
pub fn quantize_weights(w: &[f64]) -> (Vec<i8>, f32) {
    let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max > 0.0 { (max / 127.0) as f32 } else { 1.0 };
    let q = w
        .iter()
        .map(|v| (v / scale as f64).round().clamp(-127.0, 127.0) as i8)
        .collect();
    (q, scale)
}

pub fn dequantize_weights(q: &[i8], scale: f32) -> Vec<f64> {
    q.iter().map(|&v| v as f64 * scale as f64).collect()
}

/// Digest of a float model's architecture and parameters.
pub fn model_digest(model: &AutoencoderModel) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update([model.arch.tag()]);
    h.update((model.input_dim as u32).to_le_bytes());
    for layer in &model.layers {
        for p in layer.weights().iter().chain(layer.biases()) {
            h.update((*p as f32).to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Observed `[min, max]` at every activation boundary over `calibration`.
fn activation_ranges(model: &AutoencoderModel, calibration: &Matrix) -> Vec<(f64, f64)> {
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); model.layers.len() + 1];
    let widen = |r: &mut (f64, f64), v: &[f64]| {
        for &x in v {
            r.0 = r.0.min(x);
            r.1 = r.1.max(x);
        }
    };
    for row in calibration.iter_rows() {
        widen(&mut ranges[0], row);
        let mut cur = row.to_vec();
        for (k, layer) in model.layers.iter().enumerate() {
            let (pre, _) = layer.forward_pre(&cur);
            cur = layer.activation().apply(&pre);
            widen(&mut ranges[k + 1], &cur);
        }
    }
    ranges
}

pub fn quantize_model(model: &AutoencoderModel, calibration: &Matrix) -> Result<QuantizedModel, QuantizeError> {
    if calibration.is_empty() {
        return Err(QuantizeError::EmptyCalibration);
    }
    if calibration.cols() != model.input_dim {
        return Err(QuantizeError::DimensionMismatch {
            expected: model.input_dim,
            got: calibration.cols(),
        });
    }
    if calibration.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(QuantizeError::NonFinite);
    }

    let ranges = activation_ranges(model, calibration);
    let mut activations: Vec<QParams> = Vec::with_capacity(ranges.len());
    activations.push(QParams::from_range(ranges[0].0, ranges[0].1));
    for (k, layer) in model.layers.iter().enumerate() {
        // Pooling selects among its inputs, so it keeps the input grid.
        let p = match layer {
            Layer::MaxPool1d { .. } => activations[k],
            _ => QParams::from_range(ranges[k + 1].0, ranges[k + 1].1),
        };
        activations.push(p);
    }

    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(k, layer)| {
            let in_scale = activations[k].scale;
            let quant_params = |w: &[f64], b: &[f64]| {
                let (wq, ws) = quantize_weights(w);
                let bs = in_scale * ws;
                let bq = b
                    .iter()
                    .map(|v| (v / bs as f64).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
                    .collect();
                (wq, ws, bq, bs)
            };
            match layer {
                Layer::Dense { input, output, weights, biases, activation } => {
                    let (weights_q, weight_scale, bias_q, bias_scale) = quant_params(weights, biases);
                    QLayer::Dense {
                        input: *input,
                        output: *output,
                        weights_q,
                        weight_scale,
                        bias_q,
                        bias_scale,
                        activation: *activation,
                    }
                }
                Layer::Conv1d { channels_in, channels_out, kernel, length, weights, biases, activation } => {
                    let (weights_q, weight_scale, bias_q, bias_scale) = quant_params(weights, biases);
                    QLayer::Conv1d {
                        channels_in: *channels_in,
                        channels_out: *channels_out,
                        kernel: *kernel,
                        length: *length,
                        weights_q,
                        weight_scale,
                        bias_q,
                        bias_scale,
                        activation: *activation,
                    }
                }
                Layer::MaxPool1d { channels, length, width } => QLayer::MaxPool1d {
                    channels: *channels,
                    length: *length,
                    width: *width,
                },
            }
        })
        .collect();

    Ok(QuantizedModel {
        arch: model.arch,
        input_dim: model.input_dim,
        layers,
        activations,
        source_digest: model_digest(model),
    })
}

fn requantize(acc: i32, multiplier: f64, out: QParams, activation: Activation) -> i8 {
    let q = ((acc as f64 * multiplier).round() + out.zero_point as f64).clamp(-128.0, 127.0) as i8;
    match activation {
        Activation::Relu => q.max(out.zero_point),
        Activation::Linear => q,
    }
}

impl QuantizedModel {
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights_q().len()).sum()
    }

    pub fn bias_count(&self) -> usize {
        self.layers.iter().map(|l| l.bias_q().len()).sum()
    }

    /// Scale and zero-point bytes: two f32 per parameterized layer plus an
    /// f32 scale and i8 zero point per activation boundary.
    pub fn scale_bytes(&self) -> usize {
        8 * self.layers.iter().filter(|l| l.scales().is_some()).count() + 5 * self.activations.len()
    }

    /// Integer forward pass returning the int8 output tensor.
    pub fn forward_q(&self, s: &[f64]) -> Result<Vec<i8>, QuantizeError> {
        if s.len() != self.input_dim {
            return Err(QuantizeError::DimensionMismatch {
                expected: self.input_dim,
                got: s.len(),
            });
        }
        let mut cur: Vec<i8> = s.iter().map(|&x| self.activations[0].quantize(x)).collect();
        for (k, layer) in self.layers.iter().enumerate() {
            let (inp, out) = (self.activations[k], self.activations[k + 1]);
            let zp_in = inp.zero_point as i32;
            cur = match layer {
                QLayer::Dense { input, output, weights_q, bias_q, bias_scale, activation, .. } => {
                    let m = *bias_scale as f64 / out.scale as f64;
                    (0..*output)
                        .map(|o| {
                            let row = &weights_q[o * input..(o + 1) * input];
                            let acc = bias_q[o]
                                + row.iter().zip(&cur).map(|(&w, &x)| w as i32 * (x as i32 - zp_in)).sum::<i32>();
                            requantize(acc, m, out, *activation)
                        })
                        .collect()
                }
                QLayer::Conv1d { channels_in, channels_out, kernel, length, weights_q, bias_q, bias_scale, activation, .. } => {
                    let (cin, kk, n) = (*channels_in, *kernel, *length);
                    let half = kk / 2;
                    let m = *bias_scale as f64 / out.scale as f64;
                    let mut y = Vec::with_capacity(channels_out * n);
                    for o in 0..*channels_out {
                        for i in 0..n {
                            let mut acc = bias_q[o];
                            for c in 0..cin {
                                for j in 0..kk {
                                    let pos = i + j;
                                    if pos < half || pos - half >= n {
                                        continue;
                                    }
                                    let x = cur[c * n + pos - half] as i32 - zp_in;
                                    acc += weights_q[(o * cin + c) * kk + j] as i32 * x;
                                }
                            }
                            y.push(requantize(acc, m, out, *activation));
                        }
                    }
                    y
                }
                QLayer::MaxPool1d { channels, length, width } => {
                    let out_len = length / width;
                    let mut y = Vec::with_capacity(channels * out_len);
                    for c in 0..*channels {
                        for i in 0..out_len {
                            let base = c * length + i * width;
                            y.push(*cur[base..base + width].iter().max().expect("pool width > 0"));
                        }
                    }
                    y
                }
            };
        }
        Ok(cur)
    }

    /// Quantize `s`, run integer inference and dequantize the output.
    pub fn q_reconstruct(&self, s: &[f64]) -> Result<Vec<f64>, QuantizeError> {
        let out = *self.activations.last().expect("at least one boundary");
        Ok(self.forward_q(s)?.into_iter().map(|q| out.dequantize(q)).collect())
    }

    /// Reconstruction error of every row under integer inference.
    pub fn errors(&self, m: &Matrix) -> Result<Vec<f64>, QuantizeError> {
        m.iter_rows()
            .map(|row| {
                let r = self.q_reconstruct(row)?;
                Ok(r.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / row.len() as f64)
            })
            .collect()
    }

    /// Largest `input + output` int8 buffer pair across layers.
    pub fn peak_activation_bytes(&self) -> usize {
        self.layers.iter().map(|l| l.input_len() + l.output_len()).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SizeReport {
    pub float_bytes: usize,
    pub quant_bytes: usize,
    pub reduction_factor: f64,
    /// Parameters only: `4 (W + B)` float bytes.
    pub float_payload: usize,
    /// Parameters only: `W + 4 B` quantized bytes.
    pub quant_payload: usize,
    pub payload_reduction_factor: f64,
    pub header_bytes: usize,
    pub peak_activation_bytes_float: usize,
    pub peak_activation_bytes_quant: usize,
}

/// Byte accounting for a float model and its quantized counterpart. The
/// header is the fixed container header plus one descriptor per layer.
pub fn size_report(model: &AutoencoderModel, qmodel: &QuantizedModel) -> Result<SizeReport, QuantizeError> {
    if model.arch != qmodel.arch
        || model.input_dim != qmodel.input_dim
        || model.layers.len() != qmodel.layers.len()
        || model.weight_count() != qmodel.weight_count()
        || model.bias_count() != qmodel.bias_count()
    {
        return Err(QuantizeError::ArchMismatch);
    }
    let header_bytes = crate::container::HEADER_LEN + model.layers.len() * crate::container::LAYER_DESCRIPTOR_LEN;
    let (w, b) = (qmodel.weight_count(), qmodel.bias_count());
    let float_payload = 4 * (w + b);
    let quant_payload = w + 4 * b;
    let float_bytes = float_payload + header_bytes;
    let quant_bytes = quant_payload + qmodel.scale_bytes() + header_bytes;
    let peak_q = qmodel.peak_activation_bytes();
    Ok(SizeReport {
        float_bytes,
        quant_bytes,
        reduction_factor: float_bytes as f64 / quant_bytes as f64,
        float_payload,
        quant_payload,
        payload_reduction_factor: float_payload as f64 / quant_payload as f64,
        header_bytes,
        peak_activation_bytes_float: 4 * peak_q,
        peak_activation_bytes_quant: peak_q,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoenc::init_model;
    use rand::Rng;

    fn uniform(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = crate::rng::chacha(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen::<f64>()).collect())
    }

    #[test]
    fn weight_scale_arithmetic() {
        let (q, s) = quantize_weights(&[1.27, -0.5, 0.0]);
        assert!((s as f64 - 0.01).abs() < 1e-9);
        assert_eq!(q[0], 127);
        assert_eq!(q[1], -50);
        assert_eq!(quantize_weights(&[0.0; 4]), (vec![0; 4], 1.0));
    }

    #[test]
    fn dequantized_weights_within_half_step() {
        let mut r = crate::rng::chacha(1);
        let w: Vec<f64> = (0..1000).map(|_| r.gen_range(-3.0..3.0)).collect();
        let (q, s) = quantize_weights(&w);
        for (d, x) in dequantize_weights(&q, s).iter().zip(&w) {
            assert!((d - x).abs() <= s as f64 / 2.0 + 1e-12);
        }
        assert!(q.iter().all(|v| *v >= -127));
    }

    #[test]
    fn activation_params_include_zero() {
        let p = QParams::from_range(0.2, 0.8);
        assert_eq!(p.zero_point, -128);
        assert_eq!(p.dequantize(p.zero_point), 0.0);
        let p = QParams::from_range(-1.0, 1.0);
        assert!(p.dequantize(p.zero_point).abs() <= p.scale as f64);
        assert_eq!(QParams::from_range(0.0, 0.0).scale, 1.0);
    }

    #[test]
    fn zero_weight_model_outputs_bias_only() {
        let mut m = init_model(Arch::M1, 8, 1).unwrap();
        for l in &mut m.layers {
            let (w, _) = l.params_mut();
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        let q = quantize_model(&m, &uniform(10, 8, 2)).unwrap();
        assert!(q.q_reconstruct(&[0.3; 8]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bias_scale_is_product_of_input_and_weight_scale() {
        for arch in [Arch::M1, Arch::M2, Arch::M3] {
            let m = init_model(arch, 16, 4).unwrap();
            let q = quantize_model(&m, &uniform(20, 16, 5)).unwrap();
            for (k, l) in q.layers.iter().enumerate() {
                if let Some((ws, bs)) = l.scales() {
                    assert_eq!(bs, q.activations[k].scale * ws);
                }
                assert!(l.weights_q().iter().all(|v| (-127..=127).contains(v)));
            }
        }
    }

    #[test]
    fn integer_path_tracks_float_path() {
        for arch in [Arch::M1, Arch::M2, Arch::M3] {
            let mut m = init_model(arch, 16, 6).unwrap();
            let mut r = crate::rng::chacha(7);
            for l in &mut m.layers {
                let (_, b) = l.params_mut();
                b.iter_mut().for_each(|v| *v = r.gen_range(-0.1..0.1));
            }
            let cal = uniform(200, 16, 8);
            let q = quantize_model(&m, &cal).unwrap();
            for row in cal.iter_rows().take(50) {
                let f = m.reconstruct(row).unwrap();
                let g = q.q_reconstruct(row).unwrap();
                let dev = f.iter().zip(&g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(dev < 0.1, "{arch}: {dev}");
                assert_eq!(g, q.q_reconstruct(row).unwrap());
            }
        }
    }

    #[test]
    fn rejects_bad_calibration() {
        let m = init_model(Arch::M1, 8, 1).unwrap();
        assert_eq!(quantize_model(&m, &Matrix::zeros(0, 8)), Err(QuantizeError::EmptyCalibration));
        assert!(matches!(
            quantize_model(&m, &Matrix::zeros(3, 7)),
            Err(QuantizeError::DimensionMismatch { .. })
        ));
        let q = quantize_model(&m, &Matrix::zeros(3, 8)).unwrap();
        assert!(q.q_reconstruct(&[0.0; 3]).is_err());
    }

    #[test]
    fn size_accounting() {
        let m = init_model(Arch::M1, 512, 1).unwrap();
        let q = quantize_model(&m, &uniform(4, 512, 2)).unwrap();
        let s = size_report(&m, &q).unwrap();
        let (w, b) = (2 * 512 * 8, 8 + 512);
        assert_eq!(s.float_payload, 4 * (w + b));
        assert_eq!(s.quant_payload, w + 4 * b);
        assert_eq!(s.quant_bytes, w + 4 * b + 2 * 8 + 3 * 5 + s.header_bytes);
        assert_eq!(s.peak_activation_bytes_quant, 520);
        let other = init_model(Arch::M2, 512, 1).unwrap();
        assert_eq!(size_report(&other, &q), Err(QuantizeError::ArchMismatch));
    }
}
