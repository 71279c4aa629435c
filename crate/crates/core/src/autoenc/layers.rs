#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 1,
            Activation::Linear => 0,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Activation::Linear),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    pub fn apply(self, z: &[f64]) -> Vec<f64> {
        match self {
            Activation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
            Activation::Linear => z.to_vec(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

/// One network layer. Tensors with channels are stored channel-major
/// (`[c][position]`), so flattening between conv and dense is a no-op.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `weights` is `output x input`, row-major.
    Dense {
        input: usize,
        output: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
        activation: Activation,
    },
    /// Same-padded 1-D convolution; `weights` is `[out][in][kernel]`.
    Conv1d {
        channels_in: usize,
        channels_out: usize,
        kernel: usize,
        length: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
        activation: Activation,
    },
    MaxPool1d {
        channels: usize,
        length: usize,
        width: usize,
    },
}

impl Layer {
    pub fn input_len(&self) -> usize {
        match self {
            Layer::Dense { input, .. } => *input,
            Layer::Conv1d { channels_in, length, .. } => channels_in * length,
            Layer::MaxPool1d { channels, length, .. } => channels * length,
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            Layer::Dense { output, .. } => *output,
            Layer::Conv1d { channels_out, length, .. } => channels_out * length,
            Layer::MaxPool1d { channels, length, width } => channels * (length / width),
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            Layer::Dense { activation, .. } | Layer::Conv1d { activation, .. } => *activation,
            Layer::MaxPool1d { .. } => Activation::Linear,
        }
    }

    pub fn weights(&self) -> &[f64] {
        match self {
            Layer::Dense { weights, .. } | Layer::Conv1d { weights, .. } => weights,
            Layer::MaxPool1d { .. } => &[],
        }
    }

    pub fn biases(&self) -> &[f64] {
        match self {
            Layer::Dense { biases, .. } | Layer::Conv1d { biases, .. } => biases,
            Layer::MaxPool1d { .. } => &[],
        }
    }

    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        match self {
            Layer::Dense { weights, biases, .. } | Layer::Conv1d { weights, biases, .. } => (weights, biases),
            Layer::MaxPool1d { .. } => (&mut [], &mut []),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights().len() + self.biases().len()
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        match self {
            Layer::Dense { input, output, .. } => Some((*input, *output)),
            Layer::Conv1d { channels_in, channels_out, kernel, .. } => Some((channels_in * kernel, *channels_out)),
            Layer::MaxPool1d { .. } => None,
        }
    }

    /// Pre-activation output, plus pooling argmax indices (empty otherwise).
    pub fn forward_pre(&self, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
        match self {
            Layer::Dense { input, output, weights, biases, .. } => {
                let z = (0..*output)
                    .map(|o| {
                        let row = &weights[o * input..(o + 1) * input];
                        biases[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
                    })
                    .collect();
                (z, Vec::new())
            }
            Layer::Conv1d { channels_in, channels_out, kernel, length, weights, biases, .. } => {
                let (cin, k, n) = (*channels_in, *kernel, *length);
                let half = k / 2;
                let mut z = vec![0.0; channels_out * n];
                for o in 0..*channels_out {
                    for i in 0..n {
                        let mut acc = biases[o];
                        for c in 0..cin {
                            for j in 0..k {
                                let pos = i + j;
                                if pos < half || pos - half >= n {
                                    continue;
                                }
                                acc += weights[(o * cin + c) * k + j] * x[c * n + pos - half];
                            }
                        }
                        z[o * n + i] = acc;
                    }
                }
                (z, Vec::new())
            }
            Layer::MaxPool1d { channels, length, width } => {
                let out_len = length / width;
                let mut z = Vec::with_capacity(channels * out_len);
                let mut arg = Vec::with_capacity(channels * out_len);
                for c in 0..*channels {
                    for i in 0..out_len {
                        let base = c * length + i * width;
                        let mut best = base;
                        for p in base + 1..base + width {
                            if x[p] > x[best] {
                                best = p;
                            }
                        }
                        z.push(x[best]);
                        arg.push(best);
                    }
                }
                (z, arg)
            }
        }
    }

    /// Backpropagate `d_out` (gradient w.r.t. this layer's activated output).
    /// Accumulates parameter gradients into `grad_w`/`grad_b` and returns the
    /// gradient w.r.t. the layer input.
    pub fn backward(
        &self,
        input: &[f64],
        pre: &[f64],
        argmax: &[usize],
        d_out: &[f64],
        grad_w: &mut [f64],
        grad_b: &mut [f64],
    ) -> Vec<f64> {
        let act = self.activation();
        let dz: Vec<f64> = d_out.iter().zip(pre).map(|(g, z)| g * act.derivative(*z)).collect();
        match self {
            Layer::Dense { input: n_in, output, weights, .. } => {
                let mut dx = vec![0.0; *n_in];
                for o in 0..*output {
                    let g = dz[o];
                    if g == 0.0 {
                        continue;
                    }
                    grad_b[o] += g;
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    let grow = &mut grad_w[o * n_in..(o + 1) * n_in];
                    for i in 0..*n_in {
                        grow[i] += g * input[i];
                        dx[i] += g * row[i];
                    }
                }
                dx
            }
            Layer::Conv1d { channels_in, channels_out, kernel, length, weights, .. } => {
                let (cin, k, n) = (*channels_in, *kernel, *length);
                let half = k / 2;
                let mut dx = vec![0.0; cin * n];
                for o in 0..*channels_out {
                    for i in 0..n {
                        let g = dz[o * n + i];
                        if g == 0.0 {
                            continue;
                        }
                        grad_b[o] += g;
                        for c in 0..cin {
                            for j in 0..k {
                                let pos = i + j;
                                if pos < half || pos - half >= n {
                                    continue;
                                }
                                let xi = c * n + pos - half;
                                let wi = (o * cin + c) * k + j;
                                grad_w[wi] += g * input[xi];
                                dx[xi] += g * weights[wi];
                            }
                        }
                    }
                }
                dx
            }
            Layer::MaxPool1d { .. } => {
                let mut dx = vec![0.0; input.len()];
                for (g, &src) in dz.iter().zip(argmax) {
                    dx[src] += g;
                }
                dx
            }
        }
    }
}
