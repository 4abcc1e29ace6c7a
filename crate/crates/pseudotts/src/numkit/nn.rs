//! Layers shared by the recognizer, discriminator and acoustic models.

use rand::Rng;

use super::tape::Tape;
use super::tensor::Tensor;

pub fn xavier_uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::param(shape, data)
}

/// x [T, in] -> x W + b, W [in, out], b [out].
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: xavier_uniform(rng, vec![fan_in, fan_out], fan_in, fan_out),
            b: Tensor::param(vec![fan_out], vec![0.0; fan_out]),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Tensor {
        let y = tape.matmul(x, &self.w);
        tape.add(&y, &tape.broadcast_row(&self.b, y.shape()[0]))
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.w.clone(), self.b.clone()]
    }
}

/// 1-D convolution layer with zero padding. Kernel [kw, in, out].
pub struct Conv1dLayer {
    pub k: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1dLayer {
    pub fn new<R: Rng>(
        rng: &mut R,
        kw: usize,
        d_in: usize,
        d_out: usize,
        stride: usize,
        pad: usize,
    ) -> Conv1dLayer {
        Conv1dLayer {
            k: xavier_uniform(rng, vec![kw, d_in, d_out], kw * d_in, kw * d_out),
            b: Tensor::param(vec![d_out], vec![0.0; d_out]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Tensor {
        let padded = if self.pad > 0 { tape.pad_rows(x, self.pad, self.pad) } else { x.clone() };
        let y = tape
            .conv1d(&padded, &self.k, self.stride)
            .expect("conv1d: caller must guarantee T + 2*pad >= kernel width");
        tape.add(&y, &tape.broadcast_row(&self.b, y.shape()[0]))
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.k.clone(), self.b.clone()]
    }
}

/// Per-row layer normalization with learned gain and bias over features.
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> LayerNorm {
        LayerNorm {
            gain: Tensor::param(vec![dim], vec![1.0; dim]),
            bias: Tensor::param(vec![dim], vec![0.0; dim]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Tensor {
        let (t, d) = (x.shape()[0], x.shape()[1]);
        let mean = tape.scale(&tape.row_sum(x), 1.0 / d as f64);
        let xc = tape.sub(x, &tape.col_broadcast(&mean, d));
        let var = tape.scale(&tape.row_sum(&tape.mul(&xc, &xc)), 1.0 / d as f64);
        let inv = tape.recip(&tape.sqrt(&tape.add_scalar(&var, self.eps)));
        let y = tape.mul(&xc, &tape.col_broadcast(&inv, d));
        let scaled = tape.mul(&y, &tape.broadcast_row(&self.gain, t));
        tape.add(&scaled, &tape.broadcast_row(&self.bias, t))
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.gain.clone(), self.bias.clone()]
    }
}

/// Batch normalization over the time axis of one [T, D] sequence.
///
/// Training mode normalizes with the sequence's own per-feature statistics
/// and updates running averages (momentum 0.9); inference mode uses the
/// running averages as constants.
pub struct BatchNormTime {
    pub gain: Tensor,
    pub bias: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormTime {
    pub fn new(dim: usize) -> BatchNormTime {
        BatchNormTime {
            gain: Tensor::param(vec![dim], vec![1.0; dim]),
            bias: Tensor::param(vec![dim], vec![0.0; dim]),
            running_mean: Tensor::constant(vec![dim], vec![0.0; dim]),
            running_var: Tensor::constant(vec![dim], vec![1.0; dim]),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, training: bool) -> Tensor {
        let t = x.shape()[0];
        let (xc, inv) = if training {
            let mean = tape.scale(&tape.col_sum(x), 1.0 / t as f64);
            let xc = tape.sub(x, &tape.broadcast_row(&mean, t));
            let var = tape.scale(&tape.col_sum(&tape.mul(&xc, &xc)), 1.0 / t as f64);
            self.update_running(&mean.to_vec(), &var.to_vec());
            let inv = tape.recip(&tape.sqrt(&tape.add_scalar(&var, self.eps)));
            (xc, inv)
        } else {
            let mean = self.running_mean.clone();
            let var = self.running_var.clone();
            let xc = tape.sub(x, &tape.broadcast_row(&mean, t));
            let inv = tape.recip(&tape.sqrt(&tape.add_scalar(&var, self.eps)));
            (xc, inv)
        };
        let y = tape.mul(&xc, &tape.broadcast_row(&inv, t));
        let scaled = tape.mul(&y, &tape.broadcast_row(&self.gain, t));
        tape.add(&scaled, &tape.broadcast_row(&self.bias, t))
    }

    fn update_running(&self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        let mut rm = self.running_mean.to_vec();
        let mut rv = self.running_var.to_vec();
        for i in 0..rm.len() {
            rm[i] = m * rm[i] + (1.0 - m) * mean[i];
            rv[i] = m * rv[i] + (1.0 - m) * var[i];
        }
        self.running_mean.set_data(&rm);
        self.running_var.set_data(&rv);
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.gain.clone(), self.bias.clone()]
    }

    /// Non-trainable state that still belongs in checkpoints.
    pub fn state(&self) -> Vec<Tensor> {
        vec![self.running_mean.clone(), self.running_var.clone()]
    }
}

/// Mean squared error over all elements.
pub fn mse(tape: &Tape, a: &Tensor, b: &Tensor) -> Tensor {
    let d = tape.sub(a, b);
    tape.mean_all(&tape.mul(&d, &d))
}

/// Sinusoidal position table [len, dim] as a constant.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for t in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[t * dim + 2 * i] = (t as f64 * freq).sin();
            data[t * dim + 2 * i + 1] = (t as f64 * freq).cos();
        }
    }
    Tensor::constant(vec![len, dim], data)
}
