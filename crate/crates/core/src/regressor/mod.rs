//! Convolutional regressor from depth images to morphing parameters.
//!
//! Five stages of 3x3 convolution (stride 1, zero padding 1) + ReLU + 2x2 max
//! pooling (stride 2, odd trailing rows/columns dropped), followed by one
//! linear layer. All parameters live in one flat `f64` vector; [`Layout`]
//! records where each block starts.

mod adam;
mod backprop;
pub(crate) mod io;
mod train;

pub use adam::{adam_step, AdamState};
pub use backprop::{gradients, loss_and_gradients, Gradients};
pub use io::{read_weights, write_weights, WeightsMeta};
pub use train::{train, train_from, EpochLoss, LossLog, TrainConfig, TrainOutcome};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::render::DepthImage;

pub const NUM_CONV: usize = 5;
pub const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_width: usize,
    pub input_height: usize,
    pub channels: [usize; NUM_CONV],
    pub output_dim: usize,
}

/// Shapes and parameter offsets of one conv stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    /// Input (and pre-pool) spatial size.
    pub height: usize,
    pub width: usize,
    pub kernel_offset: usize,
    pub bias_offset: usize,
}

impl ConvLayer {
    pub fn pooled(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    pub fn kernel_len(&self) -> usize {
        self.c_out * self.c_in * KERNEL * KERNEL
    }

    pub fn input_len(&self) -> usize {
        self.c_in * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.c_out * self.height * self.width
    }

    pub fn pooled_len(&self) -> usize {
        let (ph, pw) = self.pooled();
        self.c_out * ph * pw
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub conv: [ConvLayer; NUM_CONV],
    pub features: usize,
    pub linear_weight_offset: usize,
    pub linear_bias_offset: usize,
    pub total: usize,
}

impl NetworkSpec {
    pub fn new(
        input_width: usize,
        input_height: usize,
        channels: [usize; NUM_CONV],
        output_dim: usize,
    ) -> Result<Self> {
        let spec = NetworkSpec {
            input_width,
            input_height,
            channels,
            output_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::NetworkSpec("channel counts must be positive".into()));
        }
        if self.output_dim == 0 {
            return Err(Error::NetworkSpec("output dimension must be positive".into()));
        }
        let (mut h, mut w) = (self.input_height, self.input_width);
        for _ in 0..NUM_CONV {
            h /= 2;
            w /= 2;
        }
        if h == 0 || w == 0 {
            return Err(Error::NetworkSpec(format!(
                "input {}x{} vanishes after {NUM_CONV} poolings",
                self.input_width, self.input_height
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let mut offset = 0;
        let (mut h, mut w) = (self.input_height, self.input_width);
        let mut c_in = 1;
        let conv = std::array::from_fn(|i| {
            let c_out = self.channels[i];
            let layer = ConvLayer {
                c_in,
                c_out,
                height: h,
                width: w,
                kernel_offset: offset,
                bias_offset: offset + c_out * c_in * KERNEL * KERNEL,
            };
            offset = layer.bias_offset + c_out;
            c_in = c_out;
            h /= 2;
            w /= 2;
            layer
        });
        let features = self.channels[NUM_CONV - 1] * h * w;
        let linear_weight_offset = offset;
        let linear_bias_offset = offset + self.output_dim * features;
        Layout {
            conv,
            features,
            linear_weight_offset,
            linear_bias_offset,
            total: linear_bias_offset + self.output_dim,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().total
    }
}

/// All regressor parameters `beta` in one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights {
    pub spec: NetworkSpec,
    pub params: Vec<f64>,
}

impl NetworkWeights {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        NetworkWeights {
            spec: spec.clone(),
            params: vec![0.0; spec.num_params()],
        }
    }

    /// He-style initialization: conv kernels ~ N(0, 2 / fan_in), linear
    /// weights ~ N(0, 1 / fan_in), zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let layout = spec.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total];
        for layer in &layout.conv {
            let fan_in = (layer.c_in * KERNEL * KERNEL) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            for p in &mut params[layer.kernel_offset..layer.bias_offset] {
                *p = normal.sample(&mut rng);
            }
        }
        let normal = Normal::new(0.0, (1.0 / layout.features as f64).sqrt()).expect("positive std");
        for p in &mut params[layout.linear_weight_offset..layout.linear_bias_offset] {
            *p = normal.sample(&mut rng);
        }
        NetworkWeights {
            spec: spec.clone(),
            params,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

/// A training pair: network-resolution depth image and flat `(theta, gamma)` target.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: DepthImage,
    pub target: Vec<f64>,
}

pub(crate) fn check_input(spec: &NetworkSpec, d: &DepthImage) -> Result<()> {
    if d.width != spec.input_width || d.height != spec.input_height {
        return Err(Error::ShapeMismatch {
            expected_w: spec.input_width,
            expected_h: spec.input_height,
            actual_w: d.width,
            actual_h: d.height,
        });
    }
    Ok(())
}

/// Intermediate values of one forward pass, kept for backpropagation.
pub(crate) struct Trace {
    /// Input of every conv stage.
    pub inputs: Vec<Vec<f64>>,
    /// Post-ReLU activations of every conv stage.
    pub activations: Vec<Vec<f64>>,
    /// Flat in-plane index of the max for each pooled output.
    pub argmax: Vec<Vec<u32>>,
    pub features: Vec<f64>,
    pub output: Vec<f64>,
}

/// `out[co] += sum_ci kernel[co][ci] (*) input[ci]` with zero padding 1.
pub(crate) fn conv_forward(layer: &ConvLayer, kernel: &[f64], bias: &[f64], input: &[f64], out: &mut [f64]) {
    let (h, w) = (layer.height, layer.width);
    let plane = h * w;
    for co in 0..layer.c_out {
        let out_plane = &mut out[co * plane..(co + 1) * plane];
        out_plane.fill(bias[co]);
        for ci in 0..layer.c_in {
            let in_plane = &input[ci * plane..(ci + 1) * plane];
            let k = &kernel[(co * layer.c_in + ci) * 9..(co * layer.c_in + ci + 1) * 9];
            for ky in 0..KERNEL {
                let (y0, y1) = tap_range(h, ky);
                for kx in 0..KERNEL {
                    let (x0, x1) = tap_range(w, kx);
                    let kv = k[ky * KERNEL + kx];
                    for y in y0..y1 {
                        let src_row = (y + ky - 1) * w;
                        let dst = &mut out_plane[y * w + x0..y * w + x1];
                        let src = &in_plane[src_row + x0 + kx - 1..src_row + x1 + kx - 1];
                        for (o, &i) in dst.iter_mut().zip(src) {
                            *o += kv * i;
                        }
                    }
                }
            }
        }
    }
}

/// Output positions `[lo, hi)` along one axis whose tap `k` reads inside the input.
#[inline]
pub(crate) fn tap_range(n: usize, k: usize) -> (usize, usize) {
    match k {
        0 => (1.min(n), n),
        1 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

/// 2x2/2 max pooling with first-index tie-break (row-major scan).
pub(crate) fn max_pool(input: &[f64], channels: usize, h: usize, w: usize, out: &mut [f64], argmax: &mut [u32]) {
    let (ph, pw) = (h / 2, w / 2);
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for py in 0..ph {
            for px in 0..pw {
                let mut best_idx = (2 * py) * w + 2 * px;
                let mut best = plane[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * py + dy) * w + 2 * px + dx;
                    if plane[idx] > best {
                        best = plane[idx];
                        best_idx = idx;
                    }
                }
                let o = c * ph * pw + py * pw + px;
                out[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
}

pub(crate) fn forward_trace(w: &NetworkWeights, d: &DepthImage) -> Trace {
    let layout = w.spec.layout();
    let mut x: Vec<f64> = d.values.iter().map(|&v| f64::from(v)).collect();
    let mut inputs = Vec::with_capacity(NUM_CONV);
    let mut activations = Vec::with_capacity(NUM_CONV);
    let mut argmaxes = Vec::with_capacity(NUM_CONV);
    for layer in &layout.conv {
        let mut act = vec![0.0; layer.output_len()];
        conv_forward(
            layer,
            &w.params[layer.kernel_offset..layer.bias_offset],
            &w.params[layer.bias_offset..layer.bias_offset + layer.c_out],
            &x,
            &mut act,
        );
        for a in &mut act {
            if *a < 0.0 {
                *a = 0.0;
            }
        }
        let mut pooled = vec![0.0; layer.pooled_len()];
        let mut argmax = vec![0u32; layer.pooled_len()];
        max_pool(&act, layer.c_out, layer.height, layer.width, &mut pooled, &mut argmax);
        inputs.push(std::mem::replace(&mut x, pooled));
        activations.push(act);
        argmaxes.push(argmax);
    }
    let output = linear_forward(w, &layout, &x);
    Trace {
        inputs,
        activations,
        argmax: argmaxes,
        features: x,
        output,
    }
}

fn linear_forward(w: &NetworkWeights, layout: &Layout, features: &[f64]) -> Vec<f64> {
    let weights = &w.params[layout.linear_weight_offset..layout.linear_bias_offset];
    let bias = &w.params[layout.linear_bias_offset..layout.total];
    (0..w.spec.output_dim)
        .map(|o| {
            let row = &weights[o * layout.features..(o + 1) * layout.features];
            bias[o] + row.iter().zip(features).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

/// `f(D; beta)`: flat `n + m` output in schema order.
pub fn forward(d: &DepthImage, w: &NetworkWeights) -> Result<Vec<f64>> {
    check_input(&w.spec, d)?;
    Ok(forward_trace(w, d).output)
}

/// Squared Euclidean error of one prediction.
pub fn sample_loss(prediction: &[f64], target: &[f64]) -> f64 {
    prediction
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum()
}

/// Mean over the batch of the squared Euclidean error.
pub fn loss(batch: &[&Example], w: &NetworkWeights) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    let losses = batch
        .par_iter()
        .map(|ex| {
            check_input(&w.spec, &ex.input)?;
            Ok(sample_loss(&forward_trace(w, &ex.input).output, &ex.target))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}
