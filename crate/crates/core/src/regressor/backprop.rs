use rayon::prelude::*;

use super::{
    check_input, forward_trace, sample_loss, tap_range, ConvLayer, Example, NetworkWeights, Trace,
    KERNEL, NUM_CONV,
};
use crate::error::{Error, Result};

/// Gradient of the batch loss, shaped like [`NetworkWeights::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<f64>);

/// Samples per reduction chunk. Fixed, so the summation order never depends
/// on the thread count.
const CHUNK: usize = 8;

pub fn gradients(batch: &[&Example], w: &NetworkWeights) -> Result<Gradients> {
    loss_and_gradients(batch, w).map(|(_, g)| g)
}

/// Batch loss and its exact gradient.
pub fn loss_and_gradients(batch: &[&Example], w: &NetworkWeights) -> Result<(f64, Gradients)> {
    scaled_loss_and_gradients(batch, w, 1.0)
}

/// Same as [`loss_and_gradients`] for the loss multiplied by `scale`.
pub(crate) fn scaled_loss_and_gradients(
    batch: &[&Example],
    w: &NetworkWeights,
    scale: f64,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Empty("gradient batch"));
    }
    for ex in batch {
        check_input(&w.spec, &ex.input)?;
        if ex.target.len() != w.spec.output_dim {
            return Err(Error::DimensionMismatch {
                expected: w.spec.output_dim,
                actual: ex.target.len(),
            });
        }
    }
    let weight = scale / batch.len() as f64;
    let partials: Vec<(f64, Vec<f64>)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; w.params.len()];
            let mut total = 0.0;
            for ex in chunk {
                let trace = forward_trace(w, &ex.input);
                total += sample_loss(&trace.output, &ex.target);
                let d_out: Vec<f64> = trace
                    .output
                    .iter()
                    .zip(&ex.target)
                    .map(|(p, t)| 2.0 * weight * (p - t))
                    .collect();
                backward(w, &trace, &d_out, &mut grad);
            }
            (total, grad)
        })
        .collect();
    let mut grad = vec![0.0; w.params.len()];
    let mut total = 0.0;
    for (l, g) in partials {
        total += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((scale * total / batch.len() as f64, Gradients(grad)))
}

/// Accumulates the gradient of `d_out . output` into `grad`.
fn backward(w: &NetworkWeights, trace: &Trace, d_out: &[f64], grad: &mut [f64]) {
    let layout = w.spec.layout();
    let f = layout.features;

    // Linear layer.
    let mut d_x = vec![0.0; f];
    for (o, &g) in d_out.iter().enumerate() {
        let row = layout.linear_weight_offset + o * f;
        for j in 0..f {
            grad[row + j] += g * trace.features[j];
            d_x[j] += w.params[row + j] * g;
        }
        grad[layout.linear_bias_offset + o] += g;
    }

    for li in (0..NUM_CONV).rev() {
        let layer = &layout.conv[li];
        let act = &trace.activations[li];
        // Unpool, then mask by the ReLU derivative (0 at and below zero).
        let mut d_pre = vec![0.0; layer.output_len()];
        let plane = layer.height * layer.width;
        let pooled_plane = layer.pooled().0 * layer.pooled().1;
        for (o, &g) in d_x.iter().enumerate() {
            let c = o / pooled_plane;
            let idx = c * plane + trace.argmax[li][o] as usize;
            if act[idx] > 0.0 {
                d_pre[idx] += g;
            }
        }
        let need_input_grad = li > 0;
        let mut d_in = if need_input_grad {
            vec![0.0; layer.input_len()]
        } else {
            Vec::new()
        };
        conv_backward(
            layer,
            &w.params[layer.kernel_offset..layer.bias_offset],
            &trace.inputs[li],
            &d_pre,
            grad,
            need_input_grad.then_some(d_in.as_mut_slice()),
        );
        d_x = d_in;
    }
}

fn conv_backward(
    layer: &ConvLayer,
    kernel: &[f64],
    input: &[f64],
    d_pre: &[f64],
    grad: &mut [f64],
    mut d_in: Option<&mut [f64]>,
) {
    let (h, w) = (layer.height, layer.width);
    let plane = h * w;
    for co in 0..layer.c_out {
        let g_plane = &d_pre[co * plane..(co + 1) * plane];
        grad[layer.bias_offset + co] += g_plane.iter().sum::<f64>();
        for ci in 0..layer.c_in {
            let in_plane = &input[ci * plane..(ci + 1) * plane];
            let k_base = (co * layer.c_in + ci) * KERNEL * KERNEL;
            for ky in 0..KERNEL {
                let (y0, y1) = tap_range(h, ky);
                for kx in 0..KERNEL {
                    let (x0, x1) = tap_range(w, kx);
                    let kv = kernel[k_base + ky * KERNEL + kx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let src_row = (y + ky - 1) * w;
                        let g = &g_plane[y * w + x0..y * w + x1];
                        let src = &in_plane[src_row + x0 + kx - 1..src_row + x1 + kx - 1];
                        acc += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(d_in) = d_in.as_deref_mut() {
                            let dst = &mut d_in
                                [ci * plane + src_row + x0 + kx - 1..ci * plane + src_row + x1 + kx - 1];
                            for (d, &gv) in dst.iter_mut().zip(g) {
                                *d += kv * gv;
                            }
                        }
                    }
                    grad[layer.kernel_offset + k_base + ky * KERNEL + kx] += acc;
                }
            }
        }
    }
}
