//! A minimal feed-forward network over flat `f64` parameter vectors.
//!
//! Parameters of every layer live in one contiguous buffer so that copying,
//! hashing and optimizer updates treat a network as a single vector.
//! Image tensors use HWC layout: element `(y, x, c)` sits at
//! `(y * width + x) * channels + c`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CdaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        height: usize,
        width: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    Sigmoid,
    GlobalAvgPool {
        height: usize,
        width: usize,
        channels: usize,
    },
}

impl Layer {
    fn conv_out(height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> (usize, usize) {
        (
            (height + 2 * pad - kernel) / stride + 1,
            (width + 2 * pad - kernel) / stride + 1,
        )
    }

    pub fn param_count(&self) -> usize {
        match *self {
            Layer::Linear { inputs, outputs } => inputs * outputs + outputs,
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * kernel * kernel * in_channels + out_channels,
            _ => 0,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Linear { inputs, .. } => inputs,
            Layer::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }

    /// Output length given an input of length `input`.
    fn output_len(&self, input: usize) -> Result<usize> {
        let mismatch = |expected: usize| {
            CdaError::Contract(format!(
                "layer {self:?} expects input length {expected}, got {input}"
            ))
        };
        match *self {
            Layer::Linear { inputs, outputs } => {
                if input != inputs {
                    return Err(mismatch(inputs));
                }
                Ok(outputs)
            }
            Layer::Conv2d {
                height,
                width,
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let expected = height * width * in_channels;
                if input != expected {
                    return Err(mismatch(expected));
                }
                if kernel == 0 || stride == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
                    return Err(CdaError::Contract(format!("degenerate convolution {self:?}")));
                }
                let (oh, ow) = Self::conv_out(height, width, kernel, stride, pad);
                Ok(oh * ow * out_channels)
            }
            Layer::Relu | Layer::Sigmoid => Ok(input),
            Layer::GlobalAvgPool {
                height,
                width,
                channels,
            } => {
                let expected = height * width * channels;
                if input != expected {
                    return Err(mismatch(expected));
                }
                Ok(channels)
            }
        }
    }
}

/// Intermediate activations of one forward pass; `acts[0]` is the input.
#[derive(Clone, Debug)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace always holds the input")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Net {
    layers: Vec<Layer>,
    offsets: Vec<usize>,
    input_len: usize,
    output_len: usize,
    params: Vec<f64>,
}

impl Net {
    /// Builds a network with fan-in scaled uniform initialisation,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases alike.
    pub fn new<R: Rng + ?Sized>(input_len: usize, layers: Vec<Layer>, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(input_len, layers)?;
        for (layer, &offset) in net.layers.iter().zip(&net.offsets) {
            let count = layer.param_count();
            if count == 0 {
                continue;
            }
            let bound = 1.0 / (layer.fan_in() as f64).sqrt();
            for p in &mut net.params[offset..offset + count] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(input_len: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut len = input_len;
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for layer in &layers {
            len = layer.output_len(len)?;
            offsets.push(total);
            total += layer.param_count();
        }
        Ok(Self {
            layers,
            offsets,
            input_len,
            output_len: len,
            params: vec![0.0; total],
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn output_len(&self) -> usize {
        self.output_len
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn same_architecture(&self, other: &Net) -> bool {
        self.layers == other.layers && self.input_len == other.input_len
    }

    /// Parameter slice of layer `index`.
    pub fn layer_params_mut(&mut self, index: usize) -> &mut [f64] {
        let offset = self.offsets[index];
        let count = self.layers[index].param_count();
        &mut self.params[offset..offset + count]
    }

    pub fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_len {
            return Err(CdaError::Contract(format!(
                "input length {} does not match network input {}",
                x.len(),
                self.input_len
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = self.apply(i, layer, &cur);
        }
        cur
    }

    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = self.apply(i, layer, acts.last().unwrap());
            acts.push(next);
        }
        Trace { acts }
    }

    /// Back-propagates `grad_out` through a recorded pass, accumulating the
    /// parameter gradient into `param_grad` and returning the input gradient.
    pub fn backward(&self, trace: &Trace, grad_out: &[f64], param_grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(param_grad.len(), self.params.len());
        debug_assert_eq!(grad_out.len(), self.output_len);
        let mut grad = grad_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.acts[i];
            let output = &trace.acts[i + 1];
            let offset = self.offsets[i];
            let count = layer.param_count();
            let pg = &mut param_grad[offset..offset + count];
            let p = &self.params[offset..offset + count];
            grad = backward_layer(layer, p, input, output, &grad, pg);
        }
        grad
    }

    fn apply(&self, index: usize, layer: &Layer, x: &[f64]) -> Vec<f64> {
        let offset = self.offsets[index];
        let p = &self.params[offset..offset + layer.param_count()];
        match *layer {
            Layer::Linear { inputs, outputs } => {
                let (w, b) = p.split_at(inputs * outputs);
                (0..outputs)
                    .map(|o| b[o] + dot(&w[o * inputs..(o + 1) * inputs], x))
                    .collect()
            }
            Layer::Conv2d {
                height,
                width,
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let (oh, ow) = Layer::conv_out(height, width, kernel, stride, pad);
                let wlen = out_channels * kernel * kernel * in_channels;
                let (w, b) = p.split_at(wlen);
                let mut out = vec![0.0; oh * ow * out_channels];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let o_base = (oy * ow + ox) * out_channels;
                        out[o_base..o_base + out_channels].copy_from_slice(b);
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= height as isize {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= width as isize {
                                    continue;
                                }
                                let i_base = (iy as usize * width + ix as usize) * in_channels;
                                let xs = &x[i_base..i_base + in_channels];
                                for oc in 0..out_channels {
                                    let w_base = ((oc * kernel + ky) * kernel + kx) * in_channels;
                                    out[o_base + oc] += dot(&w[w_base..w_base + in_channels], xs);
                                }
                            }
                        }
                    }
                }
                out
            }
            Layer::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            Layer::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            Layer::GlobalAvgPool {
                height,
                width,
                channels,
            } => {
                let n = (height * width) as f64;
                let mut out = vec![0.0; channels];
                for px in x.chunks_exact(channels) {
                    for (o, v) in out.iter_mut().zip(px) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= n);
                out
            }
        }
    }
}

fn backward_layer(
    layer: &Layer,
    p: &[f64],
    input: &[f64],
    output: &[f64],
    grad: &[f64],
    pg: &mut [f64],
) -> Vec<f64> {
    match *layer {
        Layer::Linear { inputs, outputs } => {
            let (w, _) = p.split_at(inputs * outputs);
            let (gw, gb) = pg.split_at_mut(inputs * outputs);
            let mut gx = vec![0.0; inputs];
            for o in 0..outputs {
                let g = grad[o];
                gb[o] += g;
                if g == 0.0 {
                    continue;
                }
                let row = o * inputs;
                for j in 0..inputs {
                    gw[row + j] += g * input[j];
                    gx[j] += g * w[row + j];
                }
            }
            gx
        }
        Layer::Conv2d {
            height,
            width,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        } => {
            let (oh, ow) = Layer::conv_out(height, width, kernel, stride, pad);
            let wlen = out_channels * kernel * kernel * in_channels;
            let w = &p[..wlen];
            let (gw, gb) = pg.split_at_mut(wlen);
            let mut gx = vec![0.0; input.len()];
            for oy in 0..oh {
                for ox in 0..ow {
                    let o_base = (oy * ow + ox) * out_channels;
                    let go = &grad[o_base..o_base + out_channels];
                    for (b, g) in gb.iter_mut().zip(go) {
                        *b += g;
                    }
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= width as isize {
                                continue;
                            }
                            let i_base = (iy as usize * width + ix as usize) * in_channels;
                            for (oc, &g) in go.iter().enumerate() {
                                if g == 0.0 {
                                    continue;
                                }
                                let w_base = ((oc * kernel + ky) * kernel + kx) * in_channels;
                                for c in 0..in_channels {
                                    gw[w_base + c] += g * input[i_base + c];
                                    gx[i_base + c] += g * w[w_base + c];
                                }
                            }
                        }
                    }
                }
            }
            gx
        }
        Layer::Relu => input
            .iter()
            .zip(grad)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
        Layer::Sigmoid => output
            .iter()
            .zip(grad)
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect(),
        Layer::GlobalAvgPool {
            height,
            width,
            channels,
        } => {
            let n = (height * width) as f64;
            let mut gx = Vec::with_capacity(input.len());
            for _ in 0..height * width {
                gx.extend(grad.iter().take(channels).map(|g| g / n));
            }
            gx
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
