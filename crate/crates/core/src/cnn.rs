//! Small CPU tensor network with reverse-mode gradients, enough for the
//! LeNet- and AlexNet-style teachers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, NamedArray};
use crate::distill::softmax_t;
use crate::error::{Error, Result};

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Length of one entry along the leading axis.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Entry `i` along the leading axis.
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.row_len().max(1))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Fully connected over the flattened input.
    Dense {
        units: usize,
    },
    /// Non-overlapping `size × size` windows.
    MaxPool2d {
        size: usize,
    },
    AvgPool2d {
        size: usize,
    },
    Relu,
    Tanh,
    Softmax,
    Dropout {
        rate: f64,
    },
    Flatten,
}

impl LayerSpec {
    pub fn conv(filters: usize, kernel: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            filters,
            kernel,
            stride: 1,
            padding,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::AvgPool2d { .. } => "avgpool2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Tanh => "tanh",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
        }
    }
}

/// Channel-height-width activation shape of a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn flat(n: usize) -> Self {
        Self { c: n, h: 1, w: 1 }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerPlan {
    spec: LayerSpec,
    input: Shape3,
    output: Shape3,
    offset: usize,
    weights: usize,
    biases: usize,
}

/// Validated layer stack with resolved shapes and parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    name: String,
    input: Shape3,
    num_classes: usize,
    plans: Vec<LayerPlan>,
    num_params: usize,
}

impl NetworkSpec {
    pub fn new(
        name: &str,
        input: Shape3,
        layers: &[LayerSpec],
        num_classes: usize,
    ) -> Result<Self> {
        let mut shape = input;
        let mut offset = 0;
        let mut plans = Vec::with_capacity(layers.len());
        for (i, &spec) in layers.iter().enumerate() {
            let err = |msg: String| Error::Shape(format!("layer {i} ({}): {msg}", spec.name()));
            let (output, weights, biases) = match spec {
                LayerSpec::Conv2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    if filters == 0 || kernel == 0 || stride == 0 {
                        return Err(err("filters, kernel and stride must be positive".into()));
                    }
                    let (ph, pw) = (shape.h + 2 * padding, shape.w + 2 * padding);
                    if kernel > ph || kernel > pw {
                        return Err(err(format!(
                            "kernel {kernel} larger than padded input {ph}x{pw}"
                        )));
                    }
                    let out = Shape3::new(
                        filters,
                        (ph - kernel) / stride + 1,
                        (pw - kernel) / stride + 1,
                    );
                    (out, filters * shape.c * kernel * kernel, filters)
                }
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return Err(err("units must be positive".into()));
                    }
                    (Shape3::flat(units), units * shape.len(), units)
                }
                LayerSpec::MaxPool2d { size } | LayerSpec::AvgPool2d { size } => {
                    if size == 0 || size > shape.h || size > shape.w {
                        return Err(err(format!(
                            "window {size} does not fit {}x{}",
                            shape.h, shape.w
                        )));
                    }
                    (Shape3::new(shape.c, shape.h / size, shape.w / size), 0, 0)
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(err(format!("rate {rate} outside [0, 1)")));
                    }
                    (shape, 0, 0)
                }
                LayerSpec::Relu | LayerSpec::Tanh | LayerSpec::Softmax => (shape, 0, 0),
                LayerSpec::Flatten => (Shape3::flat(shape.len()), 0, 0),
            };
            plans.push(LayerPlan {
                spec,
                input: shape,
                output,
                offset,
                weights,
                biases,
            });
            offset += weights + biases;
            shape = output;
        }
        if shape.len() != num_classes {
            return Err(Error::Shape(format!(
                "network emits {} values, expected {num_classes} logits",
                shape.len()
            )));
        }
        Ok(Self {
            name: name.to_string(),
            input,
            num_classes,
            plans,
            num_params: offset,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.plans.iter().map(|p| &p.spec)
    }

    /// Output shape after each layer.
    pub fn layer_shapes(&self) -> Vec<Shape3> {
        self.plans.iter().map(|p| p.output).collect()
    }

    /// `(label, count)` for every layer that owns parameters.
    pub fn layer_param_counts(&self) -> Vec<(String, usize)> {
        self.plans
            .iter()
            .enumerate()
            .filter(|(_, p)| p.weights + p.biases > 0)
            .map(|(i, p)| (format!("{i}:{}", p.spec.name()), p.weights + p.biases))
            .collect()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; self.num_params];
        for p in &self.plans {
            let (fan_in, fan_out) = match p.spec {
                LayerSpec::Conv2d {
                    filters, kernel, ..
                } => (p.input.c * kernel * kernel, filters * kernel * kernel),
                LayerSpec::Dense { units } => (p.input.len(), units),
                _ => continue,
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut params[p.offset..p.offset + p.weights] {
                *w = rng.random_range(-limit..limit);
            }
        }
        params
    }

    /// Shape-tagged `layer{i}.weight` / `layer{i}.bias` arrays for checkpoints.
    pub fn to_arrays(&self, params: &[f64]) -> Result<Vec<NamedArray>> {
        self.check_params(params)?;
        let mut out = Vec::new();
        for (i, p) in self.plans.iter().enumerate() {
            let weight_shape = match p.spec {
                LayerSpec::Conv2d {
                    filters, kernel, ..
                } => vec![filters, p.input.c, kernel, kernel],
                LayerSpec::Dense { units } => vec![units, p.input.len()],
                _ => continue,
            };
            let (w, b) = p.weight_bias(params);
            out.push(NamedArray::new(
                format!("layer{i}.weight"),
                weight_shape,
                w.to_vec(),
            )?);
            out.push(NamedArray::vector(format!("layer{i}.bias"), b.to_vec()));
        }
        Ok(out)
    }

    /// Inverse of [`NetworkSpec::to_arrays`].
    pub fn params_from_arrays(&self, arrays: &[NamedArray]) -> Result<Vec<f64>> {
        let mut params = vec![0.0; self.num_params];
        for (i, p) in self.plans.iter().enumerate() {
            if p.weights + p.biases == 0 {
                continue;
            }
            let w = checkpoint::find_array(arrays, &format!("layer{i}.weight"), None)?;
            let b = checkpoint::find_array(arrays, &format!("layer{i}.bias"), Some(&[p.biases]))?;
            if w.data.len() != p.weights {
                return Err(Error::Shape(format!(
                    "layer{i}.weight has {} values, {} expects {}",
                    w.data.len(),
                    self.name,
                    p.weights
                )));
            }
            params[p.offset..p.offset + p.weights].copy_from_slice(&w.data);
            params[p.offset + p.weights..p.offset + p.weights + p.biases].copy_from_slice(&b.data);
        }
        Ok(params)
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params {
            return Err(Error::Shape(format!(
                "{} expects {} parameters, got {}",
                self.name,
                self.num_params,
                params.len()
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let expected = [self.input.c, self.input.h, self.input.w];
        let shape = batch.shape();
        let ok = match shape.len() {
            4 => shape[1..] == expected,
            2 => shape[1] == self.input.len(),
            _ => false,
        };
        if !ok {
            return Err(Error::Shape(format!(
                "{} expects input batches of shape [B, {}, {}, {}], got {shape:?}",
                self.name, self.input.c, self.input.h, self.input.w
            )));
        }
        Ok(shape[0])
    }

    /// Inference-mode logits `[B, C]` (dropout disabled).
    pub fn forward(&self, params: &[f64], batch: &Tensor) -> Result<Tensor> {
        self.check_params(params)?;
        let n = self.check_batch(batch)?;
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                self.forward_sample(params, batch.row(i), None)
                    .output()
                    .to_vec()
            })
            .collect();
        Tensor::new(vec![n, self.num_classes], rows.concat())
    }

    /// Parameter gradient of `Σ_b ⟨cotangent_b, logits_b⟩`.
    ///
    /// `dropout_seed = None` runs in inference mode.
    pub fn backward(
        &self,
        params: &[f64],
        batch: &Tensor,
        loss_cotangent: &Tensor,
        dropout_seed: Option<u64>,
    ) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let n = self.check_batch(batch)?;
        if loss_cotangent.shape() != [n, self.num_classes] {
            return Err(Error::Shape(format!(
                "cotangent shape {:?}, expected [{n}, {}]",
                loss_cotangent.shape(),
                self.num_classes
            )));
        }
        Ok(self
            .accumulate(n, |i, grads| {
                let seed = dropout_seed.map(|s| sample_seed(s, i));
                let trace = self.forward_sample(params, batch.row(i), seed);
                self.backward_sample(params, &trace, loss_cotangent.row(i), grads);
                0.0
            })
            .1)
    }

    /// Mean softmax cross-entropy over the batch and its parameter gradient.
    pub fn cross_entropy_grad(
        &self,
        params: &[f64],
        batch: &Tensor,
        labels: &[usize],
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_params(params)?;
        let n = self.check_batch(batch)?;
        if labels.len() != n || n == 0 {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Range(format!("label {bad} out of range")));
        }
        let scale = 1.0 / n as f64;
        let (loss, mut grads) = self.accumulate(n, |i, grads| {
            let seed = dropout_seed.map(|s| sample_seed(s, i));
            let trace = self.forward_sample(params, batch.row(i), seed);
            let probs = softmax_t(trace.output(), 1.0).expect("positive temperature");
            let loss = -probs[labels[i]].max(crate::distill::PROB_FLOOR).ln();
            let mut cot = probs;
            cot[labels[i]] -= 1.0;
            self.backward_sample(params, &trace, &cot, grads);
            loss
        });
        grads.iter_mut().for_each(|g| *g *= scale);
        Ok((loss * scale, grads))
    }

    /// Runs `f` per sample in fixed-size parallel chunks and sums the chunk
    /// results in order, so the result does not depend on thread scheduling.
    fn accumulate<F>(&self, n: usize, f: F) -> (f64, Vec<f64>)
    where
        F: Fn(usize, &mut [f64]) -> f64 + Sync,
    {
        const CHUNK: usize = 4;
        let partials: Vec<(f64, Vec<f64>)> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut grads = vec![0.0; self.num_params];
                let mut loss = 0.0;
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    loss += f(i, &mut grads);
                }
                (loss, grads)
            })
            .collect();
        let mut total = vec![0.0; self.num_params];
        let mut loss = 0.0;
        for (l, g) in partials {
            loss += l;
            total.iter_mut().zip(&g).for_each(|(t, v)| *t += v);
        }
        (loss, total)
    }

    fn forward_sample(&self, params: &[f64], input: &[f64], dropout_seed: Option<u64>) -> Trace {
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let mut acts = Vec::with_capacity(self.plans.len() + 1);
        let mut masks = Vec::new();
        acts.push(input.to_vec());
        for p in &self.plans {
            let x = acts.last().expect("input pushed");
            let y = match p.spec {
                LayerSpec::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let (w, b) = p.weight_bias(params);
                    conv_forward(x, p.input, w, b, p.output, kernel, stride, padding)
                }
                LayerSpec::Dense { units } => {
                    let (w, b) = p.weight_bias(params);
                    let n_in = p.input.len();
                    (0..units)
                        .map(|u| b[u] + dot(&w[u * n_in..(u + 1) * n_in], x))
                        .collect()
                }
                LayerSpec::MaxPool2d { size } => pool_forward(x, p.input, p.output, size, true),
                LayerSpec::AvgPool2d { size } => pool_forward(x, p.input, p.output, size, false),
                LayerSpec::Relu => x.iter().map(|v| v.max(0.0)).collect(),
                LayerSpec::Tanh => x.iter().map(|v| v.tanh()).collect(),
                LayerSpec::Softmax => softmax_t(x, 1.0).expect("positive temperature"),
                LayerSpec::Dropout { rate } => match rng.as_mut() {
                    Some(rng) if rate > 0.0 => {
                        let keep = 1.0 / (1.0 - rate);
                        let mask: Vec<f64> = (0..x.len())
                            .map(|_| {
                                if rng.random::<f64>() < rate {
                                    0.0
                                } else {
                                    keep
                                }
                            })
                            .collect();
                        let y = x.iter().zip(&mask).map(|(v, m)| v * m).collect();
                        masks.push(mask);
                        y
                    }
                    _ => x.clone(),
                },
                LayerSpec::Flatten => x.clone(),
            };
            acts.push(y);
        }
        Trace { acts, masks }
    }

    fn backward_sample(&self, params: &[f64], trace: &Trace, cotangent: &[f64], grads: &mut [f64]) {
        let mut dy = cotangent.to_vec();
        let mut masks = trace.masks.iter().rev();
        for (i, p) in self.plans.iter().enumerate().rev() {
            let x = &trace.acts[i];
            let y = &trace.acts[i + 1];
            let (g_w, g_rest) = grads[p.offset..].split_at_mut(p.weights);
            let g_b = &mut g_rest[..p.biases];
            let need_dx = i > 0;
            dy = match p.spec {
                LayerSpec::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let (w, _) = p.weight_bias(params);
                    conv_backward(
                        x, p.input, w, &dy, p.output, kernel, stride, padding, g_w, g_b, need_dx,
                    )
                }
                LayerSpec::Dense { units } => {
                    let (w, _) = p.weight_bias(params);
                    let n_in = p.input.len();
                    let mut dx = vec![0.0; if need_dx { n_in } else { 0 }];
                    for u in 0..units {
                        let d = dy[u];
                        g_b[u] += d;
                        if d == 0.0 {
                            continue;
                        }
                        axpy(d, x, &mut g_w[u * n_in..(u + 1) * n_in]);
                        if need_dx {
                            axpy(d, &w[u * n_in..(u + 1) * n_in], &mut dx);
                        }
                    }
                    dx
                }
                LayerSpec::MaxPool2d { size } => {
                    pool_backward(x, &dy, p.input, p.output, size, true)
                }
                LayerSpec::AvgPool2d { size } => {
                    pool_backward(x, &dy, p.input, p.output, size, false)
                }
                LayerSpec::Relu => x
                    .iter()
                    .zip(&dy)
                    .map(|(v, d)| if *v > 0.0 { *d } else { 0.0 })
                    .collect(),
                LayerSpec::Tanh => y.iter().zip(&dy).map(|(t, d)| d * (1.0 - t * t)).collect(),
                LayerSpec::Softmax => {
                    let s: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
                    y.iter().zip(&dy).map(|(a, d)| a * (d - s)).collect()
                }
                LayerSpec::Dropout { rate } => {
                    if rate > 0.0 && !trace.masks.is_empty() {
                        let mask = masks.next().expect("mask per active dropout layer");
                        dy.iter().zip(mask).map(|(d, m)| d * m).collect()
                    } else {
                        dy
                    }
                }
                LayerSpec::Flatten => dy,
            };
        }
    }
}

fn sample_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64).wrapping_add(0x632B_E59B_D9B4_E019)
}

struct Trace {
    acts: Vec<Vec<f64>>,
    masks: Vec<Vec<f64>>,
}

impl Trace {
    fn output(&self) -> &[f64] {
        self.acts.last().expect("input activation")
    }
}

impl LayerPlan {
    fn weight_bias<'a>(&self, params: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        let w = &params[self.offset..self.offset + self.weights];
        let b = &params[self.offset + self.weights..self.offset + self.weights + self.biases];
        (w, b)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

/// Output columns `ox` whose input column `ox*stride + kx − padding` is in range.
#[inline]
fn valid_range(
    out_len: usize,
    in_len: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> (usize, usize) {
    let lo = padding.saturating_sub(k).div_ceil(stride);
    // ox*stride + k − padding < in_len  ⇔  ox*stride < in_len + padding − k
    let limit = in_len + padding;
    let hi = if limit <= k {
        0
    } else {
        (limit - k - 1) / stride + 1
    };
    (lo.min(out_len), hi.min(out_len))
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &[f64],
    ins: Shape3,
    w: &[f64],
    b: &[f64],
    outs: Shape3,
    k: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let plane = outs.h * outs.w;
    let mut out = vec![0.0; outs.len()];
    for oc in 0..outs.c {
        let o = &mut out[oc * plane..(oc + 1) * plane];
        o.fill(b[oc]);
        for ic in 0..ins.c {
            let xin = &x[ic * ins.h * ins.w..(ic + 1) * ins.h * ins.w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(outs.h, ins.h, ky, stride, padding);
                for kx in 0..k {
                    let wv = w[((oc * ins.c + ic) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = valid_range(outs.w, ins.w, kx, stride, padding);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - padding;
                        let row = &xin[iy * ins.w..(iy + 1) * ins.w];
                        let orow = &mut o[oy * outs.w..(oy + 1) * outs.w];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - padding;
                            axpy(
                                wv,
                                &row[ix0..ix0 + (ox_hi - ox_lo)],
                                &mut orow[ox_lo..ox_hi],
                            );
                        } else {
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * row[ox * stride + kx - padding];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    ins: Shape3,
    w: &[f64],
    dy: &[f64],
    outs: Shape3,
    k: usize,
    stride: usize,
    padding: usize,
    g_w: &mut [f64],
    g_b: &mut [f64],
    need_dx: bool,
) -> Vec<f64> {
    let plane = outs.h * outs.w;
    let mut dx = vec![0.0; if need_dx { ins.len() } else { 0 }];
    for oc in 0..outs.c {
        let d = &dy[oc * plane..(oc + 1) * plane];
        g_b[oc] += d.iter().sum::<f64>();
        for ic in 0..ins.c {
            let base = ic * ins.h * ins.w;
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(outs.h, ins.h, ky, stride, padding);
                for kx in 0..k {
                    let widx = ((oc * ins.c + ic) * k + ky) * k + kx;
                    let wv = w[widx];
                    let (ox_lo, ox_hi) = valid_range(outs.w, ins.w, kx, stride, padding);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut gw = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - padding;
                        let drow = &d[oy * outs.w..(oy + 1) * outs.w];
                        let row_start = base + iy * ins.w;
                        if stride == 1 {
                            let ix0 = ox_lo + kx - padding;
                            let len = ox_hi - ox_lo;
                            gw += dot(
                                &x[row_start + ix0..row_start + ix0 + len],
                                &drow[ox_lo..ox_hi],
                            );
                            if need_dx {
                                axpy(
                                    wv,
                                    &drow[ox_lo..ox_hi],
                                    &mut dx[row_start + ix0..row_start + ix0 + len],
                                );
                            }
                        } else {
                            for (ox, &dy) in drow.iter().enumerate().take(ox_hi).skip(ox_lo) {
                                let ix = row_start + ox * stride + kx - padding;
                                gw += x[ix] * dy;
                                if need_dx {
                                    dx[ix] += wv * dy;
                                }
                            }
                        }
                    }
                    g_w[widx] += gw;
                }
            }
        }
    }
    dx
}

fn pool_forward(x: &[f64], ins: Shape3, outs: Shape3, size: usize, max: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(outs.len());
    let norm = 1.0 / (size * size) as f64;
    for c in 0..outs.c {
        for oy in 0..outs.h {
            for ox in 0..outs.w {
                let mut acc = if max { f64::NEG_INFINITY } else { 0.0 };
                for dy in 0..size {
                    let row = (c * ins.h + oy * size + dy) * ins.w + ox * size;
                    for v in &x[row..row + size] {
                        acc = if max { acc.max(*v) } else { acc + v };
                    }
                }
                out.push(if max { acc } else { acc * norm });
            }
        }
    }
    out
}

fn pool_backward(
    x: &[f64],
    dy: &[f64],
    ins: Shape3,
    outs: Shape3,
    size: usize,
    max: bool,
) -> Vec<f64> {
    let mut dx = vec![0.0; ins.len()];
    let norm = 1.0 / (size * size) as f64;
    for c in 0..outs.c {
        for oy in 0..outs.h {
            for ox in 0..outs.w {
                let d = dy[(c * outs.h + oy) * outs.w + ox];
                let idx = |dyy: usize, dxx: usize| {
                    (c * ins.h + oy * size + dyy) * ins.w + ox * size + dxx
                };
                if max {
                    // First maximal element receives the gradient.
                    let mut best = idx(0, 0);
                    for a in 0..size {
                        for b in 0..size {
                            if x[idx(a, b)] > x[best] {
                                best = idx(a, b);
                            }
                        }
                    }
                    dx[best] += d;
                } else {
                    for a in 0..size {
                        for b in 0..size {
                            dx[idx(a, b)] += d * norm;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// LeNet-5 adapted to 1×28×28 inputs (no padding on the first convolution).
pub fn build_lenet_teacher(num_classes: usize) -> Result<NetworkSpec> {
    NetworkSpec::new(
        "lenet",
        Shape3::new(1, 28, 28),
        &[
            LayerSpec::conv(6, 5, 0),
            LayerSpec::Tanh,
            LayerSpec::AvgPool2d { size: 2 },
            LayerSpec::conv(16, 5, 0),
            LayerSpec::Tanh,
            LayerSpec::AvgPool2d { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 120 },
            LayerSpec::Tanh,
            LayerSpec::Dense { units: 84 },
            LayerSpec::Tanh,
            LayerSpec::Dense { units: num_classes },
        ],
        num_classes,
    )
}

/// Dropout rate used by the AlexNet-style teacher.
pub const ALEXNET_DROPOUT: f64 = 0.5;

/// Three-convolution AlexNet variant for 1×28×28 inputs.
pub fn build_alexnet_teacher(num_classes: usize) -> Result<NetworkSpec> {
    build_scaled_alexnet("alexnet", num_classes, 1)
}

/// AlexNet layout with every filter and hidden-unit count divided by `divisor`.
pub fn build_reduced_alexnet_teacher(num_classes: usize, divisor: usize) -> Result<NetworkSpec> {
    if divisor == 0 {
        return Err(Error::Config("divisor must be positive".into()));
    }
    build_scaled_alexnet(&format!("alexnet/{divisor}"), num_classes, divisor)
}

fn build_scaled_alexnet(name: &str, num_classes: usize, divisor: usize) -> Result<NetworkSpec> {
    let s = |n: usize| (n / divisor).max(1);
    NetworkSpec::new(
        name,
        Shape3::new(1, 28, 28),
        &[
            LayerSpec::conv(s(64), 3, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::conv(s(192), 3, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::conv(s(384), 3, 1),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dropout {
                rate: ALEXNET_DROPOUT,
            },
            LayerSpec::Dense { units: s(4096) },
            LayerSpec::Relu,
            LayerSpec::Dropout {
                rate: ALEXNET_DROPOUT,
            },
            LayerSpec::Dense { units: s(4096) },
            LayerSpec::Relu,
            LayerSpec::Dense { units: num_classes },
        ],
        num_classes,
    )
}
