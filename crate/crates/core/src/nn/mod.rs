//! Deterministic differentiable blocks over f64 tensors.
//!
//! A network is a flat sequence of [`Block`]s described by a [`NetworkSpec`].
//! [`forward_cached`] runs the chain and keeps every intermediate input so
//! [`backward`] can push an output gradient back through it, producing both
//! parameter gradients (shaped like the [`ParamSet`]) and an input gradient.
//!
//! All randomness (initialization, sampling) flows through seeded ChaCha
//! generators, so identical seeds give bit-identical parameter trajectories.

mod adam;

pub use adam::{adam_step, AdamConfig, OptimizerState};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    Dense {
        input: usize,
        output: usize,
    },
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    ConvTranspose1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    Tanh,
    /// Softmax over the last axis.
    Softmax,
    Flatten,
    Reshape {
        channels: usize,
        len: usize,
    },
}

impl Block {
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            Block::Dense { input: n_in, output } => {
                if input != [n_in] {
                    return Err(Error::config(format!(
                        "dense expects [{n_in}], got {input:?}"
                    )));
                }
                Ok(vec![output])
            }
            Block::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                let [ch, len] = two(input)?;
                if ch != in_channels {
                    return Err(Error::config(format!(
                        "conv1d expects {in_channels} channels, got {ch}"
                    )));
                }
                if len < kernel || (len - kernel) % stride != 0 {
                    return Err(Error::config(format!(
                        "conv1d kernel {kernel} stride {stride} does not tile length {len}"
                    )));
                }
                Ok(vec![out_channels, (len - kernel) / stride + 1])
            }
            Block::ConvTranspose1d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                let [ch, len] = two(input)?;
                if ch != in_channels {
                    return Err(Error::config(format!(
                        "conv_transpose1d expects {in_channels} channels, got {ch}"
                    )));
                }
                Ok(vec![out_channels, (len - 1) * stride + kernel])
            }
            Block::Relu | Block::Tanh => Ok(input.to_vec()),
            Block::Softmax => {
                if input.is_empty() {
                    return Err(Error::config("softmax needs at least one axis"));
                }
                Ok(input.to_vec())
            }
            Block::Flatten => Ok(vec![input.iter().product()]),
            Block::Reshape { channels, len } => {
                let n: usize = input.iter().product();
                if n != channels * len {
                    return Err(Error::config(format!(
                        "reshape to ({channels},{len}) needs {} elements, got {n}",
                        channels * len
                    )));
                }
                Ok(vec![channels, len])
            }
        }
    }

    /// Shapes of this block's parameter tensors, in order (weight, bias).
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            Block::Dense { input, output } => vec![vec![output, input], vec![output]],
            Block::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![vec![out_channels, in_channels, kernel], vec![out_channels]],
            Block::ConvTranspose1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![vec![in_channels, out_channels, kernel], vec![out_channels]],
            _ => vec![],
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Block::Dense { input, .. } => input,
            Block::Conv1d {
                in_channels, kernel, ..
            }
            | Block::ConvTranspose1d {
                in_channels, kernel, ..
            } => in_channels * kernel,
            _ => 1,
        }
    }
}

fn two(shape: &[usize]) -> Result<[usize; 2]> {
    match shape {
        [a, b] => Ok([*a, *b]),
        other => Err(Error::config(format!(
            "expected (channels, length) shape, got {other:?}"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub blocks: Vec<Block>,
    pub seed: u64,
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, blocks: Vec<Block>, seed: u64) -> Result<Self> {
        let spec = NetworkSpec {
            input_shape,
            blocks,
            seed,
        };
        spec.output_shape()?;
        Ok(spec)
    }

    /// Shape after each block, starting with the input shape.
    pub fn shape_chain(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, b) in self.blocks.iter().enumerate() {
            let next = b
                .output_shape(shapes.last().unwrap())
                .map_err(|e| Error::config(format!("block {i}: {e}")))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shape_chain()?.pop().unwrap())
    }

    /// Fan-in-scaled uniform weights, zero biases.
    pub fn init_params(&self) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut tensors = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let shapes = block.param_shapes();
            if shapes.is_empty() {
                continue;
            }
            let limit = (1.0 / block.fan_in() as f64).sqrt();
            for (j, shape) in shapes.into_iter().enumerate() {
                let name = format!("{i}.{}", if j == 0 { "weight" } else { "bias" });
                let t = if j == 0 {
                    let n: usize = shape.iter().product();
                    let data: Vec<f64> =
                        (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
                    Tensor::new(shape, data).unwrap()
                } else {
                    Tensor::zeros(shape)
                };
                tensors.push((name, t));
            }
        }
        ParamSet { tensors }
    }
}

/// Flat list of named parameter tensors for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub tensors: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.is_finite())
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for ((_, a), (_, b)) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in &mut self.tensors {
            t.scale(s);
        }
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    fn pair_for(&self, block_idx: usize) -> Option<(&Tensor, &Tensor)> {
        let w = self
            .tensors
            .iter()
            .find(|(n, _)| n == &format!("{block_idx}.weight"))?;
        let b = self
            .tensors
            .iter()
            .find(|(n, _)| n == &format!("{block_idx}.bias"))?;
        Some((&w.1, &b.1))
    }

    fn pair_mut_for(&mut self, block_idx: usize) -> Option<(usize, usize)> {
        let wi = self
            .tensors
            .iter()
            .position(|(n, _)| n == &format!("{block_idx}.weight"))?;
        let bi = self
            .tensors
            .iter()
            .position(|(n, _)| n == &format!("{block_idx}.bias"))?;
        Some((wi, bi))
    }
}

/// Intermediate activations from one forward pass.
pub struct ForwardCache {
    /// Input to each block, followed by the final output.
    activations: Vec<Tensor>,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        self.activations.last().unwrap()
    }

    /// Activation `idx` in the chain: 0 is the input, `i + 1` the output of
    /// block `i`.
    pub fn activation(&self, idx: usize) -> &Tensor {
        &self.activations[idx]
    }
}

pub fn forward(spec: &NetworkSpec, params: &ParamSet, input: &Tensor) -> Result<Tensor> {
    Ok(forward_cached(spec, params, input)?
        .activations
        .pop()
        .unwrap())
}

pub fn forward_cached(
    spec: &NetworkSpec,
    params: &ParamSet,
    input: &Tensor,
) -> Result<ForwardCache> {
    if input.shape() != spec.input_shape {
        return Err(Error::config(format!(
            "input shape {:?} does not match spec {:?}",
            input.shape(),
            spec.input_shape
        )));
    }
    let mut acts = Vec::with_capacity(spec.blocks.len() + 1);
    acts.push(input.clone());
    for (i, block) in spec.blocks.iter().enumerate() {
        let x = acts.last().unwrap();
        let y = apply_block(block, params, i, x)?;
        acts.push(y);
    }
    Ok(ForwardCache { activations: acts })
}

fn apply_block(block: &Block, params: &ParamSet, idx: usize, x: &Tensor) -> Result<Tensor> {
    let out_shape = block.output_shape(x.shape())?;
    let mut y = Tensor::zeros(out_shape);
    match *block {
        Block::Dense { input, output } => {
            let (w, b) = params
                .pair_for(idx)
                .ok_or_else(|| Error::config(format!("missing params for block {idx}")))?;
            let wd = w.data();
            let xd = x.data();
            let yd = y.data_mut();
            for o in 0..output {
                let row = &wd[o * input..(o + 1) * input];
                let mut acc = b.data()[o];
                for (wi, xi) in row.iter().zip(xd) {
                    acc += wi * xi;
                }
                yd[o] = acc;
            }
        }
        Block::Conv1d {
            in_channels,
            out_channels,
            kernel,
            stride,
        } => {
            let (w, b) = params
                .pair_for(idx)
                .ok_or_else(|| Error::config(format!("missing params for block {idx}")))?;
            let len = x.shape()[1];
            let out_len = (len - kernel) / stride + 1;
            let wd = w.data();
            let xd = x.data();
            let yd = y.data_mut();
            for oc in 0..out_channels {
                for t in 0..out_len {
                    let mut acc = b.data()[oc];
                    for ic in 0..in_channels {
                        let wrow = &wd[(oc * in_channels + ic) * kernel..][..kernel];
                        let xrow = &xd[ic * len + t * stride..][..kernel];
                        for (wv, xv) in wrow.iter().zip(xrow) {
                            acc += wv * xv;
                        }
                    }
                    yd[oc * out_len + t] = acc;
                }
            }
        }
        Block::ConvTranspose1d {
            in_channels,
            out_channels,
            kernel,
            stride,
        } => {
            let (w, b) = params
                .pair_for(idx)
                .ok_or_else(|| Error::config(format!("missing params for block {idx}")))?;
            let len = x.shape()[1];
            let out_len = (len - 1) * stride + kernel;
            let wd = w.data();
            let xd = x.data();
            let yd = y.data_mut();
            for oc in 0..out_channels {
                for u in 0..out_len {
                    yd[oc * out_len + u] = b.data()[oc];
                }
            }
            for ic in 0..in_channels {
                for t in 0..len {
                    let xv = xd[ic * len + t];
                    for oc in 0..out_channels {
                        let wrow = &wd[(ic * out_channels + oc) * kernel..][..kernel];
                        for (j, wv) in wrow.iter().enumerate() {
                            yd[oc * out_len + t * stride + j] += wv * xv;
                        }
                    }
                }
            }
        }
        Block::Relu => {
            for (yv, xv) in y.data_mut().iter_mut().zip(x.data()) {
                *yv = xv.max(0.0);
            }
        }
        Block::Tanh => {
            for (yv, xv) in y.data_mut().iter_mut().zip(x.data()) {
                *yv = xv.tanh();
            }
        }
        Block::Softmax => {
            let row = *x.shape().last().unwrap();
            let xd = x.data();
            let yd = y.data_mut();
            for r in 0..xd.len() / row {
                let xs = &xd[r * row..(r + 1) * row];
                let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (i, xv) in xs.iter().enumerate() {
                    let e = (xv - max).exp();
                    yd[r * row + i] = e;
                    sum += e;
                }
                for v in &mut yd[r * row..(r + 1) * row] {
                    *v /= sum;
                }
            }
        }
        Block::Flatten | Block::Reshape { .. } => {
            y.data_mut().copy_from_slice(x.data());
        }
    }
    Ok(y)
}

/// Push `output_grad` back through the network.
///
/// Returns gradients shaped like `params` plus the gradient w.r.t. the input.
pub fn backward(
    spec: &NetworkSpec,
    params: &ParamSet,
    cache: &ForwardCache,
    output_grad: &Tensor,
) -> Result<(ParamSet, Tensor)> {
    if output_grad.shape() != cache.output().shape() {
        return Err(Error::config(format!(
            "output_grad shape {:?} does not match output {:?}",
            output_grad.shape(),
            cache.output().shape()
        )));
    }
    let mut grads = params.zeros_like();
    let mut g = output_grad.clone();
    for (i, block) in spec.blocks.iter().enumerate().rev() {
        let x = &cache.activations[i];
        let y = &cache.activations[i + 1];
        g = backward_block(block, params, &mut grads, i, x, y, &g)?;
        if !g.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite gradient at block {i}"
            )));
        }
    }
    Ok((grads, g))
}

#[allow(clippy::too_many_arguments)]
fn backward_block(
    block: &Block,
    params: &ParamSet,
    grads: &mut ParamSet,
    idx: usize,
    x: &Tensor,
    y: &Tensor,
    g: &Tensor,
) -> Result<Tensor> {
    let mut gx = Tensor::zeros(x.shape().to_vec());
    match *block {
        Block::Dense { input, output } => {
            let (w, _) = params.pair_for(idx).unwrap();
            let (wi, bi) = grads.pair_mut_for(idx).unwrap();
            let wd = w.data();
            let xd = x.data();
            let gd = g.data();
            {
                let gw = grads.tensors[wi].1.data_mut();
                for o in 0..output {
                    let go = gd[o];
                    for i in 0..input {
                        gw[o * input + i] += go * xd[i];
                    }
                }
            }
            {
                let gb = grads.tensors[bi].1.data_mut();
                for o in 0..output {
                    gb[o] += gd[o];
                }
            }
            let gxd = gx.data_mut();
            for o in 0..output {
                let go = gd[o];
                let row = &wd[o * input..(o + 1) * input];
                for (i, wv) in row.iter().enumerate() {
                    gxd[i] += go * wv;
                }
            }
        }
        Block::Conv1d {
            in_channels,
            out_channels,
            kernel,
            stride,
        } => {
            let (w, _) = params.pair_for(idx).unwrap();
            let (wi, bi) = grads.pair_mut_for(idx).unwrap();
            let len = x.shape()[1];
            let out_len = y.shape()[1];
            let wd = w.data();
            let xd = x.data();
            let gd = g.data();
            {
                let gb = grads.tensors[bi].1.data_mut();
                for oc in 0..out_channels {
                    for t in 0..out_len {
                        gb[oc] += gd[oc * out_len + t];
                    }
                }
            }
            {
                let gw = grads.tensors[wi].1.data_mut();
                for oc in 0..out_channels {
                    for t in 0..out_len {
                        let go = gd[oc * out_len + t];
                        for ic in 0..in_channels {
                            let base = (oc * in_channels + ic) * kernel;
                            for j in 0..kernel {
                                gw[base + j] += go * xd[ic * len + t * stride + j];
                            }
                        }
                    }
                }
            }
            let gxd = gx.data_mut();
            for oc in 0..out_channels {
                for t in 0..out_len {
                    let go = gd[oc * out_len + t];
                    for ic in 0..in_channels {
                        let base = (oc * in_channels + ic) * kernel;
                        for j in 0..kernel {
                            gxd[ic * len + t * stride + j] += go * wd[base + j];
                        }
                    }
                }
            }
        }
        Block::ConvTranspose1d {
            in_channels,
            out_channels,
            kernel,
            stride,
        } => {
            let (w, _) = params.pair_for(idx).unwrap();
            let (wi, bi) = grads.pair_mut_for(idx).unwrap();
            let len = x.shape()[1];
            let out_len = y.shape()[1];
            let wd = w.data();
            let xd = x.data();
            let gd = g.data();
            {
                let gb = grads.tensors[bi].1.data_mut();
                for oc in 0..out_channels {
                    for u in 0..out_len {
                        gb[oc] += gd[oc * out_len + u];
                    }
                }
            }
            {
                let gw = grads.tensors[wi].1.data_mut();
                for ic in 0..in_channels {
                    for t in 0..len {
                        let xv = xd[ic * len + t];
                        for oc in 0..out_channels {
                            let base = (ic * out_channels + oc) * kernel;
                            for j in 0..kernel {
                                gw[base + j] += xv * gd[oc * out_len + t * stride + j];
                            }
                        }
                    }
                }
            }
            let gxd = gx.data_mut();
            for ic in 0..in_channels {
                for t in 0..len {
                    let mut acc = 0.0;
                    for oc in 0..out_channels {
                        let base = (ic * out_channels + oc) * kernel;
                        for j in 0..kernel {
                            acc += wd[base + j] * gd[oc * out_len + t * stride + j];
                        }
                    }
                    gxd[ic * len + t] = acc;
                }
            }
        }
        Block::Relu => {
            for ((gxv, xv), gv) in gx.data_mut().iter_mut().zip(x.data()).zip(g.data()) {
                *gxv = if *xv > 0.0 { *gv } else { 0.0 };
            }
        }
        Block::Tanh => {
            for ((gxv, yv), gv) in gx.data_mut().iter_mut().zip(y.data()).zip(g.data()) {
                *gxv = gv * (1.0 - yv * yv);
            }
        }
        Block::Softmax => {
            let row = *x.shape().last().unwrap();
            let yd = y.data();
            let gd = g.data();
            let gxd = gx.data_mut();
            for r in 0..yd.len() / row {
                let ys = &yd[r * row..(r + 1) * row];
                let gs = &gd[r * row..(r + 1) * row];
                let dot: f64 = ys.iter().zip(gs).map(|(yv, gv)| yv * gv).sum();
                for i in 0..row {
                    gxd[r * row + i] = ys[i] * (gs[i] - dot);
                }
            }
        }
        Block::Flatten | Block::Reshape { .. } => {
            gx.data_mut().copy_from_slice(g.data());
        }
    }
    Ok(gx)
}

/// z = mu + exp(logvar / 2) ⊙ noise.
pub fn reparameterize(mu: &[f64], logvar: &[f64], noise: &[f64]) -> Vec<f64> {
    debug_assert_eq!(mu.len(), logvar.len());
    debug_assert_eq!(mu.len(), noise.len());
    mu.iter()
        .zip(logvar)
        .zip(noise)
        .map(|((m, lv), n)| m + (lv / 2.0).exp() * n)
        .collect()
}

#[cfg(test)]
mod tests;
