//! Parameter storage and the handful of differentiable building blocks shared
//! by every model stage.
//!
//! All parameters live in a [`ParamStore`] keyed by dotted names. Modules hold
//! clones of the [`Var`] handles, so in-place optimizer updates are visible to
//! every holder. Iteration order is lexicographic by name.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Parameter initializer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Deterministic RNG for one named scope, independent of construction order
/// elsewhere in the model.
pub fn module_rng(seed: u64, scope: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(scope.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn create(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std)
                    .map_err(|e| Error::Config(format!("bad init std {std}: {e}")))?;
                (0..numel).map(|_| dist.sample(rng)).collect()
            }
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy of every parameter value.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrite every parameter from `values`. Names and shapes must match
    /// exactly.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for name in values.keys() {
            if !self.vars.contains_key(name) {
                return Err(Error::Checkpoint(format!(
                    "unexpected parameter `{name}` in checkpoint"
                )));
            }
        }
        for (name, var) in &self.vars {
            let value = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if value.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: checkpoint {:?}, model {:?}",
                    value.dims(),
                    var.dims()
                )));
            }
            var.set(&value.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Fully connected layer, weight stored as (out, in).
#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.create(
            &format!("{name}.weight"),
            &[out_dim, in_dim],
            Init::Normal(std),
            rng,
        )?;
        let bias = if bias {
            Some(store.create(&format!("{name}.bias"), &[out_dim], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Applies the layer over the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.as_tensor().t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b.as_tensor())?),
            None => Ok(y),
        }
    }
}

#[derive(Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let weight = store.create(
            &format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            Init::Normal((2.0 / fan_in).sqrt()),
            rng,
        )?;
        let bias = store.create(&format!("{name}.bias"), &[out_ch], Init::Zeros, rng)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        let b = self.bias.as_tensor().reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Layer normalization over the last dimension with affine parameters.
#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

pub const NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            gamma: store.create(&format!("{name}.gamma"), &[dim], Init::Ones, rng)?,
            beta: store.create(&format!("{name}.beta"), &[dim], Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

/// Per-sample normalization over (C, H, W) of an NCHW map, with per-channel
/// affine parameters. No statistics are shared across the batch.
#[derive(Clone)]
pub struct SampleNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl SampleNorm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            gamma: store.create(&format!("{name}.gamma"), &[channels], Init::Ones, rng)?,
            beta: store.create(&format!("{name}.beta"), &[channels], Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let flat = x.reshape((b, c * h * w))?;
        let mean = flat.mean_keepdim(1)?;
        let centered = flat.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered
            .broadcast_div(&(var + NORM_EPS)?.sqrt()?)?
            .reshape((b, c, h, w))?;
        let g = self.gamma.as_tensor().reshape((1, c, 1, 1))?;
        let bt = self.beta.as_tensor().reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&g)?.broadcast_add(&bt)?)
    }
}

/// Max-subtracted softmax over the last dimension. The shift is detached; the
/// softmax is invariant to it so gradients are exact.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Softmax over the last dimension restricted to entries where `mask` is 1.
/// `mask` broadcasts against `x`. Rows with no valid entry produce all zeros.
pub fn masked_softmax_last(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    const BIG: f64 = 1e30;
    let mask = mask.broadcast_as(x.shape())?;
    let filled = ((x * &mask)? + ((&mask - 1.0)? * BIG)?)?;
    let max = filled.max_keepdim(D::Minus1)?.detach();
    let shifted = (x.broadcast_sub(&max)? * &mask)?;
    let e = (shifted.exp()? * &mask)?;
    let sum = e.sum_keepdim(D::Minus1)?;
    // empty rows: sum == 0, divide by 1 instead
    let any = mask.max_keepdim(D::Minus1)?;
    let denom = (sum + (1.0 - any)?)?;
    Ok(e.broadcast_div(&denom)?)
}

/// Logistic function in the tanh form, which stays finite (with finite
/// gradients) for logits of any magnitude.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Single-head scaled dot-product attention: softmax(q kᵀ / √d) v.
pub fn dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let d = q.dim(D::Minus1)? as f64;
    let scores = (q.matmul(&k.t()?)? / d.sqrt())?;
    Ok(softmax_last(&scores)?.matmul(v)?)
}

/// Nearest-neighbour ×2 upsampling of an NCHW map.
pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Row-interpolation matrix for bilinear resizing from `input` to
/// `input * scale` samples under the half-pixel (align-corners = false)
/// convention. Source coordinates below 0 clamp to the first sample and the
/// upper neighbour clamps to the last, so the outermost `scale / 2` outputs on
/// each side replicate the edge value.
pub fn bilinear_matrix(input: usize, scale: usize) -> Vec<f64> {
    let out = input * scale;
    let mut m = vec![0.0; out * input];
    for o in 0..out {
        let src = ((o as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let lambda = src - i0 as f64;
        m[o * input + i0] += 1.0 - lambda;
        m[o * input + i1] += lambda;
    }
    m
}

/// Bilinear upsampling of an NCHW map by an integer factor.
pub fn upsample_bilinear(x: &Tensor, scale: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let dev = x.device();
    let rows = Tensor::from_vec(bilinear_matrix(h, scale), (h * scale, h), dev)?.to_dtype(x.dtype())?;
    let cols = Tensor::from_vec(bilinear_matrix(w, scale), (w * scale, w), dev)?.to_dtype(x.dtype())?;
    let y = rows.broadcast_matmul(x)?;
    Ok(y.broadcast_matmul(&cols.t()?)?)
}

/// (B, C, h, w) map → (B, h·w, C) row-major token grid.
pub fn map_to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`map_to_tokens`].
pub fn tokens_to_map(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = t.dims3()?;
    if n != h * w {
        return Err(Error::Shape(format!("{n} tokens cannot form a {h}x{w} grid")));
    }
    Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// True when every element of `t` is finite.
pub fn all_finite(t: &Tensor) -> Result<bool> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}
