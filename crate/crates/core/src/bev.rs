//! Shared-space feature converter applied to both temporal pyramids.
//!
//! Each token `x_i` of a level is projected to `z_i = W_z x_i + b_z`, then
//! mixed by one of:
//!
//! * `AdditiveExact`: scores `A_ij = w_aᵀ ReLU(W_a1 z_i + W_a2 z_j)`, softmax
//!   over `j`, and `out_i = z_i + W_out Σ_j A_ij z_j`. Θ(n²) score evaluations.
//! * `AdditiveLinear`: one global context `g = Σ_j α_j z_j` with
//!   `α = softmax_j(w_aᵀ ReLU(W_a2 z_j))`, then
//!   `out_i = z_i + W_out ReLU(W_a1 z_i + W_a2 g)`. Θ(n) score evaluations and
//!   no n×n intermediate.
//! * `Transformer`: scaled dot-product self-attention, `out = z + softmax(q kᵀ/√D) v`.
//! * `None`: identity passthrough, no parameters.
//!
//! Every level has its own parameter set, shared across the two time phases.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor, Var, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{map_to_tokens, module_rng, softmax_last, tokens_to_map, Init, ParamStore};

/// Standard deviation of every converter weight at initialization.
pub const INIT_STD: f64 = 0.02;

/// Upper bound on elements of one (rows × n × D_a) score block.
const SCORE_BLOCK_ELEMS: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BevMode {
    None,
    Transformer,
    AdditiveExact,
    AdditiveLinear,
}

impl BevMode {
    pub const ALL: [BevMode; 4] = [
        BevMode::None,
        BevMode::Transformer,
        BevMode::AdditiveExact,
        BevMode::AdditiveLinear,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BevMode::None => "none",
            BevMode::Transformer => "transformer",
            BevMode::AdditiveExact => "additive_exact",
            BevMode::AdditiveLinear => "additive_linear",
        }
    }
}

impl fmt::Display for BevMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BevMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BevMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown bev.mode `{s}` (expected none, transformer, additive_exact or additive_linear)"
                ))
            })
    }
}

/// Row-major (B, n = h·w, D) tokens of a feature level.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    tokens: Tensor,
    h: usize,
    w: usize,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, h: usize, w: usize) -> Result<Self> {
        let (_, n, _) = tokens.dims3()?;
        if n != h * w {
            return Err(Error::Shape(format!("{n} tokens cannot form a {h}x{w} grid")));
        }
        Ok(Self { tokens, h, w })
    }

    /// Flattens a (B, C, h, w) map.
    pub fn from_map(map: &Tensor) -> Result<Self> {
        let (_, _, h, w) = map.dims4()?;
        Ok(Self {
            tokens: map_to_tokens(map)?,
            h,
            w,
        })
    }

    pub fn to_map(&self) -> Result<Tensor> {
        tokens_to_map(&self.tokens, self.h, self.w)
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.dims()[2]
    }

    pub fn batch(&self) -> usize {
        self.tokens.dims()[0]
    }

    fn with_tokens(&self, tokens: Tensor) -> Self {
        Self {
            tokens,
            h: self.h,
            w: self.w,
        }
    }
}

/// Per-call instrumentation.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct AttnStats {
    /// Number of attention scores computed, summed over the batch.
    pub score_evals: u64,
}

#[derive(Clone)]
pub struct Projection {
    /// (D, D_in)
    pub w_z: Var,
    /// (D)
    pub b_z: Var,
}

#[derive(Clone)]
pub struct AdditiveWeights {
    /// (D_a)
    pub w_a: Var,
    /// (D_a, D)
    pub w_a1: Var,
    /// (D_a, D)
    pub w_a2: Var,
    /// (D, D) for the exact path, (D, D_a) for the linear path.
    pub w_out: Var,
}

#[derive(Clone)]
pub struct DotWeights {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Converter parameters for one pyramid level.
#[derive(Clone)]
pub struct BevParams {
    pub mode: BevMode,
    pub projection: Option<Projection>,
    pub additive: Option<AdditiveWeights>,
    pub dot: Option<DotWeights>,
}

impl BevParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        mode: BevMode,
        d_in: usize,
        d: usize,
        d_attn: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut params = Self {
            mode,
            projection: None,
            additive: None,
            dot: None,
        };
        if mode == BevMode::None {
            return Ok(params);
        }
        let mut w = |name: &str, shape: &[usize], init: Init| {
            store.create(&format!("{prefix}.{name}"), shape, init, rng)
        };
        params.projection = Some(Projection {
            w_z: w("w_z", &[d, d_in], Init::Normal(INIT_STD))?,
            b_z: w("b_z", &[d], Init::Zeros)?,
        });
        match mode {
            BevMode::Transformer => {
                params.dot = Some(DotWeights {
                    w_q: w("w_q", &[d, d], Init::Normal(INIT_STD))?,
                    w_k: w("w_k", &[d, d], Init::Normal(INIT_STD))?,
                    w_v: w("w_v", &[d, d], Init::Normal(INIT_STD))?,
                });
            }
            BevMode::AdditiveExact | BevMode::AdditiveLinear => {
                let out_in = if mode == BevMode::AdditiveExact { d } else { d_attn };
                params.additive = Some(AdditiveWeights {
                    w_a: w("w_a", &[d_attn], Init::Normal(INIT_STD))?,
                    w_a1: w("w_a1", &[d_attn, d], Init::Normal(INIT_STD))?,
                    w_a2: w("w_a2", &[d_attn, d], Init::Normal(INIT_STD))?,
                    w_out: w("w_out", &[d, out_in], Init::Normal(INIT_STD))?,
                });
            }
            BevMode::None => unreachable!(),
        }
        Ok(params)
    }

    fn projection(&self) -> Result<&Projection> {
        self.projection
            .as_ref()
            .ok_or_else(|| Error::Config(format!("bev mode `{}` has no projection", self.mode)))
    }

    fn additive(&self) -> Result<&AdditiveWeights> {
        self.additive
            .as_ref()
            .ok_or_else(|| Error::Config(format!("bev mode `{}` has no additive weights", self.mode)))
    }

    fn dot(&self) -> Result<&DotWeights> {
        self.dot
            .as_ref()
            .ok_or_else(|| Error::Config(format!("bev mode `{}` has no attention weights", self.mode)))
    }
}

/// Builds one parameter set per pyramid level with D = D_in = level width.
pub fn build_levels(
    store: &mut ParamStore,
    prefix: &str,
    mode: BevMode,
    widths: [usize; 4],
    d_attn: usize,
    seed: u64,
) -> Result<Vec<BevParams>> {
    widths
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let scope = format!("{prefix}.level{i}");
            let mut rng = module_rng(seed, &scope);
            BevParams::new(store, &scope, mode, c, c, d_attn, &mut rng)
        })
        .collect()
}

fn linear_nobias(x: &Tensor, weight: &Var) -> Result<Tensor> {
    Ok(x.broadcast_matmul(&weight.as_tensor().t()?)?)
}

/// `z_i = W_z x_i + b_z` for every token.
pub fn project(params: &BevParams, x: &TokenGrid) -> Result<TokenGrid> {
    let p = params.projection()?;
    let d_in = p.w_z.dims()[1];
    if x.dim() != d_in {
        return Err(Error::Shape(format!(
            "projection expects width {d_in}, tokens have {}",
            x.dim()
        )));
    }
    let z = linear_nobias(&x.tokens, &p.w_z)?.broadcast_add(p.b_z.as_tensor())?;
    Ok(x.with_tokens(z))
}

/// Row-stochastic (B, n, n) weights `softmax_j(w_aᵀ ReLU(W_a1 z_i + W_a2 z_j))`.
/// Scores are formed in row blocks to bound memory.
pub fn attention_exact(params: &BevParams, z: &TokenGrid, stats: &mut AttnStats) -> Result<Tensor> {
    let a = params.additive()?;
    let (b, n, _) = z.tokens.dims3()?;
    let d_attn = a.w_a.dims()[0];
    let left = linear_nobias(&z.tokens, &a.w_a1)?; // (B, n, Da)
    let right = linear_nobias(&z.tokens, &a.w_a2)?.unsqueeze(1)?; // (B, 1, n, Da)
    let w_a = a.w_a.as_tensor().reshape((d_attn, 1))?;

    let rows_per_block = (SCORE_BLOCK_ELEMS / (b * n * d_attn).max(1)).clamp(1, n.max(1));
    let mut blocks = Vec::with_capacity(n.div_ceil(rows_per_block));
    let mut start = 0;
    while start < n {
        let rows = rows_per_block.min(n - start);
        let l = left.narrow(1, start, rows)?.unsqueeze(2)?; // (B, r, 1, Da)
        let hidden = l.broadcast_add(&right)?.relu()?; // (B, r, n, Da)
        let scores = hidden
            .reshape((b * rows * n, d_attn))?
            .matmul(&w_a)?
            .reshape((b, rows, n))?;
        blocks.push(softmax_last(&scores)?);
        start += rows;
    }
    stats.score_evals += (b * n * n) as u64;
    Ok(Tensor::cat(&blocks, 1)?)
}

/// Largest deviation of a row sum of `a` from 1.
pub fn max_row_sum_deviation(a: &Tensor) -> Result<f64> {
    let sums = a
        .sum(D::Minus1)?
        .flatten_all()?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?;
    Ok(sums.iter().fold(0.0, |m, s| m.max((s - 1.0).abs())))
}

/// `out_i = z_i + W_out Σ_j A_ij z_j`.
pub fn aggregate(params: &BevParams, a: &Tensor, z: &TokenGrid) -> Result<TokenGrid> {
    let w = params.additive()?;
    let (b, n, _) = z.tokens.dims3()?;
    if a.dims() != [b, n, n] {
        return Err(Error::Shape(format!(
            "attention is {:?}, expected [{b}, {n}, {n}]",
            a.dims()
        )));
    }
    let dev = max_row_sum_deviation(a)?;
    if dev.is_nan() || dev > 1e-4 {
        return Err(Error::Contract(format!(
            "attention rows must sum to 1 (max deviation {dev:e})"
        )));
    }
    let mixed = a.matmul(&z.tokens)?;
    let out = (&z.tokens + linear_nobias(&mixed, &w.w_out)?)?;
    Ok(z.with_tokens(out))
}

/// Global weights `α = softmax_j(w_aᵀ ReLU(W_a2 z_j))`, shape (B, 1, n).
pub fn linear_weights(params: &BevParams, z: &TokenGrid, stats: &mut AttnStats) -> Result<Tensor> {
    let a = params.additive()?;
    let (b, n, _) = z.tokens.dims3()?;
    let d_attn = a.w_a.dims()[0];
    let hidden = linear_nobias(&z.tokens, &a.w_a2)?.relu()?; // (B, n, Da)
    let scores = hidden
        .broadcast_matmul(&a.w_a.as_tensor().reshape((d_attn, 1))?)?
        .reshape((b, 1, n))?;
    stats.score_evals += (b * n) as u64;
    softmax_last(&scores)
}

/// Linear-cost converter; never forms an n×n object.
pub fn convert_linear(params: &BevParams, z: &TokenGrid, stats: &mut AttnStats) -> Result<TokenGrid> {
    let a = params.additive()?;
    let alpha = linear_weights(params, z, stats)?;
    let g = alpha.matmul(&z.tokens)?; // (B, 1, D)
    let hidden = linear_nobias(&z.tokens, &a.w_a1)?
        .broadcast_add(&linear_nobias(&g, &a.w_a2)?)?
        .relu()?;
    let out = (&z.tokens + linear_nobias(&hidden, &a.w_out)?)?;
    Ok(z.with_tokens(out))
}

/// Row-stochastic (B, n, n) dot-product attention weights.
pub fn transformer_weights(params: &BevParams, z: &TokenGrid, stats: &mut AttnStats) -> Result<Tensor> {
    let w = params.dot()?;
    let (b, n, d) = z.tokens.dims3()?;
    let q = linear_nobias(&z.tokens, &w.w_q)?;
    let k = linear_nobias(&z.tokens, &w.w_k)?;
    let scores = (q.matmul(&k.t()?)? / (d as f64).sqrt())?;
    stats.score_evals += (b * n * n) as u64;
    softmax_last(&scores)
}

/// `out = z + softmax(q kᵀ / √D) v`.
pub fn convert_transformer(params: &BevParams, z: &TokenGrid, stats: &mut AttnStats) -> Result<TokenGrid> {
    let w = params.dot()?;
    let a = transformer_weights(params, z, stats)?;
    let v = linear_nobias(&z.tokens, &w.w_v)?;
    let out = (&z.tokens + a.matmul(&v)?)?;
    Ok(z.with_tokens(out))
}

/// Full converter on one token grid, dispatching on the mode.
pub fn convert_grid(params: &BevParams, x: &TokenGrid, stats: &mut AttnStats) -> Result<TokenGrid> {
    if params.mode == BevMode::None {
        return Ok(x.clone());
    }
    let z = project(params, x)?;
    match params.mode {
        BevMode::None => unreachable!(),
        BevMode::Transformer => convert_transformer(params, &z, stats),
        BevMode::AdditiveExact => {
            let a = attention_exact(params, &z, stats)?;
            aggregate(params, &a, &z)
        }
        BevMode::AdditiveLinear => convert_linear(params, &z, stats),
    }
}

/// Converts both temporal pyramids level by level with shared parameters.
pub fn convert(
    params: &[BevParams],
    p1: &FeaturePyramid,
    p2: &FeaturePyramid,
) -> Result<(FeaturePyramid, FeaturePyramid)> {
    if params.len() != p1.levels().len() {
        return Err(Error::Shape(format!(
            "{} converter levels for a {}-level pyramid",
            params.len(),
            p1.levels().len()
        )));
    }
    let mut out1 = Vec::with_capacity(params.len());
    let mut out2 = Vec::with_capacity(params.len());
    for (i, ((lp, f1), f2)) in params.iter().zip(p1.levels()).zip(p2.levels()).enumerate() {
        if f1.dims() != f2.dims() {
            return Err(Error::Shape(format!(
                "level {i}: t1 is {:?}, t2 is {:?}",
                f1.dims(),
                f2.dims()
            )));
        }
        if lp.mode == BevMode::None {
            out1.push(f1.clone());
            out2.push(f2.clone());
            continue;
        }
        let mut stats = AttnStats::default();
        out1.push(convert_grid(lp, &TokenGrid::from_map(f1)?, &mut stats)?.to_map()?);
        out2.push(convert_grid(lp, &TokenGrid::from_map(f2)?, &mut stats)?.to_map()?);
    }
    Ok((
        FeaturePyramid::from_levels_unchecked(out1),
        FeaturePyramid::from_levels_unchecked(out2),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn params(mode: BevMode, d: usize, da: usize) -> (ParamStore, BevParams) {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = module_rng(3, "t");
        let p = BevParams::new(&mut store, "bev", mode, d, d, da, &mut rng).unwrap();
        (store, p)
    }

    fn grid(n: usize, d: usize) -> TokenGrid {
        let t = Tensor::randn(0f64, 1.0, (1, n, d), &Device::Cpu).unwrap();
        TokenGrid::new(t, 1, n).unwrap()
    }

    #[test]
    fn mode_strings_round_trip() {
        for m in BevMode::ALL {
            assert_eq!(m.as_str().parse::<BevMode>().unwrap(), m);
        }
        assert!("bev".parse::<BevMode>().is_err());
    }

    #[test]
    fn none_mode_has_no_parameters() {
        let (store, p) = params(BevMode::None, 4, 3);
        assert!(store.is_empty());
        assert!(matches!(project(&p, &grid(2, 4)), Err(Error::Config(_))));
    }

    #[test]
    fn zero_score_vector_gives_uniform_rows() {
        let (_s, p) = params(BevMode::AdditiveExact, 3, 2);
        let a = p.additive.as_ref().unwrap();
        a.w_a.set(&Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap()).unwrap();
        let mut stats = AttnStats::default();
        let att = attention_exact(&p, &grid(5, 3), &mut stats).unwrap();
        for row in att.get(0).unwrap().to_vec2::<f64>().unwrap() {
            for v in row {
                assert!((v - 0.2).abs() < 1e-15);
            }
        }
        assert_eq!(stats.score_evals, 25);
    }

    #[test]
    fn aggregate_rejects_non_stochastic_weights() {
        let (_s, p) = params(BevMode::AdditiveExact, 2, 2);
        let z = grid(3, 2);
        let bad = (Tensor::ones((1, 3, 3), DType::F64, &Device::Cpu).unwrap() * 0.5).unwrap();
        assert!(matches!(aggregate(&p, &bad, &z), Err(Error::Contract(_))));
    }

    #[test]
    fn linear_counter_is_n() {
        let (_s, p) = params(BevMode::AdditiveLinear, 3, 2);
        let mut stats = AttnStats::default();
        convert_linear(&p, &grid(7, 3), &mut stats).unwrap();
        assert_eq!(stats.score_evals, 7);
    }
}
