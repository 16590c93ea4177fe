//! Mask decoder: text-to-visual cross-attention (D-Projector), a learnable
//! query transformer decoder, and the channel-attention mask head.

use candle_core::{DType, Tensor, Var, D};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::fuse::FusedMap;
use crate::nn::{
    dot_attention, map_to_tokens, masked_softmax_last, module_rng, sigmoid, tokens_to_map,
    upsample_bilinear, Conv2d, Init, LayerNorm, Linear, ParamStore,
};
use crate::textcond::TextBatch;

/// Stride of the fused map relative to the input.
pub const MASK_STRIDE: usize = 4;

/// (B, N_q, d_f) query vectors.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub queries: Tensor,
}

impl QuerySet {
    pub fn new(queries: Tensor) -> Result<Self> {
        let (_, nq, _) = queries.dims3()?;
        if nq == 0 {
            return Err(Error::Shape("query set is empty".into()));
        }
        Ok(Self { queries })
    }

    pub fn len(&self) -> usize {
        self.queries.dims()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// (B, 1, H, W) pre-sigmoid change scores at input resolution.
#[derive(Debug, Clone)]
pub struct ChangeLogits {
    pub logits: Tensor,
}

impl ChangeLogits {
    /// Per-sample H×W logit maps.
    pub fn to_arrays(&self) -> Result<Vec<Array2<f32>>> {
        let (b, _, h, w) = self.logits.dims4()?;
        let flat = self.logits.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        flat.chunks(h * w)
            .take(b)
            .map(|c| {
                Array2::from_shape_vec((h, w), c.to_vec()).map_err(|e| Error::Shape(e.to_string()))
            })
            .collect()
    }
}

fn xavier(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

/// Text width adapter plus single-head cross-attention from visual tokens to
/// text tokens.
#[derive(Clone)]
pub struct DProjector {
    pub adapter: Linear,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
}

impl DProjector {
    pub fn new(store: &mut ParamStore, prefix: &str, text_dim: usize, d: usize, seed: u64) -> Result<Self> {
        let mut rng = module_rng(seed, prefix);
        Ok(Self {
            adapter: Linear::new(store, &format!("{prefix}.adapter"), text_dim, d, true, xavier(text_dim), &mut rng)?,
            w_q: Linear::new(store, &format!("{prefix}.w_q"), d, d, false, xavier(d), &mut rng)?,
            w_k: Linear::new(store, &format!("{prefix}.w_k"), d, d, false, xavier(d), &mut rng)?,
            w_v: Linear::new(store, &format!("{prefix}.w_v"), d, d, false, xavier(d), &mut rng)?,
        })
    }
}

/// Injects text into the visual map: `out = visual + softmax_valid(q kᵀ/√d) v`.
/// Identity when `text` is absent; padding rows never receive weight and an
/// all-padding text yields a zero readout.
pub fn d_project(visual: &FusedMap, text: Option<&TextBatch>, params: Option<&DProjector>) -> Result<FusedMap> {
    let Some(text) = text else {
        return Ok(visual.clone());
    };
    let params = params.ok_or_else(|| Error::Config("text given but the decoder has no text pathway".into()))?;
    let (b, d, h, w) = visual.features.dims4()?;
    let (tb, _, _) = text.vectors.dims3()?;
    if tb != b {
        return Err(Error::Shape(format!("text batch {tb} vs visual batch {b}")));
    }
    let tokens = map_to_tokens(&visual.features)?; // (B, n, d)
    let t = params.adapter.forward(&text.vectors)?; // (B, L, d)
    let q = params.w_q.forward(&tokens)?;
    let k = params.w_k.forward(&t)?;
    let v = params.w_v.forward(&t)?;
    let scores = (q.matmul(&k.t()?)? / (d as f64).sqrt())?; // (B, n, L)
    let attn = masked_softmax_last(&scores, &text.mask.unsqueeze(1)?)?;
    let out = (tokens + attn.matmul(&v)?)?;
    Ok(FusedMap {
        features: tokens_to_map(&out, h, w)?,
    })
}

#[derive(Clone)]
pub struct AttentionBlock {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
}

impl AttentionBlock {
    fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Self> {
        let mut lin = |n: &str| Linear::new(store, &format!("{prefix}.{n}"), d, d, false, xavier(d), rng);
        Ok(Self {
            w_q: lin("w_q")?,
            w_k: lin("w_k")?,
            w_v: lin("w_v")?,
            w_o: lin("w_o")?,
        })
    }

    fn forward(&self, x: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let q = self.w_q.forward(x)?;
        let k = self.w_k.forward(memory)?;
        let v = self.w_v.forward(memory)?;
        self.w_o.forward(&dot_attention(&q, &k, &v)?)
    }
}

/// Pre-norm decoder layer: self-attention, cross-attention to the map, FFN.
#[derive(Clone)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: AttentionBlock,
    pub norm_cross: LayerNorm,
    pub cross_attn: AttentionBlock,
    pub norm_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            norm_self: LayerNorm::new(store, &format!("{prefix}.norm_self"), d, rng)?,
            self_attn: AttentionBlock::new(store, &format!("{prefix}.self_attn"), d, rng)?,
            norm_cross: LayerNorm::new(store, &format!("{prefix}.norm_cross"), d, rng)?,
            cross_attn: AttentionBlock::new(store, &format!("{prefix}.cross_attn"), d, rng)?,
            norm_ffn: LayerNorm::new(store, &format!("{prefix}.norm_ffn"), d, rng)?,
            ffn_in: Linear::new(store, &format!("{prefix}.ffn_in"), d, 2 * d, true, xavier(d), rng)?,
            ffn_out: Linear::new(store, &format!("{prefix}.ffn_out"), 2 * d, d, true, xavier(2 * d), rng)?,
        })
    }

    pub fn forward(&self, q: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let x = self.norm_self.forward(q)?;
        let q = (q + self.self_attn.forward(&x, &x)?)?;
        let x = self.norm_cross.forward(&q)?;
        let q = (&q + self.cross_attn.forward(&x, memory)?)?;
        let x = self.norm_ffn.forward(&q)?;
        let ffn = self.ffn_out.forward(&self.ffn_in.forward(&x)?.relu()?)?;
        Ok((q + ffn)?)
    }
}

#[derive(Clone)]
pub struct QueryDecoder {
    /// (N_q, d_f) learnable queries.
    pub queries: Var,
    pub layers: Vec<DecoderLayer>,
}

impl QueryDecoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        num_queries: usize,
        num_layers: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_queries == 0 {
            return Err(Error::Config("decoder.num_queries must be at least 1".into()));
        }
        if num_layers == 0 {
            return Err(Error::Config("decoder.layers must be at least 1".into()));
        }
        let mut rng = module_rng(seed, prefix);
        let queries = store.create(&format!("{prefix}.queries"), &[num_queries, d], Init::Normal(xavier(d)), &mut rng)?;
        let layers = (0..num_layers)
            .map(|i| DecoderLayer::new(store, &format!("{prefix}.layer{i}"), d, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self { queries, layers })
    }

    /// Learnable queries broadcast over a batch.
    pub fn initial_queries(&self, batch: usize) -> Result<QuerySet> {
        let (n, d) = self.queries.as_tensor().dims2()?;
        QuerySet::new(
            self.queries
                .as_tensor()
                .unsqueeze(0)?
                .broadcast_as((batch, n, d))?
                .contiguous()?,
        )
    }
}

/// Runs every decoder layer on the queries. The map is read-only and returned
/// unchanged.
pub fn decode(fused: &FusedMap, q: &QuerySet, params: &QueryDecoder) -> Result<(QuerySet, FusedMap)> {
    let memory = map_to_tokens(&fused.features)?;
    let mut queries = q.queries.clone();
    for layer in &params.layers {
        queries = layer.forward(&queries, &memory)?;
    }
    Ok((QuerySet::new(queries)?, fused.clone()))
}

/// Squeeze-excitation gate: global average pool → bottleneck → sigmoid.
#[derive(Clone)]
pub struct SqueezeExcite {
    pub reduce: Linear,
    pub expand: Linear,
}

impl SqueezeExcite {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let pooled = x.mean(D::Minus1)?.mean(D::Minus1)?; // (B, C)
        let gate = self.expand.forward(&self.reduce.forward(&pooled)?.relu()?)?;
        let gate = sigmoid(&gate)?.reshape((b, c, 1, 1))?;
        Ok(x.broadcast_mul(&gate)?)
    }
}

/// Refinement of the combined stride-4 logit map.
#[derive(Clone)]
pub struct MaskHead {
    pub conv_in: Conv2d,
    pub se: SqueezeExcite,
    pub conv_out: Conv2d,
}

impl MaskHead {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, seed: u64) -> Result<Self> {
        let mut rng = module_rng(seed, prefix);
        let bottleneck = (channels / 2).max(1);
        Ok(Self {
            conv_in: Conv2d::new(store, &format!("{prefix}.conv_in"), 1, channels, 3, 1, 1, &mut rng)?,
            se: SqueezeExcite {
                reduce: Linear::new(store, &format!("{prefix}.se.reduce"), channels, bottleneck, true, xavier(channels), &mut rng)?,
                expand: Linear::new(store, &format!("{prefix}.se.expand"), bottleneck, channels, true, xavier(bottleneck), &mut rng)?,
            },
            conv_out: Conv2d::new(store, &format!("{prefix}.conv_out"), channels, 1, 3, 1, 1, &mut rng)?,
        })
    }
}

/// Per-query scaled dot-product masks combined by max over queries, refined by the
/// conv/SE stack (residual), then bilinearly upsampled ×4.
pub fn predict_mask(q: &QuerySet, map: &FusedMap, head: &MaskHead) -> Result<ChangeLogits> {
    let (b, d, h, w) = map.features.dims4()?;
    let (qb, _, qd) = q.queries.dims3()?;
    if qb != b || qd != d {
        return Err(Error::Shape(format!(
            "queries are {:?}, map is {:?}",
            q.queries.dims(),
            map.features.dims()
        )));
    }
    let per_query = (q.queries.matmul(&map.features.reshape((b, d, h * w))?)? / (d as f64).sqrt())?; // (B, N_q, n)
    let combined = per_query.max_keepdim(1)?.reshape((b, 1, h, w))?;
    let hidden = head.se.forward(&head.conv_in.forward(&combined)?.relu()?)?;
    let refined = (combined + head.conv_out.forward(&hidden)?)?;
    Ok(ChangeLogits {
        logits: upsample_bilinear(&refined, MASK_STRIDE)?,
    })
}

/// `1` where sigmoid(logit) ≥ threshold.
pub fn binarize(logits: &Array2<f32>, threshold: f64) -> Array2<u8> {
    logits.mapv(|x| u8::from(1.0 / (1.0 + (-(x as f64)).exp()) >= threshold))
}

/// Text pathway (absent when conditioning is off), query decoder and head.
#[derive(Clone)]
pub struct MaskDecoder {
    pub text: Option<DProjector>,
    pub decoder: QueryDecoder,
    pub head: MaskHead,
}

impl MaskDecoder {
    pub fn forward(&self, fused: &FusedMap, text: Option<&TextBatch>) -> Result<ChangeLogits> {
        let (b, _, _, _) = fused.dims()?;
        let projected = d_project(fused, text, self.text.as_ref())?;
        let (queries, map) = decode(&projected, &self.decoder.initial_queries(b)?, &self.decoder)?;
        predict_mask(&queries, &map, &self.head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_boundary_is_positive() {
        let l = Array2::from_shape_vec((1, 3), vec![0.0f32, -10.0, 10.0]).unwrap();
        assert_eq!(binarize(&l, 0.5).into_raw_vec_and_offset().0, vec![1, 0, 1]);
    }

    #[test]
    fn decoder_rejects_zero_queries_or_layers() {
        let mut store = ParamStore::new(DType::F64);
        assert!(QueryDecoder::new(&mut store, "d", 4, 0, 1, 0).is_err());
        assert!(QueryDecoder::new(&mut store, "e", 4, 2, 0, 0).is_err());
    }
}
