//! End-to-end change detector: shared backbone → converter → difference →
//! FPN → mask decoder.

use candle_core::{DType, Tensor};

use crate::backbone::{images_to_tensor, BackboneRegistry, Encoder};
use crate::bev::{self, BevMode, BevParams};
use crate::dataio::BitemporalSample;
use crate::error::{Error, Result};
use crate::fuse::{self, DiffParams, FpnParams};
use crate::maskdec::{ChangeLogits, DProjector, MaskDecoder, MaskHead, QueryDecoder};
use crate::nn::ParamStore;
use crate::textcond::{TextBatch, TextEmbedding};

/// Parameters whose names start with this prefix form the backbone group.
pub const BACKBONE_PREFIX: &str = "backbone";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: String,
    pub backbone_channels: [usize; 4],
    pub bev_mode: BevMode,
    pub bev_attn_dim: usize,
    pub bev_seed: u64,
    pub diff_channels: usize,
    pub fpn_channels: usize,
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub refine_channels: usize,
    /// Width of incoming text rows; `None` disables the text pathway.
    pub text_dim: Option<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: "tiny".into(),
            backbone_channels: [16, 32, 64, 64],
            bev_mode: BevMode::AdditiveLinear,
            bev_attn_dim: 16,
            bev_seed: 0,
            diff_channels: 64,
            fpn_channels: 64,
            num_queries: 8,
            decoder_layers: 2,
            refine_channels: 8,
            text_dim: Some(64),
            seed: 0,
        }
    }
}

pub struct SegChangeModel {
    store: ParamStore,
    encoder: Box<dyn Encoder>,
    bev: Vec<BevParams>,
    diff: DiffParams,
    fpn: FpnParams,
    decoder: MaskDecoder,
    config: ModelConfig,
}

impl SegChangeModel {
    pub fn new(config: &ModelConfig, registry: &BackboneRegistry, dtype: DType) -> Result<Self> {
        for (name, v) in [
            ("bev.attn_dim", config.bev_attn_dim),
            ("fuse.diff_channels", config.diff_channels),
            ("fuse.fpn_channels", config.fpn_channels),
            ("refine_channels", config.refine_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let mut store = ParamStore::new(dtype);
        let encoder = registry.build(
            &config.backbone,
            Some(config.backbone_channels),
            config.seed,
            &mut store,
            BACKBONE_PREFIX,
        )?;
        let widths = encoder.channel_widths();
        let bev = bev::build_levels(&mut store, "bev", config.bev_mode, widths, config.bev_attn_dim, config.bev_seed)?;
        let diff = DiffParams::new(&mut store, "fuse.diff", widths, config.diff_channels, config.seed)?;
        let fpn = FpnParams::new(&mut store, "fuse.fpn", config.diff_channels, config.fpn_channels, config.seed)?;
        let text = match config.text_dim {
            Some(0) => return Err(Error::Config("text width must be positive".into())),
            Some(dim) => Some(DProjector::new(&mut store, "decoder.text", dim, config.fpn_channels, config.seed)?),
            None => None,
        };
        let decoder = MaskDecoder {
            text,
            decoder: QueryDecoder::new(
                &mut store,
                "decoder.query",
                config.fpn_channels,
                config.num_queries,
                config.decoder_layers,
                config.seed,
            )?,
            head: MaskHead::new(&mut store, "decoder.head", config.refine_channels, config.seed)?,
        };
        Ok(Self {
            store,
            encoder,
            bev,
            diff,
            fpn,
            decoder,
            config: config.clone(),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn encoder(&self) -> &dyn Encoder {
        self.encoder.as_ref()
    }

    pub fn bev_params(&self) -> &[BevParams] {
        &self.bev
    }

    pub fn has_text_pathway(&self) -> bool {
        self.decoder.text.is_some()
    }

    /// Logits for (B, 3, H, W) image batches.
    pub fn forward(&self, t1: &Tensor, t2: &Tensor, text: Option<&TextBatch>) -> Result<ChangeLogits> {
        let p1 = self.encoder.forward(t1)?;
        let p2 = self.encoder.forward(t2)?;
        let (p1, p2) = bev::convert(&self.bev, &p1, &p2)?;
        let diff = fuse::difference(&p1, &p2, &self.diff)?;
        let fused = fuse::fpn_fuse(&diff, &self.fpn)?;
        self.decoder.forward(&fused, text)
    }

    /// Convenience batch forward over samples with per-sample text.
    pub fn forward_samples(
        &self,
        samples: &[&BitemporalSample],
        text: Option<&[&TextEmbedding]>,
    ) -> Result<ChangeLogits> {
        let dtype = self.dtype();
        let t1: Vec<_> = samples.iter().map(|s| &s.image_t1).collect();
        let t2: Vec<_> = samples.iter().map(|s| &s.image_t2).collect();
        let text = match text {
            Some(items) => Some(TextBatch::from_embeddings(items, dtype)?),
            None => None,
        };
        self.forward(
            &images_to_tensor(&t1, dtype)?,
            &images_to_tensor(&t2, dtype)?,
            text.as_ref(),
        )
    }
}
