//! Shared-weight multi-scale vision encoder and the backbone registry.

use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::nn::{module_rng, Conv2d, ParamStore, SampleNorm};

/// Strides of the four pyramid levels relative to the input.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Four feature maps (B, C_h, H/s_h, W/s_h), finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
}

impl FeaturePyramid {
    /// Checks the level count and stride arithmetic against an input of
    /// `height`×`width`.
    pub fn new(levels: Vec<Tensor>, height: usize, width: usize) -> Result<Self> {
        if levels.len() != STRIDES.len() {
            return Err(Error::Shape(format!(
                "pyramid needs {} levels, got {}",
                STRIDES.len(),
                levels.len()
            )));
        }
        for (i, (level, stride)) in levels.iter().zip(STRIDES).enumerate() {
            let (_, _, h, w) = level.dims4()?;
            if h * stride != height || w * stride != width {
                return Err(Error::Shape(format!(
                    "level {i} is {h}x{w}, expected {}x{} for stride {stride}",
                    height / stride,
                    width / stride
                )));
            }
        }
        Ok(Self { levels })
    }

    /// Wraps levels without the stride check (internal stages that already
    /// preserve shapes).
    pub(crate) fn from_levels_unchecked(levels: Vec<Tensor>) -> Self {
        Self { levels }
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i]
    }

    pub fn into_levels(self) -> Vec<Tensor> {
        self.levels
    }

    pub fn channel_widths(&self) -> Result<[usize; 4]> {
        let mut out = [0; 4];
        for (o, l) in out.iter_mut().zip(&self.levels) {
            *o = l.dims4()?.1;
        }
        Ok(out)
    }
}

pub trait Encoder: Send + Sync {
    fn channel_widths(&self) -> [usize; 4];

    /// Encodes a (B, 3, H, W) batch.
    fn forward(&self, images: &Tensor) -> Result<FeaturePyramid>;
}

/// Stacks H×W×3 images into a (B, 3, H, W) tensor.
pub fn images_to_tensor(images: &[&Array3<f32>], dtype: DType) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("empty image batch".into()));
    };
    let (h, w, _) = first.dim();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dim() != (h, w, 3) {
            return Err(Error::Shape(format!(
                "batch mixes image shapes {:?} and {:?}",
                img.dim(),
                (h, w, 3)
            )));
        }
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(img[[y, x, c]]);
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

fn check_input(images: &Tensor) -> Result<(usize, usize)> {
    let (_, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
    }
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Shape(format!(
            "input {h}x{w} is not a positive multiple of 32"
        )));
    }
    Ok((h, w))
}

/// Encodes a single H×W×3 image.
pub fn encode(encoder: &dyn Encoder, image: &Array3<f32>, dtype: DType) -> Result<FeaturePyramid> {
    let (h, w, _) = image.dim();
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Shape(format!(
            "input {h}x{w} is not a positive multiple of 32"
        )));
    }
    encoder.forward(&images_to_tensor(&[image], dtype)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneSpec {
    pub name: String,
    pub channel_widths: [usize; 4],
    pub seed: u64,
}

pub type BackboneFactory =
    Arc<dyn Fn(&BackboneSpec, &mut ParamStore, &str) -> Result<Box<dyn Encoder>> + Send + Sync>;

/// Name → (spec, constructor). Lookups build a freshly initialized encoder
/// whose parameters are registered in the caller's store under a prefix.
#[derive(Default, Clone)]
pub struct BackboneRegistry {
    entries: BTreeMap<String, (BackboneSpec, BackboneFactory)>,
}

impl BackboneRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding the built-in `tiny` backbone.
    pub fn with_builtins() -> Self {
        let mut reg = Self::new();
        reg.register(
            BackboneSpec {
                name: "tiny".into(),
                channel_widths: [16, 32, 64, 64],
                seed: 0,
            },
            Arc::new(|spec: &BackboneSpec, store: &mut ParamStore, prefix: &str| {
                Ok(Box::new(TinyBackbone::new(store, prefix, spec.channel_widths, spec.seed)?)
                    as Box<dyn Encoder>)
            }),
        )
        .expect("empty registry");
        reg
    }

    pub fn register(&mut self, spec: BackboneSpec, factory: BackboneFactory) -> Result<()> {
        if spec.channel_widths.contains(&0) {
            return Err(Error::Registry(format!(
                "backbone `{}` has a zero channel width",
                spec.name
            )));
        }
        if self.entries.contains_key(&spec.name) {
            return Err(Error::Registry(format!(
                "backbone `{}` is already registered",
                spec.name
            )));
        }
        self.entries.insert(spec.name.clone(), (spec, factory));
        Ok(())
    }

    pub fn spec(&self, name: &str) -> Option<&BackboneSpec> {
        self.entries.get(name).map(|(s, _)| s)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn lookup(&self, name: &str, store: &mut ParamStore, prefix: &str) -> Result<Box<dyn Encoder>> {
        let (spec, factory) = self
            .entries
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("backbone `{name}`")))?;
        factory(spec, store, prefix)
    }

    /// Like [`lookup`](Self::lookup) with the registered widths and seed
    /// replaced.
    pub fn build(
        &self,
        name: &str,
        widths: Option<[usize; 4]>,
        seed: u64,
        store: &mut ParamStore,
        prefix: &str,
    ) -> Result<Box<dyn Encoder>> {
        let (spec, factory) = self
            .entries
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("backbone `{name}`")))?;
        let mut spec = spec.clone();
        if let Some(w) = widths {
            if w.contains(&0) {
                return Err(Error::Config(format!("backbone.channels {w:?} has a zero width")));
            }
            spec.channel_widths = w;
        }
        spec.seed = seed;
        factory(&spec, store, prefix)
    }
}

struct ConvBlock {
    conv: Conv2d,
    norm: SampleNorm,
}

impl ConvBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu()?)
    }
}

/// Reference backbone: four stages of two [3×3 conv → per-sample norm →
/// ReLU] blocks. Stage 1 downsamples twice (stride 4), later stages once.
pub struct TinyBackbone {
    stages: Vec<[ConvBlock; 2]>,
    widths: [usize; 4],
}

impl TinyBackbone {
    pub fn new(store: &mut ParamStore, prefix: &str, widths: [usize; 4], seed: u64) -> Result<Self> {
        let mut rng = module_rng(seed, prefix);
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = 3;
        for (s, &out_ch) in widths.iter().enumerate() {
            let second_stride = if s == 0 { 2 } else { 1 };
            let mut block = |i: usize, cin: usize, stride: usize| -> Result<ConvBlock> {
                let name = format!("{prefix}.stage{s}.block{i}");
                Ok(ConvBlock {
                    conv: Conv2d::new(store, &format!("{name}.conv"), cin, out_ch, 3, stride, 1, &mut rng)?,
                    norm: SampleNorm::new(store, &format!("{name}.norm"), out_ch, &mut rng)?,
                })
            };
            let b0 = block(0, in_ch, 2)?;
            let b1 = block(1, out_ch, second_stride)?;
            stages.push([b0, b1]);
            in_ch = out_ch;
        }
        Ok(Self { stages, widths })
    }
}

impl Encoder for TinyBackbone {
    fn channel_widths(&self) -> [usize; 4] {
        self.widths
    }

    fn forward(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let (h, w) = check_input(images)?;
        let mut x = images.clone();
        let mut levels = Vec::with_capacity(4);
        for [b0, b1] in &self.stages {
            x = b1.forward(&b0.forward(&x)?)?;
            levels.push(x.clone());
        }
        FeaturePyramid::new(levels, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lookup_and_duplicates() {
        let mut reg = BackboneRegistry::with_builtins();
        let mut store = ParamStore::new(DType::F32);
        let enc = reg.lookup("tiny", &mut store, "backbone").unwrap();
        assert_eq!(enc.channel_widths(), [16, 32, 64, 64]);
        let dup = BackboneSpec {
            name: "tiny".into(),
            channel_widths: [1, 1, 1, 1],
            seed: 0,
        };
        let factory = reg.entries["tiny"].1.clone();
        assert!(matches!(reg.register(dup, factory), Err(Error::Registry(_))));
        assert!(matches!(
            reg.lookup("absent", &mut store, "x"),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn rejects_non_multiple_of_32() {
        let reg = BackboneRegistry::with_builtins();
        let mut store = ParamStore::new(DType::F32);
        let enc = reg.build("tiny", Some([2, 2, 2, 2]), 0, &mut store, "b").unwrap();
        let img = Array3::<f32>::zeros((48, 32, 3));
        assert!(matches!(encode(enc.as_ref(), &img, DType::F32), Err(Error::Shape(_))));
    }
}
