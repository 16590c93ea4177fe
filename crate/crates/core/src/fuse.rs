//! Temporal difference module and top-down pyramid fusion.

use candle_core::Tensor;

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{module_rng, upsample_nearest2, Conv2d, ParamStore};

/// Per-level change features, finest first, each (B, d, h, w).
#[derive(Debug, Clone)]
pub struct DiffPyramid {
    levels: Vec<Tensor>,
}

impl DiffPyramid {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        for pair in levels.windows(2) {
            let (_, _, h0, w0) = pair[0].dims4()?;
            let (_, _, h1, w1) = pair[1].dims4()?;
            if h0 != 2 * h1 || w0 != 2 * w1 {
                return Err(Error::Shape(format!(
                    "adjacent levels {h0}x{w0} and {h1}x{w1} are not a factor 2 apart"
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }
}

/// Fused (B, d_f, H/4, W/4) map.
#[derive(Debug, Clone)]
pub struct FusedMap {
    pub features: Tensor,
}

impl FusedMap {
    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        Ok(self.features.dims4()?)
    }
}

/// One 1×1 conv per level over `[|f1 − f2| ; f1 + f2]`.
#[derive(Clone)]
pub struct DiffParams {
    pub convs: Vec<Conv2d>,
}

impl DiffParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        widths: [usize; 4],
        out: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = module_rng(seed, prefix);
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(store, &format!("{prefix}.level{i}"), 2 * c, out, 1, 1, 0, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self { convs })
    }
}

#[derive(Clone)]
pub struct FpnParams {
    pub laterals: Vec<Conv2d>,
    pub smooth: Conv2d,
}

impl FpnParams {
    pub fn new(store: &mut ParamStore, prefix: &str, in_ch: usize, out: usize, seed: u64) -> Result<Self> {
        let mut rng = module_rng(seed, prefix);
        let laterals = (0..4)
            .map(|i| Conv2d::new(store, &format!("{prefix}.lateral{i}"), in_ch, out, 1, 1, 0, &mut rng))
            .collect::<Result<_>>()?;
        let smooth = Conv2d::new(store, &format!("{prefix}.smooth"), out, out, 3, 1, 1, &mut rng)?;
        Ok(Self { laterals, smooth })
    }
}

/// Symmetric per-level differencing: swapping `p1` and `p2` gives a
/// bit-identical result.
pub fn difference(p1: &FeaturePyramid, p2: &FeaturePyramid, params: &DiffParams) -> Result<DiffPyramid> {
    if p1.levels().len() != params.convs.len() || p2.levels().len() != params.convs.len() {
        return Err(Error::Shape("pyramid depth does not match the difference module".into()));
    }
    let levels = p1
        .levels()
        .iter()
        .zip(p2.levels())
        .zip(&params.convs)
        .enumerate()
        .map(|(i, ((f1, f2), conv))| {
            if f1.dims() != f2.dims() {
                return Err(Error::Shape(format!(
                    "level {i}: t1 is {:?}, t2 is {:?}",
                    f1.dims(),
                    f2.dims()
                )));
            }
            let basis = Tensor::cat(&[(f1 - f2)?.abs()?, (f1 + f2)?], 1)?;
            Ok(conv.forward(&basis)?.relu()?)
        })
        .collect::<Result<Vec<_>>>()?;
    DiffPyramid::new(levels)
}

/// Top-down fusion: lateral 1×1 projections, coarse-to-fine nearest ×2
/// upsampling with addition, then a 3×3 smoothing conv at stride 4.
pub fn fpn_fuse(d: &DiffPyramid, params: &FpnParams) -> Result<FusedMap> {
    if d.levels().len() != params.laterals.len() {
        return Err(Error::Shape("pyramid depth does not match the FPN".into()));
    }
    let mut top: Option<Tensor> = None;
    for (level, lateral) in d.levels().iter().zip(&params.laterals).rev() {
        let lat = lateral.forward(level)?;
        top = Some(match top {
            None => lat,
            Some(coarse) => (lat + upsample_nearest2(&coarse)?)?,
        });
    }
    let finest = top.ok_or_else(|| Error::Shape("empty pyramid".into()))?;
    Ok(FusedMap {
        features: params.smooth.forward(&finest)?,
    })
}
