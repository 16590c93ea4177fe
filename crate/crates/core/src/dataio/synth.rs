//! Deterministic synthetic bitemporal scenes: textured ground with bright
//! rectangular "buildings" that appear or disappear between the two times.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BitemporalSample, DatasetSplit, SplitName, SIZE_MULTIPLE};
use crate::error::{Error, Result};

const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of changed rectangles per sample; the lower end is at least 1.
    pub n_shapes_range: (usize, usize),
    /// Inclusive range of rectangle side lengths in pixels.
    pub shape_size_range: (usize, usize),
    /// Allowed changed-pixel fraction per sample, inclusive.
    pub change_fraction_bounds: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 16,
            height: 64,
            width: 64,
            n_shapes_range: (1, 4),
            shape_size_range: (8, 24),
            change_fraction_bounds: (0.05, 0.3),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % SIZE_MULTIPLE != 0 {
                return bad(format!("{name} {v} is not a positive multiple of {SIZE_MULTIPLE}"));
            }
        }
        let (lo, hi) = self.n_shapes_range;
        if lo == 0 || lo > hi {
            return bad(format!("n_shapes_range [{lo}, {hi}] must satisfy 1 <= low <= high"));
        }
        let (lo, hi) = self.shape_size_range;
        if lo == 0 || lo > hi || hi > self.height.min(self.width) {
            return bad(format!(
                "shape_size_range [{lo}, {hi}] must satisfy 1 <= low <= high <= image side"
            ));
        }
        let (lo, hi) = self.change_fraction_bounds;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return bad(format!(
                "change_fraction_bounds [{lo}, {hi}] must satisfy 0 < low < high < 1"
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ChangeKind {
    Appeared,
    Disappeared,
    Both,
}

impl ChangeKind {
    fn prompt(self) -> &'static str {
        match self {
            ChangeKind::Appeared => "buildings appeared",
            ChangeKind::Disappeared => "buildings disappeared",
            ChangeKind::Both => "buildings appeared and disappeared",
        }
    }
}

struct Rect {
    y: usize,
    x: usize,
    h: usize,
    w: usize,
    color: [u8; 3],
}

impl Rect {
    fn random(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Self {
        let (lo, hi) = cfg.shape_size_range;
        let h = rng.gen_range(lo..=hi);
        let w = rng.gen_range(lo..=hi);
        let y = rng.gen_range(0..=cfg.height - h);
        let x = rng.gen_range(0..=cfg.width - w);
        let color = [
            rng.gen_range(185..=250),
            rng.gen_range(185..=250),
            rng.gen_range(185..=250),
        ];
        Rect { y, x, h, w, color }
    }

    fn paint(&self, img: &mut Array3<u8>) {
        for yy in self.y..self.y + self.h {
            for xx in self.x..self.x + self.w {
                for c in 0..3 {
                    img[[yy, xx, c]] = self.color[c];
                }
            }
        }
    }
}

/// Ground texture, kept at or below 150 so roofs (>= 185) always contrast.
fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<u8> {
    let base: [f64; 3] = [
        rng.gen_range(50.0..110.0),
        rng.gen_range(50.0..110.0),
        rng.gen_range(50.0..110.0),
    ];
    let fy = rng.gen_range(0.05..0.3);
    let fx = rng.gen_range(0.05..0.3);
    let py = rng.gen_range(0.0..std::f64::consts::TAU);
    let px = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut img = Array3::<u8>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let wave = 15.0 * (fy * y as f64 + py).sin() * (fx * x as f64 + px).sin();
            for c in 0..3 {
                let noise: f64 = rng.gen_range(-8.0..8.0);
                img[[y, x, c]] = (base[c] + wave + noise).clamp(0.0, 150.0).round() as u8;
            }
        }
    }
    img
}

fn to_unit(img: &Array3<u8>) -> Array3<f32> {
    img.mapv(|v| v as f32 / 255.0)
}

/// Candidate scene: (t1, t2, mask, kind). The mask is exactly the set of
/// pixels where t1 and t2 differ.
fn draw_scene(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> (Array3<u8>, Array3<u8>, Array2<u8>, ChangeKind) {
    let (h, w) = (cfg.height, cfg.width);
    let ground = background(rng, h, w);
    let mut t1 = ground.clone();

    // unchanged buildings present at both times
    let n_static = rng.gen_range(0..=2);
    for _ in 0..n_static {
        Rect::random(rng, cfg).paint(&mut t1);
    }
    let mut t2 = t1.clone();

    let kind = match rng.gen_range(0..3) {
        0 => ChangeKind::Appeared,
        1 => ChangeKind::Disappeared,
        _ => ChangeKind::Both,
    };
    let (lo, hi) = cfg.n_shapes_range;
    let n_changes = rng.gen_range(lo..=hi);
    for k in 0..n_changes {
        let rect = Rect::random(rng, cfg);
        let appear = match kind {
            ChangeKind::Appeared => true,
            ChangeKind::Disappeared => false,
            ChangeKind::Both => k % 2 == 0,
        };
        if appear {
            rect.paint(&mut t2);
        } else {
            // present at t1, demolished back to ground by t2
            rect.paint(&mut t1);
            for yy in rect.y..rect.y + rect.h {
                for xx in rect.x..rect.x + rect.w {
                    for c in 0..3 {
                        t2[[yy, xx, c]] = ground[[yy, xx, c]];
                    }
                }
            }
        }
    }

    let mut mask = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let differs = (0..3).any(|c| t1[[y, x, c]] != t2[[y, x, c]]);
            mask[[y, x]] = u8::from(differs);
        }
    }
    (t1, t2, mask, kind)
}

/// Generates `cfg.n_samples` scenes. Output is a pure function of `cfg`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = cfg.change_fraction_bounds;
    let total = (cfg.height * cfg.width) as f64;
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let id = format!("synth_{i:05}");
        let mut accepted = None;
        for _ in 0..MAX_ATTEMPTS {
            let (t1, t2, mask, kind) = draw_scene(&mut rng, cfg);
            let changed = mask.iter().filter(|&&m| m == 1).count();
            let frac = changed as f64 / total;
            if changed > 0 && frac >= lo && frac <= hi {
                accepted = Some((t1, t2, mask, kind));
                break;
            }
        }
        let (t1, t2, mask, kind) = accepted.ok_or_else(|| {
            Error::Generation(format!(
                "sample {id}: no placement within {MAX_ATTEMPTS} attempts gives a changed fraction in [{lo}, {hi}]"
            ))
        })?;
        samples.push(BitemporalSample::new(
            id,
            to_unit(&t1),
            to_unit(&t2),
            mask,
            Some(kind.prompt().to_string()),
        )?);
    }
    DatasetSplit::new(SplitName::Train, samples)
}
