//! Bitemporal sample model, directory-layout loader and mask I/O.
//!
//! On-disk layout:
//!
//! ```text
//! root/
//!   A/<file>          t1 images, 8-bit RGB PNG
//!   B/<file>          t2 images, 8-bit RGB PNG
//!   label/<file>      change masks, 8-bit single channel, binarized at 128
//!   list/<split>.txt  one file name per line
//!   prompts.jsonl     optional, {"id": ..., "prompt": ...} per line
//! ```
//!
//! A sample's id is its file name without extension.

pub mod synth;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{generate_synthetic, SynthConfig};

/// Spatial dimensions must be multiples of the coarsest pyramid stride.
pub const SIZE_MULTIPLE: usize = 32;

/// Label pixels at or above this value are marked changed.
pub const MASK_THRESHOLD: u8 = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct BitemporalSample {
    pub id: String,
    /// H×W×3, values in [0, 1].
    pub image_t1: Array3<f32>,
    /// H×W×3, values in [0, 1].
    pub image_t2: Array3<f32>,
    /// H×W, values in {0, 1}.
    pub mask: Array2<u8>,
    pub prompt: Option<String>,
}

impl BitemporalSample {
    /// Builds a sample, rejecting any invariant violation.
    pub fn new(
        id: impl Into<String>,
        image_t1: Array3<f32>,
        image_t2: Array3<f32>,
        mask: Array2<u8>,
        prompt: Option<String>,
    ) -> Result<Self> {
        let sample = Self {
            id: id.into(),
            image_t1,
            image_t2,
            mask,
            prompt,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.id;
        let (h, w, c) = self.image_t1.dim();
        if c != 3 {
            return Err(Error::validation(id, format!("image_t1 has {c} channels, expected 3")));
        }
        if self.image_t2.dim() != (h, w, 3) {
            return Err(Error::validation(
                id,
                format!(
                    "image_t2 is {:?}, image_t1 is {:?}",
                    self.image_t2.dim(),
                    self.image_t1.dim()
                ),
            ));
        }
        if self.mask.dim() != (h, w) {
            return Err(Error::validation(
                id,
                format!("mask is {:?}, images are {h}x{w}", self.mask.dim()),
            ));
        }
        if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::validation(
                id,
                format!("size {h}x{w} is not a positive multiple of {SIZE_MULTIPLE}"),
            ));
        }
        if self.mask.iter().any(|&m| m > 1) {
            return Err(Error::validation(id, "mask contains values other than 0 and 1"));
        }
        let in_range = |x: &f32| x.is_finite() && (0.0..=1.0).contains(x);
        if !self.image_t1.iter().all(in_range) || !self.image_t2.iter().all(in_range) {
            return Err(Error::validation(id, "image values outside [0, 1]"));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }

    pub fn changed_fraction(&self) -> f64 {
        let changed = self.mask.iter().filter(|&&m| m == 1).count();
        changed as f64 / self.mask.len() as f64
    }

    /// The same scene with the two acquisition times exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            image_t1: self.image_t2.clone(),
            image_t2: self.image_t1.clone(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    samples: Vec<BitemporalSample>,
}

impl DatasetSplit {
    /// Wraps samples in the given order. Ids must be unique.
    pub fn new(name: SplitName, samples: Vec<BitemporalSample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::validation(&s.id, "duplicate sample id in split"));
            }
        }
        Ok(Self { name, samples })
    }

    pub fn samples(&self) -> &[BitemporalSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, BitemporalSample> {
        self.samples.iter()
    }

    /// Reorders samples lexicographically by id.
    pub fn sort_by_id(&mut self) {
        self.samples.sort_by(|a, b| a.id.cmp(&b.id));
    }

    pub fn into_samples(self) -> Vec<BitemporalSample> {
        self.samples
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PromptRecord {
    id: String,
    prompt: String,
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::load(path, "directory not found"))
    }
}

fn sample_id(file_name: &str) -> String {
    Path::new(file_name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| file_name.to_string())
}

/// Loads one split from the standard A/B/label/list layout. Samples are
/// returned sorted by id regardless of listing order.
pub fn load_dataset(root: impl AsRef<Path>, split: SplitName) -> Result<DatasetSplit> {
    let root = root.as_ref();
    require_dir(root)?;
    for sub in ["A", "B", "label", "list"] {
        require_dir(&root.join(sub))?;
    }
    let list_path = root.join("list").join(format!("{split}.txt"));
    let listing = fs::read_to_string(&list_path).map_err(|e| Error::load(&list_path, e))?;
    let names: Vec<&str> = listing
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();

    let prompts = load_prompts(root)?;

    let samples = names
        .par_iter()
        .map(|name| {
            let image_t1 = load_rgb(&root.join("A").join(name))?;
            let image_t2 = load_rgb(&root.join("B").join(name))?;
            let mask = load_mask(root.join("label").join(name))?;
            let id = sample_id(name);
            let prompt = prompts.get(&id).cloned();
            BitemporalSample::new(id, image_t1, image_t2, mask, prompt)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = DatasetSplit::new(split, samples)?;
    out.sort_by_id();
    Ok(out)
}

fn load_prompts(root: &Path) -> Result<HashMap<String, String>> {
    let path = root.join("prompts.jsonl");
    let mut prompts = HashMap::new();
    if !path.exists() {
        return Ok(prompts);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::load(&path, e))?;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PromptRecord = serde_json::from_str(line)
            .map_err(|e| Error::load(&path, format!("line {}: {e}", lineno + 1)))?;
        prompts.insert(rec.id, rec.prompt);
    }
    Ok(prompts)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(Error::load(path, "file not found"));
    }
    image::open(path).map_err(|e| Error::load(path, e))
}

/// Reads an 8-bit RGB image into H×W×3 values in [0, 1].
pub fn load_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Array3::from_shape_vec((h as usize, w as usize, 3), data).map_err(|e| Error::load(path, e))
}

/// Writes H×W×3 values in [0, 1] as an 8-bit RGB PNG.
pub fn save_rgb(image: &Array3<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let raw: Vec<u8> = image
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| io_error(path, e))
}

/// Reads a single-channel label, binarizing at [`MASK_THRESHOLD`].
pub fn load_mask(path: impl AsRef<Path>) -> Result<Array2<u8>> {
    let path = path.as_ref();
    let img = open_image(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data: Vec<u8> = img
        .into_raw()
        .into_iter()
        .map(|v| u8::from(v >= MASK_THRESHOLD))
        .collect();
    Array2::from_shape_vec((h as usize, w as usize), data).map_err(|e| Error::load(path, e))
}

/// Writes a binary mask as an 8-bit single-channel PNG with values {0, 255}.
pub fn save_mask(mask: &Array2<u8>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if mask.iter().any(|&m| m > 1) {
        return Err(Error::Shape("mask is not binary".into()));
    }
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.iter().map(|&m| m * 255).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Shape("mask buffer size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        other => Error::Io(std::io::Error::other(format!("{}: {other}", path.display()))),
    }
}

/// Writes samples in the loader's layout, appending their file names to
/// `list/<split>.txt` and their prompts to `prompts.jsonl`.
pub fn write_dataset(root: impl AsRef<Path>, split: &DatasetSplit) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    for sub in ["A", "B", "label", "list"] {
        fs::create_dir_all(root.join(sub))?;
    }
    let files: Vec<String> = split.iter().map(|s| format!("{}.png", s.id)).collect();
    split
        .samples()
        .par_iter()
        .zip(files.par_iter())
        .map(|(s, file)| {
            save_rgb(&s.image_t1, root.join("A").join(file))?;
            save_rgb(&s.image_t2, root.join("B").join(file))?;
            save_mask(&s.mask, root.join("label").join(file))
        })
        .collect::<Result<Vec<()>>>()?;

    use std::io::Write;
    let list_path = root.join("list").join(format!("{}.txt", split.name));
    let mut list = fs::OpenOptions::new().create(true).append(true).open(&list_path)?;
    for f in &files {
        writeln!(list, "{f}")?;
    }
    let mut prompts = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(root.join("prompts.jsonl"))?;
    for s in split.iter() {
        if let Some(p) = &s.prompt {
            let rec = PromptRecord {
                id: s.id.clone(),
                prompt: p.clone(),
            };
            writeln!(prompts, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    Ok(files.iter().map(|f| root.join("A").join(f)).collect())
}
