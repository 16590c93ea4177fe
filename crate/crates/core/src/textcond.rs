//! Text conditioning: embedding providers, sequence-length control, temporal
//! aggregation and the conditioning modes.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// L×D token vectors; rows at or past `valid_length` are zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    vectors: Array2<f64>,
    valid_length: usize,
}

impl TextEmbedding {
    pub fn new(vectors: Array2<f64>, valid_length: usize) -> Result<Self> {
        if valid_length > vectors.nrows() {
            return Err(Error::Shape(format!(
                "valid_length {valid_length} exceeds {} rows",
                vectors.nrows()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("text embedding has non-finite values".into()));
        }
        if vectors.slice(s![valid_length.., ..]).iter().any(|&v| v != 0.0) {
            return Err(Error::Shape("padding rows of a text embedding must be zero".into()));
        }
        Ok(Self {
            vectors,
            valid_length,
        })
    }

    /// All-padding embedding of `len` rows.
    pub fn empty(len: usize, dim: usize) -> Self {
        Self {
            vectors: Array2::zeros((len, dim)),
            valid_length: 0,
        }
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn valid_length(&self) -> usize {
        self.valid_length
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningMode {
    None,
    Static,
    Dynamic,
}

impl ConditioningMode {
    pub const ALL: [ConditioningMode; 3] = [
        ConditioningMode::None,
        ConditioningMode::Static,
        ConditioningMode::Dynamic,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ConditioningMode::None => "none",
            ConditioningMode::Static => "static",
            ConditioningMode::Dynamic => "dynamic",
        }
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ConditioningMode::None),
            "static" => Ok(ConditioningMode::Static),
            "dynamic" => Ok(ConditioningMode::Dynamic),
            other => Err(Error::Config(format!(
                "unknown text.mode `{other}` (expected none, static or dynamic)"
            ))),
        }
    }
}

/// Source of token embeddings for a prompt. Implementations must be safe to
/// call concurrently.
pub trait TextProvider: Send + Sync {
    /// Width D of every returned row.
    fn dim(&self) -> usize;

    fn embed(&self, prompt: &str) -> Result<TextEmbedding>;
}

/// Hermetic provider: whitespace tokens, each mapped to a fixed vector drawn
/// from a generator seeded by SHA-256 of (seed, token). No positional mixing.
#[derive(Debug, Clone)]
pub struct StubProvider {
    dim: usize,
    seed: u64,
}

impl StubProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }
}

impl TextProvider for StubProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, prompt: &str) -> Result<TextEmbedding> {
        let tokens: Vec<&str> = prompt.split_whitespace().collect();
        let mut vectors = Array2::zeros((tokens.len(), self.dim));
        for (i, tok) in tokens.iter().enumerate() {
            for (j, v) in self.token_vector(tok).into_iter().enumerate() {
                vectors[[i, j]] = v;
            }
        }
        TextEmbedding::new(vectors, tokens.len())
    }
}

/// External embedding service: one POST per prompt with body
/// `{"prompt": ...}`, answered by `{"vectors": [[...], ...]}` and status 200.
pub struct HttpProvider {
    url: String,
    dim: usize,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

impl HttpProvider {
    pub fn new(url: impl Into<String>, dim: usize, timeout: Duration) -> Self {
        Self {
            url: url.into(),
            dim,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

fn provider_err(message: impl Into<String>, retriable: bool) -> Error {
    Error::Provider {
        message: message.into(),
        retriable,
    }
}

impl TextProvider for HttpProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, prompt: &str) -> Result<TextEmbedding> {
        let resp = match self.agent.post(&self.url).send_json(EmbedRequest { prompt }) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, _)) => {
                return Err(provider_err(
                    format!("{} answered HTTP {code}", self.url),
                    code == 429 || code >= 500,
                ))
            }
            Err(ureq::Error::Transport(t)) => {
                return Err(provider_err(format!("{}: {t}", self.url), true))
            }
        };
        if resp.status() != 200 {
            return Err(provider_err(
                format!("{} answered HTTP {}", self.url, resp.status()),
                false,
            ));
        }
        let body: EmbedResponse = resp
            .into_json()
            .map_err(|e| provider_err(format!("malformed response from {}: {e}", self.url), false))?;
        let rows = body.vectors.len();
        let mut vectors = Array2::zeros((rows, self.dim));
        for (i, row) in body.vectors.iter().enumerate() {
            if row.len() != self.dim {
                return Err(provider_err(
                    format!("row {i} has width {}, expected {}", row.len(), self.dim),
                    false,
                ));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(provider_err(format!("row {i} is all zeros"), false));
            }
            for (j, &v) in row.iter().enumerate() {
                vectors[[i, j]] = v;
            }
        }
        TextEmbedding::new(vectors, rows)
            .map_err(|e| provider_err(format!("invalid embedding from {}: {e}", self.url), false))
    }
}

pub fn embed(provider: &dyn TextProvider, prompt: &str) -> Result<TextEmbedding> {
    provider.embed(prompt)
}

/// Truncates or zero-pads to exactly `max_len` rows.
pub fn fit_length(e: &TextEmbedding, max_len: usize) -> TextEmbedding {
    let max_len = max_len.max(1);
    let keep = e.valid_length.min(max_len);
    let mut vectors = Array2::zeros((max_len, e.dim()));
    vectors
        .slice_mut(s![..keep, ..])
        .assign(&e.vectors.slice(s![..keep, ..]));
    TextEmbedding {
        vectors,
        valid_length: keep,
    }
}

/// Concatenates the valid rows of both phases (t1 first) and refits to their
/// common length L.
pub fn aggregate_temporal(e1: &TextEmbedding, e2: &TextEmbedding) -> Result<TextEmbedding> {
    if e1.dim() != e2.dim() {
        return Err(Error::Shape(format!(
            "text widths differ: {} vs {}",
            e1.dim(),
            e2.dim()
        )));
    }
    if e1.len() != e2.len() {
        return Err(Error::Shape(format!(
            "text lengths differ: {} vs {}",
            e1.len(),
            e2.len()
        )));
    }
    let len = e1.len();
    let mut vectors = Array2::zeros((len, e1.dim()));
    let mut row = 0;
    for e in [e1, e2] {
        for i in 0..e.valid_length {
            if row == len {
                break;
            }
            vectors.row_mut(row).assign(&e.vectors.row(i));
            row += 1;
        }
    }
    Ok(TextEmbedding {
        vectors,
        valid_length: row,
    })
}

/// Text embedding for one sample under `mode`; `None` means the decoder runs
/// without text.
pub fn conditioning(
    mode: ConditioningMode,
    prompt: Option<&str>,
    template: &str,
    provider: &dyn TextProvider,
) -> Result<Option<TextEmbedding>> {
    match mode {
        ConditioningMode::None => Ok(None),
        ConditioningMode::Static => {
            if template.trim().is_empty() {
                return Err(Error::Config("text.mode=static requires a non-empty text.template".into()));
            }
            Ok(Some(provider.embed(template)?))
        }
        ConditioningMode::Dynamic => match prompt.filter(|p| !p.trim().is_empty()) {
            Some(p) => Ok(Some(provider.embed(p)?)),
            None if !template.trim().is_empty() => Ok(Some(provider.embed(template)?)),
            None => Err(Error::Config(
                "sample has no prompt and text.template is empty".into(),
            )),
        },
    }
}

/// Full per-sample text path: condition each phase, fit to `max_len`, then
/// aggregate. A single prompt is used for both phases.
pub fn condition_pair(
    mode: ConditioningMode,
    prompt_t1: Option<&str>,
    prompt_t2: Option<&str>,
    template: &str,
    provider: &dyn TextProvider,
    max_len: usize,
) -> Result<Option<TextEmbedding>> {
    let prompt_t2 = prompt_t2.or(prompt_t1);
    let Some(e1) = conditioning(mode, prompt_t1, template, provider)? else {
        return Ok(None);
    };
    let e2 = if prompt_t2 == prompt_t1 {
        e1.clone()
    } else {
        conditioning(mode, prompt_t2, template, provider)?.unwrap_or_else(|| e1.clone())
    };
    aggregate_temporal(&fit_length(&e1, max_len), &fit_length(&e2, max_len)).map(Some)
}

/// Batched text: (B, L, D) vectors and a (B, L) validity mask of 0/1.
#[derive(Debug, Clone)]
pub struct TextBatch {
    pub vectors: Tensor,
    pub mask: Tensor,
}

impl TextBatch {
    pub fn from_embeddings(items: &[&TextEmbedding], dtype: DType) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(Error::Shape("empty text batch".into()));
        };
        let (len, dim) = (first.len(), first.dim());
        let mut data = Vec::with_capacity(items.len() * len * dim);
        let mut mask = Vec::with_capacity(items.len() * len);
        for e in items {
            if e.len() != len || e.dim() != dim {
                return Err(Error::Shape(format!(
                    "text batch mixes {}x{} with {len}x{dim}",
                    e.len(),
                    e.dim()
                )));
            }
            data.extend(e.vectors.iter().copied());
            mask.extend((0..len).map(|i| if i < e.valid_length { 1.0 } else { 0.0 }));
        }
        let dev = Device::Cpu;
        Ok(Self {
            vectors: Tensor::from_vec(data, (items.len(), len, dim), &dev)?.to_dtype(dtype)?,
            mask: Tensor::from_vec(mask, (items.len(), len), &dev)?.to_dtype(dtype)?,
        })
    }
}
