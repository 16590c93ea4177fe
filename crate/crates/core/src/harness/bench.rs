//! Converter timing and markdown summaries.

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::bev::{convert_grid, AttnStats, BevMode, BevParams, TokenGrid};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::nn::{module_rng, ParamStore};

/// Repetitions per timing; the median is reported.
pub const MIN_RUNS: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: BevMode,
    pub n: usize,
    pub median_ms: f64,
    pub score_evals: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct BenchShape {
    pub dim: usize,
    pub attn_dim: usize,
    pub runs: usize,
}

impl Default for BenchShape {
    fn default() -> Self {
        Self {
            dim: 32,
            attn_dim: 16,
            runs: MIN_RUNS,
        }
    }
}

/// Times one converter pass on a single random n-token grid per mode and size.
pub fn bench_attention(sizes: &[usize], modes: &[BevMode], shape: BenchShape) -> Result<Vec<BenchRow>> {
    if shape.runs < MIN_RUNS {
        return Err(Error::Config(format!("at least {MIN_RUNS} runs per timing")));
    }
    let mut rows = Vec::new();
    for &mode in modes {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = module_rng(0, "bench");
        let params = BevParams::new(&mut store, "bench", mode, shape.dim, shape.dim, shape.attn_dim, &mut rng)?;
        for &n in sizes {
            let tokens = Tensor::randn(0f32, 1f32, (1, n, shape.dim), &Device::Cpu)?;
            let grid = TokenGrid::new(tokens, n, 1)?;
            let mut times = Vec::with_capacity(shape.runs);
            let mut evals = 0;
            for _ in 0..shape.runs {
                let mut stats = AttnStats::default();
                let start = Instant::now();
                let out = convert_grid(&params, &grid, &mut stats)?;
                // Force evaluation of the whole output.
                out.tokens().sum_all()?.to_scalar::<f32>()?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
                evals = stats.score_evals;
            }
            times.sort_by(f64::total_cmp);
            rows.push(BenchRow {
                mode,
                n,
                median_ms: times[times.len() / 2],
                score_evals: evals,
            });
        }
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = String::from("| mode | n | median ms | score evals |\n|---|---:|---:|---:|\n");
    for r in rows {
        s.push_str(&format!("| {} | {} | {:.3} | {} |\n", r.mode, r.n, r.median_ms, r.score_evals));
    }
    s
}

/// Markdown table of evaluation reports, one row per named run.
pub fn metrics_table(runs: &[(String, MetricsReport)]) -> String {
    let mut s = String::from("| run | Precision | Recall | F1 | IoU | OA (%) |\n|---|---:|---:|---:|---:|---:|\n");
    for (name, r) in runs {
        s.push_str(&format!(
            "| {name} | {:.4} | {:.4} | {:.4} | {:.4} | {} |\n",
            r.precision,
            r.recall,
            r.f1,
            r.iou,
            r.oa_percent()
        ));
    }
    s
}

/// Reads metric JSON files and renders them, named by file stem.
pub fn report_from_files(paths: &[impl AsRef<Path>]) -> Result<String> {
    let mut runs = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| Error::load(p, e))?;
        let r = MetricsReport::from_json(&text).map_err(|e| Error::load(p, e))?;
        let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        runs.push((name, r));
    }
    Ok(metrics_table(&runs))
}
