//! Deterministic training loop and split evaluation.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;
use std::time::Duration;

use candle_core::DType;
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::backbone::{images_to_tensor, BackboneRegistry};
use crate::dataio::{save_mask, BitemporalSample, DatasetSplit};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::{ProviderKind, TrainConfig};
use crate::harness::optim::{lr_at, AdamW, GroupRates};
use crate::maskdec::binarize;
use crate::metrics::{self, confusion, masks_to_tensor, Confusion, MetricsReport};
use crate::model::SegChangeModel;
use crate::nn::module_rng;
use crate::textcond::{condition_pair, ConditioningMode, HttpProvider, StubProvider, TextBatch, TextEmbedding, TextProvider};

const HTTP_TIMEOUT: Duration = Duration::from_secs(30);

pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";

pub fn make_provider(cfg: &TrainConfig) -> Result<Box<dyn TextProvider>> {
    let dim = cfg.text_dim();
    Ok(match cfg.text.provider {
        ProviderKind::Stub => Box::new(StubProvider::new(dim, cfg.text.seed)),
        ProviderKind::Http => {
            if cfg.text.http_url.is_empty() {
                return Err(Error::Config("text.provider=http needs text.http.url".into()));
            }
            Box::new(HttpProvider::new(cfg.text.http_url.clone(), dim, HTTP_TIMEOUT))
        }
    })
}

/// Per-sample text embeddings, computed once per sample id.
pub struct TextSource {
    mode: ConditioningMode,
    template: String,
    max_len: usize,
    provider: Box<dyn TextProvider>,
    cache: HashMap<String, Option<TextEmbedding>>,
}

impl TextSource {
    pub fn new(cfg: &TrainConfig, provider: Box<dyn TextProvider>) -> Self {
        Self {
            mode: cfg.text.mode,
            template: cfg.text.template.clone(),
            max_len: cfg.text.max_len,
            provider,
            cache: HashMap::new(),
        }
    }

    pub fn mode(&self) -> ConditioningMode {
        self.mode
    }

    pub fn sample(&mut self, s: &BitemporalSample) -> Result<Option<TextEmbedding>> {
        if let Some(hit) = self.cache.get(&s.id) {
            return Ok(hit.clone());
        }
        let e = condition_pair(
            self.mode,
            s.prompt.as_deref(),
            None,
            &self.template,
            self.provider.as_ref(),
            self.max_len,
        )?;
        self.cache.insert(s.id.clone(), e.clone());
        Ok(e)
    }

    pub fn batch(&mut self, samples: &[&BitemporalSample], dtype: DType) -> Result<Option<TextBatch>> {
        let mut items = Vec::with_capacity(samples.len());
        for s in samples {
            match self.sample(s)? {
                Some(e) => items.push(e),
                None => return Ok(None),
            }
        }
        let refs: Vec<&TextEmbedding> = items.iter().collect();
        TextBatch::from_embeddings(&refs, dtype).map(Some)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub loss_mean: f64,
    pub lr_main: f64,
    pub lr_backbone: f64,
    pub val_f1: f64,
    pub val_iou: f64,
    pub val_oa: f64,
    /// Epoch with the highest validation F1 so far.
    pub best_epoch: usize,
}

/// Scores `split` one sample at a time, optionally writing each binary
/// prediction to `dump_dir/<id>.png`.
pub fn evaluate(
    model: &SegChangeModel,
    split: &DatasetSplit,
    text: &mut TextSource,
    threshold: f64,
    dump_dir: Option<&Path>,
) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if let Some(dir) = dump_dir {
        std::fs::create_dir_all(dir)?;
    }
    let dtype = model.dtype();
    let mut total = Confusion::default();
    for s in split.iter() {
        let tb = text.batch(&[s], dtype)?;
        let logits = model.forward(
            &images_to_tensor(&[&s.image_t1], dtype)?,
            &images_to_tensor(&[&s.image_t2], dtype)?,
            tb.as_ref(),
        )?;
        let pred = binarize(&logits.to_arrays()?[0], threshold);
        total += confusion(&pred, &s.mask)?;
        if let Some(dir) = dump_dir {
            save_mask(&pred, dir.join(format!("{}.png", s.id)))?;
        }
    }
    metrics::report(total)
}

pub struct Trainer {
    cfg: TrainConfig,
    model: SegChangeModel,
    optim: AdamW,
    text: TextSource,
    next_epoch: usize,
    global_step: u64,
    best_f1: f64,
    best_epoch: Option<usize>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, registry: &BackboneRegistry) -> Result<Self> {
        let provider = make_provider(&cfg)?;
        Self::with_provider(cfg, registry, provider)
    }

    pub fn with_provider(
        cfg: TrainConfig,
        registry: &BackboneRegistry,
        provider: Box<dyn TextProvider>,
    ) -> Result<Self> {
        cfg.validate()?;
        let model = SegChangeModel::new(&cfg.model_config(), registry, cfg.precision.dtype())?;
        let optim = AdamW::new(model.store(), cfg.weight_decay)?;
        let text = TextSource::new(&cfg, provider);
        Ok(Self {
            cfg,
            model,
            optim,
            text,
            next_epoch: 0,
            global_step: 0,
            best_f1: f64::NEG_INFINITY,
            best_epoch: None,
        })
    }

    /// Rebuilds a trainer from a checkpoint, continuing where it stopped.
    pub fn resume(path: impl AsRef<Path>, registry: &BackboneRegistry) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let cfg = TrainConfig::parse(&ck.config_text)?;
        let mut t = Self::new(cfg, registry)?;
        t.restore(ck)?;
        Ok(t)
    }

    pub fn restore(&mut self, ck: Checkpoint) -> Result<()> {
        self.model.store().load(&ck.params)?;
        self.optim.restore(ck.adam_step, ck.adam_m, ck.adam_v)?;
        self.next_epoch = ck.next_epoch;
        self.global_step = ck.global_step;
        self.best_f1 = ck.best_f1;
        self.best_epoch = ck.best_epoch;
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let (m, v) = self.optim.state();
        Ok(Checkpoint {
            config_text: self.cfg.serialize(),
            next_epoch: self.next_epoch,
            global_step: self.global_step,
            adam_step: self.optim.step_count(),
            best_f1: self.best_f1,
            best_epoch: self.best_epoch,
            params: self.model.store().snapshot()?,
            adam_m: m.clone(),
            adam_v: v.clone(),
        })
    }

    pub fn model(&self) -> &SegChangeModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn text_source(&mut self) -> &mut TextSource {
        &mut self.text
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn best_f1(&self) -> f64 {
        self.best_f1
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    fn finished(&self) -> bool {
        self.next_epoch >= self.cfg.epochs
            || (self.cfg.max_steps > 0 && self.global_step >= self.cfg.max_steps as u64)
    }

    /// Trains until `epochs` or `max_steps` is reached. With `out_dir`, writes
    /// `log.jsonl`, the best-F1 checkpoint and the latest checkpoint.
    pub fn run(
        &mut self,
        train: &DatasetSplit,
        val: Option<&DatasetSplit>,
        out_dir: Option<&Path>,
    ) -> Result<Vec<EpochLog>> {
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
        }
        let mut logs = Vec::new();
        while !self.finished() {
            let log = self.run_epoch(train, val.unwrap_or(train))?;
            if let Some(dir) = out_dir {
                let mut f = OpenOptions::new().create(true).append(true).open(dir.join("log.jsonl"))?;
                writeln!(f, "{}", serde_json::to_string(&log)?)?;
                let ck = self.checkpoint()?;
                if log.best_epoch == log.epoch {
                    ck.save(dir.join(BEST_CHECKPOINT))?;
                }
                ck.save(dir.join(LAST_CHECKPOINT))?;
            }
            logs.push(log);
        }
        Ok(logs)
    }

    /// One pass over `train` in a seed-determined order, then a validation pass.
    pub fn run_epoch(&mut self, train: &DatasetSplit, val: &DatasetSplit) -> Result<EpochLog> {
        let epoch = self.next_epoch;
        let rates = lr_at(
            epoch,
            GroupRates {
                backbone: self.cfg.lr_backbone,
                main: self.cfg.lr_main,
            },
            self.cfg.sched_step,
            self.cfg.sched_gamma,
        );
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut module_rng(self.cfg.seed, &format!("shuffle.epoch{epoch}")));

        let mut loss_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            if self.cfg.max_steps > 0 && self.global_step >= self.cfg.max_steps as u64 {
                break;
            }
            let batch: Vec<&BitemporalSample> = chunk.iter().map(|&i| &train.samples()[i]).collect();
            let loss = self.step(&batch, epoch, rates)?;
            loss_sum += loss;
            steps += 1;
        }
        self.next_epoch += 1;

        let val_report = evaluate(&self.model, val, &mut self.text, self.cfg.decoder.threshold, None)?;
        let improved = val_report.f1 > self.best_f1;
        if improved {
            self.best_f1 = val_report.f1;
            self.best_epoch = Some(epoch);
        }
        Ok(EpochLog {
            epoch,
            steps,
            loss_mean: if steps == 0 { 0.0 } else { loss_sum / steps as f64 },
            lr_main: rates.main,
            lr_backbone: rates.backbone,
            val_f1: val_report.f1,
            val_iou: val_report.iou,
            val_oa: val_report.oa,
            best_epoch: self.best_epoch.unwrap_or(epoch),
        })
    }

    fn step(&mut self, batch: &[&BitemporalSample], epoch: usize, rates: GroupRates) -> Result<f64> {
        let dtype = self.model.dtype();
        let t1: Vec<_> = batch.iter().map(|s| &s.image_t1).collect();
        let t2: Vec<_> = batch.iter().map(|s| &s.image_t2).collect();
        let masks: Vec<_> = batch.iter().map(|s| &s.mask).collect();
        let text = self.text.batch(batch, dtype)?;
        let logits = self.model.forward(
            &images_to_tensor(&t1, dtype)?,
            &images_to_tensor(&t2, dtype)?,
            text.as_ref(),
        )?;
        let loss = metrics::loss(&logits.logits, &masks_to_tensor(&masks, dtype)?)?;
        let loss_value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let grads = loss.backward()?;
        let mut sq = 0.0;
        for (_, var) in self.model.store().iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        let grad_norm = sq.sqrt();
        if !loss_value.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                step: self.global_step as usize,
                loss: loss_value,
                grad_norm,
            });
        }
        self.optim.step(self.model.store(), &grads, rates)?;
        self.global_step += 1;
        Ok(loss_value)
    }
}
