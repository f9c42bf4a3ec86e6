//! Run configuration and its `key = value` text form.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Ranges are written as `lo,hi`. Unknown keys are rejected.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::masking::MaskConfig;
use crate::model::ModelConfig;

use super::ema::EmaSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Optimizer steps; ignored when `epochs > 0`.
    pub steps: u64,
    /// Passes over the data; when set, overrides `steps`.
    pub epochs: u64,
    pub batch_size: usize,
    /// Square side length every training image must have.
    pub image_size: usize,
    pub log_every: u64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    pub ema_start: f64,
    pub ema_end: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            epochs: 0,
            batch_size: 16,
            image_size: 64,
            log_every: 10,
            checkpoint_every: 100,
            ema_start: 0.996,
            ema_end: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self, n_examples: usize) -> u64 {
        if self.epochs > 0 {
            self.epochs * n_examples.div_ceil(self.batch_size.max(1)) as u64
        } else {
            self.steps
        }
    }

    pub fn ema_schedule(&self, n_examples: usize) -> Result<EmaSchedule> {
        EmaSchedule::new(self.ema_start, self.ema_end, self.total_steps(n_examples))
    }
}

/// Which fusion module feeds the classification head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeadSource {
    #[default]
    Online,
    Target,
}

impl FromStr for HeadSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "online" => Ok(HeadSource::Online),
            "target" => Ok(HeadSource::Target),
            other => Err(Error::Config(format!("head source must be online or target, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for HeadSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadSource::Online => "online",
            HeadSource::Target => "target",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub epochs: usize,
    pub lr: f64,
    pub source: HeadSource,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            epochs: 40,
            lr: 0.001,
            source: HeadSource::Online,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TiJepaConfig {
    pub model: ModelConfig,
    pub mask: MaskConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub head: HeadConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_range(key: &str, value: &str) -> Result<(f64, f64)> {
    let (lo, hi) = value
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("{key} expects lo,hi but got {value:?}")))?;
    Ok((parse(key, lo.trim())?, parse(key, hi.trim())?))
}

fn range(r: (f64, f64)) -> String {
    format!("{},{}", r.0, r.1)
}

impl TiJepaConfig {
    /// Every setting as `(key, value)` in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let (e, f, p) = (&m.encoder, &m.fusion, &m.predictor);
        let (k, o, t, h) = (&self.mask, &self.optim, &self.train, &self.head);
        vec![
            ("encoder.patch_size", e.patch_size.to_string()),
            ("encoder.embed_dim", e.embed_dim.to_string()),
            ("encoder.depth", e.depth.to_string()),
            ("encoder.heads", e.heads.to_string()),
            ("encoder.max_text_len", e.max_text_len.to_string()),
            ("encoder.frozen", e.frozen.to_string()),
            ("fusion.layers", f.layers.to_string()),
            ("fusion.heads", f.heads.to_string()),
            ("fusion.hidden", f.hidden.to_string()),
            ("fusion.mlp_ratio", f.mlp_ratio.to_string()),
            ("fusion.image_dim", f.image_dim.to_string()),
            ("fusion.text_dim", f.text_dim.to_string()),
            ("predictor.depth", p.depth.to_string()),
            ("predictor.heads", p.heads.to_string()),
            ("predictor.width", p.width.to_string()),
            ("predictor.mlp_ratio", p.mlp_ratio.to_string()),
            ("predictor.frozen", m.freeze_predictor.to_string()),
            ("loss", m.loss.to_string()),
            ("mask.num_targets", k.num_targets.to_string()),
            ("mask.context_scale", range(k.context_scale)),
            ("mask.context_aspect", range(k.context_aspect)),
            ("mask.target_scale", range(k.target_scale)),
            ("mask.target_aspect", range(k.target_aspect)),
            ("mask.max_retries", k.max_retries.to_string()),
            ("optim.lr", o.lr.to_string()),
            ("optim.beta1", o.beta1.to_string()),
            ("optim.beta2", o.beta2.to_string()),
            ("optim.eps", o.eps.to_string()),
            ("optim.weight_decay", o.weight_decay.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.image_size", t.image_size.to_string()),
            ("train.log_every", t.log_every.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("ema.start", t.ema_start.to_string()),
            ("ema.end", t.ema_end.to_string()),
            ("head.epochs", h.epochs.to_string()),
            ("head.lr", h.lr.to_string()),
            ("head.source", h.source.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key {
            "encoder.patch_size" => m.encoder.patch_size = parse(key, v)?,
            "encoder.embed_dim" => m.encoder.embed_dim = parse(key, v)?,
            "encoder.depth" => m.encoder.depth = parse(key, v)?,
            "encoder.heads" => m.encoder.heads = parse(key, v)?,
            "encoder.max_text_len" => m.encoder.max_text_len = parse(key, v)?,
            "encoder.frozen" => m.encoder.frozen = parse(key, v)?,
            "fusion.layers" => m.fusion.layers = parse(key, v)?,
            "fusion.heads" => m.fusion.heads = parse(key, v)?,
            "fusion.hidden" => m.fusion.hidden = parse(key, v)?,
            "fusion.mlp_ratio" => m.fusion.mlp_ratio = parse(key, v)?,
            "fusion.image_dim" => m.fusion.image_dim = parse(key, v)?,
            "fusion.text_dim" => m.fusion.text_dim = parse(key, v)?,
            "predictor.depth" => m.predictor.depth = parse(key, v)?,
            "predictor.heads" => m.predictor.heads = parse(key, v)?,
            "predictor.width" => m.predictor.width = parse(key, v)?,
            "predictor.mlp_ratio" => m.predictor.mlp_ratio = parse(key, v)?,
            "predictor.frozen" => m.freeze_predictor = parse(key, v)?,
            "loss" => m.loss = v.parse()?,
            "mask.num_targets" => self.mask.num_targets = parse(key, v)?,
            "mask.context_scale" => self.mask.context_scale = parse_range(key, v)?,
            "mask.context_aspect" => self.mask.context_aspect = parse_range(key, v)?,
            "mask.target_scale" => self.mask.target_scale = parse_range(key, v)?,
            "mask.target_aspect" => self.mask.target_aspect = parse_range(key, v)?,
            "mask.max_retries" => self.mask.max_retries = parse(key, v)?,
            "optim.lr" => self.optim.lr = parse(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse(key, v)?,
            "optim.eps" => self.optim.eps = parse(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.image_size" => self.train.image_size = parse(key, v)?,
            "train.log_every" => self.train.log_every = parse(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "ema.start" => self.train.ema_start = parse(key, v)?,
            "ema.end" => self.train.ema_end = parse(key, v)?,
            "head.epochs" => self.head.epochs = parse(key, v)?,
            "head.lr" => self.head.lr = parse(key, v)?,
            "head.source" => self.head.source = v.parse()?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Starts from defaults and applies every line of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TiJepaConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mask.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        if t.image_size == 0 || t.image_size % self.model.encoder.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                t.image_size, self.model.encoder.patch_size
            )));
        }
        EmaSchedule::new(t.ema_start, t.ema_end, 0)?;
        let o = &self.optim;
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(o.lr >= 0.0 && unit(o.beta1) && unit(o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer hyperparameters out of range".into()));
        }
        if self.head.lr < 0.0 {
            return Err(Error::Config("head.lr must be non-negative".into()));
        }
        Ok(())
    }

    /// Patch grid of a training image.
    pub fn grid(&self) -> (usize, usize) {
        let g = self.train.image_size / self.model.encoder.patch_size;
        (g, g)
    }
}
