//! Pretraining: optimizer, EMA target updates, checkpoints and the
//! deterministic training loop.

pub mod checkpoint;
pub mod collapse;
pub mod config;
pub mod ema;
pub mod optim;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::encoders::{patchify, tokenize_text, ImageTensor};
use crate::error::{Error, Result};
use crate::masking::sample_masks;
use crate::model::{self, ModelInput};
use crate::numerics::Tensor;
use crate::params::{Graph, ParamStore};
use crate::rng;

pub use checkpoint::{Checkpoint, CheckpointKind};
pub use collapse::collapse_metric;
pub use config::{HeadConfig, HeadSource, OptimConfig, TiJepaConfig, TrainConfig};
pub use ema::{ema_update, momentum_at, EmaSchedule};
pub use optim::AdamW;

/// Stream tags mixed into the run seed.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_SHUFFLE: u64 = 1;
pub const STREAM_MASK: u64 = 2;
pub const STREAM_EVAL: u64 = 3;
pub const STREAM_HEAD: u64 = 4;

/// One training pair, patchified and tokenized.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub patches: Tensor,
    pub grid: (usize, usize),
    pub ids: Vec<u32>,
}

impl Sample {
    pub fn new(image: &ImageTensor, caption: &str, config: &TiJepaConfig) -> Result<Self> {
        let size = config.train.image_size;
        if image.height() != size || image.width() != size {
            return Err(Error::Data(format!(
                "image is {}x{}, configured size is {size}x{size}",
                image.height(),
                image.width()
            )));
        }
        let p = config.model.encoder.patch_size;
        Ok(Sample {
            patches: patchify(image, p)?,
            grid: image.grid(p)?,
            ids: tokenize_text(caption.as_bytes(), config.model.encoder.max_text_len),
        })
    }

    pub fn input(&self) -> ModelInput<'_> {
        ModelInput {
            patches: &self.patches,
            grid: self.grid,
            ids: &self.ids,
        }
    }
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::derive(seed, &[STREAM_SHUFFLE, epoch]));
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Zero-based index of the step just taken.
    pub step: u64,
    pub loss: f64,
    /// Absent when fewer than two examples survived mask sampling.
    pub collapse: Option<f64>,
    pub ema_m: f64,
    pub used: usize,
}

impl StepReport {
    pub fn log_line(&self) -> String {
        let collapse = self.collapse.map_or_else(|| "-".to_string(), |c| format!("{c:.6}"));
        format!("{}\t{:.6}\t{}\t{:.6}", self.step, self.loss, collapse, self.ema_m)
    }
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TiJepaConfig,
    pub seed: u64,
    /// Completed steps.
    pub step: u64,
    pub skipped: u64,
    pub params: ParamStore,
    pub optim: AdamW,
}

impl Trainer {
    pub fn new(config: TiJepaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = model::init_model(&config.model, &mut rng::derive(seed, &[STREAM_INIT]))?;
        let o = &config.optim;
        let optim = AdamW::new(o.lr, o.beta1, o.beta2, o.eps, o.weight_decay);
        Ok(Trainer {
            config,
            seed,
            step: 0,
            skipped: 0,
            params,
            optim,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.kind != CheckpointKind::Pretrain {
            return Err(Error::Format("expected a pretraining checkpoint".into()));
        }
        ck.config.validate()?;
        let optim = ck.optim.ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
        Ok(Trainer {
            config: ck.config,
            seed: ck.seed,
            step: ck.step,
            skipped: ck.skipped,
            params: ck.params,
            optim,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Pretrain,
            config: self.config.clone(),
            seed: self.seed,
            step: self.step,
            skipped: self.skipped,
            params: self.params.clone(),
            optim: Some(self.optim.clone()),
        }
    }

    pub fn total_steps(&self, n_examples: usize) -> u64 {
        self.config.train.total_steps(n_examples)
    }

    /// `(epoch, example index)` for every slot of the batch at `step`. The
    /// data stream is the concatenation of seeded per-epoch permutations.
    pub fn batch(&self, step: u64, n: usize) -> Vec<(u64, usize)> {
        let b = self.config.train.batch_size as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (step * b..(step + 1) * b)
            .map(|pos| {
                let epoch = pos / n as u64;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    cached = Some((epoch, epoch_order(self.seed, epoch, n)));
                }
                (epoch, cached.as_ref().unwrap().1[(pos % n as u64) as usize])
            })
            .collect()
    }

    /// One optimizer step followed by the EMA update of the target module.
    pub fn train_step(&mut self, data: &[Sample]) -> Result<StepReport> {
        if data.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let cfg = &self.config;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut total = 0.0f64;
        let mut reps = Vec::new();
        for (epoch, idx) in self.batch(self.step, data.len()) {
            let sample = &data[idx];
            let mut r = rng::derive(self.seed, &[STREAM_MASK, epoch, idx as u64]);
            let masks = match sample_masks(sample.grid, &cfg.mask, &mut r) {
                Ok(m) => m,
                Err(Error::Sampling(msg)) => {
                    log::warn!("step {}: skipping example {idx}: {msg}", self.step);
                    self.skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let input = sample.input();
            let mut g = Graph::new(&self.params);
            let (loss, s_y) = model::example_loss(&mut g, &cfg.model, &input, &input, &masks)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {} (example {idx})", self.step)));
            }
            total += value;
            for (name, gr) in g.backward(loss)? {
                match grads.get_mut(&name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gr.data()) {
                            *a += *b;
                        }
                    }
                    None => drop(grads.insert(name, gr)),
                }
            }
            reps.push(s_y);
        }
        let used = reps.len();
        if used == 0 {
            return Err(Error::Sampling(format!("every example of step {} was skipped", self.step)));
        }
        let inv = 1.0 / used as f32;
        self.params.zero_grads();
        for (name, mut gr) in grads {
            gr.data_mut().iter_mut().for_each(|v| *v *= inv);
            self.params.get_mut(&name)?.grad = Some(gr);
        }
        self.optim.update(&mut self.params)?;
        self.params.zero_grads();

        let m = momentum_at(self.step, &cfg.train.ema_schedule(data.len())?);
        ema_update(&mut self.params, m)?;
        let report = StepReport {
            step: self.step,
            loss: total / used as f64,
            collapse: if used >= 2 { Some(collapse_metric(&reps)?) } else { None },
            ema_m: m,
            used,
        };
        self.step += 1;
        Ok(report)
    }

    /// Trains up to the configured step count, writing one metrics line per
    /// log interval (and for the last step) to `metrics`, and a checkpoint
    /// every `checkpoint_every` steps into `ckpt_dir`.
    pub fn run(
        &mut self,
        data: &[Sample],
        metrics: &mut dyn Write,
        ckpt_dir: Option<&Path>,
    ) -> Result<Vec<StepReport>> {
        let total = self.total_steps(data.len());
        let every = self.config.train.checkpoint_every;
        let mut reports = Vec::new();
        while self.step < total {
            let rep = self.train_step(data)?;
            if rep.step % self.config.train.log_every == 0 || self.step == total {
                writeln!(metrics, "{}", rep.log_line()).map_err(|e| Error::io("metrics", e))?;
                log::info!("step {} loss {:.6}", rep.step, rep.loss);
            }
            if let Some(dir) = ckpt_dir {
                if every > 0 && self.step % every == 0 {
                    self.checkpoint().save(&dir.join(format!("step-{:06}.tijp", self.step)))?;
                }
            }
            reports.push(rep);
        }
        Ok(reports)
    }
}

/// Which caption the context path sees during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaptionMode {
    True,
    /// Each example is paired with another example's caption (a seeded
    /// derangement); targets still use the true caption.
    Permuted,
}

/// Mean prediction loss over `data` with fixed evaluation masks.
pub fn eval_loss(params: &ParamStore, config: &TiJepaConfig, data: &[Sample], seed: u64, mode: CaptionMode) -> Result<f64> {
    if data.len() < 2 {
        return Err(Error::Data("evaluation needs at least two examples".into()));
    }
    let order = epoch_order(seed ^ STREAM_EVAL, 0, data.len());
    let mut donor = vec![0; data.len()];
    for k in 0..order.len() {
        donor[order[k]] = order[(k + 1) % order.len()];
    }
    let mut total = 0.0;
    for (i, sample) in data.iter().enumerate() {
        let masks = sample_masks(sample.grid, &config.mask, &mut rng::derive(seed, &[STREAM_EVAL, i as u64]))?;
        let target = sample.input();
        let context = match mode {
            CaptionMode::True => sample.input(),
            CaptionMode::Permuted => ModelInput {
                ids: &data[donor[i]].ids,
                ..sample.input()
            },
        };
        let mut g = Graph::no_grad(params);
        let (loss, _) = model::example_loss(&mut g, &config.model, &target, &context, &masks)?;
        total += g.value(loss).item() as f64;
    }
    Ok(total / data.len() as f64)
}
