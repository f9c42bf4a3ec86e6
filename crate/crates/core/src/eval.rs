//! Linear sentiment head on frozen fused representations, and the
//! classification metrics used to score it.

use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;

use crate::dataprep::Sentiment;
use crate::encoders::{encode_patches, encode_text};
use crate::error::{Error, Result};
use crate::model::{fuse, ONLINE_PREFIX, TARGET_PREFIX};
use crate::nn;
use crate::numerics::Tensor;
use crate::params::{Graph, ParamStore};
use crate::rng;
use crate::trainer::checkpoint::{HEAD_BIAS, HEAD_WEIGHT};
use crate::trainer::{AdamW, HeadSource, Sample, TiJepaConfig, STREAM_HEAD};

pub const NUM_CLASSES: usize = 3;
const HEAD: &str = "head";

/// Mean over patch tokens of the fused representation of the full image.
pub fn pooled_features(backbone: &ParamStore, config: &TiJepaConfig, sample: &Sample) -> Result<Tensor> {
    let prefix = match config.head.source {
        HeadSource::Online => ONLINE_PREFIX,
        HeadSource::Target => TARGET_PREFIX,
    };
    let mut g = Graph::no_grad(backbone);
    let s_i = encode_patches(&mut g, &config.model.encoder, &sample.patches, sample.grid, None)?;
    let s_t = encode_text(&mut g, &config.model.encoder, &sample.ids)?;
    let fused = fuse(&mut g, prefix, &config.model.fusion, s_i, s_t)?;
    let pooled = g.tape.mean_rows(fused)?;
    Ok(g.value(pooled).clone())
}

pub fn init_head(hidden: usize, seed: u64) -> ParamStore {
    let mut head = ParamStore::new();
    nn::init_linear(&mut head, &mut rng::derive(seed, &[STREAM_HEAD]), HEAD, hidden, NUM_CLASSES, true);
    head
}

/// `pooled · W + b` for a `[1, hidden]` feature row.
pub fn head_logits(head: &ParamStore, pooled: &Tensor) -> Result<[f32; NUM_CLASSES]> {
    let w = head.value(HEAD_WEIGHT)?;
    let b = head.value(HEAD_BIAS)?;
    let z = pooled.matmul(w)?;
    let mut out = [0.0; NUM_CLASSES];
    for (k, o) in out.iter_mut().enumerate() {
        *o = z.data()[k] + b.data()[k];
    }
    Ok(out)
}

pub fn pool_and_classify(
    backbone: &ParamStore,
    head: &ParamStore,
    config: &TiJepaConfig,
    sample: &Sample,
) -> Result<[f32; NUM_CLASSES]> {
    head_logits(head, &pooled_features(backbone, config, sample)?)
}

/// `-log softmax(logits)[label]` via log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Data(format!("label {label} out of range for {} classes", logits.len())));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

/// Trains only the head with Adam on precomputed pooled features, one
/// seeded shuffle per epoch and mini-batches of `train.batch_size`.
pub fn finetune_features(
    features: &[(Tensor, Sentiment)],
    val: &[(Tensor, Sentiment)],
    config: &TiJepaConfig,
    seed: u64,
) -> Result<(ParamStore, Vec<EpochReport>)> {
    if features.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let hidden = features[0].0.cols();
    let mut head = init_head(hidden, seed);
    let mut opt = AdamW::adam(config.head.lr);
    let batch = config.train.batch_size.max(1);
    let mut reports = Vec::with_capacity(config.head.epochs);
    for epoch in 0..config.head.epochs {
        let mut order: Vec<usize> = (0..features.len()).collect();
        order.shuffle(&mut rng::derive(seed, &[STREAM_HEAD, epoch as u64 + 1]));
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let (loss, grads) = {
                let mut g = Graph::new(&head);
                let mut sum = None;
                for &i in chunk {
                    let (x, label) = &features[i];
                    let x = g.constant(x.clone());
                    let z = nn::linear(&mut g, HEAD, x)?;
                    let ce = g.tape.cross_entropy(z, label.index())?;
                    sum = Some(match sum {
                        None => ce,
                        Some(s) => g.tape.add(s, ce)?,
                    });
                }
                let mean = g.tape.scale(sum.unwrap(), 1.0 / chunk.len() as f64);
                (g.value(mean).item() as f64 * chunk.len() as f64, g.backward(mean)?)
            };
            total += loss;
            head.zero_grads();
            head.accumulate_grads(grads)?;
            opt.update(&mut head)?;
            head.zero_grads();
        }
        let val_accuracy = if val.is_empty() {
            None
        } else {
            let mut cm = ConfusionMatrix::default();
            for (x, label) in val {
                cm.add(label.index(), argmax(&head_logits(&head, x)?));
            }
            Some(cm.accuracy())
        };
        let rep = EpochReport {
            epoch,
            train_loss: total / features.len() as f64,
            val_accuracy,
        };
        log::info!(
            "head epoch {} loss {:.4} val acc {}",
            epoch,
            rep.train_loss,
            val_accuracy.map_or_else(|| "-".into(), |a| format!("{a:.4}"))
        );
        reports.push(rep);
    }
    Ok((head, reports))
}

pub fn extract(backbone: &ParamStore, config: &TiJepaConfig, data: &[(Sample, Sentiment)]) -> Result<Vec<(Tensor, Sentiment)>> {
    data.iter()
        .map(|(s, l)| Ok((pooled_features(backbone, config, s)?, *l)))
        .collect()
}

pub fn finetune(
    backbone: &ParamStore,
    config: &TiJepaConfig,
    train: &[(Sample, Sentiment)],
    val: &[(Sample, Sentiment)],
    seed: u64,
) -> Result<(ParamStore, Vec<EpochReport>)> {
    let tr = extract(backbone, config, train)?;
    let va = extract(backbone, config, val)?;
    finetune_features(&tr, &va, config, seed)
}

pub fn evaluate(
    backbone: &ParamStore,
    head: &ParamStore,
    config: &TiJepaConfig,
    data: &[(Sample, Sentiment)],
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::default();
    for (s, label) in data {
        cm.add(label.index(), argmax(&pool_and_classify(backbone, head, config, s)?));
    }
    Ok(cm)
}

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|k| self.counts[k][k]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.trace(), self.total())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub precision: [f64; NUM_CLASSES],
    pub recall: [f64; NUM_CLASSES],
    pub f1: [f64; NUM_CLASSES],
    pub support: [u64; NUM_CLASSES],
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    /// Some per-class value hit 0/0 and was reported as 0.
    pub zero_division: bool,
}

/// One-vs-rest precision, recall and F1 per class, with 0/0 taken as 0.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("confusion matrix is empty".into()));
    }
    let mut r = MetricsReport {
        precision: [0.0; NUM_CLASSES],
        recall: [0.0; NUM_CLASSES],
        f1: [0.0; NUM_CLASSES],
        support: [0; NUM_CLASSES],
        accuracy: cm.accuracy(),
        macro_f1: 0.0,
        weighted_f1: 0.0,
        zero_division: false,
    };
    for k in 0..NUM_CLASSES {
        let tp = cm.counts[k][k];
        let predicted: u64 = (0..NUM_CLASSES).map(|t| cm.counts[t][k]).sum();
        let actual: u64 = cm.counts[k].iter().sum();
        let (p, rc) = (ratio(tp, predicted), ratio(tp, actual));
        let f1 = if p + rc > 0.0 { 2.0 * p * rc / (p + rc) } else { 0.0 };
        r.zero_division |= predicted == 0 || actual == 0 || p + rc == 0.0;
        r.precision[k] = p;
        r.recall[k] = rc;
        r.f1[k] = f1;
        r.support[k] = actual;
    }
    r.macro_f1 = r.f1.iter().sum::<f64>() / NUM_CLASSES as f64;
    r.weighted_f1 = (0..NUM_CLASSES).map(|k| r.f1[k] * r.support[k] as f64).sum::<f64>() / total as f64;
    Ok(r)
}

impl MetricsReport {
    /// `key=value` lines for scripts.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "accuracy={:.6}", self.accuracy);
        let _ = writeln!(out, "macro_f1={:.6}", self.macro_f1);
        let _ = writeln!(out, "weighted_f1={:.6}", self.weighted_f1);
        for s in Sentiment::ALL {
            let k = s.index();
            let _ = writeln!(out, "{s}.precision={:.6}", self.precision[k]);
            let _ = writeln!(out, "{s}.recall={:.6}", self.recall[k]);
            let _ = writeln!(out, "{s}.f1={:.6}", self.f1[k]);
            let _ = writeln!(out, "{s}.support={}", self.support[k]);
        }
        let _ = writeln!(out, "zero_division={}", self.zero_division);
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12}{:>12}{:>14}{:>14}", "", "Accuracy %", "Macro-F1 %", "Weighted-F1 %")?;
        writeln!(
            f,
            "{:<12}{:>12.2}{:>14.2}{:>14.2}",
            "overall",
            100.0 * self.accuracy,
            100.0 * self.macro_f1,
            100.0 * self.weighted_f1
        )?;
        writeln!(f)?;
        writeln!(f, "{:<12}{:>12}{:>14}{:>14}{:>10}", "class", "Precision %", "Recall %", "F1 %", "Support")?;
        for s in Sentiment::ALL {
            let k = s.index();
            writeln!(
                f,
                "{:<12}{:>12.2}{:>14.2}{:>14.2}{:>10}",
                s.name(),
                100.0 * self.precision[k],
                100.0 * self.recall[k],
                100.0 * self.f1[k],
                self.support[k]
            )?;
        }
        if self.zero_division {
            writeln!(f, "note: some classes had no predictions or no examples; their 0/0 scores are reported as 0")?;
        }
        Ok(())
    }
}
