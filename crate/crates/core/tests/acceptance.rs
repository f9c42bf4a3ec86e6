//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion, and exits non-zero if any failed.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use tijepa::dataprep::{self, majority_vote, reconcile_single, split_dataset, synth_generate, Sentiment};
use tijepa::encoders::{IMAGE_PREFIX, TEXT_PREFIX};
use tijepa::eval::{compute_metrics, ConfusionMatrix};
use tijepa::gradcheck;
use tijepa::masking::{sample_masks, MaskConfig};
use tijepa::model::{self, CrossAttnConfig};
use tijepa::numerics::Tensor;
use tijepa::rng;
use tijepa::trainer::{
    collapse_metric, ema_update, eval_loss, momentum_at, CaptionMode, Checkpoint, Sample, StepReport, TiJepaConfig,
    Trainer,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn samples(cfg: &TiJepaConfig, n: usize, seed: u64) -> Vec<Sample> {
    synth_generate(n, seed, cfg.train.image_size)
        .unwrap()
        .iter()
        .map(|e| Sample::new(&e.image, &e.caption, cfg).unwrap())
        .collect()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = gradcheck::run_suite().map_err(|e| e.to_string())?;
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    for r in &results {
        ensure!(r.tolerance == 1e-4 && gradcheck::STEP == 1e-4, "tolerance or step drifted");
        ensure!(r.passed(), "{} relative error {:e}", r.name, r.max_rel_error);
    }
    ensure!(results.iter().any(|r| r.name.starts_with("loss_LP")), "composed objective not checked");
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(120), "took {took:?}");
    Ok(format!("{} checks, worst rel err {worst:.2e}, {took:.1?}", results.len()))
}

fn parameter_counts() -> Outcome {
    let mut detail = Vec::new();
    for (name, cfg, reference) in [
        ("small", CrossAttnConfig::small(), 39e6),
        ("medium", CrossAttnConfig::medium(), 58e6),
        ("large", CrossAttnConfig::large(), 131e6),
    ] {
        let n = model::param_count(&cfg) as f64;
        let rel = (n - reference) / reference;
        ensure!(rel.abs() <= 0.10, "{name}: {n} vs {reference} ({:+.1}%)", 100.0 * rel);
        detail.push(format!("{name} {:.1}M ({:+.1}%)", n / 1e6, 100.0 * rel));
    }
    Ok(detail.join(", "))
}

fn masking_invariants() -> Outcome {
    let start = Instant::now();
    let cfg = MaskConfig::default();
    ensure!(cfg.context_scale == (0.85, 1.0) && cfg.target_scale == (0.15, 0.2), "default scales drifted");
    for (gh, gw) in [(8, 8), (14, 14)] {
        let n = (gh * gw) as f64;
        let mut r = rng::derive(0xacc3, &[gh as u64]);
        for i in 0..10_000 {
            let set = sample_masks((gh, gw), &cfg, &mut r).map_err(|e| e.to_string())?;
            let union = set.target_union();
            ensure!(!set.context.is_empty(), "{gh}x{gw} #{i}: empty context");
            ensure!(set.context.iter().all(|c| !union.contains(c)), "{gh}x{gw} #{i}: overlap");
            for t in &set.targets {
                let s = t.requested as f64;
                ensure!(0.15 * n - 0.5 <= s && s <= 0.2 * n + 0.5, "{gh}x{gw} #{i}: target requested {s}");
            }
            let s = set.context_block.requested as f64;
            ensure!(0.85 * n - 0.5 <= s && s <= n, "{gh}x{gw} #{i}: context requested {s}");
        }
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(60), "took {took:?}");
    Ok(format!("20000 mask sets, {took:.1?}"))
}

fn ema_schedule() -> Outcome {
    let cfg = TiJepaConfig::default();
    let sched = cfg.train.ema_schedule(256).map_err(|e| e.to_string())?;
    let (m0, m1) = (momentum_at(0, &sched), momentum_at(sched.total_steps, &sched));
    ensure!(m0 == 0.996 && m1 == 1.0, "endpoints {m0} {m1}");

    let mut store = model::init_model::<f32, _>(&cfg.model, &mut rng::derive(1, &[])).map_err(|e| e.to_string())?;
    for (_, p) in store.iter_mut().filter(|(k, _)| k.starts_with("x.")) {
        for v in p.value.data_mut() {
            *v = -0.5 * *v + 0.125;
        }
    }
    let before = store.clone();
    ema_update(&mut store, 1.0).map_err(|e| e.to_string())?;
    ensure!(store == before, "m=1 changed the target module");
    ema_update(&mut store, 0.0).map_err(|e| e.to_string())?;
    for (name, p) in store.with_prefix("xt.") {
        let online = store.value(&format!("x.{}", &name[3..])).unwrap();
        let same = online.data().iter().zip(p.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure!(same, "m=0 did not copy {name} bitwise");
    }
    Ok("endpoints 0.996/1.0, fixed point and copy bitwise".into())
}

fn freeze_contract() -> Outcome {
    let cfg = TiJepaConfig::default();
    let data = samples(&cfg, 64, 5);
    let mut t = Trainer::new(cfg, 5).map_err(|e| e.to_string())?;
    let digests = |t: &Trainer| [IMAGE_PREFIX, TEXT_PREFIX, "x.", "pred."].map(|p| t.params.digest(p));
    let before = digests(&t);
    for _ in 0..50 {
        t.train_step(&data).map_err(|e| e.to_string())?;
        ensure!(
            t.params.with_prefix("xt.").all(|(_, p)| p.grad.is_none()),
            "target module holds gradient buffers"
        );
    }
    let after = digests(&t);
    ensure!(before[0] == after[0] && before[1] == after[1], "frozen encoder bytes changed");
    ensure!(before[2] != after[2] && before[3] != after[3], "online module or predictor did not change");
    ensure!(!t.optim.moments.keys().any(|k| k.starts_with("xt.")), "optimizer tracks the target module");
    Ok("encoders unchanged, online module and predictor updated over 50 steps".into())
}

struct DeskRun {
    reports: Vec<StepReport>,
    metrics: String,
    true_loss: f64,
    permuted_loss: f64,
    took: Duration,
}

// Shared by the training-sanity and collapse criteria.
fn desk_run() -> &'static Result<DeskRun, String> {
    static RUN: OnceLock<Result<DeskRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let mut cfg = TiJepaConfig::default();
        cfg.train.steps = 200;
        cfg.train.checkpoint_every = 0;
        let data = samples(&cfg, 256, 0);
        let held_out = samples(&cfg, 64, 1);
        let mut t = Trainer::new(cfg.clone(), 0).map_err(|e| e.to_string())?;
        let mut log = Vec::new();
        let reports = t.run(&data, &mut log, None).map_err(|e| e.to_string())?;
        let true_loss = eval_loss(&t.params, &cfg, &held_out, 9, CaptionMode::True).map_err(|e| e.to_string())?;
        let permuted_loss =
            eval_loss(&t.params, &cfg, &held_out, 9, CaptionMode::Permuted).map_err(|e| e.to_string())?;
        Ok(DeskRun {
            reports,
            metrics: String::from_utf8(log).unwrap(),
            true_loss,
            permuted_loss,
            took: start.elapsed(),
        })
    })
}

/// Required floor on the smoothed loss drop.
const MIN_LOSS_DROP: f64 = 0.30;
/// Regression bounds pinned below the first verified run (drop 96.8%,
/// permuted/true eval loss ratio 1.91).
const PINNED_LOSS_DROP: f64 = 0.85;
const PINNED_CAPTION_RATIO: f64 = 1.5;

fn training_sanity() -> Outcome {
    let run = desk_run().as_ref().map_err(Clone::clone)?;
    ensure!(run.reports.len() == 200, "{} steps", run.reports.len());
    let mean = |r: &[StepReport]| r.iter().map(|s| s.loss).sum::<f64>() / r.len() as f64;
    let initial = mean(&run.reports[..10]);
    let last = mean(&run.reports[190..]);
    let drop = 1.0 - last / initial;
    ensure!(run.reports.iter().all(|r| r.loss.is_finite()), "non-finite loss");
    ensure!(drop >= MIN_LOSS_DROP, "smoothed loss {initial:.3} -> {last:.3} (drop {:.1}%)", 100.0 * drop);
    ensure!(drop >= PINNED_LOSS_DROP, "loss drop {:.1}% below pinned regression bound", 100.0 * drop);
    let margin = run.permuted_loss - run.true_loss;
    ensure!(margin > 0.0, "caption margin {margin:.4} (true {:.4}, permuted {:.4})", run.true_loss, run.permuted_loss);
    let ratio = run.permuted_loss / run.true_loss;
    ensure!(ratio >= PINNED_CAPTION_RATIO, "permuted/true ratio {ratio:.3} below pinned regression bound");
    ensure!(run.took < Duration::from_secs(600), "took {:?}", run.took);
    Ok(format!(
        "loss {initial:.2} -> {last:.2} (-{:.1}%), eval true {:.3} vs permuted {:.3}, {:.0?}",
        100.0 * drop,
        run.true_loss,
        run.permuted_loss,
        run.took
    ))
}

fn reconciliation_oracles() -> Outcome {
    use Sentiment::*;
    let table = [
        ((Positive, Positive), Some(Positive)),
        ((Positive, Neutral), Some(Positive)),
        ((Positive, Negative), None),
        ((Neutral, Positive), Some(Positive)),
        ((Neutral, Neutral), Some(Neutral)),
        ((Neutral, Negative), Some(Negative)),
        ((Negative, Positive), None),
        ((Negative, Neutral), Some(Negative)),
        ((Negative, Negative), Some(Negative)),
    ];
    for ((t, i), want) in table {
        ensure!(reconcile_single(t, i) == want, "single ({t}, {i})");
    }
    let mut n = 0;
    for a in Sentiment::ALL {
        for b in Sentiment::ALL {
            for c in Sentiment::ALL {
                let votes = [a, b, c];
                let want = Sentiment::ALL
                    .into_iter()
                    .find(|s| votes.iter().filter(|v| *v == s).count() >= 2);
                ensure!(majority_vote(votes) == want, "majority {votes:?}");
                n += 1;
            }
        }
    }
    let (tr, va, te) = split_dataset((0..4511).collect::<Vec<_>>(), 0).map_err(|e| e.to_string())?;
    ensure!((tr.len(), va.len(), te.len()) == (3609, 451, 451), "split {} {} {}", tr.len(), va.len(), te.len());
    let all: BTreeSet<i32> = tr.into_iter().chain(va).chain(te).collect();
    ensure!(all.len() == 4511, "split is not a partition");
    let multi = |t: [Sentiment; 3], i: [Sentiment; 3]| {
        dataprep::reconcile_multi(&dataprep::AnnotatedPair {
            id: String::new(),
            text: t.to_vec(),
            image: i.to_vec(),
        })
    };
    ensure!(multi([Positive, Positive, Neutral], [Neutral, Neutral, Negative]) == Some(Positive), "multi compose");
    ensure!(multi([Positive, Neutral, Negative], [Positive; 3]) == None, "multi ambiguous");
    ensure!(multi([Negative; 3], [Positive, Positive, Neutral]) == None, "multi conflict");
    Ok(format!("9 single cases, {n} majority inputs, split 3609/451/451"))
}

fn metrics_oracle() -> Outcome {
    let cm = ConfusionMatrix {
        counts: [[1, 0, 3], [1, 4, 0], [0, 2, 6]],
    };
    let r = compute_metrics(&cm).map_err(|e| e.to_string())?;
    ensure!(r.precision[0] == 0.5 && r.recall[0] == 0.25, "P {} R {}", r.precision[0], r.recall[0]);
    ensure!((r.f1[0] - 1.0 / 3.0).abs() < 1e-15, "F1 {}", r.f1[0]);
    let perfect = ConfusionMatrix {
        counts: [[3, 0, 0], [0, 2, 0], [0, 0, 7]],
    };
    let p = compute_metrics(&perfect).map_err(|e| e.to_string())?;
    ensure!(p.accuracy == 1.0 && p.macro_f1 == 1.0 && p.weighted_f1 == 1.0, "perfect diagonal");

    let mut r = rng::derive(0xacc8, &[]);
    for trial in 0..100 {
        let pairs: Vec<(usize, usize)> = (0..r.gen_range(1..200)).map(|_| (r.gen_range(0..3), r.gen_range(0..3))).collect();
        let mut cm = ConfusionMatrix::default();
        for &(t, p) in &pairs {
            cm.add(t, p);
        }
        let hits = pairs.iter().filter(|(t, p)| t == p).count();
        let m = compute_metrics(&cm).map_err(|e| e.to_string())?;
        ensure!(m.accuracy == hits as f64 / pairs.len() as f64, "trial {trial}: accuracy {}", m.accuracy);
    }
    Ok("hand matrices exact, 100 random accuracies match".into())
}

fn determinism_and_persistence() -> Outcome {
    let mut cfg = TiJepaConfig::default();
    cfg.train.batch_size = 4;
    let data = samples(&cfg, 16, 2);
    let run = |steps: usize| -> Result<Trainer, String> {
        let mut t = Trainer::new(cfg.clone(), 21).map_err(|e| e.to_string())?;
        for _ in 0..steps {
            t.train_step(&data).map_err(|e| e.to_string())?;
        }
        Ok(t)
    };
    let a = run(3)?.checkpoint().to_bytes();
    let b = run(3)?.checkpoint().to_bytes();
    ensure!(a == b, "same-seed checkpoints differ");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("k.tijp");
    run(2)?.checkpoint().save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    ensure!(loaded.to_bytes() == std::fs::read(&path).unwrap(), "save-load-save not byte identical");
    let mut resumed = Trainer::from_checkpoint(loaded).map_err(|e| e.to_string())?;
    let r = resumed.train_step(&data).map_err(|e| e.to_string())?;
    let mut straight = run(2)?;
    let s = straight.train_step(&data).map_err(|e| e.to_string())?;
    ensure!(r.loss.to_bits() == s.loss.to_bits(), "resumed loss {} vs {}", r.loss, s.loss);
    ensure!(resumed.checkpoint().to_bytes() == a, "resumed state differs from uninterrupted run");

    let mut corrupt = a.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x40;
    match Checkpoint::from_bytes(&corrupt) {
        Err(e) if e.to_string().contains("CRC") => {}
        other => return Err(format!("corrupted file accepted or misreported: {other:?}")),
    }
    Ok(format!("{} byte checkpoints identical, resume bitwise, CRC enforced", a.len()))
}

fn collapse_diagnostic() -> Outcome {
    let row = [0.3f64, -1.2, 4.0, 0.0];
    let same = Tensor::from_rows(&[&row, &row, &row]);
    let zero = collapse_metric(&[same.clone(), same]).map_err(|e| e.to_string())?;
    ensure!(zero == 0.0, "identical tokens give {zero}");

    let mut r = rng::derive(0xacca, &[]);
    let batch: Vec<Tensor<f64>> = (0..3)
        .map(|_| {
            let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| r.gen_range(-2.0..2.0)).collect()).collect();
            let rows: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            Tensor::from_rows(&rows)
        })
        .collect();
    let shift = [10.0, -3.0, 0.5, 7.0];
    let shifted: Vec<Tensor<f64>> = batch
        .iter()
        .map(|t| {
            let mut t = t.clone();
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += shift[i % 4];
            }
            t
        })
        .collect();
    let (a, b) = (collapse_metric(&batch).unwrap(), collapse_metric(&shifted).unwrap());
    ensure!((a - b).abs() < 1e-12, "translation changed metric {a} -> {b}");

    let run = desk_run().as_ref().map_err(Clone::clone)?;
    let lines: Vec<&str> = run.metrics.lines().collect();
    ensure!(lines.len() == 21, "{} metric lines for 200 steps at interval 10", lines.len());
    for (k, l) in lines.iter().enumerate() {
        let f: Vec<&str> = l.split('\t').collect();
        let step = if k == 20 { 199 } else { 10 * k };
        ensure!(f.len() == 4 && f[0] == step.to_string(), "bad metric line {l:?}");
        let c: f64 = f[2].parse().map_err(|_| format!("collapse field in {l:?}"))?;
        ensure!(c.is_finite() && c > 0.0, "collapse {c} at step {}", f[0]);
    }
    let last: f64 = lines.last().unwrap().split('\t').nth(2).unwrap().parse().unwrap();
    Ok(format!("zero and translation-invariant; logged {} times, final {last:.4}", lines.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradient_suite),
        ("parameter counts", parameter_counts),
        ("masking invariants", masking_invariants),
        ("EMA schedule", ema_schedule),
        ("freeze contract", freeze_contract),
        ("training sanity", training_sanity),
        ("reconciliation oracles", reconciliation_oracles),
        ("metrics oracle", metrics_oracle),
        ("determinism and persistence", determinism_and_persistence),
        ("collapse diagnostic", collapse_diagnostic),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let label = format!("criterion {:>2} {name}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {label}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {label}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
