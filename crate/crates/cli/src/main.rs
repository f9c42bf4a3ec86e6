//! `tijepa` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or file
//! format error, 3 numerical failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tijepa::dataprep::{self, AnnotationMode, ManifestEntry, PairedExample, Sentiment};
use tijepa::error::Error;
use tijepa::eval;
use tijepa::gradcheck;
use tijepa::trainer::checkpoint::{decode_records, Record};
use tijepa::trainer::{Checkpoint, CheckpointKind, Sample, TiJepaConfig, Trainer};

#[derive(Parser)]
#[command(name = "tijepa", version, about = "Text-conditioned joint-embedding predictive pretraining")]
struct Cli {
    /// Seed for every random stream of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the fusion module and predictor on an image-caption manifest.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override one config key, e.g. `--set train.steps=50`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Continue from a pretraining checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a linear sentiment head on a frozen pretrained backbone.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Score a backbone and head on a labeled manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Print `key=value` lines instead of the table.
        #[arg(long)]
        kv: bool,
    },
    /// Reconcile per-modality sentiment annotations into a labeled manifest.
    PreprocessMvsa {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        mode: AnnotationMode,
        #[arg(long)]
        out: PathBuf,
        /// Print per-class counts of the retained records.
        #[arg(long)]
        stats: bool,
        /// Directory holding `<id>.ppm` images and `<id>.txt` captions;
        /// defaults to the annotation file's directory.
        #[arg(long)]
        media: Option<PathBuf>,
    },
    /// Write a synthetic colored-square dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// List the records of a checkpoint.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Lib(Error::Config(_)) => 1,
            Failure::Lib(Error::NonFinite(_)) => 3,
            Failure::Lib(_) => 2,
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Lib(Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn load_config(path: &Path, overrides: &[String]) -> CliResult<TiJepaConfig> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("config file {} not found", path.display())));
    }
    let mut cfg = TiJepaConfig::load(path)?;
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn to_samples(examples: &[PairedExample], cfg: &TiJepaConfig) -> CliResult<Vec<Sample>> {
    Ok(examples
        .iter()
        .map(|e| Sample::new(&e.image, &e.caption, cfg))
        .collect::<Result<_, _>>()?)
}

fn labeled(examples: Vec<PairedExample>, cfg: &TiJepaConfig) -> CliResult<Vec<(Sample, Sentiment)>> {
    examples
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let label = e
                .label
                .ok_or_else(|| Error::Data(format!("manifest entry {} has no label", i + 1)))?;
            Ok((Sample::new(&e.image, &e.caption, cfg)?, label))
        })
        .collect()
}

fn load_pretrained(path: &Path) -> CliResult<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.kind != CheckpointKind::Pretrain {
        return Err(Error::Format(format!("{} is not a pretraining checkpoint", path.display())).into());
    }
    Ok(ck)
}

fn pretrain(seed: u64, config: &Path, data: &Path, out: &Path, set: &[String], resume: Option<&Path>) -> CliResult {
    let mut trainer = match resume {
        Some(path) => {
            let ck = load_pretrained(path)?;
            let mut t = Trainer::from_checkpoint(ck)?;
            for o in set {
                t.config.apply_override(o)?;
            }
            t
        }
        None => Trainer::new(load_config(config, set)?, seed)?,
    };
    let examples = dataprep::load_manifest(data)?;
    let samples = to_samples(&examples, &trainer.config)?;
    fs::create_dir_all(out).map_err(io(out))?;
    fs::write(out.join("config.txt"), trainer.config.to_text()).map_err(io(out))?;
    let metrics_path = out.join("metrics.tsv");
    let mut metrics = fs::File::create(&metrics_path).map_err(io(&metrics_path))?;
    let reports = trainer.run(&samples, &mut metrics, Some(out))?;
    metrics.flush().map_err(io(&metrics_path))?;
    trainer.checkpoint().save(&out.join("final.tijp"))?;
    if trainer.skipped > 0 {
        log::warn!("{} examples skipped after mask sampling failed", trainer.skipped);
    }
    if let Some(last) = reports.last() {
        println!("trained {} steps, final loss {:.6}", trainer.step, last.loss);
    }
    Ok(())
}

fn finetune(seed: u64, ckpt: &Path, data: &Path, out: &Path, set: &[String]) -> CliResult {
    let ck = load_pretrained(ckpt)?;
    let mut cfg = ck.config.clone();
    for o in set {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    let examples = labeled(dataprep::load_manifest(data)?, &cfg)?;
    let (train, val, test) = dataprep::split_dataset(examples, seed)?;
    let (head, epochs) = eval::finetune(&ck.params, &cfg, &train, &val, seed)?;
    fs::create_dir_all(out).map_err(io(out))?;
    let log_path = out.join("finetune.tsv");
    let mut log = String::new();
    for e in &epochs {
        let acc = e.val_accuracy.map_or_else(|| "-".into(), |a| format!("{a:.6}"));
        log.push_str(&format!("{}\t{:.6}\t{acc}\n", e.epoch, e.train_loss));
    }
    fs::write(&log_path, log).map_err(io(&log_path))?;
    Checkpoint {
        kind: CheckpointKind::Head,
        config: cfg.clone(),
        seed,
        step: epochs.len() as u64,
        skipped: 0,
        params: head.clone(),
        optim: None,
    }
    .save(&out.join("head.tijp"))?;
    let cm = eval::evaluate(&ck.params, &head, &cfg, &test)?;
    let report = eval::compute_metrics(&cm)?;
    println!("test split ({} examples)", cm.total());
    print!("{report}");
    Ok(())
}

fn evaluate(ckpt: &Path, head: &Path, data: &Path, kv: bool) -> CliResult {
    let ck = load_pretrained(ckpt)?;
    let head = Checkpoint::load(head)?;
    if head.kind != CheckpointKind::Head {
        return Err(Error::Format("--head must point at a head checkpoint".into()).into());
    }
    let mut cfg = ck.config.clone();
    cfg.head.source = head.config.head.source;
    let examples = labeled(dataprep::load_manifest(data)?, &cfg)?;
    let cm = eval::evaluate(&ck.params, &head.params, &cfg, &examples)?;
    let report = eval::compute_metrics(&cm)?;
    if kv {
        print!("{}", report.to_key_values());
    } else {
        print!("{report}");
    }
    Ok(())
}

fn preprocess(annotations: &Path, mode: AnnotationMode, out: &Path, stats: bool, media: Option<&Path>) -> CliResult {
    let text = fs::read_to_string(annotations).map_err(io(annotations))?;
    let pairs = dataprep::parse_annotations(&text, mode)?;
    let (kept, summary) = dataprep::reconcile_all(&pairs)?;
    let media = match media {
        Some(m) => m.to_path_buf(),
        None => annotations.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    let media = std::path::absolute(&media).map_err(io(&media))?;
    let mut entries = Vec::with_capacity(kept.len());
    for (id, label) in kept {
        let caption = match fs::read_to_string(media.join(format!("{id}.txt"))) {
            Ok(c) => c.split_whitespace().collect::<Vec<_>>().join(" "),
            Err(_) => String::new(),
        };
        entries.push(ManifestEntry {
            image_path: media.join(format!("{id}.ppm")),
            label: Some(label),
            caption,
        });
    }
    fs::write(out, dataprep::manifest_text(&entries)?).map_err(io(out))?;
    if stats {
        print!("{summary}");
    }
    Ok(())
}

fn synth(seed: u64, n: usize, out: &Path, size: usize) -> CliResult {
    let examples = dataprep::synth_generate(n, seed, size)?;
    let manifest = dataprep::write_dataset(out, &examples)?;
    println!("wrote {n} pairs, manifest {}", manifest.display());
    Ok(())
}

fn run_gradcheck() -> CliResult {
    let results = gradcheck::run_suite()?;
    let mut ok = true;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAILED" };
        println!("{:<40} rel err {:.3e}  {status}", r.name, r.max_rel_error);
        ok &= r.passed();
    }
    if ok {
        println!("all ops passed");
        Ok(())
    } else {
        Err(Error::NonFinite("gradient check exceeded tolerance".into()).into())
    }
}

fn inspect(ckpt: &Path) -> CliResult {
    let bytes = fs::read(ckpt).map_err(io(ckpt))?;
    let records = decode_records(&bytes)?;
    for (name, rec) in &records {
        match rec {
            Record::F32(t) => println!("{name}\tf32\t{:?}", t.shape()),
            Record::U8(b) if name == "meta/kind" => println!("{name}\tu8\t{}", String::from_utf8_lossy(b)),
            Record::U8(b) => println!("{name}\tu8\t[{}]", b.len()),
            Record::U64(v) => println!("{name}\tu64\t{v:?}"),
        }
    }
    Checkpoint::from_records(records)?;
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult {
    let seed = cli.seed;
    match cli.command {
        Command::Pretrain {
            config,
            data,
            out,
            set,
            resume,
        } => pretrain(seed, &config, &data, &out, &set, resume.as_deref()),
        Command::Finetune { ckpt, data, out, set } => finetune(seed, &ckpt, &data, &out, &set),
        Command::Eval { ckpt, head, data, kv } => evaluate(&ckpt, &head, &data, kv),
        Command::PreprocessMvsa {
            annotations,
            mode,
            out,
            stats,
            media,
        } => preprocess(&annotations, mode, &out, stats, media.as_deref()),
        Command::Synth { n, out, size } => synth(seed, n, &out, size),
        Command::Gradcheck => run_gradcheck(),
        Command::Inspect { ckpt } => inspect(&ckpt),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TIJEPA_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(msg) => eprintln!("error: {msg}\n\nusage: tijepa <COMMAND> --help"),
                Failure::Lib(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.code())
        }
    }
}
