//! Paired image-caption data: manifests, the synthetic generator, and
//! sentiment label reconciliation and splitting for annotated corpora.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::encoders::ImageTensor;
use crate::error::{Error, Result};
use crate::imageio;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sentiment {
    Positive,
    Neutral,
    Negative,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Positive, Sentiment::Neutral, Sentiment::Negative];

    /// Class index used by the classifier.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Sentiment::Positive => "positive",
            Sentiment::Neutral => "neutral",
            Sentiment::Negative => "negative",
        }
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sentiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" => Ok(Sentiment::Positive),
            "neutral" => Ok(Sentiment::Neutral),
            "negative" => Ok(Sentiment::Negative),
            other => Err(Error::Data(format!("unknown sentiment {other:?}"))),
        }
    }
}

/// Text and image labels agree, or one side is neutral and the other
/// decides. Positive against negative is discarded.
pub fn reconcile_single(text: Sentiment, image: Sentiment) -> Option<Sentiment> {
    use Sentiment::*;
    match (text, image) {
        (a, b) if a == b => Some(a),
        (Neutral, x) | (x, Neutral) => Some(x),
        _ => None,
    }
}

/// Label held by at least two of three annotators; `None` when all differ.
pub fn majority_vote(labels: [Sentiment; 3]) -> Option<Sentiment> {
    let [a, b, c] = labels;
    if a == b || a == c {
        Some(a)
    } else if b == c {
        Some(b)
    } else {
        None
    }
}

/// Per-record labels from one or three annotators.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotatedPair {
    pub id: String,
    pub text: Vec<Sentiment>,
    pub image: Vec<Sentiment>,
}

/// How a record was resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Keep(Sentiment),
    /// Positive text with negative image or the reverse.
    Conflict,
    /// Three distinct annotator labels on one side.
    Ambiguous,
}

impl Verdict {
    pub fn label(self) -> Option<Sentiment> {
        match self {
            Verdict::Keep(s) => Some(s),
            _ => None,
        }
    }
}

fn single_verdict(text: Sentiment, image: Sentiment) -> Verdict {
    reconcile_single(text, image).map_or(Verdict::Conflict, Verdict::Keep)
}

/// Majority per modality, then the single-annotator rule on the two
/// majorities.
pub fn reconcile_multi(pair: &AnnotatedPair) -> Option<Sentiment> {
    verdict(pair).ok()?.label()
}

pub fn verdict(pair: &AnnotatedPair) -> Result<Verdict> {
    match (pair.text.as_slice(), pair.image.as_slice()) {
        (&[t], &[i]) => Ok(single_verdict(t, i)),
        (&[t0, t1, t2], &[i0, i1, i2]) => {
            match (majority_vote([t0, t1, t2]), majority_vote([i0, i1, i2])) {
                (Some(t), Some(i)) => Ok(single_verdict(t, i)),
                _ => Ok(Verdict::Ambiguous),
            }
        }
        _ => Err(Error::Data(format!(
            "record {}: expected 1 or 3 labels per modality, got {} and {}",
            pair.id,
            pair.text.len(),
            pair.image.len()
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnotationMode {
    Single,
    Multi,
}

impl AnnotationMode {
    pub fn arity(self) -> usize {
        match self {
            AnnotationMode::Single => 1,
            AnnotationMode::Multi => 3,
        }
    }
}

impl FromStr for AnnotationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(AnnotationMode::Single),
            "multi" => Ok(AnnotationMode::Multi),
            other => Err(Error::Config(format!("mode must be single or multi, got {other:?}"))),
        }
    }
}

/// Parses `id<TAB>text_labels<TAB>image_labels` lines with comma-separated
/// labels. Blank lines, `#` comments and a leading `id` header are skipped.
pub fn parse_annotations(text: &str, mode: AnnotationMode) -> Result<Vec<AnnotatedPair>> {
    let labels = |field: &str, line: usize| -> Result<Vec<Sentiment>> {
        let out = field
            .split(',')
            .map(str::parse)
            .collect::<Result<Vec<Sentiment>>>()
            .map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        if out.len() != mode.arity() {
            return Err(Error::Data(format!(
                "line {line}: expected {} label(s), got {}",
                mode.arity(),
                out.len()
            )));
        }
        Ok(out)
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!("line {line_no}: expected 3 tab-separated fields")));
        }
        if n == 0 && fields[0].eq_ignore_ascii_case("id") {
            continue;
        }
        out.push(AnnotatedPair {
            id: fields[0].to_string(),
            text: labels(fields[1], line_no)?,
            image: labels(fields[2], line_no)?,
        });
    }
    Ok(out)
}

/// Per-class counts of retained records plus discard reasons.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReconcileStats {
    pub kept: [usize; 3],
    pub conflicts: usize,
    pub ambiguous: usize,
}

impl ReconcileStats {
    pub fn total(&self) -> usize {
        self.kept.iter().sum()
    }

    pub fn add(&mut self, v: Verdict) {
        match v {
            Verdict::Keep(s) => self.kept[s.index()] += 1,
            Verdict::Conflict => self.conflicts += 1,
            Verdict::Ambiguous => self.ambiguous += 1,
        }
    }
}

impl fmt::Display for ReconcileStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10}{:<10}{:<10}{:<10}", "Positive", "Neutral", "Negative", "Total")?;
        writeln!(f, "{:<10}{:<10}{:<10}{:<10}", self.kept[0], self.kept[1], self.kept[2], self.total())?;
        writeln!(f, "discarded: {} positive/negative conflicts (flagged), {} ambiguous", self.conflicts, self.ambiguous)
    }
}

/// Resolves every record; returns kept `(id, label)` pairs in input order.
pub fn reconcile_all(pairs: &[AnnotatedPair]) -> Result<(Vec<(String, Sentiment)>, ReconcileStats)> {
    let mut stats = ReconcileStats::default();
    let mut kept = Vec::new();
    for p in pairs {
        let v = verdict(p)?;
        stats.add(v);
        if let Some(s) = v.label() {
            kept.push((p.id.clone(), s));
        }
    }
    Ok((kept, stats))
}

/// Seeded shuffle, then contiguous `floor(0.8n)`, `floor(0.1n)` and
/// `floor(0.1n)` slices with the remainder added to train.
pub fn split_dataset<T>(items: Vec<T>, seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let n = items.len();
    if n < 10 {
        return Err(Error::Data(format!("need at least 10 examples to split, got {n}")));
    }
    let tenth = n / 10;
    let n_train = n - 2 * tenth;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::derive(seed, &[]));
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<T> {
        order[range].iter().map(|&i| slots[i].take().unwrap()).collect()
    };
    let train = take(0..n_train);
    let val = take(n_train..n_train + tenth);
    let test = take(n_train + tenth..n);
    Ok((train, val, test))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedExample {
    pub image: ImageTensor,
    pub caption: String,
    pub label: Option<Sentiment>,
}

/// Parses `image_path<TAB>label_or_-<TAB>caption` lines and loads each
/// image. Relative paths are resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<PairedExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.splitn(3, '\t').collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!(
                "{}:{}: expected image_path, label and caption separated by tabs",
                path.display(),
                n + 1
            )));
        }
        let label = match fields[1] {
            "-" => None,
            l => Some(l.parse().map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?),
        };
        let image_path = base.join(fields[0]);
        if !image_path.is_file() {
            return Err(Error::Data(format!("missing image file {}", image_path.display())));
        }
        out.push(PairedExample {
            image: imageio::load_image(&image_path)?,
            caption: fields[2].to_string(),
            label,
        });
    }
    Ok(out)
}

/// One manifest line; the path is written as given.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub label: Option<Sentiment>,
    pub caption: String,
}

pub fn manifest_text(entries: &[ManifestEntry]) -> Result<String> {
    let mut out = String::new();
    for e in entries {
        if e.caption.contains(['\t', '\n']) {
            return Err(Error::Data(format!("caption {:?} contains a tab or newline", e.caption)));
        }
        let label = e.label.map_or("-", Sentiment::name);
        out.push_str(&format!("{}\t{label}\t{}\n", e.image_path.display(), e.caption));
    }
    Ok(out)
}

pub const SYNTH_COLORS: [(&str, [f32; 3]); 4] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
];
pub const SYNTH_QUADRANTS: [&str; 4] = ["top-left", "top-right", "bottom-left", "bottom-right"];
/// Mid gray, chosen to be exact in 8-bit image files.
pub const SYNTH_BACKGROUND: [f32; 3] = [128.0 / 255.0; 3];

/// Sentiment attached to synthetic pairs so the classification path can be
/// exercised end to end: green and yellow are positive, blue neutral, red
/// negative.
pub fn synth_label(color: usize) -> Sentiment {
    [Sentiment::Negative, Sentiment::Positive, Sentiment::Neutral, Sentiment::Positive][color]
}

/// Renders one synthetic image: a solid square filling quadrant `quadrant`
/// on a gray background.
pub fn synth_image(color: usize, quadrant: usize, size: usize) -> ImageTensor {
    let mut img = ImageTensor::filled(size, size, SYNTH_BACKGROUND);
    let half = size / 2;
    let (top, left) = ((quadrant / 2) * half, (quadrant % 2) * half);
    for y in top..top + half {
        for x in left..left + half {
            img.set_pixel(y, x, SYNTH_COLORS[color].1);
        }
    }
    img
}

pub fn synth_caption(color: usize, quadrant: usize) -> String {
    format!("{} square at {}", SYNTH_COLORS[color].0, SYNTH_QUADRANTS[quadrant])
}

/// `n` pairs with color and quadrant drawn uniformly from `seed`.
pub fn synth_generate(n: usize, seed: u64, size: usize) -> Result<Vec<PairedExample>> {
    if n == 0 || size < 2 {
        return Err(Error::Config(format!("synthetic set needs n >= 1 and size >= 2, got n={n} size={size}")));
    }
    let mut r = rng::derive(seed, &[]);
    Ok((0..n)
        .map(|_| {
            let color = r.gen_range(0..4);
            let quadrant = r.gen_range(0..4);
            PairedExample {
                image: synth_image(color, quadrant, size),
                caption: synth_caption(color, quadrant),
                label: Some(synth_label(color)),
            }
        })
        .collect())
}

/// Writes `images/NNNNN.ppm` files and `manifest.tsv` into `dir`.
pub fn write_dataset(dir: &Path, examples: &[PairedExample]) -> Result<PathBuf> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut entries = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let rel = PathBuf::from("images").join(format!("{i:05}.ppm"));
        imageio::save_image(&dir.join(&rel), &ex.image)?;
        entries.push(ManifestEntry {
            image_path: rel,
            label: ex.label,
            caption: ex.caption.clone(),
        });
    }
    let manifest = dir.join("manifest.tsv");
    std::fs::write(&manifest, manifest_text(&entries)?).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}
