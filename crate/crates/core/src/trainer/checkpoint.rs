//! Checkpoint files.
//!
//! Layout: magic `TIJP`, u32 version, u32 record count, then per record
//! (sorted by name) a u32 name length, the name, a u8 dtype tag, u32 rank,
//! `rank` u32 dims and the little-endian payload. A u64 CRC-64/XZ of all
//! preceding bytes closes the file. All integers are little-endian.
//!
//! Dtype tags: 0 = f32, 1 = u8, 2 = u64.

use std::collections::BTreeMap;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::error::{Error, Result};
use crate::model;
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::rng;

use super::config::TiJepaConfig;
use super::optim::AdamW;

pub const MAGIC: &[u8; 4] = b"TIJP";
pub const VERSION: u32 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    F32(Tensor<f32>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

pub type Records = BTreeMap<String, Record>;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_records(records: &Records) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, records.len());
    for (name, rec) in records {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        match rec {
            Record::F32(t) => {
                out.push(0);
                put_u32(&mut out, t.rank());
                for &d in t.shape() {
                    put_u32(&mut out, d);
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Record::U8(bytes) => {
                out.push(1);
                put_u32(&mut out, 1);
                put_u32(&mut out, bytes.len());
                out.extend_from_slice(bytes);
            }
            Record::U64(vals) => {
                out.push(2);
                put_u32(&mut out, 1);
                put_u32(&mut out, vals.len());
                for v in vals {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let crc = CRC64.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_records(bytes: &[u8]) -> Result<Records> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    if bytes.len() < 20 {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    if CRC64.checksum(body) != stored {
        return Err(Error::Format("checkpoint CRC mismatch".into()));
    }
    let count = r.u32()?;
    let mut out = Records::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let tag = r.take(1)?[0];
        let rank = r.u32()?;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32()).collect::<Result<_>>()?;
        let n: usize = dims.iter().product();
        let rec = match tag {
            0 => {
                let data = r
                    .take(4 * n)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Record::F32(Tensor::new(dims, data).map_err(|e| Error::Format(format!("{name}: {e}")))?)
            }
            1 if rank == 1 => Record::U8(r.take(n)?.to_vec()),
            2 if rank == 1 => Record::U64(
                r.take(8 * n)?
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => return Err(Error::Format(format!("{name}: unsupported dtype tag {tag} with rank {rank}"))),
        };
        if out.insert(name.clone(), rec).is_some() {
            return Err(Error::Format(format!("duplicate record {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes before checkpoint CRC".into()));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Backbone, optimizer and schedule state of a pretraining run.
    Pretrain,
    /// Classification head weights only.
    Head,
}

impl CheckpointKind {
    fn tag(self) -> &'static str {
        match self {
            CheckpointKind::Pretrain => "pretrain",
            CheckpointKind::Head => "head",
        }
    }
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: TiJepaConfig,
    pub seed: u64,
    /// Completed optimizer steps.
    pub step: u64,
    /// Examples skipped after mask sampling failed.
    pub skipped: u64,
    pub params: ParamStore,
    pub optim: Option<AdamW>,
}

pub const HEAD_WEIGHT: &str = "head.w";
pub const HEAD_BIAS: &str = "head.b";

const PARAM: &str = "param/";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

fn meta_u64(records: &Records, key: &str) -> Result<u64> {
    match records.get(key) {
        Some(Record::U64(v)) if v.len() == 1 => Ok(v[0]),
        _ => Err(Error::Format(format!("missing or malformed {key}"))),
    }
}

fn meta_text(records: &Records, key: &str) -> Result<String> {
    match records.get(key) {
        Some(Record::U8(b)) => {
            String::from_utf8(b.clone()).map_err(|_| Error::Format(format!("{key} is not UTF-8")))
        }
        _ => Err(Error::Format(format!("missing or malformed {key}"))),
    }
}

/// Parameter names, shapes and trainability a checkpoint of `kind` must hold.
fn expected_params(kind: CheckpointKind, config: &TiJepaConfig) -> Result<ParamStore> {
    match kind {
        CheckpointKind::Pretrain => model::init_model(&config.model, &mut rng::derive(0, &[])),
        CheckpointKind::Head => {
            let mut s = ParamStore::new();
            s.insert(HEAD_WEIGHT, Tensor::zeros([config.model.fusion.hidden, 3]), true);
            s.insert(HEAD_BIAS, Tensor::zeros([3]), true);
            Ok(s)
        }
    }
}

impl Checkpoint {
    pub fn to_records(&self) -> Records {
        let mut r = Records::new();
        r.insert("meta/kind".into(), Record::U8(self.kind.tag().as_bytes().to_vec()));
        r.insert("meta/config".into(), Record::U8(self.config.to_text().into_bytes()));
        r.insert("meta/seed".into(), Record::U64(vec![self.seed]));
        r.insert("meta/step".into(), Record::U64(vec![self.step]));
        r.insert("meta/skipped".into(), Record::U64(vec![self.skipped]));
        for (name, p) in self.params.iter() {
            r.insert(format!("{PARAM}{name}"), Record::F32(p.value.clone()));
        }
        if let Some(opt) = &self.optim {
            r.insert("meta/optim_step".into(), Record::U64(vec![opt.step]));
            for (name, (m, v)) in &opt.moments {
                r.insert(format!("{MOMENT1}{name}"), Record::F32(m.clone()));
                r.insert(format!("{MOMENT2}{name}"), Record::F32(v.clone()));
            }
        }
        r
    }

    pub fn from_records(records: Records) -> Result<Self> {
        let kind = match meta_text(&records, "meta/kind")?.as_str() {
            "pretrain" => CheckpointKind::Pretrain,
            "head" => CheckpointKind::Head,
            other => return Err(Error::Format(format!("unknown checkpoint kind {other:?}"))),
        };
        let config = TiJepaConfig::parse(&meta_text(&records, "meta/config")?)?;
        let mut params = expected_params(kind, &config)?;
        let mut seen = 0usize;
        let mut optim: Option<AdamW> = None;
        if let Ok(step) = meta_u64(&records, "meta/optim_step") {
            let o = &config.optim;
            let mut opt = AdamW::new(o.lr, o.beta1, o.beta2, o.eps, o.weight_decay);
            if kind == CheckpointKind::Head {
                opt = AdamW::adam(config.head.lr);
            }
            opt.step = step;
            optim = Some(opt);
        }
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, rec) in &records {
            if name.starts_with("meta/") {
                if !matches!(
                    name.as_str(),
                    "meta/kind" | "meta/config" | "meta/seed" | "meta/step" | "meta/skipped" | "meta/optim_step"
                ) {
                    return Err(Error::Format(format!("unknown tensor name {name}")));
                }
                continue;
            }
            let Record::F32(t) = rec else {
                return Err(Error::Format(format!("{name} must be f32")));
            };
            let (table, key) = if let Some(k) = name.strip_prefix(PARAM) {
                (0, k)
            } else if let Some(k) = name.strip_prefix(MOMENT1) {
                (1, k)
            } else if let Some(k) = name.strip_prefix(MOMENT2) {
                (2, k)
            } else {
                return Err(Error::Format(format!("unknown tensor name {name}")));
            };
            let slot = params
                .get_mut(key)
                .map_err(|_| Error::Format(format!("unknown tensor name {name}")))?;
            if slot.value.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.value.shape()
                )));
            }
            match table {
                0 => {
                    slot.value = t.clone();
                    seen += 1;
                }
                1 | 2 if !slot.requires_grad => {
                    return Err(Error::Format(format!("optimizer state for frozen tensor {key}")));
                }
                1 => drop(first.insert(key.to_string(), t.clone())),
                _ => drop(second.insert(key.to_string(), t.clone())),
            }
        }
        if seen != params.len() {
            let missing = params
                .names()
                .find(|n| !records.contains_key(&format!("{PARAM}{n}")))
                .unwrap_or_default();
            return Err(Error::Format(format!("checkpoint lacks tensor {missing}")));
        }
        if let Some(opt) = &mut optim {
            if first.keys().ne(second.keys()) {
                return Err(Error::Format("unpaired optimizer moments".into()));
            }
            for (k, m) in first {
                let v = second.remove(&k).unwrap();
                opt.moments.insert(k, (m, v));
            }
        } else if !first.is_empty() || !second.is_empty() {
            return Err(Error::Format("optimizer moments without optimizer step".into()));
        }
        Ok(Checkpoint {
            kind,
            config,
            seed: meta_u64(&records, "meta/seed")?,
            step: meta_u64(&records, "meta/step")?,
            skipped: meta_u64(&records, "meta/skipped")?,
            params,
            optim,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_records(&self.to_records())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_records(decode_records(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_records() -> Records {
        let mut r = Records::new();
        r.insert("b".into(), Record::F32(Tensor::from_rows(&[&[1.0, -2.5], &[0.0, 3.0]])));
        r.insert("a".into(), Record::U64(vec![7, u64::MAX]));
        r.insert("c".into(), Record::U8(b"hi".to_vec()));
        r
    }

    #[test]
    fn records_roundtrip() {
        let bytes = encode_records(&sample_records());
        assert_eq!(&bytes[..4], b"TIJP");
        assert_eq!(decode_records(&bytes).unwrap(), sample_records());
        assert_eq!(encode_records(&decode_records(&bytes).unwrap()), bytes);
    }

    #[test]
    fn golden_layout_of_one_record() {
        let mut r = Records::new();
        r.insert("w".into(), Record::F32(Tensor::scalar(1.0)));
        let bytes = encode_records(&r);
        let mut expect = b"TIJP".to_vec();
        expect.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0]);
        expect.extend_from_slice(&[1, 0, 0, 0, b'w', 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(&bytes[..bytes.len() - 8], &expect[..]);
        // CRC-64/XZ check value from the catalogue
        assert_eq!(CRC64.checksum(b"123456789"), 0x995dc9bbdf1939fa);
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = encode_records(&sample_records());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_records(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(decode_records(&bad).unwrap_err().to_string().contains("version"));
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(decode_records(&bad).unwrap_err().to_string().contains("CRC"));
        assert!(decode_records(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn checkpoint_rejects_unknown_tensor() {
        let cfg = TiJepaConfig::default();
        let ck = Checkpoint {
            kind: CheckpointKind::Head,
            config: cfg.clone(),
            seed: 1,
            step: 0,
            skipped: 0,
            params: expected_params(CheckpointKind::Head, &cfg).unwrap(),
            optim: None,
        };
        let mut r = ck.to_records();
        assert_eq!(Checkpoint::from_records(r.clone()).unwrap(), ck);
        r.insert("param/head.extra".into(), Record::F32(Tensor::scalar(0.0)));
        let err = Checkpoint::from_records(r).unwrap_err().to_string();
        assert!(err.contains("unknown tensor name param/head.extra"), "{err}");
    }
}
