//! Per-sample backbone outputs and the BVEM interchange format.
//!
//! BVEM is little-endian: `"BVEM"`, version `u16 = 1`, dim `u32`, record
//! count `u64`, then per record `id_len u16`, id bytes, modality `u8`
//! (0 = 2D, 1 = 3D), instance `u8`, has_probs `u8`, optional `p_low f32`
//! and `p_high f32`, and `dim` f32 embedding values. Probabilities are
//! stored as f32, so `ClassProbs` round-trip exactly only when they came
//! from f32 values.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{BioLabel, ClassProbs, Manifest, Split};

pub const EMBED_DIM: usize = 512;
pub const JOINT_DIM: usize = 2 * EMBED_DIM;
const MAGIC: &[u8; 4] = b"BVEM";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "2d")]
    Ortho2D,
    #[serde(rename = "3d")]
    Als3D,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Ortho2D, Modality::Als3D];

    pub fn code(self) -> u8 {
        match self {
            Modality::Ortho2D => 0,
            Modality::Als3D => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Ortho2D),
            1 => Some(Modality::Als3D),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Ortho2D => "2d",
            Modality::Als3D => "3d",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "2d" | "2D" => Ok(Modality::Ortho2D),
            "3d" | "3D" => Ok(Modality::Als3D),
            other => Err(format!("unknown modality {other:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("expected BVEM magic, found {0:?}")]
    BadMagic([u8; 4]),
    #[error("BVEM version {0} is not supported")]
    VersionUnsupported(u16),
    #[error("embedding for {sample_id} has {found} values, expected {expected}")]
    DimMismatch { sample_id: String, expected: usize, found: usize },
    #[error("duplicate record ({0}, {1}, instance {2})")]
    DuplicateKey(String, Modality, u8),
    #[error("file ends inside {0}")]
    Truncated(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("missing embeddings: {}", format_missing(.0))]
    MissingModality(Vec<(String, Modality)>),
    #[error("no class probabilities for {0} ({1})")]
    NoProbs(String, Modality),
}

fn format_missing(m: &[(String, Modality)]) -> String {
    let shown: Vec<String> = m.iter().take(10).map(|(s, md)| format!("{s}/{md}")).collect();
    let more = if m.len() > 10 { format!(" and {} more", m.len() - 10) } else { String::new() };
    format!("{}{more}", shown.join(", "))
}

impl StoreError {
    pub fn name(&self) -> &'static str {
        match self {
            StoreError::Io(_) => "IoError",
            StoreError::BadMagic(_) => "BadMagic",
            StoreError::VersionUnsupported(_) => "VersionUnsupported",
            StoreError::DimMismatch { .. } => "DimMismatch",
            StoreError::DuplicateKey(..) => "DuplicateKey",
            StoreError::Truncated(_) => "Truncated",
            StoreError::Corrupt(_) => "Corrupt",
            StoreError::MissingModality(_) => "MissingModality",
            StoreError::NoProbs(..) => "NoProbs",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub sample_id: String,
    pub modality: Modality,
    /// Index of the backbone training run.
    pub instance: u8,
    pub embedding: Vec<f32>,
    pub probs: Option<ClassProbs>,
}

pub type RecordKey = (String, Modality, u8);

impl EmbeddingRecord {
    pub fn key(&self) -> RecordKey {
        (self.sample_id.clone(), self.modality, self.instance)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingStore {
    records: BTreeMap<RecordKey, EmbeddingRecord>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = EmbeddingRecord>) -> Result<Self, StoreError> {
        let mut s = Self::new();
        for r in records {
            s.insert(r)?;
        }
        Ok(s)
    }

    pub fn insert(&mut self, r: EmbeddingRecord) -> Result<(), StoreError> {
        check_dim(&r)?;
        let key = r.key();
        if self.records.contains_key(&key) {
            return Err(StoreError::DuplicateKey(key.0, key.1, key.2));
        }
        self.records.insert(key, r);
        Ok(())
    }

    pub fn get(&self, sample_id: &str, modality: Modality, instance: u8) -> Option<&EmbeddingRecord> {
        self.records.get(&(sample_id.to_string(), modality, instance))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &EmbeddingRecord> {
        self.records.values()
    }

    /// Sorted distinct instance indices.
    pub fn instances(&self) -> Vec<u8> {
        let mut v: Vec<u8> = self.records.keys().map(|k| k.2).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// All instances of one sample and modality.
    pub fn instances_of<'a>(&'a self, sample_id: &'a str, modality: Modality) -> impl Iterator<Item = &'a EmbeddingRecord> {
        let lo = (sample_id.to_string(), modality, 0u8);
        let hi = (sample_id.to_string(), modality, u8::MAX);
        self.records.range(lo..=hi).map(|(_, r)| r)
    }

    /// Merges another store, rejecting overlapping keys.
    pub fn extend(&mut self, other: EmbeddingStore) -> Result<(), StoreError> {
        for r in other.records.into_values() {
            self.insert(r)?;
        }
        Ok(())
    }
}

fn check_dim(r: &EmbeddingRecord) -> Result<(), StoreError> {
    if r.embedding.len() != EMBED_DIM {
        return Err(StoreError::DimMismatch { sample_id: r.sample_id.clone(), expected: EMBED_DIM, found: r.embedding.len() });
    }
    Ok(())
}

pub fn encode_store<'a>(records: impl IntoIterator<Item = &'a EmbeddingRecord>) -> Result<Vec<u8>, StoreError> {
    let records: Vec<&EmbeddingRecord> = records.into_iter().collect();
    let mut buf = Vec::with_capacity(18 + records.len() * (EMBED_DIM * 4 + 32));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(EMBED_DIM as u32).to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        check_dim(r)?;
        let id = r.sample_id.as_bytes();
        let id_len = u16::try_from(id.len()).map_err(|_| StoreError::Corrupt(format!("sample id of {} bytes", id.len())))?;
        buf.extend_from_slice(&id_len.to_le_bytes());
        buf.extend_from_slice(id);
        buf.extend_from_slice(&[r.modality.code(), r.instance, u8::from(r.probs.is_some())]);
        if let Some(p) = r.probs {
            buf.extend_from_slice(&(p.p_low() as f32).to_le_bytes());
            buf.extend_from_slice(&(p.p_high() as f32).to_le_bytes());
        }
        for v in &r.embedding {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_store<'a>(records: impl IntoIterator<Item = &'a EmbeddingRecord>, path: &Path) -> Result<(), StoreError> {
    let buf = encode_store(records)?;
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], StoreError> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| StoreError::Truncated(what.to_string()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, StoreError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, StoreError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32, StoreError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_store(buf: &[u8]) -> Result<EmbeddingStore, StoreError> {
    let mut rd = Reader { buf, pos: 0 };
    let magic: [u8; 4] = rd.take(4, "header")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    let version = rd.u16("header")?;
    if version != VERSION {
        return Err(StoreError::VersionUnsupported(version));
    }
    let dim = u32::from_le_bytes(rd.take(4, "header")?.try_into().unwrap()) as usize;
    if dim != EMBED_DIM {
        return Err(StoreError::DimMismatch { sample_id: "<header>".into(), expected: EMBED_DIM, found: dim });
    }
    let count = u64::from_le_bytes(rd.take(8, "header")?.try_into().unwrap());
    let mut store = EmbeddingStore::new();
    for i in 0..count {
        let what = format!("record {i}");
        let id_len = usize::from(rd.u16(&what)?);
        let sample_id = std::str::from_utf8(rd.take(id_len, &what)?)
            .map_err(|_| StoreError::Corrupt(format!("{what}: sample id is not UTF-8")))?
            .to_string();
        let code = rd.u8(&what)?;
        let modality = Modality::from_code(code).ok_or_else(|| StoreError::Corrupt(format!("{what}: modality {code}")))?;
        let instance = rd.u8(&what)?;
        let probs = match rd.u8(&what)? {
            0 => None,
            1 => {
                let (lo, hi) = (rd.f32(&what)?, rd.f32(&what)?);
                Some(ClassProbs::new(f64::from(lo), f64::from(hi)).map_err(|e| StoreError::Corrupt(format!("{what}: {e}")))?)
            }
            other => return Err(StoreError::Corrupt(format!("{what}: has_probs = {other}"))),
        };
        let raw = rd.take(dim * 4, &what)?;
        let embedding = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        store.insert(EmbeddingRecord { sample_id, modality, instance, embedding, probs })?;
    }
    if rd.pos != buf.len() {
        return Err(StoreError::Corrupt(format!("{} trailing bytes", buf.len() - rd.pos)));
    }
    Ok(store)
}

pub fn read_store(path: &Path) -> Result<EmbeddingStore, StoreError> {
    decode_store(&std::fs::read(path)?)
}

/// Tab-separated dump with one record per line.
pub fn write_tsv<W: Write>(store: &EmbeddingStore, mut w: W) -> io::Result<()> {
    write!(w, "sample_id\tmodality\tinstance\tp_low\tp_high")?;
    for i in 0..EMBED_DIM {
        write!(w, "\te{i}")?;
    }
    writeln!(w)?;
    for r in store.records() {
        write!(w, "{}\t{}\t{}", r.sample_id, r.modality, r.instance)?;
        match r.probs {
            Some(p) => write!(w, "\t{}\t{}", p.p_low() as f32, p.p_high() as f32)?,
            None => write!(w, "\t\t")?,
        }
        for v in &r.embedding {
            write!(w, "\t{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()
}

/// One sample's concatenated 2D and 3D features.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinedSample {
    pub sample_id: String,
    pub features: Vec<f32>,
    pub label: BioLabel,
    pub split: Split,
}

/// Concatenates 2D then 3D embeddings of one instance for every manifest sample.
pub fn join_modalities(store: &EmbeddingStore, manifest: &Manifest, instance: u8) -> Result<Vec<JoinedSample>, StoreError> {
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(manifest.len());
    for s in &manifest.samples {
        let parts: Vec<Option<&EmbeddingRecord>> = Modality::ALL.iter().map(|&m| store.get(&s.id, m, instance)).collect();
        for (m, p) in Modality::ALL.iter().zip(&parts) {
            if p.is_none() {
                missing.push((s.id.clone(), *m));
            }
        }
        if let [Some(a), Some(b)] = parts[..] {
            let mut features = Vec::with_capacity(JOINT_DIM);
            features.extend_from_slice(&a.embedding);
            features.extend_from_slice(&b.embedding);
            out.push(JoinedSample { sample_id: s.id.clone(), features, label: s.label, split: s.split });
        }
    }
    if !missing.is_empty() {
        return Err(StoreError::MissingModality(missing));
    }
    Ok(out)
}

/// Mean class probabilities over all instances that carry them.
pub fn average_instances(store: &EmbeddingStore, sample_id: &str, modality: Modality) -> Result<ClassProbs, StoreError> {
    let (mut lo, mut hi, mut n) = (0.0f64, 0.0f64, 0usize);
    for p in store.instances_of(sample_id, modality).filter_map(|r| r.probs) {
        lo += p.p_low();
        hi += p.p_high();
        n += 1;
    }
    if n == 0 {
        return Err(StoreError::NoProbs(sample_id.to_string(), modality));
    }
    let (lo, hi) = (lo / n as f64, hi / n as f64);
    let sum = lo + hi;
    ClassProbs::new(lo / sum, hi / sum).map_err(|e| StoreError::Corrupt(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, m: Modality, inst: u8, fill: f32, probs: Option<(f32, f32)>) -> EmbeddingRecord {
        EmbeddingRecord {
            sample_id: id.into(),
            modality: m,
            instance: inst,
            embedding: vec![fill; EMBED_DIM],
            probs: probs.map(|(a, b)| ClassProbs::new(f64::from(a), f64::from(b)).unwrap()),
        }
    }

    #[test]
    fn empty_store_file() {
        let buf = encode_store(&[]).unwrap();
        assert_eq!(buf.len(), 18);
        assert_eq!(&buf[..4], b"BVEM");
        assert_eq!(decode_store(&buf).unwrap().len(), 0);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut a = rec("a", Modality::Ortho2D, 0, 0.1, Some((0.6, 0.4)));
        a.embedding[3] = f32::MIN_POSITIVE;
        a.embedding[7] = -0.0;
        let records = vec![a, rec("a", Modality::Als3D, 0, 2.0, None), rec("ü", Modality::Als3D, 4, -1.5, Some((0.25, 0.75)))];
        let store = EmbeddingStore::from_records(records.clone()).unwrap();
        let back = decode_store(&encode_store(&records).unwrap()).unwrap();
        assert_eq!(back, store);
        let bits = |s: &EmbeddingStore| s.records().flat_map(|r| r.embedding.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&store));
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut short = rec("x", Modality::Ortho2D, 0, 1.0, None);
        short.embedding.pop();
        assert!(matches!(encode_store([&short]), Err(StoreError::DimMismatch { found: 511, .. })));

        let r = rec("x", Modality::Ortho2D, 0, 1.0, None);
        let buf = encode_store([&r, &r]).unwrap();
        assert!(matches!(decode_store(&buf), Err(StoreError::DuplicateKey(..))));

        let buf = encode_store([&r]).unwrap();
        assert!(matches!(decode_store(&buf[..buf.len() - 1]), Err(StoreError::Truncated(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(decode_store(&bad), Err(StoreError::BadMagic(_))));
        let mut v2 = buf.clone();
        v2[4] = 2;
        assert!(matches!(decode_store(&v2), Err(StoreError::VersionUnsupported(2))));
    }

    #[test]
    fn averages() {
        let s = EmbeddingStore::from_records([
            rec("a", Modality::Ortho2D, 0, 0.0, Some((1.0, 0.0))),
            rec("a", Modality::Ortho2D, 1, 0.0, Some((0.0, 1.0))),
            rec("a", Modality::Ortho2D, 2, 0.0, None),
            rec("b", Modality::Ortho2D, 0, 0.0, Some((0.6, 0.4))),
        ])
        .unwrap();
        assert_eq!(average_instances(&s, "a", Modality::Ortho2D).unwrap().p_low(), 0.5);
        let b = average_instances(&s, "b", Modality::Ortho2D).unwrap();
        assert!((b.p_low() - 0.6).abs() < 1e-6);
        assert!(matches!(average_instances(&s, "a", Modality::Als3D), Err(StoreError::NoProbs(..))));
    }

    #[test]
    fn tsv_columns() {
        let s = EmbeddingStore::from_records([rec("a", Modality::Als3D, 1, 0.5, None)]).unwrap();
        let mut out = Vec::new();
        write_tsv(&s, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0].split('\t').count(), 5 + EMBED_DIM);
        assert_eq!(lines[1].split('\t').count(), 5 + EMBED_DIM);
        assert!(lines[1].starts_with("a\t3d\t1\t\t\t0.5"));
    }
}
