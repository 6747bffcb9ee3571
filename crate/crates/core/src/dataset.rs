//! Labeled I/Q corpora: the SIGDS binary format, SNR sieving and the
//! known/unknown split.
//!
//! SIGDS layout, all integers little-endian:
//!
//! ```text
//! "SIG1"  u16 version (1)
//! u16 num_classes   u32 frame_count   u16 channels (2)   u16 frame_len
//! num_classes × (u16 byte length, UTF-8 class name)
//! frame_count × (u16 class index, i16 SNR in dB, channels·frame_len f32)
//! ```
//!
//! Frame values are stored row by row: the whole I row, then the Q row.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::nn::{SeedStream, Tensor};

pub const SIGDS_MAGIC: [u8; 4] = *b"SIG1";
pub const SIGDS_VERSION: u16 = 1;
pub const CHANNELS: usize = 2;
pub const FRAME_LEN: usize = 128;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("corrupt dataset: {0}")]
    Format(String),
    #[error("invalid corpus: {0}")]
    Invalid(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("class {0:?} is present in the corpus but assigned to neither the known nor the unknown set")]
    Unassigned(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub class: u16,
    pub snr_db: i16,
    /// Shape `[2, frame_len]`.
    pub frame: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub class_names: Vec<String>,
    pub frame_len: usize,
    pub records: Vec<Record>,
}

impl Corpus {
    pub fn new(class_names: Vec<String>, frame_len: usize) -> Self {
        Self {
            class_names,
            frame_len,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.class as usize).collect()
    }

    pub fn frames(&self) -> Vec<&Tensor<f32>> {
        self.records.iter().map(|r| &r.frame).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for r in &self.records {
            if let Some(c) = counts.get_mut(r.class as usize) {
                *c += 1;
            }
        }
        counts
    }

    /// Header-consistency check: class table, frame shapes and label range.
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.class_names.len() > u16::MAX as usize {
            return Err(DatasetError::Invalid("too many classes".into()));
        }
        if self.frame_len == 0 || self.frame_len > u16::MAX as usize {
            return Err(DatasetError::Invalid(format!("frame length {}", self.frame_len)));
        }
        if self.records.len() > u32::MAX as usize {
            return Err(DatasetError::Invalid("too many records".into()));
        }
        let mut seen = HashSet::new();
        for name in &self.class_names {
            if name.is_empty() || name.len() > u16::MAX as usize || !seen.insert(name) {
                return Err(DatasetError::Invalid(format!("bad or duplicate class name {name:?}")));
            }
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.class as usize >= self.class_names.len() {
                return Err(DatasetError::Invalid(format!("record {i} has class index {}", r.class)));
            }
            if r.frame.shape() != [CHANNELS, self.frame_len] {
                return Err(DatasetError::Invalid(format!(
                    "record {i} has shape {:?}, expected [2, {}]",
                    r.frame.shape(),
                    self.frame_len
                )));
            }
        }
        Ok(())
    }

    /// Size in bytes of the encoded header.
    pub fn header_bytes(&self) -> usize {
        4 + 2 + 2 + 4 + 2 + 2 + self.class_names.iter().map(|n| 2 + n.len()).sum::<usize>()
    }

    pub fn record_bytes(&self) -> usize {
        2 + 2 + 4 * CHANNELS * self.frame_len
    }
}

pub fn write_sigds(corpus: &Corpus, out: &mut impl Write) -> Result<(), DatasetError> {
    corpus.validate()?;
    out.write_all(&SIGDS_MAGIC)?;
    out.write_all(&SIGDS_VERSION.to_le_bytes())?;
    out.write_all(&(corpus.class_names.len() as u16).to_le_bytes())?;
    out.write_all(&(corpus.records.len() as u32).to_le_bytes())?;
    out.write_all(&(CHANNELS as u16).to_le_bytes())?;
    out.write_all(&(corpus.frame_len as u16).to_le_bytes())?;
    for name in &corpus.class_names {
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
    }
    let mut buf = Vec::with_capacity(corpus.record_bytes());
    for r in &corpus.records {
        buf.clear();
        buf.extend_from_slice(&r.class.to_le_bytes());
        buf.extend_from_slice(&r.snr_db.to_le_bytes());
        for v in r.frame.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<(), DatasetError> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => DatasetError::Format(format!("truncated while reading {what}")),
            _ => DatasetError::Io(e),
        })
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], DatasetError> {
        let mut b = [0u8; N];
        self.fill(&mut b, what)?;
        Ok(b)
    }

    fn u16(&mut self, what: &str) -> Result<u16, DatasetError> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }
}

pub fn read_sigds(input: &mut impl Read) -> Result<Corpus, DatasetError> {
    let mut r = Reader { inner: input };
    let magic: [u8; 4] = r.array("magic")?;
    if magic != SIGDS_MAGIC {
        return Err(DatasetError::Format(format!("bad magic {magic:?}, expected \"SIG1\"")));
    }
    let version = r.u16("version")?;
    if version != SIGDS_VERSION {
        return Err(DatasetError::Format(format!(
            "unsupported version {version}, expected {SIGDS_VERSION}"
        )));
    }
    let classes = r.u16("class count")? as usize;
    let count = u32::from_le_bytes(r.array("frame count")?) as usize;
    let channels = r.u16("channel count")? as usize;
    if channels != CHANNELS {
        return Err(DatasetError::Format(format!("{channels} channels, expected 2")));
    }
    let frame_len = r.u16("frame length")? as usize;
    if frame_len == 0 {
        return Err(DatasetError::Format("zero frame length".into()));
    }
    let mut class_names = Vec::with_capacity(classes);
    for _ in 0..classes {
        let n = r.u16("class name length")? as usize;
        let mut b = vec![0u8; n];
        r.fill(&mut b, "class name")?;
        class_names.push(String::from_utf8(b).map_err(|_| DatasetError::Format("class name is not UTF-8".into()))?);
    }
    let values = CHANNELS * frame_len;
    let mut buf = vec![0u8; 4 + 4 * values];
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        r.fill(&mut buf, &format!("record {i} of {count}"))?;
        let class = u16::from_le_bytes([buf[0], buf[1]]);
        if class as usize >= classes {
            return Err(DatasetError::Format(format!("record {i} has class index {class}")));
        }
        let snr_db = i16::from_le_bytes([buf[2], buf[3]]);
        let data = buf[4..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let frame = Tensor::from_vec(&[CHANNELS, frame_len], data).map_err(|e| DatasetError::Format(e.to_string()))?;
        records.push(Record { class, snr_db, frame });
    }
    let mut extra = [0u8; 1];
    if r.inner.read(&mut extra)? != 0 {
        return Err(DatasetError::Format(format!(
            "header declares {count} records but more data follows"
        )));
    }
    let corpus = Corpus {
        class_names,
        frame_len,
        records,
    };
    corpus.validate().map_err(|e| DatasetError::Format(e.to_string()))?;
    Ok(corpus)
}

pub fn save_sigds(corpus: &Corpus, path: &Path) -> Result<(), DatasetError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_sigds(corpus, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_sigds(path: &Path) -> Result<Corpus, DatasetError> {
    read_sigds(&mut BufReader::new(File::open(path)?))
}

/// Keeps records with `snr_db >= min_snr`, in order. `None` keeps everything.
pub fn sieve_by_snr(corpus: &Corpus, min_snr: Option<i16>) -> Corpus {
    let records: Vec<Record> = match min_snr {
        None => corpus.records.clone(),
        Some(min) => corpus.records.iter().filter(|r| r.snr_db >= min).cloned().collect(),
    };
    if records.is_empty() && !corpus.records.is_empty() {
        log::warn!("SNR sieve at {min_snr:?} dB removed every record");
    }
    Corpus {
        class_names: corpus.class_names.clone(),
        frame_len: corpus.frame_len,
        records,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub known: Vec<String>,
    pub unknown: Vec<String>,
    pub seed: u64,
}

impl SplitSpec {
    /// 70/15/15 with every corpus class not in `unknown` treated as known.
    pub fn withholding(corpus: &Corpus, unknown: &[String], seed: u64) -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
            known: corpus
                .class_names
                .iter()
                .filter(|n| !unknown.contains(n))
                .cloned()
                .collect(),
            unknown: unknown.to_vec(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DatasetError::Split(format!("fractions must be non-negative: {f:?}")));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DatasetError::Split(format!("fractions must sum to 1: {f:?}")));
        }
        if self.known.is_empty() {
            return Err(DatasetError::Split("no known classes".into()));
        }
        let mut seen = HashSet::new();
        for name in self.known.iter().chain(&self.unknown) {
            if !seen.insert(name) {
                return Err(DatasetError::Split(format!("class {name:?} listed twice")));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.known.iter().chain(&self.unknown).cloned().collect()
    }
}

/// Record indices into the source corpus, each list in corpus order.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val_known: Vec<usize>,
    pub test_known: Vec<usize>,
    pub test_unknown: Vec<usize>,
}

fn portion(fraction: f64, m: usize) -> usize {
    // the epsilon absorbs products like 0.15 * 2000 = 299.99999999999997
    ((fraction * m as f64 + 1e-9).floor() as usize).min(m)
}

pub fn split_indices(corpus: &Corpus, spec: &SplitSpec) -> Result<SplitIndices, DatasetError> {
    spec.validate()?;
    let mut role = vec![None; corpus.class_names.len()];
    for (names, known) in [(&spec.known, true), (&spec.unknown, false)] {
        for name in names {
            let c = corpus
                .class_index(name)
                .ok_or_else(|| DatasetError::Split(format!("class {name:?} is not in the corpus")))?;
            role[c] = Some(known);
        }
    }
    let mut by_class = vec![Vec::new(); corpus.class_names.len()];
    for (i, r) in corpus.records.iter().enumerate() {
        by_class[r.class as usize].push(i);
    }
    let seeds = SeedStream::new(spec.seed);
    let mut out = SplitIndices::default();
    for (c, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let known = role[c].ok_or_else(|| DatasetError::Unassigned(corpus.class_names[c].clone()))?;
        members.shuffle(&mut seeds.rng(c as u64));
        let m = members.len();
        let test = portion(spec.test, m);
        if known {
            let val = portion(spec.val, m);
            out.test_known.extend_from_slice(&members[..test]);
            out.val_known.extend_from_slice(&members[test..test + val]);
            out.train.extend_from_slice(&members[test + val..]);
        } else {
            out.test_unknown.extend_from_slice(&members[..test]);
        }
    }
    for part in [
        &mut out.train,
        &mut out.val_known,
        &mut out.test_known,
        &mut out.test_unknown,
    ] {
        part.sort_unstable();
    }
    Ok(out)
}

/// Partitions of a corpus relabeled so that known classes take indices
/// `0..K` in `SplitSpec::known` order and unknown classes follow.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub known_classes: usize,
    pub train: Corpus,
    pub val_known: Corpus,
    pub test_known: Corpus,
    pub test_unknown: Corpus,
}

impl DatasetSplit {
    pub fn class_names(&self) -> &[String] {
        &self.train.class_names
    }
}

pub fn split_dataset(corpus: &Corpus, spec: &SplitSpec) -> Result<DatasetSplit, DatasetError> {
    let idx = split_indices(corpus, spec)?;
    let names = spec.class_names();
    let remap: Vec<Option<u16>> = corpus
        .class_names
        .iter()
        .map(|n| names.iter().position(|m| m == n).map(|p| p as u16))
        .collect();
    let part = |ids: &[usize]| Corpus {
        class_names: names.clone(),
        frame_len: corpus.frame_len,
        records: ids
            .iter()
            .map(|&i| {
                let r = &corpus.records[i];
                Record {
                    class: remap[r.class as usize].expect("assigned class"),
                    ..r.clone()
                }
            })
            .collect(),
    };
    Ok(DatasetSplit {
        known_classes: spec.known.len(),
        train: part(&idx.train),
        val_known: part(&idx.val_known),
        test_known: part(&idx.test_known),
        test_unknown: part(&idx.test_unknown),
    })
}
