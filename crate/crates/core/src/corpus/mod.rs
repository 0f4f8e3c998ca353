//! Stay-level datasets: JSON Lines I/O, deterministic splits and synthetic
//! generation.

mod synth;

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{parse_code, IcdCode, TaxonomyError};

pub use synth::{generate_synthetic, KeywordOracle, SynthCorpus, SynthManifest, SynthSpec};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate stay id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: {source}")]
    MalformedCode { line: usize, source: TaxonomyError },
    #[error("line {line}: stay has no documents")]
    EmptyDocumentList { line: usize },
    #[error("line {line}: stay has no codes")]
    EmptyCodeSet { line: usize },
    #[error("split ratios must sum to 1, got {0}")]
    RatioSum(f64),
    #[error("split ratios must all be positive, got {0:?}")]
    InvalidRatio((f64, f64, f64)),
    #[error("split of {n} stays with ratios {ratios:?} leaves a partition empty")]
    MinPartition { n: usize, ratios: (f64, f64, f64) },
    #[error("synthetic spec violates an invariant: {0}")]
    SpecInvariant(String),
    #[error("corpus is empty")]
    EmptyCorpus,
}

/// One hospital stay: the department notes and the gold code set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stay {
    pub id: String,
    pub documents: Vec<String>,
    pub codes: BTreeSet<IcdCode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub stays: usize,
    pub documents: usize,
    pub tokens: usize,
    pub mean_seq_len: f64,
    pub distinct_codes: usize,
    pub total_codes: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StayRecord {
    id: String,
    documents: Vec<String>,
    codes: Vec<String>,
}

/// Validated collection of stays with unique ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    stays: Vec<Stay>,
}

impl Corpus {
    /// Validates ids, documents and codes. Errors carry 1-based positions.
    pub fn new(stays: Vec<Stay>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(stays.len());
        for (i, s) in stays.iter().enumerate() {
            let line = i + 1;
            if s.documents.is_empty() {
                return Err(CorpusError::EmptyDocumentList { line });
            }
            if s.codes.is_empty() {
                return Err(CorpusError::EmptyCodeSet { line });
            }
            if !seen.insert(s.id.as_str()) {
                return Err(CorpusError::DuplicateId { line, id: s.id.clone() });
            }
        }
        Ok(Self { stays })
    }

    pub fn stays(&self) -> &[Stay] {
        &self.stays
    }

    pub fn len(&self) -> usize {
        self.stays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stays.is_empty()
    }

    pub fn stats(&self) -> CorpusStats {
        let documents = self.stays.iter().map(|s| s.documents.len()).sum();
        let tokens: usize = self
            .stays
            .iter()
            .flat_map(|s| &s.documents)
            .map(|d| d.split_whitespace().count())
            .sum();
        let distinct: BTreeSet<&IcdCode> = self.stays.iter().flat_map(|s| &s.codes).collect();
        CorpusStats {
            stays: self.stays.len(),
            documents,
            tokens,
            mean_seq_len: if self.stays.is_empty() { 0.0 } else { tokens as f64 / self.stays.len() as f64 },
            distinct_codes: distinct.len(),
            total_codes: self.stays.iter().map(|s| s.codes.len()).sum(),
        }
    }

    /// Parses one JSON Lines record per non-blank line.
    pub fn from_reader(reader: impl BufRead) -> Result<Self, CorpusError> {
        let mut stays = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: StayRecord = serde_json::from_str(&line)
                .map_err(|e| CorpusError::Parse { line: line_no, message: e.to_string() })?;
            if rec.documents.is_empty() {
                return Err(CorpusError::EmptyDocumentList { line: line_no });
            }
            if rec.codes.is_empty() {
                return Err(CorpusError::EmptyCodeSet { line: line_no });
            }
            let codes = rec
                .codes
                .iter()
                .map(|c| parse_code(c))
                .collect::<Result<BTreeSet<_>, _>>()
                .map_err(|source| CorpusError::MalformedCode { line: line_no, source })?;
            if !seen.insert(rec.id.clone()) {
                return Err(CorpusError::DuplicateId { line: line_no, id: rec.id });
            }
            stays.push(Stay { id: rec.id, documents: rec.documents, codes });
        }
        Ok(Self { stays })
    }

    pub fn to_writer(&self, mut w: impl Write) -> Result<(), CorpusError> {
        for s in &self.stays {
            let rec = StayRecord {
                id: s.id.clone(),
                documents: s.documents.clone(),
                codes: s.codes.iter().map(|c| c.as_str().to_string()).collect(),
            };
            serde_json::to_writer(&mut w, &rec).map_err(io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.to_writer(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        self.to_writer(&mut f)?;
        f.flush()?;
        Ok(())
    }

    fn subset(&self, idx: &[usize]) -> Corpus {
        Corpus { stays: idx.iter().map(|&i| self.stays[i].clone()).collect() }
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    Corpus::from_reader(BufReader::new(fs::File::open(path)?))
}

/// Shuffles with `seed` and cuts into (train, val, test). Validation and test
/// sizes are `floor(n * ratio)`; the remainder goes to train.
pub fn split_corpus(corpus: &Corpus, ratios: (f64, f64, f64), seed: u64) -> Result<(Corpus, Corpus, Corpus), CorpusError> {
    let (rt, rv, rs) = ratios;
    if !(rt > 0.0 && rv > 0.0 && rs > 0.0) {
        return Err(CorpusError::InvalidRatio(ratios));
    }
    let sum = rt + rv + rs;
    if (sum - 1.0).abs() > 1e-6 {
        return Err(CorpusError::RatioSum(sum));
    }
    let n = corpus.len();
    // tolerance absorbs representation error such as 0.29 * 100 = 28.999...
    let n_val = (n as f64 * rv + 1e-9).floor() as usize;
    let n_test = (n as f64 * rs + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;
    if n_val == 0 || n_test == 0 || n_train == 0 {
        return Err(CorpusError::MinPartition { n, ratios });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((
        corpus.subset(&order[..n_train]),
        corpus.subset(&order[n_train..n_train + n_val]),
        corpus.subset(&order[n_train + n_val..]),
    ))
}

#[cfg(test)]
mod tests;
