use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, Stay};
use crate::taxonomy::{parse_code, IcdCode};

/// Sibling codes generated per 3-character family.
const SIBLINGS_PER_FAMILY: usize = 4;
const MAX_CODES: usize = 26 * 100 * SIBLINGS_PER_FAMILY;

/// Shape parameters of a synthetic corpus.
///
/// Each code owns `keywords_per_code` tokens that appear nowhere else; every
/// stay contains all keywords of its gold codes, scattered uniformly, and is
/// padded with tokens from a disjoint noise vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_stays: usize,
    pub n_codes: usize,
    /// Mean stay length in tokens.
    pub mean_len: usize,
    /// Standard deviation of the stay length as a fraction of `mean_len`.
    pub len_dispersion: f64,
    /// Zipf exponent of the code frequency distribution.
    pub zipf_s: f64,
    pub keywords_per_code: usize,
    pub noise_vocab: usize,
    /// Inclusive range for the number of gold codes per stay.
    pub codes_per_stay: (usize, usize),
    /// Inclusive range for the number of documents a stay is split into.
    pub docs_per_stay: (usize, usize),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_stays: 1000,
            n_codes: 50,
            mean_len: 600,
            len_dispersion: 0.25,
            zipf_s: 1.2,
            keywords_per_code: 3,
            noise_vocab: 2000,
            codes_per_stay: (1, 4),
            docs_per_stay: (1, 3),
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |m: String| Err(CorpusError::SpecInvariant(m));
        for (name, v) in [
            ("n_stays", self.n_stays),
            ("n_codes", self.n_codes),
            ("mean_len", self.mean_len),
            ("keywords_per_code", self.keywords_per_code),
            ("noise_vocab", self.noise_vocab),
            ("codes_per_stay.min", self.codes_per_stay.0),
            ("docs_per_stay.min", self.docs_per_stay.0),
        ] {
            if v == 0 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        if !(self.len_dispersion > 0.0 && self.len_dispersion.is_finite()) {
            return fail(format!("len_dispersion must be positive, got {}", self.len_dispersion));
        }
        if !(self.zipf_s > 0.0 && self.zipf_s.is_finite()) {
            return fail(format!("zipf_s must be positive, got {}", self.zipf_s));
        }
        if self.codes_per_stay.0 > self.codes_per_stay.1 {
            return fail(format!("codes_per_stay range {:?} is empty", self.codes_per_stay));
        }
        if self.docs_per_stay.0 > self.docs_per_stay.1 {
            return fail(format!("docs_per_stay range {:?} is empty", self.docs_per_stay));
        }
        if self.codes_per_stay.1 > self.n_codes {
            return fail(format!(
                "codes_per_stay.max ({}) exceeds n_codes ({})",
                self.codes_per_stay.1, self.n_codes
            ));
        }
        if self.n_codes > MAX_CODES {
            return fail(format!("n_codes must be <= {MAX_CODES}"));
        }
        let needed = self.codes_per_stay.1 * self.keywords_per_code;
        if self.mean_len < needed {
            return fail(format!(
                "mean_len ({}) must be >= codes_per_stay.max x keywords_per_code ({needed})",
                self.mean_len
            ));
        }
        Ok(())
    }
}

/// Code `i` of the synthetic inventory. Groups of four consecutive codes
/// share a family, so family rollup shrinks the label count.
fn synthetic_code(i: usize) -> IcdCode {
    let family = i / SIBLINGS_PER_FAMILY;
    let letter = (b'A' + (family / 100 % 26) as u8) as char;
    parse_code(&format!("{letter}{:02}{}", family % 100, i % SIBLINGS_PER_FAMILY)).expect("synthetic code is valid")
}

fn keyword(code: usize, j: usize) -> String {
    format!("k{code}x{j}")
}

fn noise(i: usize) -> String {
    format!("w{i}")
}

/// Sidecar record written next to a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub format: String,
    pub spec: SynthSpec,
    pub keywords: BTreeMap<IcdCode, Vec<String>>,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub spec: SynthSpec,
    /// Code inventory in frequency-rank order, with each code's keywords.
    pub keywords: BTreeMap<IcdCode, Vec<String>>,
}

impl SynthCorpus {
    pub fn manifest(&self) -> SynthManifest {
        SynthManifest { format: "icdlaat-synth v1".into(), spec: self.spec.clone(), keywords: self.keywords.clone() }
    }

    pub fn oracle(&self) -> KeywordOracle {
        KeywordOracle::new(&self.keywords)
    }
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthCorpus, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let codes: Vec<IcdCode> = (0..spec.n_codes).map(synthetic_code).collect();
    let keywords: Vec<Vec<String>> = (0..spec.n_codes)
        .map(|c| (0..spec.keywords_per_code).map(|j| keyword(c, j)).collect())
        .collect();
    let noise_tokens: Vec<String> = (0..spec.noise_vocab).map(noise).collect();

    let zipf = Zipf::new(spec.n_codes as f64, spec.zipf_s).map_err(|e| CorpusError::SpecInvariant(e.to_string()))?;
    let mean = spec.mean_len as f64;
    let length = Normal::new(mean, spec.len_dispersion * mean).map_err(|e| CorpusError::SpecInvariant(e.to_string()))?;

    let mut stays = Vec::with_capacity(spec.n_stays);
    for s in 0..spec.n_stays {
        let n_gold = rng.random_range(spec.codes_per_stay.0..=spec.codes_per_stay.1);
        let mut gold: BTreeSet<usize> = BTreeSet::new();
        while gold.len() < n_gold {
            let rank = zipf.sample(&mut rng) as usize;
            gold.insert(rank.clamp(1, spec.n_codes) - 1);
        }

        let n_keywords = n_gold * spec.keywords_per_code;
        let len = (length.sample(&mut rng).round().max(0.0) as usize).max(n_keywords).max(1);
        let mut tokens: Vec<&str> = (0..len).map(|_| noise_tokens[rng.random_range(0..spec.noise_vocab)].as_str()).collect();
        let positions = index::sample(&mut rng, len, n_keywords).into_vec();
        let planted = gold.iter().flat_map(|&c| keywords[c].iter());
        for (pos, kw) in positions.into_iter().zip(planted) {
            tokens[pos] = kw;
        }

        let n_docs = rng.random_range(spec.docs_per_stay.0..=spec.docs_per_stay.1).min(len);
        let mut cuts: Vec<usize> = if n_docs > 1 {
            index::sample(&mut rng, len - 1, n_docs - 1).into_iter().map(|c| c + 1).collect()
        } else {
            Vec::new()
        };
        cuts.sort_unstable();
        cuts.push(len);
        let mut documents = Vec::with_capacity(n_docs);
        let mut start = 0;
        for end in cuts {
            documents.push(tokens[start..end].join(" "));
            start = end;
        }

        stays.push(Stay {
            id: format!("stay{s:06}"),
            documents,
            codes: gold.iter().map(|&c| codes[c].clone()).collect(),
        });
    }

    Ok(SynthCorpus {
        corpus: Corpus::new(stays)?,
        spec: spec.clone(),
        keywords: codes.into_iter().zip(keywords).collect(),
    })
}

/// Rule-based reference classifier: predicts a code iff every one of its
/// keywords occurs in the stay.
#[derive(Clone, Debug)]
pub struct KeywordOracle {
    keywords: Vec<(IcdCode, Vec<String>)>,
    by_token: HashMap<String, Vec<usize>>,
}

impl KeywordOracle {
    pub fn new(keywords: &BTreeMap<IcdCode, Vec<String>>) -> Self {
        let keywords: Vec<(IcdCode, Vec<String>)> = keywords.iter().map(|(c, k)| (c.clone(), k.clone())).collect();
        let mut by_token: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, (_, kws)) in keywords.iter().enumerate() {
            for k in kws {
                by_token.entry(k.to_lowercase()).or_default().push(i);
            }
        }
        Self { keywords, by_token }
    }

    pub fn predict(&self, stay: &Stay) -> BTreeSet<IcdCode> {
        let present: HashSet<String> = stay
            .documents
            .iter()
            .flat_map(|d| d.split_whitespace())
            .map(str::to_lowercase)
            .filter(|t| self.by_token.contains_key(t))
            .collect();
        let candidates: BTreeSet<usize> = present.iter().flat_map(|t| self.by_token[t].iter().copied()).collect();
        candidates
            .into_iter()
            .filter(|&i| self.keywords[i].1.iter().all(|k| present.contains(&k.to_lowercase())))
            .map(|i| self.keywords[i].0.clone())
            .collect()
    }
}
