//! Label vocabularies: raw codes, 3-character families, or the K most
//! frequent codes plus an `OTHER` label.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

use crate::corpus::Corpus;
use crate::taxonomy::IcdCode;

/// Label marking "at least one gold code outside the top K".
pub const OTHER: &str = "OTHER";

const MANIFEST_MAGIC: &str = "labelspace v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LabelSpaceError {
    #[error("cannot build a label space from an empty corpus")]
    EmptyCorpus,
    #[error("K must be at least 1")]
    InvalidK,
    #[error("label {0} is not in the label space")]
    UnknownLabel(String),
    #[error("gold code set is empty")]
    EmptyGold,
    #[error("bad label space manifest: {0}")]
    Manifest(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Raw,
    Family,
    /// The `k` most frequent labels plus `OTHER`. With `family` set,
    /// frequencies are counted after the family rollup.
    TopK { k: usize, family: bool },
}

impl Mode {
    pub fn top_k(k: usize) -> Self {
        Mode::TopK { k, family: false }
    }

    fn rolls_up(self) -> bool {
        matches!(self, Mode::Family | Mode::TopK { family: true, .. })
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Raw => f.write_str("raw"),
            Mode::Family => f.write_str("family"),
            Mode::TopK { k, family: false } => write!(f, "topk:{k}"),
            Mode::TopK { k, family: true } => write!(f, "topk-family:{k}"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = LabelSpaceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || LabelSpaceError::Manifest(format!("unknown mode {s:?}"));
        match s {
            "raw" => Ok(Mode::Raw),
            "family" => Ok(Mode::Family),
            _ => {
                let (family, k) = if let Some(k) = s.strip_prefix("topk-family:") {
                    (true, k)
                } else if let Some(k) = s.strip_prefix("topk:") {
                    (false, k)
                } else {
                    return Err(bad());
                };
                let k: usize = k.parse().map_err(|_| bad())?;
                if k == 0 {
                    return Err(LabelSpaceError::InvalidK);
                }
                Ok(Mode::TopK { k, family })
            }
        }
    }
}

/// Multi-hot target over a [`LabelSpace`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetVector {
    bits: Vec<bool>,
}

impl TargetVector {
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn ones(&self) -> BTreeSet<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn as_values<T: crate::autodiff::Scalar>(&self) -> Vec<T> {
        self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSpace {
    mode: Mode,
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSpace {
    /// Builds the vocabulary from per-stay gold code sets.
    ///
    /// Raw and Family spaces are sorted lexicographically. TopK keeps the `k`
    /// most frequent labels (ties broken lexicographically ascending) in
    /// descending frequency order, then appends `OTHER`.
    pub fn build<'a, I>(code_sets: I, mode: Mode) -> Result<Self, LabelSpaceError>
    where
        I: IntoIterator<Item = &'a BTreeSet<IcdCode>>,
    {
        if let Mode::TopK { k: 0, .. } = mode {
            return Err(LabelSpaceError::InvalidK);
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut stays = 0;
        for codes in code_sets {
            stays += 1;
            for label in rollup(codes, mode.rolls_up()) {
                *counts.entry(label).or_default() += 1;
            }
        }
        if stays == 0 || counts.is_empty() {
            return Err(LabelSpaceError::EmptyCorpus);
        }
        let labels: Vec<String> = match mode {
            Mode::Raw | Mode::Family => counts.into_keys().collect(),
            Mode::TopK { k, .. } => {
                let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
                // stable sort keeps the lexicographic order among equal counts
                ranked.sort_by_key(|r| std::cmp::Reverse(r.1));
                ranked.truncate(k);
                ranked.into_iter().map(|(l, _)| l).chain(std::iter::once(OTHER.to_string())).collect()
            }
        };
        Self::from_labels(mode, labels)
    }

    fn from_labels(mode: Mode, labels: Vec<String>) -> Result<Self, LabelSpaceError> {
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(LabelSpaceError::Manifest(format!("duplicate label {l}")));
            }
        }
        let space = Self { mode, labels, index };
        match mode {
            Mode::TopK { .. } => {
                if space.labels.last().map(String::as_str) != Some(OTHER) || space.labels.len() < 2 {
                    return Err(LabelSpaceError::Manifest("top-K space must end with OTHER".into()));
                }
            }
            _ => {
                if space.index.contains_key(OTHER) {
                    return Err(LabelSpaceError::Manifest("OTHER only exists in top-K spaces".into()));
                }
            }
        }
        Ok(space)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn has_other(&self) -> bool {
        matches!(self.mode, Mode::TopK { .. })
    }

    pub fn other_index(&self) -> Option<usize> {
        self.has_other().then(|| self.labels.len() - 1)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    /// Label indices of a gold set. Unknown codes are an error outside TopK
    /// mode, where they map to `OTHER`.
    pub fn label_indices(&self, gold: &BTreeSet<IcdCode>) -> Result<BTreeSet<usize>, LabelSpaceError> {
        let (found, unknown) = self.split_known(gold);
        match unknown.into_iter().next() {
            Some(u) => Err(LabelSpaceError::UnknownLabel(u)),
            None => Ok(found),
        }
    }

    /// Like [`label_indices`](Self::label_indices) but returns the number of
    /// gold labels that have no index instead of failing.
    pub fn label_indices_lenient(&self, gold: &BTreeSet<IcdCode>) -> (BTreeSet<usize>, usize) {
        let (found, unknown) = self.split_known(gold);
        (found, unknown.len())
    }

    fn split_known(&self, gold: &BTreeSet<IcdCode>) -> (BTreeSet<usize>, BTreeSet<String>) {
        let mut found = BTreeSet::new();
        let mut unknown = BTreeSet::new();
        for label in rollup(gold, self.mode.rolls_up()) {
            match (self.index.get(&label), self.other_index()) {
                (Some(&i), _) if Some(i) != self.other_index() => {
                    found.insert(i);
                }
                (_, Some(other)) => {
                    found.insert(other);
                }
                (_, None) => {
                    unknown.insert(label);
                }
            }
        }
        (found, unknown)
    }

    pub fn encode_targets(&self, gold: &BTreeSet<IcdCode>) -> Result<TargetVector, LabelSpaceError> {
        if gold.is_empty() {
            return Err(LabelSpaceError::EmptyGold);
        }
        let ones = self.label_indices(gold)?;
        Ok(self.target_from_indices(&ones))
    }

    pub fn target_from_indices(&self, ones: &BTreeSet<usize>) -> TargetVector {
        let mut bits = vec![false; self.labels.len()];
        for &i in ones {
            bits[i] = true;
        }
        TargetVector { bits }
    }

    /// Per-label stay counts over the given code sets (OTHER counts stays
    /// with at least one out-of-vocabulary code).
    pub fn label_counts<'a, I>(&self, code_sets: I) -> Vec<usize>
    where
        I: IntoIterator<Item = &'a BTreeSet<IcdCode>>,
    {
        let mut counts = vec![0; self.labels.len()];
        for codes in code_sets {
            for i in self.label_indices_lenient(codes).0 {
                counts[i] += 1;
            }
        }
        counts
    }

    /// Text manifest: `labelspace v1 <mode> <size>` then one label per line.
    pub fn to_manifest(&self) -> String {
        let mut out = format!("{MANIFEST_MAGIC} {} {}\n", self.mode, self.labels.len());
        for l in &self.labels {
            out.push_str(l);
            out.push('\n');
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self, LabelSpaceError> {
        let bad = |m: &str| LabelSpaceError::Manifest(m.to_string());
        let body = text.strip_suffix('\n').ok_or_else(|| bad("missing trailing newline"))?;
        let mut lines = body.split('\n');
        let header = lines.next().ok_or_else(|| bad("missing header"))?;
        let rest = header.strip_prefix(MANIFEST_MAGIC).and_then(|r| r.strip_prefix(' '));
        let rest = rest.ok_or_else(|| bad("header must start with 'labelspace v1'"))?;
        let (mode, size) = rest.split_once(' ').ok_or_else(|| bad("header needs mode and size"))?;
        let mode: Mode = mode.parse()?;
        let size: usize = size.parse().map_err(|_| bad("size is not an integer"))?;
        let labels: Vec<String> = lines.map(str::to_string).collect();
        if labels.len() != size {
            return Err(bad(&format!("header says {size} labels, found {}", labels.len())));
        }
        if labels.iter().any(|l| l.is_empty() || l.contains(char::is_whitespace)) {
            return Err(bad("labels must be non-empty and contain no whitespace"));
        }
        Self::from_labels(mode, labels)
    }
}

pub fn build_labelspace(corpus: &Corpus, mode: Mode) -> Result<LabelSpace, LabelSpaceError> {
    LabelSpace::build(corpus.stays().iter().map(|s| &s.codes), mode)
}

fn rollup(codes: &BTreeSet<IcdCode>, family: bool) -> BTreeSet<String> {
    codes
        .iter()
        .map(|c| if family { c.family().as_str().to_string() } else { c.as_str().to_string() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::parse_code;
    use proptest::prelude::*;

    fn set(codes: &[&str]) -> BTreeSet<IcdCode> {
        codes.iter().map(|c| parse_code(c).unwrap()).collect()
    }

    /// One stay per unit of count, each holding a single code.
    fn stays_from_counts(counts: &[(&str, usize)]) -> Vec<BTreeSet<IcdCode>> {
        counts.iter().flat_map(|&(c, n)| std::iter::repeat_n(set(&[c]), n)).collect()
    }

    #[test]
    fn top_k_by_frequency() {
        let stays = stays_from_counts(&[("A00", 5), ("B01", 3), ("C02", 1)]);
        let space = LabelSpace::build(&stays, Mode::top_k(2)).unwrap();
        assert_eq!(space.labels(), ["A00", "B01", "OTHER"]);
        assert!(space.has_other());
    }

    #[test]
    fn top_k_ties_break_lexicographically() {
        let stays = stays_from_counts(&[("B01", 2), ("A00", 2)]);
        let space = LabelSpace::build(&stays, Mode::top_k(1)).unwrap();
        assert_eq!(space.labels(), ["A00", "OTHER"]);
    }

    #[test]
    fn encode_sets_other_for_out_of_top_k() {
        let stays = stays_from_counts(&[("A00", 5), ("B01", 3), ("C02", 1)]);
        let space = LabelSpace::build(&stays, Mode::top_k(2)).unwrap();
        assert_eq!(space.encode_targets(&set(&["A00", "C02"])).unwrap().bits(), [true, false, true]);
        assert_eq!(space.encode_targets(&set(&["A00"])).unwrap().bits(), [true, false, false]);
    }

    #[test]
    fn family_rollup_merges_siblings() {
        let stays = vec![set(&["E119", "I10"]), set(&["E110"])];
        let space = LabelSpace::build(&stays, Mode::Family).unwrap();
        assert_eq!(space.labels(), ["E11", "I10"]);
        let t = space.encode_targets(&set(&["E119", "E110"])).unwrap();
        assert_eq!(t.count_ones(), 1);
        assert!(t.bits()[0]);
    }

    #[test]
    fn raw_mode_is_sorted_and_rejects_unknown() {
        let stays = vec![set(&["Z511", "A00"]), set(&["E119"])];
        let space = LabelSpace::build(&stays, Mode::Raw).unwrap();
        assert_eq!(space.labels(), ["A00", "E119", "Z511"]);
        assert!(!space.has_other());
        assert_eq!(
            space.encode_targets(&set(&["B20"])),
            Err(LabelSpaceError::UnknownLabel("B20".into()))
        );
        let (known, missing) = space.label_indices_lenient(&set(&["B20", "A00"]));
        assert_eq!((known.len(), missing), (1, 1));
    }

    #[test]
    fn empty_inputs() {
        let none: Vec<BTreeSet<IcdCode>> = vec![];
        assert_eq!(LabelSpace::build(&none, Mode::Raw), Err(LabelSpaceError::EmptyCorpus));
        let stays = vec![set(&["A00"])];
        assert_eq!(LabelSpace::build(&stays, Mode::top_k(0)), Err(LabelSpaceError::InvalidK));
        let space = LabelSpace::build(&stays, Mode::Raw).unwrap();
        assert_eq!(space.encode_targets(&BTreeSet::new()), Err(LabelSpaceError::EmptyGold));
    }

    #[test]
    fn k_larger_than_distinct_keeps_all_codes() {
        let stays = vec![set(&["A00", "B01"])];
        let space = LabelSpace::build(&stays, Mode::top_k(10)).unwrap();
        assert_eq!(space.labels(), ["A00", "B01", "OTHER"]);
    }

    #[test]
    fn topk_can_compose_with_family() {
        let stays = vec![set(&["E119"]), set(&["E110"]), set(&["A00"])];
        let space = LabelSpace::build(&stays, Mode::TopK { k: 1, family: true }).unwrap();
        assert_eq!(space.labels(), ["E11", "OTHER"]);
        assert_eq!(space.to_manifest().lines().next(), Some("labelspace v1 topk-family:1 2"));
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let stays = stays_from_counts(&[("A00", 5), ("B01", 3), ("C02", 1)]);
        for mode in [Mode::Raw, Mode::Family, Mode::top_k(2)] {
            let space = LabelSpace::build(&stays, mode).unwrap();
            let text = space.to_manifest();
            let back = LabelSpace::from_manifest(&text).unwrap();
            assert_eq!(back, space);
            assert_eq!(back.to_manifest(), text);
        }
        assert_eq!(
            LabelSpace::build(&stays, Mode::top_k(2)).unwrap().to_manifest(),
            "labelspace v1 topk:2 3\nA00\nB01\nOTHER\n"
        );
        for bad in ["labelspace v2 raw 1\nA00\n", "labelspace v1 raw 2\nA00\n", "labelspace v1 topk:1 2\nA00\nB01\n", "labelspace v1 raw 1\nA00"] {
            assert!(LabelSpace::from_manifest(bad).is_err(), "{bad:?}");
        }
    }

    fn code_sets() -> impl Strategy<Value = Vec<BTreeSet<IcdCode>>> {
        let code = (0u8..6, 0u8..3).prop_map(|(f, s)| parse_code(&format!("A0{f}{s}")).unwrap());
        prop::collection::vec(prop::collection::btree_set(code, 1..4), 1..30)
    }

    proptest! {
        #[test]
        fn top_k_size_is_k_plus_one(sets in code_sets(), k in 1usize..20) {
            let distinct: BTreeSet<_> = sets.iter().flatten().collect();
            let space = LabelSpace::build(&sets, Mode::top_k(k)).unwrap();
            prop_assert_eq!(space.len(), k.min(distinct.len()) + 1);
            prop_assert_eq!(space.labels().last().unwrap(), OTHER);
        }

        #[test]
        fn raw_counts_conserve_assignments(sets in code_sets()) {
            let space = LabelSpace::build(&sets, Mode::Raw).unwrap();
            let total: usize = sets.iter().map(BTreeSet::len).sum();
            prop_assert_eq!(space.label_counts(&sets).iter().sum::<usize>(), total);
        }

        #[test]
        fn targets_are_never_all_zero(sets in code_sets(), k in 1usize..20) {
            for mode in [Mode::Raw, Mode::Family, Mode::top_k(k)] {
                let space = LabelSpace::build(&sets, mode).unwrap();
                for s in &sets {
                    prop_assert!(space.encode_targets(s).unwrap().count_ones() >= 1);
                }
            }
        }

        #[test]
        fn growing_k_never_demotes_a_code(sets in code_sets(), k in 1usize..10) {
            let small = LabelSpace::build(&sets, Mode::top_k(k)).unwrap();
            let large = LabelSpace::build(&sets, Mode::top_k(k + 1)).unwrap();
            for l in &small.labels()[..small.len() - 1] {
                prop_assert!(large.index_of(l).is_some_and(|i| i != large.len() - 1));
            }
        }

        #[test]
        fn index_inverts_labels(sets in code_sets(), k in 1usize..10) {
            for mode in [Mode::Raw, Mode::Family, Mode::top_k(k)] {
                let space = LabelSpace::build(&sets, mode).unwrap();
                for (i, l) in space.labels().iter().enumerate() {
                    prop_assert_eq!(space.index_of(l), Some(i));
                }
            }
        }
    }
}
