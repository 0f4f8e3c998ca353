use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::labelspace::{build_labelspace, Mode};

fn line(id: &str, docs: &str, codes: &str) -> String {
    format!(r#"{{"id":"{id}","documents":{docs},"codes":{codes}}}"#)
}

fn parse(lines: &[String]) -> Result<Corpus, CorpusError> {
    Corpus::from_reader(lines.join("\n").as_bytes())
}

fn small_corpus(n: usize) -> Corpus {
    let stays = (0..n)
        .map(|i| Stay {
            id: format!("s{i}"),
            documents: vec![format!("doc {i}")],
            codes: [parse_code("A00").unwrap()].into_iter().collect(),
        })
        .collect();
    Corpus::new(stays).unwrap()
}

#[test]
fn loads_valid_lines_and_normalizes_codes() {
    let c = parse(&[
        line("a", r#"["x y", "z"]"#, r#"["e11.9", "I10"]"#),
        line("b", r#"["w"]"#, r#"["A00"]"#),
        line("c", r#"["v"]"#, r#"["Z511"]"#),
    ])
    .unwrap();
    assert_eq!(c.len(), 3);
    let codes: Vec<&str> = c.stays()[0].codes.iter().map(|c| c.as_str()).collect();
    assert_eq!(codes, ["E119", "I10"]);
    let stats = c.stats();
    assert_eq!((stats.documents, stats.tokens, stats.total_codes, stats.distinct_codes), (4, 5, 4, 4));
}

#[test]
fn empty_code_list_is_rejected() {
    let err = parse(&[line("a", r#"["x"]"#, "[]")]).unwrap_err();
    assert!(matches!(err, CorpusError::EmptyCodeSet { line: 1 }));
    let err = parse(&[line("a", "[]", r#"["A00"]"#)]).unwrap_err();
    assert!(matches!(err, CorpusError::EmptyDocumentList { line: 1 }));
}

#[test]
fn duplicate_id_reports_second_line() {
    let lines: Vec<String> = ["a", "b", "c", "d", "b"].iter().map(|id| line(id, r#"["x"]"#, r#"["A00"]"#)).collect();
    match parse(&lines).unwrap_err() {
        CorpusError::DuplicateId { line, id } => assert_eq!((line, id.as_str()), (5, "b")),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn malformed_code_and_unknown_fields() {
    let err = parse(&[line("a", r#"["x"]"#, r#"["A00"]"#), line("b", r#"["x"]"#, r#"["1AB"]"#)]).unwrap_err();
    assert!(matches!(err, CorpusError::MalformedCode { line: 2, .. }));
    let err = parse(&[r#"{"id":"a","documents":["x"],"codes":["A00"],"age":3}"#.to_string()]).unwrap_err();
    assert!(matches!(err, CorpusError::Parse { line: 1, .. }));
    let err = parse(&["not json".to_string()]).unwrap_err();
    assert!(matches!(err, CorpusError::Parse { line: 1, .. }));
}

#[test]
fn jsonl_round_trip_is_byte_exact() {
    let text = [line("a", r#"["x y","z"]"#, r#"["E119","I10"]"#), line("b", r#"["w"]"#, r#"["A00"]"#)].join("\n") + "\n";
    let c = Corpus::from_reader(text.as_bytes()).unwrap();
    assert_eq!(c.to_jsonl(), text);
}

#[test]
fn split_sizes_and_determinism() {
    let c = small_corpus(100);
    let (tr, va, te) = split_corpus(&c, (0.8, 0.1, 0.1), 7).unwrap();
    assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
    let ids = |c: &Corpus| c.stays().iter().map(|s| s.id.clone()).collect::<BTreeSet<_>>();
    assert!(ids(&tr).is_disjoint(&ids(&va)) && ids(&va).is_disjoint(&ids(&te)) && ids(&tr).is_disjoint(&ids(&te)));
    let again = split_corpus(&c, (0.8, 0.1, 0.1), 7).unwrap();
    assert_eq!((tr, va, te), again);
}

#[test]
fn split_errors() {
    let c = small_corpus(5);
    assert!(matches!(split_corpus(&c, (0.8, 0.1, 0.1), 7), Err(CorpusError::MinPartition { .. })));
    assert!(matches!(split_corpus(&small_corpus(10), (0.8, 0.1, 0.2), 7), Err(CorpusError::RatioSum(_))));
    assert!(matches!(split_corpus(&small_corpus(10), (1.0, 0.0, 0.0), 7), Err(CorpusError::InvalidRatio(_))));
}

fn small_spec() -> SynthSpec {
    SynthSpec { n_stays: 100, n_codes: 20, mean_len: 100, seed: 7, ..SynthSpec::default() }
}

#[test]
fn every_gold_keyword_is_in_the_text() {
    let synth = generate_synthetic(&small_spec()).unwrap();
    assert_eq!(synth.corpus.len(), 100);
    for stay in synth.corpus.stays() {
        let tokens: BTreeSet<&str> = stay.documents.iter().flat_map(|d| d.split_whitespace()).collect();
        for code in &stay.codes {
            for kw in &synth.keywords[code] {
                assert!(tokens.contains(kw.as_str()), "{} missing {kw}", stay.id);
            }
        }
        let n = stay.codes.len();
        assert!((1..=4).contains(&n));
        assert!((1..=3).contains(&stay.documents.len()));
    }
}

#[test]
fn generation_is_deterministic() {
    let a = generate_synthetic(&small_spec()).unwrap();
    let b = generate_synthetic(&small_spec()).unwrap();
    assert_eq!(a.corpus.to_jsonl(), b.corpus.to_jsonl());
    let c = generate_synthetic(&SynthSpec { seed: 8, ..small_spec() }).unwrap();
    assert_ne!(a.corpus.to_jsonl(), c.corpus.to_jsonl());
}

#[test]
fn zipf_skew() {
    let spec = SynthSpec { n_stays: 5000, n_codes: 50, mean_len: 60, zipf_s: 1.2, ..SynthSpec::default() };
    let synth = generate_synthetic(&spec).unwrap();
    let space = build_labelspace(&synth.corpus, Mode::Raw).unwrap();
    let mut counts = space.label_counts(synth.corpus.stays().iter().map(|s| &s.codes));
    counts.sort_unstable();
    let median = counts[counts.len() / 2];
    let top = *counts.last().unwrap();
    assert!(top > 10 * median, "top {top} median {median}");
}

#[test]
fn stats_track_spec() {
    let spec = SynthSpec { n_stays: 1000, n_codes: 50, mean_len: 300, ..SynthSpec::default() };
    let synth = generate_synthetic(&spec).unwrap();
    let stats = synth.corpus.stats();
    assert!((stats.mean_seq_len - 300.0).abs() / 300.0 < 0.05, "{}", stats.mean_seq_len);
    let total: usize = synth.corpus.stays().iter().map(|s| s.codes.len()).sum();
    assert_eq!(stats.total_codes, total);
}

#[test]
fn keyword_oracle_reaches_the_ceiling() {
    let synth = generate_synthetic(&small_spec()).unwrap();
    let oracle = synth.oracle();
    for stay in synth.corpus.stays() {
        assert_eq!(oracle.predict(stay), stay.codes);
    }
}

#[test]
fn synthetic_families_reduce_label_count() {
    let synth = generate_synthetic(&small_spec()).unwrap();
    let raw = build_labelspace(&synth.corpus, Mode::Raw).unwrap();
    let fam = build_labelspace(&synth.corpus, Mode::Family).unwrap();
    assert!(fam.len() < raw.len());
}

#[test]
fn spec_invariants() {
    let bad = [
        SynthSpec { mean_len: 5, ..small_spec() },
        SynthSpec { n_stays: 0, ..small_spec() },
        SynthSpec { zipf_s: 0.0, ..small_spec() },
        SynthSpec { len_dispersion: -1.0, ..small_spec() },
        SynthSpec { codes_per_stay: (3, 2), ..small_spec() },
        SynthSpec { codes_per_stay: (1, 30), mean_len: 1000, ..small_spec() },
    ];
    for spec in bad {
        assert!(matches!(generate_synthetic(&spec), Err(CorpusError::SpecInvariant(_))), "{spec:?}");
    }
    let msg = SynthSpec { mean_len: 5, ..small_spec() }.validate().unwrap_err().to_string();
    assert!(msg.contains("mean_len"), "{msg}");
}

#[test]
fn manifest_serializes() {
    let synth = generate_synthetic(&small_spec()).unwrap();
    let m = synth.manifest();
    let text = serde_json::to_string(&m).unwrap();
    let back: SynthManifest = serde_json::from_str(&text).unwrap();
    assert_eq!(back, m);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_partition_the_corpus(n in 3usize..200, seed in any::<u64>(), a in 1u32..10, b in 1u32..10, c in 1u32..10) {
        let total = (a + b + c) as f64;
        let ratios = (a as f64 / total, b as f64 / total, c as f64 / total);
        let corpus = small_corpus(n);
        match split_corpus(&corpus, ratios, seed) {
            Ok((tr, va, te)) => {
                let mut ids: Vec<String> = tr.stays().iter().chain(va.stays()).chain(te.stays()).map(|s| s.id.clone()).collect();
                prop_assert_eq!(ids.len(), n);
                ids.sort();
                ids.dedup();
                prop_assert_eq!(ids.len(), n);
            }
            Err(CorpusError::MinPartition { .. }) => {}
            Err(e) => prop_assert!(false, "unexpected {}", e),
        }
    }
}
