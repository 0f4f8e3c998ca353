use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::network::Network;
use super::{sha256_hex, TrainError};
use crate::autodiff::{sigmoid, Scalar, Tape, Tensor};
use crate::corpus::Corpus;
use crate::encoder::Vocab;
use crate::labelspace::LabelSpace;
use crate::metrics::{decide, micro_prf, EvalReport};
use crate::params::ParamStore;

/// A trained classifier with everything needed to score raw text.
#[derive(Clone, Debug)]
pub struct Model {
    pub vocab: Vocab,
    pub labels: LabelSpace,
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    pub network: Network,
    /// 1-based epoch the parameters were snapshotted at.
    pub best_epoch: usize,
    pub fingerprint: String,
    pub(super) checksum: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCode {
    pub code: String,
    pub score: f64,
    /// Highest-attention `(token, weight)` pairs for this label.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tokens: Vec<(String, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StayPrediction {
    /// Codes at or above the threshold, highest score first.
    pub codes: Vec<ScoredCode>,
}

pub(super) struct Inference {
    pub probabilities: Vec<f64>,
    pub attention: Option<Tensor<f64>>,
}

pub(super) fn infer<T: Scalar>(
    network: &Network,
    store: &ParamStore<T>,
    ids: &[usize],
    want_attention: bool,
) -> Result<Inference, TrainError> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let out = network.forward(&mut tape, &p, ids)?;
    let probabilities = tape.value(out.logits).data().iter().map(|z| sigmoid(z.to_f64().unwrap_or(f64::NAN))).collect();
    let attention = match out.attention {
        Some(a) if want_attention => {
            let a = tape.value(a);
            Some(Tensor::new(a.shape().to_vec(), a.to_f64_vec())?)
        }
        _ => None,
    };
    Ok(Inference { probabilities, attention })
}

/// Short SHA-256 over everything that determines the model's behaviour
/// apart from the weights.
pub(super) fn fingerprint(config: &TrainConfig, vocab: &Vocab, labels: &LabelSpace) -> String {
    let desc = serde_json::json!({
        "config": config,
        "vocab": sha256_hex(vocab.to_manifest().as_bytes()),
        "labels": sha256_hex(labels.to_manifest().as_bytes()),
    });
    sha256_hex(desc.to_string().as_bytes())[..16].to_string()
}

impl Model {
    pub(super) fn assemble(
        vocab: Vocab,
        labels: LabelSpace,
        config: TrainConfig,
        params: ParamStore<f32>,
        best_epoch: usize,
    ) -> Result<Self, TrainError> {
        let network = Network::from_store(config.strategy, &config.arch, vocab.len(), labels.len(), &params)?;
        let fingerprint = fingerprint(&config, &vocab, &labels);
        Ok(Self { vocab, labels, config, params, network, best_epoch, fingerprint, checksum: None })
    }

    /// Hex checksum of the file this model was loaded from.
    pub fn checksum(&self) -> Option<&str> {
        self.checksum.as_deref()
    }

    pub fn logits(&self, ids: &[usize]) -> Result<Vec<f32>, TrainError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let out = self.network.forward(&mut tape, &p, ids)?;
        Ok(tape.value(out.logits).data().to_vec())
    }

    pub fn probabilities<S: AsRef<str>>(&self, documents: &[S]) -> Result<Vec<f64>, TrainError> {
        Ok(infer(&self.network, &self.params, &self.vocab.stay_ids(documents), false)?.probabilities)
    }

    /// Thresholded codes for one stay. `top_tokens > 0` attaches attention
    /// tokens per predicted label when the head provides them.
    pub fn predict<S: AsRef<str>>(&self, documents: &[S], threshold: f64, top_tokens: usize) -> Result<StayPrediction, TrainError> {
        let surface = Vocab::stay_tokens(documents);
        if surface.iter().all(|t| t == crate::encoder::RESERVED[crate::encoder::SEP]) {
            return Ok(StayPrediction::default());
        }
        let ids = self.vocab.stay_ids(documents);
        debug_assert_eq!(ids.len(), surface.len());
        let inf = infer(&self.network, &self.params, &ids, top_tokens > 0)?;
        let mut codes: Vec<ScoredCode> = decide(&inf.probabilities, threshold)
            .into_iter()
            .map(|i| ScoredCode {
                code: self.labels.label(i).to_string(),
                score: inf.probabilities[i],
                tokens: inf.attention.as_ref().map(|a| top_attention(a.row(i), &surface, top_tokens)).unwrap_or_default(),
            })
            .collect();
        codes.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.code.cmp(&b.code)));
        Ok(StayPrediction { codes })
    }
}

fn top_attention(weights: &[f64], tokens: &[String], k: usize) -> Vec<(String, f64)> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|t| (tokens.get(t).cloned().unwrap_or_else(|| crate::encoder::RESERVED[crate::encoder::CLS].into()), weights[t]))
        .collect()
}

/// Gold codes outside the model's label space count as misses.
pub fn evaluate(model: &Model, corpus: &Corpus, threshold: f64, exclude_other: bool) -> Result<EvalReport, TrainError> {
    evaluate_with(&model.network, &model.params, &model.vocab, &model.labels, corpus, threshold, exclude_other)
}

pub(super) fn evaluate_with<T: Scalar>(
    network: &Network,
    store: &ParamStore<T>,
    vocab: &Vocab,
    labels: &LabelSpace,
    corpus: &Corpus,
    threshold: f64,
    exclude_other: bool,
) -> Result<EvalReport, TrainError> {
    let mut preds = Vec::with_capacity(corpus.len());
    let mut golds: Vec<BTreeSet<usize>> = Vec::with_capacity(corpus.len());
    let mut missed = Vec::with_capacity(corpus.len());
    for stay in corpus.stays() {
        let ids = vocab.stay_ids(&stay.documents);
        preds.push(decide(&infer(network, store, &ids, false)?.probabilities, threshold));
        let (gold, unknown) = labels.label_indices_lenient(&stay.codes);
        golds.push(gold);
        missed.push(unknown as u64);
    }
    let mut report = micro_prf(&preds, &golds, exclude_other, labels).expect("equal lengths");
    let extra: u64 = missed.iter().sum();
    if extra > 0 {
        report.fn_ += extra;
        let c = report.counts();
        report.precision = c.precision();
        report.recall = c.recall();
        report.f1 = c.f1();
    }
    Ok(report)
}
