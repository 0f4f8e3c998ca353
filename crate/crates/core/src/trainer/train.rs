use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Precision, TrainConfig};
use super::model::{evaluate_with, Model};
use super::network::Network;
use super::optim::{bce_loss, Adam, AdamHyper};
use super::TrainError;
use crate::autodiff::{Scalar, Tape, Tensor};
use crate::corpus::Corpus;
use crate::encoder::Vocab;
use crate::labelspace::LabelSpace;
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl History {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

pub fn train(train: &Corpus, val: &Corpus, space: &LabelSpace, config: &TrainConfig) -> Result<(Model, History), TrainError> {
    train_with_progress(train, val, space, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress(
    train: &Corpus,
    val: &Corpus,
    space: &LabelSpace,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, History), TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyCorpus("validation"));
    }
    let vocab = Vocab::build(train.stays().iter().flat_map(|s| s.documents.iter().map(String::as_str)));
    let (params, history) = match config.precision {
        Precision::F32 => run::<f32>(train, val, space, config, &vocab, on_epoch)?,
        Precision::F64 => {
            let (p, h) = run::<f64>(train, val, space, config, &vocab, on_epoch)?;
            (p.cast(), h)
        }
    };
    let model = Model::assemble(vocab, space.clone(), config.clone(), params, history.best_epoch)?;
    Ok((model, history))
}

fn run<T: Scalar>(
    train: &Corpus,
    val: &Corpus,
    space: &LabelSpace,
    config: &TrainConfig,
    vocab: &Vocab,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ParamStore<f32>, History), TrainError> {
    let n_labels = space.len();
    let mut examples = Vec::with_capacity(train.len());
    for stay in train.stays() {
        let target = space.encode_targets(&stay.codes).map_err(TrainError::LabelSpaceMismatch)?;
        examples.push((vocab.stay_ids(&stay.documents), target.as_values::<T>()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::<T>::new();
    let network = Network::init(config.strategy, &config.arch, vocab.len(), n_labels, &mut store, &mut rng)?;
    if config.prior_bias_init {
        if let Some(b) = network.head.bias() {
            let counts = space.label_counts(train.stays().iter().map(|s| &s.codes));
            let n = train.len() as f64;
            for (x, &c) in store.get_mut(b).data_mut().iter_mut().zip(&counts) {
                let p = (c as f64 / n).clamp(1e-4, 1.0 - 1e-4);
                *x = T::lit((p / (1.0 - p)).ln());
            }
        }
    }

    let mut adam = Adam::new(AdamHyper::with_lr(config.learning_rate), store.tensors());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = History::default();
    let mut best: Option<(f64, ParamStore<T>)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, true);
            let mut logits = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len() * n_labels);
            for &i in batch {
                let (ids, t) = &examples[i];
                logits.push(network.forward(&mut tape, &p, ids)?.logits);
                targets.extend_from_slice(t);
            }
            let logits = if logits.len() == 1 { logits[0] } else { tape.concat(&logits, 0)? };
            let targets = Tensor::new([batch.len(), n_labels], targets)?;
            let loss = bce_loss(&mut tape, logits, &targets)?;
            loss_sum += tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
            batches += 1;
            let grads = tape.backward(loss)?;
            let slots: Vec<Option<&[T]>> = p.vars().iter().map(|&v| grads.get(v)).collect();
            adam.step(store.tensors_mut(), &slots);
        }

        let report = evaluate_with(&network, &store, vocab, space, val, config.threshold, false)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_precision: report.precision,
            val_recall: report.recall,
            val_f1: report.f1,
        };
        on_epoch(&record);
        history.epochs.push(record);

        if best.as_ref().is_none_or(|(f1, _)| report.f1 > *f1) {
            best = Some((report.f1, store.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= config.patience || config.stop_at_f1.is_some_and(|target| report.f1 >= target) {
            break;
        }
    }
    let (_, params) = best.expect("at least one epoch ran");
    Ok((params.cast(), history))
}
