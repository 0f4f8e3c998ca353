use rand::Rng;

use super::config::{ArchConfig, Strategy};
use super::TrainError;
use crate::autodiff::{Scalar, Tape, Var};
use crate::encoder::{encode_document, DocEncoding, Encoder};
use crate::heads::{aggregate_max, aggregate_mean, LaatHead, LinearHead};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub enum Head {
    Linear(LinearHead),
    Laat(LaatHead),
}

impl Head {
    pub fn bias(&self) -> Option<ParamId> {
        match self {
            Head::Linear(h) => h.bias(),
            Head::Laat(h) => h.bias(),
        }
    }
}

/// Encoder plus head, wired by strategy. Holds no numbers; parameters live
/// in a [`ParamStore`] of any precision.
#[derive(Clone, Debug)]
pub struct Network {
    pub strategy: Strategy,
    pub encoder: Encoder,
    pub head: Head,
    n_labels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `(1, n_labels)`.
    pub logits: Var,
    /// Label-wise attention `(n_labels, n_tokens)`, for the attention strategy.
    pub attention: Option<Var>,
}

impl Network {
    pub fn init<T: Scalar>(
        strategy: Strategy,
        arch: &ArchConfig,
        vocab_size: usize,
        n_labels: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self, TrainError> {
        let encoder = Encoder::init(arch.encoder(vocab_size), store, rng)?;
        let head = match strategy {
            Strategy::Laat => Head::Laat(LaatHead::init(store, rng, arch.d_model, arch.d_attn(), n_labels, arch.head_bias)),
            _ => Head::Linear(LinearHead::init(store, rng, arch.d_model, n_labels, arch.head_bias)),
        };
        Ok(Self { strategy, encoder, head, n_labels })
    }

    pub fn from_store<T: Scalar>(
        strategy: Strategy,
        arch: &ArchConfig,
        vocab_size: usize,
        n_labels: usize,
        store: &ParamStore<T>,
    ) -> Result<Self, TrainError> {
        let encoder = Encoder::from_store(arch.encoder(vocab_size), store)?;
        let head = match strategy {
            Strategy::Laat => Head::Laat(LaatHead::from_store(store, arch.d_model, arch.d_attn(), n_labels, arch.head_bias)?),
            _ => Head::Linear(LinearHead::from_store(store, arch.d_model, n_labels, arch.head_bias)?),
        };
        Ok(Self { strategy, encoder, head, n_labels })
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, ids: &[usize]) -> Result<Forward, TrainError> {
        let encoded = encode_document(tape, &self.encoder, params, ids, self.strategy.doc_strategy())?;
        let (doc, attention) = match (encoded, &self.head) {
            (DocEncoding::Stacked(h), Head::Laat(head)) => {
                let out = head.scores(tape, params, h)?;
                return Ok(Forward { logits: out.logits, attention: Some(out.attention) });
            }
            (DocEncoding::Truncated { h, segment }, Head::Linear(_)) => {
                let reps = self.encoder.segment_reps(tape, h, std::slice::from_ref(&segment))?;
                (reps[0], None)
            }
            (DocEncoding::Segments(reps), Head::Linear(_)) => {
                let doc = match self.strategy {
                    Strategy::HierMax => aggregate_max(tape, &reps)?,
                    _ => aggregate_mean(tape, &reps)?,
                };
                (doc, None)
            }
            _ => return Err(TrainError::Config(format!("strategy {} does not match its head", self.strategy))),
        };
        let Head::Linear(head) = &self.head else { unreachable!() };
        Ok(Forward { logits: head.scores(tape, params, doc)?, attention })
    }
}
