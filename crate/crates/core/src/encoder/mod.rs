//! Tokenization, segmentation and the transformer backbone.
//!
//! Long stays are cut into fixed-length segments that are encoded
//! independently; [`encode_document`] then combines them per
//! [`DocStrategy`].

mod segment;
mod transformer;
mod vocab;

pub use segment::{segment, Segment};
pub use transformer::{Encoder, EncoderConfig, SegmentPooling};
pub use vocab::{Vocab, CLS, PAD, RESERVED, SEP, UNK};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Scalar, Tape, TensorError, Var};
use crate::params::Bound;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("segment of length {len} exceeds the maximum {max}")]
    SegmentTooLong { len: usize, max: usize },
    #[error("no segments to encode")]
    NoSegments,
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("bad vocabulary: {0}")]
    Vocab(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How a multi-segment document is presented to the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocStrategy {
    /// Only the first segment is encoded.
    Truncate,
    /// One pooled vector per segment.
    HierSegments,
    /// All content-token rows of all segments, stacked.
    StackedTokens,
}

#[derive(Clone, Debug)]
pub enum DocEncoding {
    /// Encoder output of the first segment, `(len, d_model)`.
    Truncated { h: Var, segment: Segment },
    /// Per-segment `(1, d_model)` representations.
    Segments(Vec<Var>),
    /// `(total content tokens, d_model)`.
    Stacked(Var),
}

/// Segments `ids` by the encoder's `max_len` and encodes per `strategy`.
pub fn encode_document<T: Scalar>(
    tape: &mut Tape<T>,
    encoder: &Encoder,
    params: &Bound,
    ids: &[usize],
    strategy: DocStrategy,
) -> Result<DocEncoding, EncoderError> {
    let mut segments = segment(ids, encoder.config().max_len);
    match strategy {
        DocStrategy::Truncate => {
            segments.truncate(1);
            let h = encoder.encode_segments(tape, params, &segments, None)?;
            Ok(DocEncoding::Truncated { h, segment: segments.remove(0) })
        }
        DocStrategy::HierSegments => {
            let h = encoder.encode_segments(tape, params, &segments, None)?;
            Ok(DocEncoding::Segments(encoder.segment_reps(tape, h, &segments)?))
        }
        DocStrategy::StackedTokens => {
            let h = encoder.encode_segments(tape, params, &segments, None)?;
            Ok(DocEncoding::Stacked(encoder.stacked_tokens(tape, h, &segments)?))
        }
    }
}
