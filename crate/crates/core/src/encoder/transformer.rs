use rand::Rng;
use serde::{Deserialize, Serialize};

use super::segment::Segment;
use super::EncoderError;
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::params::{normal, xavier, Bound, ParamId, ParamStore};

/// How a segment is reduced to a single vector for pooled strategies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SegmentPooling {
    /// Mean over content-token rows; segments without content fall back to `CLS`.
    #[default]
    MaskedMean,
    Cls,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Maximum segment length, `CLS` included.
    pub max_len: usize,
    #[serde(default)]
    pub pooling: SegmentPooling,
}

impl EncoderConfig {
    /// Small model that trains from scratch in minutes on one CPU core.
    pub fn desk(vocab_size: usize) -> Self {
        Self { vocab_size, d_model: 64, n_heads: 4, n_layers: 2, d_ff: 128, max_len: 128, pooling: SegmentPooling::MaskedMean }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |m: String| Err(EncoderError::Config(m));
        if self.vocab_size < 4 || self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return fail(format!("all sizes must be positive (vocab >= 4): {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_len < 4 {
            return fail(format!("max_len must be at least 4, got {}", self.max_len));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

const LAYER_PARAMS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b",
];

/// Post-norm transformer encoder with learned positional embeddings.
///
/// Parameters live in a [`ParamStore`] under `encoder.*` names.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    token_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
}

const LN_EPS: f64 = 1e-5;

impl Encoder {
    /// Registers freshly initialized parameters in `store`.
    pub fn init<T: Scalar>(config: EncoderConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self, EncoderError> {
        config.validate()?;
        let (d, f) = (config.d_model, config.d_ff);
        store.add("encoder.token_emb", normal(rng, &[config.vocab_size, d], 1.0));
        store.add("encoder.pos_emb", normal(rng, &[config.max_len, d], 0.1));
        for l in 0..config.n_layers {
            for name in LAYER_PARAMS {
                let t = match name {
                    "wq" | "wk" | "wv" | "wo" => xavier(rng, d, d),
                    "w1" => xavier(rng, d, f),
                    "w2" => xavier(rng, f, d),
                    "b1" => Tensor::zeros([f]),
                    "ln1_g" | "ln2_g" => Tensor::full([d], T::one()),
                    _ => Tensor::zeros([d]),
                };
                store.add(format!("encoder.layer{l}.{name}"), t);
            }
        }
        Self::from_store(config, store)
    }

    /// Locates parameters by name and checks their shapes.
    pub fn from_store<T: Scalar>(config: EncoderConfig, store: &ParamStore<T>) -> Result<Self, EncoderError> {
        config.validate()?;
        let (d, f) = (config.d_model, config.d_ff);
        let find = |name: String, shape: &[usize]| -> Result<ParamId, EncoderError> {
            let id = store.id(&name).ok_or_else(|| EncoderError::MissingParam(name.clone()))?;
            if store.get(id).shape() != shape {
                return Err(EncoderError::Config(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    store.get(id).shape()
                )));
            }
            Ok(id)
        };
        let token_emb = find("encoder.token_emb".into(), &[config.vocab_size, d])?;
        let pos_emb = find("encoder.pos_emb".into(), &[config.max_len, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |name: &str, shape: &[usize]| find(format!("encoder.layer{l}.{name}"), shape);
            layers.push(LayerIds {
                wq: p("wq", &[d, d])?,
                bq: p("bq", &[d])?,
                wk: p("wk", &[d, d])?,
                bk: p("bk", &[d])?,
                wv: p("wv", &[d, d])?,
                bv: p("bv", &[d])?,
                wo: p("wo", &[d, d])?,
                bo: p("bo", &[d])?,
                ln1_g: p("ln1_g", &[d])?,
                ln1_b: p("ln1_b", &[d])?,
                w1: p("w1", &[d, f])?,
                b1: p("b1", &[f])?,
                w2: p("w2", &[f, d])?,
                b2: p("b2", &[d])?,
                ln2_g: p("ln2_g", &[d])?,
                ln2_b: p("ln2_b", &[d])?,
            });
        }
        Ok(Self { config, token_emb, pos_emb, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Encodes one segment: output `(seg.len(), d_model)`.
    pub fn encode_segment<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, seg: &Segment) -> Result<Var, EncoderError> {
        self.encode_segments(tape, params, std::slice::from_ref(seg), None)
    }

    /// Encodes equally long segments independently in one batched pass.
    ///
    /// Returns `(n_segments * len, d_model)` with segment `s` occupying rows
    /// `s * len .. (s + 1) * len`. When `trace` is given, each layer's
    /// attention probabilities `(n_segments * n_heads, len, len)` are pushed.
    pub fn encode_segments<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        segments: &[Segment],
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var, EncoderError> {
        let first = segments.first().ok_or(EncoderError::NoSegments)?;
        let n = first.len();
        let max = self.config.max_len;
        if let Some(s) = segments.iter().find(|s| s.len() > max) {
            return Err(EncoderError::SegmentTooLong { len: s.len(), max });
        }
        if n == 0 || segments.iter().any(|s| s.len() != n || s.mask.len() != n) {
            return Err(EncoderError::Config("segments in a batch must share one non-zero length".into()));
        }
        let (s_count, d, h) = (segments.len(), self.config.d_model, self.config.n_heads);
        let dh = d / h;
        let rows = s_count * n;

        let ids: Vec<usize> = segments.iter().flat_map(|s| s.ids.iter().copied()).collect();
        let x = tape.embedding(params[self.token_emb], &ids)?;
        let pos = tape.slice(params[self.pos_emb], 0, 0, n)?;
        let x = tape.reshape(x, &[s_count, n, d])?;
        let x = tape.add(x, pos)?;
        let mut x = tape.reshape(x, &[rows, d])?;

        let key_mask: Vec<bool> = segments.iter().flat_map(|s| s.mask.iter().copied()).collect();
        let scale = T::one() / T::from_usize(dh).expect("dh").sqrt();
        let eps = T::lit(LN_EPS);

        for layer in &self.layers {
            let split = |tape: &mut Tape<T>, w: ParamId, b: ParamId| -> Result<Var, EncoderError> {
                let y = tape.matmul(x, params[w])?;
                let y = tape.add(y, params[b])?;
                let y = tape.reshape(y, &[s_count, n, h, dh])?;
                let y = tape.permute(y, &[0, 2, 1, 3])?;
                Ok(tape.reshape(y, &[s_count * h, n, dh])?)
            };
            let q = split(tape, layer.wq, layer.bq)?;
            let k = split(tape, layer.wk, layer.bk)?;
            let v = split(tape, layer.wv, layer.bv)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let probs = tape.masked_softmax(scores, scale, &key_mask)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(probs);
            }
            let ctx = tape.matmul(probs, v)?;
            let ctx = tape.reshape(ctx, &[s_count, h, n, dh])?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[rows, d])?;
            let attn = tape.matmul(ctx, params[layer.wo])?;
            let attn = tape.add(attn, params[layer.bo])?;
            let res = tape.add(x, attn)?;
            let y = tape.layer_norm(res, params[layer.ln1_g], params[layer.ln1_b], eps)?;

            let ff = tape.matmul(y, params[layer.w1])?;
            let ff = tape.add(ff, params[layer.b1])?;
            let ff = tape.relu(ff);
            let ff = tape.matmul(ff, params[layer.w2])?;
            let ff = tape.add(ff, params[layer.b2])?;
            let res = tape.add(y, ff)?;
            x = tape.layer_norm(res, params[layer.ln2_g], params[layer.ln2_b], eps)?;
        }
        Ok(x)
    }

    /// One `(1, d_model)` vector per segment of an `encode_segments` output.
    pub fn segment_reps<T: Scalar>(&self, tape: &mut Tape<T>, h: Var, segments: &[Segment]) -> Result<Vec<Var>, EncoderError> {
        let n = segments.first().ok_or(EncoderError::NoSegments)?.len();
        let mut reps = Vec::with_capacity(segments.len());
        for (s, seg) in segments.iter().enumerate() {
            let c = seg.n_content();
            let rep = match self.config.pooling {
                SegmentPooling::MaskedMean if c > 0 => {
                    let rows = tape.slice(h, 0, s * n + 1, c)?;
                    let m = tape.reduce_mean(rows, 0)?;
                    tape.reshape(m, &[1, self.config.d_model])?
                }
                _ => tape.slice(h, 0, s * n, 1)?,
            };
            reps.push(rep);
        }
        Ok(reps)
    }

    /// Content-token rows of all segments stacked in document order. A
    /// document without content contributes its `CLS` row.
    pub fn stacked_tokens<T: Scalar>(&self, tape: &mut Tape<T>, h: Var, segments: &[Segment]) -> Result<Var, EncoderError> {
        let n = segments.first().ok_or(EncoderError::NoSegments)?.len();
        let mut parts = Vec::with_capacity(segments.len());
        for (s, seg) in segments.iter().enumerate() {
            let c = seg.n_content();
            if c > 0 {
                parts.push(tape.slice(h, 0, s * n + 1, c)?);
            }
        }
        if parts.is_empty() {
            return Ok(tape.slice(h, 0, 0, 1)?);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        Ok(tape.concat(&parts, 0)?)
    }
}
