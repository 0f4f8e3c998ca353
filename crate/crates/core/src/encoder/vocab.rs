use std::collections::{BTreeSet, HashMap};

use super::EncoderError;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;

pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Whitespace token vocabulary. Reserved tokens occupy ids 0 to 3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Collects every lowercased whitespace token of `texts`, sorted.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut seen = BTreeSet::new();
        for text in texts {
            for tok in text.split_whitespace() {
                let tok = tok.to_lowercase();
                if !seen.contains(&tok) {
                    seen.insert(tok);
                }
            }
        }
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(seen.into_iter().filter(|t| !RESERVED.contains(&t.as_str())))
            .collect();
        Self::from_tokens(tokens).expect("freshly built vocab is valid")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self, EncoderError> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(EncoderError::Vocab("reserved tokens must come first".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(EncoderError::Vocab(format!("invalid token {t:?} at line {}", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(EncoderError::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Lowercases, splits on whitespace and maps misses to `UNK`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(&t.to_lowercase())).collect()
    }

    /// Token ids of a stay: its documents in order, separated by `SEP`.
    pub fn stay_ids<S: AsRef<str>>(&self, documents: &[S]) -> Vec<usize> {
        let mut ids = Vec::new();
        for (i, doc) in documents.iter().enumerate() {
            if i > 0 {
                ids.push(SEP);
            }
            ids.extend(self.tokenize(doc.as_ref()));
        }
        ids
    }

    /// Surface tokens aligned with [`stay_ids`](Self::stay_ids).
    pub fn stay_tokens<S: AsRef<str>>(documents: &[S]) -> Vec<String> {
        let mut out = Vec::new();
        for (i, doc) in documents.iter().enumerate() {
            if i > 0 {
                out.push(RESERVED[SEP].to_string());
            }
            out.extend(doc.as_ref().split_whitespace().map(str::to_lowercase));
        }
        out
    }

    /// One token per line, reserved tokens first.
    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self, EncoderError> {
        let body = text
            .strip_suffix('\n')
            .ok_or_else(|| EncoderError::Vocab("missing trailing newline".into()))?;
        Self::from_tokens(body.split('\n').map(str::to_string).collect())
    }
}
