use super::vocab::{CLS, PAD};

/// Fixed-length chunk of a document: `CLS` followed by content tokens, with
/// `PAD` filling the tail. `mask[i]` is false exactly at `PAD` positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Segment {
    /// Segment holding `CLS` plus `content`, padded to `len`.
    pub fn new(content: &[usize], len: usize) -> Self {
        assert!(content.len() < len, "segment content does not fit");
        let mut ids = Vec::with_capacity(len);
        ids.push(CLS);
        ids.extend_from_slice(content);
        let mut mask = vec![true; ids.len()];
        ids.resize(len, PAD);
        mask.resize(len, false);
        Self { ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of content tokens (unmasked positions after `CLS`).
    pub fn n_content(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count().saturating_sub(1)
    }
}

/// Splits `ids` into non-overlapping chunks of at most `max_len - 1` content
/// tokens, each prefixed by `CLS`. Empty input yields one `CLS` + `PAD` segment.
pub fn segment(ids: &[usize], max_len: usize) -> Vec<Segment> {
    assert!(max_len >= 4, "segment length must be at least 4, got {max_len}");
    if ids.is_empty() {
        return vec![Segment::new(&[], max_len)];
    }
    ids.chunks(max_len - 1).map(|c| Segment::new(c, max_len)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn long_input_splits_with_cls() {
        let ids: Vec<usize> = (10..710).collect();
        let segs = segment(&ids, 512);
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].n_content(), 511);
        assert_eq!(segs[1].n_content(), 189);
        assert!(segs.iter().all(|s| s.ids[0] == CLS && s.len() == 512));
        assert_eq!(segs[1].ids[190], PAD);
        assert!(!segs[1].mask[190] && segs[1].mask[189]);
        let content: Vec<usize> = segs.iter().flat_map(|s| s.ids[1..=s.n_content()].to_vec()).collect();
        assert_eq!(content, ids);
    }

    #[test]
    fn short_input_is_one_segment() {
        let segs = segment(&[5; 10], 512);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].n_content(), 10);
    }

    #[test]
    fn empty_input_is_cls_and_padding() {
        let segs = segment(&[], 8);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].ids, [CLS, PAD, PAD, PAD, PAD, PAD, PAD, PAD]);
        assert_eq!(segs[0].mask, [true, false, false, false, false, false, false, false]);
        assert_eq!(segs[0].n_content(), 0);
    }

    #[test]
    fn exact_multiple_has_no_padding() {
        let segs = segment(&[7; 6], 4);
        assert_eq!(segs.len(), 2);
        assert!(segs.iter().all(|s| s.mask.iter().all(|&m| m)));
    }
}
