use serde::{Deserialize, Serialize};

use super::vocab::{normalize_words, Vocab, CLS, PAD, SEP};
use crate::error::{Error, Result};

/// Token sequence plus the word -> token conversion table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedText {
    pub token_ids: Vec<usize>,
    /// Per content word, the half-open token range `[start, end)`.
    pub word_spans: Vec<(usize, usize)>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
    /// Normalized words, both segments concatenated.
    pub words: Vec<String>,
    /// Number of words belonging to the first segment.
    pub first_segment_words: usize,
}

impl EncodedText {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn n_words(&self) -> usize {
        self.word_spans.len()
    }

    pub fn span_width(&self, w: usize) -> usize {
        let (s, e) = self.word_spans[w];
        e - s
    }

    /// Number of non-padding tokens.
    pub fn content_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Append `[PAD]` tokens up to `len`; padded positions are masked out.
    pub fn pad_to(&mut self, len: usize) {
        while self.token_ids.len() < len {
            self.token_ids.push(PAD);
            self.segment_ids.push(0);
            self.attention_mask.push(0);
        }
    }
}

fn pieces(words: &[String], vocab: &Vocab) -> Vec<Vec<usize>> {
    words.iter().map(|w| vocab.segment(w)).collect()
}

fn count(seg: &[Vec<usize>]) -> usize {
    seg.iter().map(Vec::len).sum()
}

/// `[CLS] t1 [SEP]` or `[CLS] t1 [SEP] t2 [SEP]`, truncated to `max_len` by
/// dropping whole trailing words from the longer segment first.
pub fn tokenize(
    text1: &str,
    text2: Option<&str>,
    vocab: &Vocab,
    max_len: usize,
) -> Result<EncodedText> {
    if max_len < 4 {
        return Err(Error::Tokenize(format!(
            "max_len must be >= 4, got {max_len}"
        )));
    }
    let mut w1 = normalize_words(text1);
    if w1.is_empty() {
        return Err(Error::Tokenize("first segment is empty".into()));
    }
    let mut w2 = match text2 {
        Some(t) => {
            let w = normalize_words(t);
            if w.is_empty() {
                return Err(Error::Tokenize("second segment is empty".into()));
            }
            Some(w)
        }
        None => None,
    };
    let mut p1 = pieces(&w1, vocab);
    let mut p2 = w2.as_ref().map(|w| pieces(w, vocab));
    let specials = if p2.is_some() { 3 } else { 2 };
    loop {
        let total = specials + count(&p1) + p2.as_ref().map_or(0, |p| count(p));
        if total <= max_len {
            break;
        }
        let n1 = count(&p1);
        let n2 = p2.as_ref().map_or(0, |p| count(p));
        let drop_first = p2.is_none() || n1 > n2;
        let (seg, words) = if drop_first {
            (&mut p1, &mut w1)
        } else {
            (p2.as_mut().unwrap(), w2.as_mut().unwrap())
        };
        if seg.len() <= 1 {
            return Err(Error::Tokenize(format!(
                "cannot fit input into max_len {max_len} without emptying a segment"
            )));
        }
        seg.pop();
        words.pop();
    }

    let mut token_ids = vec![CLS];
    let mut segment_ids = vec![0u8];
    let mut word_spans = Vec::new();
    for p in &p1 {
        let s = token_ids.len();
        token_ids.extend_from_slice(p);
        segment_ids.extend(std::iter::repeat_n(0, p.len()));
        word_spans.push((s, token_ids.len()));
    }
    token_ids.push(SEP);
    segment_ids.push(0);
    let first_segment_words = w1.len();
    let mut words = w1;
    if let (Some(p2), Some(w2)) = (p2, w2) {
        for p in &p2 {
            let s = token_ids.len();
            token_ids.extend_from_slice(p);
            segment_ids.extend(std::iter::repeat_n(1, p.len()));
            word_spans.push((s, token_ids.len()));
        }
        token_ids.push(SEP);
        segment_ids.push(1);
        words.extend(w2);
    }
    let attention_mask = vec![1u8; token_ids.len()];
    Ok(EncodedText {
        token_ids,
        word_spans,
        segment_ids,
        attention_mask,
        words,
        first_segment_words,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_vocab() -> Vocab {
        Vocab::build(["aa aa ab"], 10).unwrap()
    }

    #[test]
    fn single_word_example() {
        let v = small_vocab();
        let e = tokenize("ab", None, &v, 16).unwrap();
        let a = v.id("a").unwrap();
        let b = v.id("b").unwrap();
        assert_eq!(e.token_ids, vec![CLS, a, b, SEP]);
        assert_eq!(e.word_spans, vec![(1, 3)]);
    }

    #[test]
    fn pair_has_two_seps_and_segment_switch() {
        let v = small_vocab();
        let e = tokenize("aa ab", Some("ba a"), &v, 32).unwrap();
        let seps: Vec<usize> = e
            .token_ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == SEP)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(seps.len(), 2);
        assert_eq!(*seps.last().unwrap(), e.len() - 1);
        for (i, &s) in e.segment_ids.iter().enumerate() {
            assert_eq!(s, u8::from(i > seps[0]));
        }
        assert_eq!(e.first_segment_words, 2);
        assert_eq!(e.n_words(), 4);
    }

    #[test]
    fn characters_only_word_is_split_per_char() {
        let v = Vocab::build(["q z"], 10).unwrap();
        let e = tokenize("qz", None, &v, 8).unwrap();
        assert_eq!(e.word_spans, vec![(1, 3)]);
        assert_eq!(e.span_width(0), 2);
    }

    #[test]
    fn max_len_below_four_is_rejected() {
        assert!(tokenize("aa", None, &small_vocab(), 3).is_err());
    }

    #[test]
    fn truncation_drops_words_from_longer_segment() {
        let v = small_vocab();
        // seg1: 4 words of 1 token, seg2: 1 word
        let e = tokenize("aa aa aa aa", Some("aa"), &v, 6).unwrap();
        assert_eq!(e.len(), 6);
        assert_eq!(e.first_segment_words, 2);
        assert_eq!(e.n_words(), 3);
    }

    proptest! {
        #[test]
        fn spans_cover_content_tokens(
            words in prop::collection::vec("[a-e]{1,6}", 1..12),
            words2 in prop::option::of(prop::collection::vec("[a-e]{1,6}", 1..6)),
            max_len in 8usize..40,
        ) {
            let v = Vocab::build(["abc bcd cde ab de ea"], 24).unwrap();
            let t1 = words.join(" ");
            let t2 = words2.map(|w| w.join(" "));
            let Ok(e) = tokenize(&t1, t2.as_deref(), &v, max_len) else { return Ok(()); };
            prop_assert!(e.len() <= max_len);
            prop_assert_eq!(e.token_ids[0], CLS);
            prop_assert_eq!(*e.token_ids.last().unwrap(), SEP);
            // contiguous, ordered, non-overlapping, covering exactly non-special tokens
            let mut covered = vec![false; e.len()];
            let mut prev_end = 1;
            for (i, &(s, end)) in e.word_spans.iter().enumerate() {
                prop_assert!(s < end);
                if i == e.first_segment_words {
                    prop_assert_eq!(s, prev_end + 1);
                } else {
                    prop_assert_eq!(s, prev_end);
                }
                for c in covered.iter_mut().take(end).skip(s) { *c = true; }
                prev_end = end;
            }
            for (i, &t) in e.token_ids.iter().enumerate() {
                prop_assert_eq!(covered[i], t != CLS && t != SEP);
            }
            // pure function
            let again = tokenize(&t1, t2.as_deref(), &v, max_len).unwrap();
            prop_assert_eq!(again, e);
        }
    }
}
