use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;

pub const SPECIALS: [&str; 4] = ["[CLS]", "[SEP]", "[PAD]", "[UNK]"];

/// Longest character n-gram considered when building a vocabulary.
pub const MAX_NGRAM: usize = 8;

/// Multi-character n-grams must occur at least this often to be admitted.
pub const MIN_NGRAM_COUNT: usize = 2;

/// Subword vocabulary for greedy longest-match segmentation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub max_pieces_per_word: usize,
    max_piece_chars: usize,
}

/// Lowercase and split on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS.map(String::from) {
            return Err(Error::Vocab(
                "the first four tokens must be [CLS], [SEP], [PAD], [UNK]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Vocab(format!("invalid token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        let max_piece_chars = tokens[4..]
            .iter()
            .map(|t| t.chars().count())
            .max()
            .unwrap_or(1);
        Ok(Self {
            tokens,
            index,
            max_pieces_per_word: 16,
            max_piece_chars,
        })
    }

    /// Build a vocabulary of at most `vocab_size` entries: the four specials,
    /// every character seen in the corpus, then the most frequent character
    /// n-grams (2 <= n <= 8) that occur at least twice. Ties are broken by
    /// first occurrence, so the result depends only on the corpus order.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Result<Self> {
        if vocab_size < 5 {
            return Err(Error::Vocab(format!(
                "vocab_size must be >= 5, got {vocab_size}"
            )));
        }
        let mut chars: Vec<String> = Vec::new();
        let mut char_seen: HashMap<char, ()> = HashMap::new();
        // n-gram -> (count, first occurrence)
        let mut grams: HashMap<String, (usize, usize)> = HashMap::new();
        let mut order = 0usize;
        let mut any = false;
        for line in lines {
            for word in normalize_words(line) {
                any = true;
                let cs: Vec<char> = word.chars().collect();
                for &c in &cs {
                    if char_seen.insert(c, ()).is_none() {
                        chars.push(c.to_string());
                    }
                }
                for n in 2..=MAX_NGRAM.min(cs.len()) {
                    for s in cs.windows(n) {
                        let g: String = s.iter().collect();
                        let e = grams.entry(g).or_insert((0, order));
                        e.0 += 1;
                        order += 1;
                    }
                }
            }
        }
        if !any {
            return Err(Error::Vocab("empty corpus".into()));
        }
        if SPECIALS.len() + chars.len() > vocab_size {
            return Err(Error::Vocab(format!(
                "vocab_size {vocab_size} cannot hold the 4 specials and {} distinct characters",
                chars.len()
            )));
        }
        let mut ranked: Vec<(String, usize, usize)> = grams
            .into_iter()
            .filter(|(_, (c, _))| *c >= MIN_NGRAM_COUNT)
            .map(|(g, (c, f))| (g, c, f))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        let room = vocab_size - SPECIALS.len() - chars.len();
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(chars);
        tokens.extend(ranked.into_iter().take(room).map(|(g, _, _)| g));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Greedy longest-match segmentation of one (already lowercased) word.
    /// A word containing a character outside the vocabulary, or needing more
    /// than `max_pieces_per_word` pieces, becomes a single `[UNK]`.
    pub fn segment(&self, word: &str) -> Vec<usize> {
        let cs: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < cs.len() {
            let mut hit = None;
            for n in (1..=self.max_piece_chars.min(cs.len() - i)).rev() {
                let piece: String = cs[i..i + n].iter().collect();
                if let Some(id) = self.id(&piece) {
                    hit = Some((id, n));
                    break;
                }
            }
            match hit {
                Some((id, n)) => {
                    out.push(id);
                    i += n;
                }
                None => return vec![UNK],
            }
            if out.len() > self.max_pieces_per_word {
                return vec![UNK];
            }
        }
        out
    }

    /// Concatenate the surface forms of `ids`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]))
            .collect()
    }

    /// One token per line; line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(String::from).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_corpus_example() {
        let v = Vocab::build(["aa aa ab"], 10).unwrap();
        for t in ["a", "b", "aa"] {
            assert!(v.id(t).is_some(), "missing {t}");
        }
        assert_eq!(v.id("ab"), None, "singleton n-gram admitted");
    }

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocab::build(["the cat sat on the mat"], 30).unwrap();
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.id(s), Some(i));
        }
    }

    #[test]
    fn identical_corpora_identical_files() {
        let corpus = ["one two three", "two three four", "three four five"];
        let a = Vocab::build(corpus, 40).unwrap().to_file_string();
        let b = Vocab::build(corpus, 40).unwrap().to_file_string();
        assert_eq!(a.as_bytes(), b.as_bytes());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocab::build(["   ", ""], 10).is_err());
    }

    #[test]
    fn too_small_is_an_error() {
        assert!(Vocab::build(["abc"], 4).is_err());
        assert!(Vocab::build(["abcdef"], 8).is_err());
    }

    #[test]
    fn segment_and_decode_round_trip() {
        let v = Vocab::build(["reading readers read reread"], 64).unwrap();
        for w in ["reading", "readers", "read", "reread", "dear"] {
            let ids = v.segment(w);
            assert!(!ids.contains(&UNK));
            assert_eq!(v.decode(&ids), w);
        }
    }

    #[test]
    fn unknown_character_maps_word_to_unk() {
        let v = Vocab::build(["abc"], 10).unwrap();
        assert_eq!(v.segment("abz"), vec![UNK]);
    }

    #[test]
    fn file_round_trip() {
        let v = Vocab::build(["hello world hello"], 32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("[CLS]\n[SEP]\n[PAD]\n[UNK]\n"));
    }
}
