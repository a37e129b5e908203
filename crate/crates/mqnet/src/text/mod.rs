//! Title tokenization, whole-word masking, encoding, and the pretraining
//! objectives.
//!
//! Titles are whitespace-separated words; each word maps to a run of
//! tokens (from the vocab's segmentation table, or one token per
//! character as fallback) and that run is the unit whole-word masking
//! operates on.

pub mod encoder;
pub mod mask;
pub mod pretrain;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{MqError, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const UNK: u32 = 2;

const RESERVED: [&str; 3] = ["<pad>", "<mask>", "<unk>"];

/// Token inventory plus the word → token-run segmentation table.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    map: HashMap<String, u32>,
    seg: HashMap<String, Vec<String>>,
}

impl Vocab {
    pub fn new(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            if RESERVED.contains(&t.as_str()) {
                return Err(MqError::Data(format!("token {t} shadows a reserved token")));
            }
            all.push(t);
        }
        let mut map = HashMap::new();
        for (i, t) in all.iter().enumerate() {
            if map.insert(t.clone(), i as u32).is_some() {
                return Err(MqError::Data(format!("duplicate token {t}")));
            }
        }
        Ok(Vocab {
            tokens: all,
            map,
            seg: HashMap::new(),
        })
    }

    /// Lowercase letters and digits; enough for the synthetic corpus.
    pub fn builtin() -> Self {
        let chars = ('a'..='z').chain('0'..='9').map(|c| c.to_string());
        Vocab::new(chars).expect("builtin vocab is well-formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.map.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn add_segmentation(&mut self, word: &str, tokens: Vec<String>) {
        self.seg.insert(word.to_string(), tokens);
    }

    /// One token per line, line number = id; reserved tokens lead.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len()
            || lines[..RESERVED.len()] != RESERVED[..]
        {
            return Err(MqError::Data(format!(
                "vocab file {} must start with {:?}",
                path.display(),
                RESERVED
            )));
        }
        Vocab::new(lines[RESERVED.len()..].iter().map(|s| s.to_string()))
    }

    /// Tab-separated `word<TAB>tok tok ...`, one word per line.
    pub fn save_segmentation(&self, path: &Path) -> Result<()> {
        let mut words: Vec<&String> = self.seg.keys().collect();
        words.sort();
        let mut out = String::new();
        for w in words {
            out.push_str(w);
            out.push('\t');
            out.push_str(&self.seg[w].join(" "));
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load_segmentation(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (word, toks) = line.split_once('\t').ok_or_else(|| {
                MqError::Data(format!("segmentation line without tab: {line}"))
            })?;
            self.seg
                .insert(word.to_string(), toks.split(' ').map(|s| s.to_string()).collect());
        }
        Ok(())
    }

    fn word_tokens(&self, word: &str) -> Vec<String> {
        match self.seg.get(word) {
            Some(toks) => toks.clone(),
            None => word.chars().map(|c| c.to_string()).collect(),
        }
    }
}

/// A title padded to fixed length with word-span bookkeeping for WWM.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub valid: Vec<bool>,
    /// Half-open (start, end) token ranges, one per whole word.
    pub word_spans: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.valid[i]).collect()
    }

    /// Same sequence with substituted ids (used for corrupted inputs).
    pub fn with_ids(&self, ids: Vec<u32>) -> TokenSequence {
        debug_assert_eq!(ids.len(), self.ids.len());
        TokenSequence {
            ids,
            valid: self.valid.clone(),
            word_spans: self.word_spans.clone(),
        }
    }
}

/// Lowercases, splits on whitespace, truncates at `t_len`, pads the tail.
/// Unknown characters map to UNK; an empty title yields an all-PAD sequence.
pub fn tokenize(title: &str, vocab: &Vocab, t_len: usize) -> TokenSequence {
    let mut ids = Vec::with_capacity(t_len);
    let mut spans = Vec::new();
    'words: for word in title.to_lowercase().split_whitespace() {
        let start = ids.len();
        for tok in vocab.word_tokens(word) {
            if ids.len() == t_len {
                if ids.len() > start {
                    spans.push((start, ids.len()));
                }
                break 'words;
            }
            ids.push(vocab.id(&tok).unwrap_or(UNK));
        }
        if ids.len() > start {
            spans.push((start, ids.len()));
        }
        if ids.len() == t_len {
            break;
        }
    }
    let filled = ids.len();
    ids.resize(t_len, PAD);
    let mut valid = vec![true; filled];
    valid.resize(t_len, false);
    TokenSequence {
        ids,
        valid,
        word_spans: spans,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_title_is_all_pad() {
        let v = Vocab::builtin();
        let seq = tokenize("", &v, 5);
        assert_eq!(seq.ids, vec![PAD; 5]);
        assert!(seq.valid.iter().all(|&b| !b));
        assert!(seq.word_spans.is_empty());
    }

    #[test]
    fn short_title_pads_tail() {
        let v = Vocab::builtin();
        let seq = tokenize("abc", &v, 5);
        assert_eq!(seq.valid_count(), 3);
        assert!(!seq.valid[3] && !seq.valid[4]);
        assert_eq!(seq.ids[3], PAD);
        assert_eq!(seq.word_spans, vec![(0, 3)]);
    }

    #[test]
    fn long_title_truncates_at_capacity() {
        let v = Vocab::builtin();
        let title = vec!["abcd"; 30].join(" "); // 120 tokens
        let seq = tokenize(&title, &v, 100);
        assert_eq!(seq.valid_count(), 100);
        assert_eq!(seq.word_spans.len(), 25);
        assert_eq!(*seq.word_spans.last().unwrap(), (96, 100));
    }

    #[test]
    fn unknown_chars_map_to_unk() {
        let v = Vocab::builtin();
        let seq = tokenize("a者b", &v, 4);
        assert_eq!(seq.ids[1], UNK);
        assert_eq!(seq.valid_count(), 3);
    }

    #[test]
    fn segmentation_table_overrides_chars() {
        let mut v = Vocab::builtin();
        v.add_segmentation("red", vec!["r".into(), "ed".into()]);
        // "ed" is not a vocab token, so it maps to UNK, but the span is 2 long
        let seq = tokenize("red", &v, 4);
        assert_eq!(seq.valid_count(), 2);
        assert_eq!(seq.word_spans, vec![(0, 2)]);
    }

    #[test]
    fn spans_are_disjoint_and_valid_only() {
        let v = Vocab::builtin();
        let seq = tokenize("red disc zx4", &v, 12);
        let mut seen = vec![false; seq.len()];
        for &(s, e) in &seq.word_spans {
            for i in s..e {
                assert!(seq.valid[i]);
                assert!(!seen[i], "span overlap at {i}");
                seen[i] = true;
            }
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::builtin();
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(loaded.len(), v.len());
        assert_eq!(loaded.id("a"), v.id("a"));
        assert_eq!(loaded.id("<mask>"), Some(MASK));
    }

    #[test]
    fn segmentation_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.tsv");
        let mut v = Vocab::builtin();
        v.add_segmentation("disc", vec!["d".into(), "i".into(), "s".into(), "c".into()]);
        v.save_segmentation(&path).unwrap();
        let mut v2 = Vocab::builtin();
        v2.load_segmentation(&path).unwrap();
        assert_eq!(v2.seg["disc"], v.seg["disc"]);
    }
}
