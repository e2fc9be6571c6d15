//! BERT-family tokenizer: basic whitespace/punctuation splitting followed by
//! greedy longest-match WordPiece.
//!
//! Lowercasing follows the checkpoint's `do_lower_case`; accent stripping is
//! not applied, so cased checkpoints are the reference configuration.

use std::collections::HashMap;

use crate::error::{Error, Result};

const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone)]
pub struct WordPieceTokenizer {
    vocab: Vec<String>,
    ids: HashMap<String, u32>,
    do_lower_case: bool,
    unk_id: u32,
    cls_id: u32,
    sep_id: u32,
    mask_id: u32,
}

impl WordPieceTokenizer {
    pub fn new(vocab: Vec<String>, do_lower_case: bool) -> Result<Self> {
        let ids: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        let special = |name: &str| {
            ids.get(name)
                .copied()
                .ok_or_else(|| Error::Load(format!("vocabulary lacks the {name} token")))
        };
        Ok(Self {
            unk_id: special("[UNK]")?,
            cls_id: special("[CLS]")?,
            sep_id: special("[SEP]")?,
            mask_id: special("[MASK]")?,
            vocab,
            ids,
            do_lower_case,
        })
    }

    pub fn from_vocab_file(path: &std::path::Path, do_lower_case: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Load(format!("cannot read vocabulary {}: {e}", path.display())))?;
        let vocab: Vec<String> = text.lines().map(|l| l.trim_end().to_string()).collect();
        if vocab.is_empty() {
            return Err(Error::Load(format!("empty vocabulary {}", path.display())));
        }
        Self::new(vocab, do_lower_case)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn mask_id(&self) -> u32 {
        self.mask_id
    }

    pub fn cls_id(&self) -> u32 {
        self.cls_id
    }

    pub fn sep_id(&self) -> u32 {
        self.sep_id
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    /// WordPiece ids for a text segment (no special tokens).
    pub fn tokenize_segment(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in self.basic_tokenize(text) {
            out.extend(self.wordpiece(&word));
        }
        out
    }

    /// Ids for one word treated as a standalone target; errors unless it maps
    /// to exactly one piece have to be raised by the caller.
    pub fn tokenize_word(&self, word: &str) -> Vec<u32> {
        self.tokenize_segment(word)
    }

    fn basic_tokenize(&self, text: &str) -> Vec<String> {
        let mut words = Vec::new();
        let mut current = String::new();
        for c in text.chars() {
            if c.is_control() && c != '\t' && c != '\n' && c != '\r' {
                continue;
            }
            if c.is_whitespace() {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
            } else if is_punctuation(c) || is_cjk(c) {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(c.to_string());
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
        if self.do_lower_case {
            words = words.into_iter().map(|w| w.to_lowercase()).collect();
        }
        words
    }

    fn wordpiece(&self, word: &str) -> Vec<u32> {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            return vec![self.unk_id];
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut matched = None;
            while start < end {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece = format!("##{piece}");
                }
                if let Some(&id) = self.ids.get(&piece) {
                    matched = Some(id);
                    break;
                }
                end -= 1;
            }
            match matched {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => return vec![self.unk_id],
            }
        }
        pieces
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '…' | '«'
                | '»'
                | '\u{2018}'
                | '\u{2019}'
                | '\u{201C}'
                | '\u{201D}'
                | '–'
                | '—'
                | '¿'
                | '¡'
                | '§'
                | '·'
        )
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF
        | 0x3400..=0x4DBF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2B73F
        | 0xF900..=0xFAFF
        | 0x3040..=0x30FF
        | 0xAC00..=0xD7AF)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> WordPieceTokenizer {
        let vocab: Vec<String> = [
            "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "the", "capital", "of", "france", "is",
            "paris", "par", "##is", "##s", ",", ".", "!", "?", "'",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        WordPieceTokenizer::new(vocab, true).unwrap()
    }

    #[test]
    fn splits_punctuation_and_lowercases() {
        let t = tiny();
        let ids = t.tokenize_segment("The capital of France is");
        assert_eq!(ids, vec![5, 6, 7, 8, 9]);
        let ids = t.tokenize_segment("france, is.");
        assert_eq!(ids, vec![8, 14, 9, 15]);
    }

    #[test]
    fn greedy_wordpiece_prefers_longest_match() {
        let t = tiny();
        // "paris" exists whole, so it wins over "par" + "##is".
        assert_eq!(t.tokenize_word("paris"), vec![10]);
        // Greedy resumes after the longest prefix: "pariss" = "paris" + "##s".
        assert_eq!(t.tokenize_word("pariss"), vec![10, 13]);
        // "pars" = "par" + "##s".
        assert_eq!(t.tokenize_word("pars"), vec![11, 13]);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let t = tiny();
        assert_eq!(t.tokenize_word("zzz"), vec![1]);
    }

    #[test]
    fn missing_specials_fail_construction() {
        let vocab = vec!["a".to_string(), "b".to_string()];
        assert!(WordPieceTokenizer::new(vocab, false).is_err());
    }
}
