//! Word-level whitespace tokenizer with punctuation isolation.
//!
//! The vocabulary is built from a corpus: tokens are whitespace-separated
//! words, except that sentence punctuation always forms its own single-char
//! token (so `"Beko,"` yields `Beko` and `,`). Ids are assigned by
//! descending frequency (ties lexicographic) after the four specials, which
//! keeps ids stable for a fixed corpus.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

pub const BOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const PAD_ID: u32 = 3;

pub const SPECIALS: [&str; 4] = ["<bos>", "<eos>", "<unk>", "<pad>"];

const PUNCT: [char; 6] = [',', '.', '?', '!', ':', ';'];

/// Split a line into word and punctuation tokens.
pub fn split_words(line: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in line.split_whitespace() {
        let mut rest = chunk;
        while !rest.is_empty() {
            if let Some(pos) = rest.find(|c| PUNCT.contains(&c)) {
                if pos > 0 {
                    out.push(&rest[..pos]);
                }
                let end = pos + rest[pos..].chars().next().map_or(1, char::len_utf8);
                out.push(&rest[pos..end]);
                rest = &rest[end..];
            } else {
                out.push(rest);
                rest = "";
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Tokenizer {
    /// Build the vocabulary from corpus lines, dropping words seen fewer
    /// than `min_count` times (those encode to `<unk>`).
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(lines: I, min_count: usize) -> Tokenizer {
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for line in lines {
            for w in split_words(line) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut by_freq: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|&(_, c)| c as usize >= min_count)
            .collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(by_freq.into_iter().map(|(w, _)| w.to_string()));
        Tokenizer::from_tokens(tokens)
    }

    /// Reconstruct from a saved vocabulary (one token per line, index = id).
    pub fn from_tokens(tokens: Vec<String>) -> Tokenizer {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Tokenizer { tokens, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Encode one line; unknown words map to `<unk>`.
    pub fn encode_line(&self, line: &str) -> Vec<u32> {
        split_words(line)
            .into_iter()
            .map(|w| self.id(w).unwrap_or(UNK_ID))
            .collect()
    }

    /// The id of `name` iff it is exactly one in-vocabulary token.
    pub fn single_token_id(&self, name: &str) -> Result<u32> {
        let ids = self.encode_line(name);
        match ids.as_slice() {
            [id] if *id != UNK_ID => Ok(*id),
            _ => Err(CoreError::ChildNotInVocab(name.to_string())),
        }
    }
}

/// Token sequences ready for the model (no BOS; EOS already appended when
/// the loader was asked to).
#[derive(Debug, Clone)]
pub struct Corpus {
    pub sequences: Vec<Vec<u32>>,
}

impl Corpus {
    pub fn from_lines<'a, I: IntoIterator<Item = &'a str>>(
        tok: &Tokenizer,
        lines: I,
        append_eos: bool,
    ) -> Corpus {
        let mut sequences = Vec::new();
        for line in lines {
            let mut ids = tok.encode_line(line);
            if ids.is_empty() {
                continue;
            }
            if append_eos {
                ids.push(EOS_ID);
            }
            sequences.push(ids);
        }
        Corpus { sequences }
    }

    /// Concatenate all sequences into one stream and cut it into chunks of
    /// `chunk` tokens (the tail keeps its remainder).
    pub fn packed(&self, chunk: usize) -> Corpus {
        let mut stream: Vec<u32> = Vec::new();
        for s in &self.sequences {
            stream.extend_from_slice(s);
        }
        let sequences = stream.chunks(chunk).map(<[u32]>::to_vec).collect();
        Corpus { sequences }
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// `[BOS]` followed by the given ids: the model-input form of a context.
pub fn with_bos(ids: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(ids.len() + 1);
    v.push(BOS_ID);
    v.extend_from_slice(ids);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn punctuation_is_isolated() {
        assert_eq!(split_words("Aba Beko, who naps, is here"), vec![
            "Aba", "Beko", ",", "who", "naps", ",", "is", "here"
        ]);
    }

    #[test]
    fn specials_occupy_fixed_ids() {
        let t = Tokenizer::build(["a b", "b"], 1);
        assert_eq!(t.id("<bos>"), Some(BOS_ID));
        assert_eq!(t.id("<pad>"), Some(PAD_ID));
        // "b" is more frequent than "a", so it gets the first free id
        assert_eq!(t.id("b"), Some(4));
        assert_eq!(t.id("a"), Some(5));
    }

    #[test]
    fn unknown_words_encode_to_unk() {
        let t = Tokenizer::build(["x y z"], 1);
        assert_eq!(t.encode_line("x q"), vec![t.id("x").unwrap(), UNK_ID]);
    }

    #[test]
    fn min_count_filters_rare_words() {
        let t = Tokenizer::build(["a a b"], 2);
        assert!(t.id("a").is_some());
        assert_eq!(t.id("b"), None);
    }

    #[test]
    fn packed_chunks_preserve_stream() {
        let t = Tokenizer::build(["a b c d e"], 1);
        let c = Corpus::from_lines(&t, ["a b c d e"], true);
        let p = c.packed(2);
        assert_eq!(p.sequences.len(), 3);
        assert_eq!(p.token_count(), 6);
    }
}
