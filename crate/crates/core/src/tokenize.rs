//! Tokenizer boundary and document ingestion.
//!
//! Two tokenizers are built in: a byte tokenizer (ids 0..=255 are bytes,
//! 256 is EOS) and a whitespace word tokenizer with a learned vocabulary.
//! Anything else is expected to arrive pre-tokenized as JSONL
//! `{"id": ..., "tokens": [...]}`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusConfig, TokenId};
use crate::{jsonl, Error, Result};

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<TokenId>;
    fn decode(&self, tokens: &[TokenId]) -> String;
    fn vocab_size(&self) -> u32;
    fn eos_id(&self) -> TokenId;

    fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            vocab_size: self.vocab_size(),
            eos_id: self.eos_id(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(TokenId::from).collect()
    }

    fn decode(&self, tokens: &[TokenId]) -> String {
        let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn vocab_size(&self) -> u32 {
        257
    }

    fn eos_id(&self) -> TokenId {
        256
    }
}

/// Splits on ASCII whitespace. Id 0 is EOS, id 1 is the unknown word, and
/// words receive ids in first-seen order from 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WhitespaceTokenizer {
    words: Vec<String>,
    ids: HashMap<String, TokenId>,
}

pub const EOS_WORD: &str = "<eos>";
pub const UNK_WORD: &str = "<unk>";

impl WhitespaceTokenizer {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tok = WhitespaceTokenizer::from_words(Vec::new());
        for text in texts {
            for word in text.split_ascii_whitespace() {
                if !tok.ids.contains_key(word) {
                    tok.ids.insert(word.to_string(), tok.words.len() as TokenId);
                    tok.words.push(word.to_string());
                }
            }
        }
        tok
    }

    /// Vocabulary from an explicit word list (specials are prepended).
    pub fn from_words(words: Vec<String>) -> Self {
        let mut all = vec![EOS_WORD.to_string(), UNK_WORD.to_string()];
        all.extend(words.into_iter().filter(|w| w != EOS_WORD && w != UNK_WORD));
        let ids = all
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        WhitespaceTokenizer { words: all, ids }
    }

    /// One word per line, in id order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.words.join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        if words.get(0).map(String::as_str) != Some(EOS_WORD) {
            return Err(Error::invalid("vocabulary file must start with <eos>"));
        }
        Ok(WhitespaceTokenizer::from_words(words))
    }
}

impl Tokenizer for WhitespaceTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_ascii_whitespace()
            .map(|w| self.ids.get(w).copied().unwrap_or(1))
            .collect()
    }

    fn decode(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.words.get(t as usize).map(String::as_str).unwrap_or(UNK_WORD))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn vocab_size(&self) -> u32 {
        self.words.len() as u32
    }

    fn eos_id(&self) -> TokenId {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextDocument {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedDocument {
    pub id: String,
    pub tokens: Vec<TokenId>,
}

pub fn read_text_documents(path: impl AsRef<Path>) -> Result<Vec<TextDocument>> {
    jsonl::read(path)
}

pub fn read_tokenized_documents(path: impl AsRef<Path>) -> Result<Vec<TokenizedDocument>> {
    jsonl::read(path)
}

pub fn tokenize_documents(docs: &[TextDocument], tokenizer: &dyn Tokenizer) -> Vec<TokenizedDocument> {
    docs.iter()
        .map(|d| TokenizedDocument {
            id: d.id.clone(),
            tokens: tokenizer.encode(&d.text),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitespace_round_trip() {
        let tok = WhitespaceTokenizer::fit(["a b a", "c b"]);
        assert_eq!(tok.vocab_size(), 5);
        let ids = tok.encode("a b c d");
        assert_eq!(ids, vec![2, 3, 4, 1]);
        assert_eq!(tok.decode(&ids[..3]), "a b c");
    }

    #[test]
    fn whitespace_save_load() {
        let dir = tempfile::tempdir().unwrap();
        let tok = WhitespaceTokenizer::fit(["x y z"]);
        let p = dir.path().join("vocab.txt");
        tok.save(&p).unwrap();
        assert_eq!(WhitespaceTokenizer::load(&p).unwrap(), tok);
    }

    #[test]
    fn byte_tokenizer() {
        let t = ByteTokenizer;
        assert_eq!(t.encode("hi"), vec![104, 105]);
        assert_eq!(t.decode(&[104, 105, 256]), "hi");
    }
}
