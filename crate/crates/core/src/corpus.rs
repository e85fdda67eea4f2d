//! Binary token corpora and their presentation as fixed-length training
//! sequences.
//!
//! # File layout
//!
//! All integers are little-endian.
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `MHC1`                            |
//! | 4      | 4    | format version (`1`)                    |
//! | 8      | 4    | vocab_size                              |
//! | 12     | 4    | token width in bytes (2 or 4)           |
//! | 16     | 4    | eos_id                                  |
//! | 20     | 8    | document count                          |
//! | 28     | 8    | token count                             |
//! | 36     | 8    | index checksum                          |
//! | 44     | 20   | zero padding                            |
//!
//! The token region (`token_count * width` bytes) follows the header, then
//! the index region of `document_count + 1` u64 offsets. The index checksum
//! is the first eight bytes of SHA-256 over the index region, read as a u64.
//!
//! # Training sequences
//!
//! Documents are permuted with [`crate::rng::shuffle`] keyed by the
//! sequence spec's `shuffle_seed`, concatenated with a single `eos_id`
//! between consecutive documents (none before the first or after the last),
//! and the resulting stream is cut into consecutive windows of
//! `sequence_length` tokens. A trailing partial window is not a sequence.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest::{sha256_u64, Fingerprint};
use crate::{rng, Error, Result};

pub type TokenId = u32;

pub const MAGIC: &[u8; 4] = b"MHC1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub vocab_size: u32,
    pub eos_id: TokenId,
}

impl CorpusConfig {
    pub fn new(vocab_size: u32, eos_id: TokenId) -> Result<Self> {
        if eos_id >= vocab_size {
            return Err(Error::invalid(format!(
                "eos_id {eos_id} must be below vocab_size {vocab_size}"
            )));
        }
        Ok(CorpusConfig { vocab_size, eos_id })
    }
}

/// An immutable tokenized corpus: one contiguous token stream plus a
/// document index of monotone offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenCorpus {
    config: CorpusConfig,
    tokens: Vec<TokenId>,
    offsets: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub token_count: u64,
    pub document_count: u64,
    pub sequence_count: u64,
    pub mean_document_length: f64,
}

impl TokenCorpus {
    /// Build a corpus from documents, validating every token.
    pub fn build<D: AsRef<[TokenId]>>(documents: &[D], config: CorpusConfig) -> Result<Self> {
        CorpusConfig::new(config.vocab_size, config.eos_id)?;
        if documents.is_empty() {
            return Err(Error::invalid("corpus needs at least one document"));
        }
        let total: usize = documents.iter().map(|d| d.as_ref().len()).sum();
        let mut tokens = Vec::with_capacity(total);
        let mut offsets = Vec::with_capacity(documents.len() + 1);
        offsets.push(0);
        for (i, doc) in documents.iter().enumerate() {
            let doc = doc.as_ref();
            if doc.is_empty() {
                return Err(Error::invalid(format!("document {i} is empty")));
            }
            if let Some(&token) = doc.iter().find(|&&t| t >= config.vocab_size) {
                return Err(Error::TokenOutOfVocab {
                    document: i,
                    token,
                    vocab_size: config.vocab_size,
                });
            }
            tokens.extend_from_slice(doc);
            offsets.push(tokens.len() as u64);
        }
        Ok(TokenCorpus {
            config,
            tokens,
            offsets,
        })
    }

    /// Assemble a corpus from raw parts and check every invariant.
    pub fn from_parts(tokens: Vec<TokenId>, offsets: Vec<u64>, config: CorpusConfig) -> Result<Self> {
        let corpus = TokenCorpus {
            config,
            tokens,
            offsets,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    /// Check header/index/token invariants.
    pub fn validate(&self) -> Result<()> {
        let CorpusConfig { vocab_size, eos_id } = self.config;
        if eos_id >= vocab_size {
            return Err(Error::integrity("eos_id outside vocabulary"));
        }
        if self.offsets.len() < 2 {
            return Err(Error::integrity("document index is empty"));
        }
        if self.offsets[0] != 0 {
            return Err(Error::integrity("first document offset is not zero"));
        }
        if let Some(i) = self.offsets.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::integrity(format!(
                "document index not strictly increasing at document {i}"
            )));
        }
        if *self.offsets.last().unwrap() != self.tokens.len() as u64 {
            return Err(Error::integrity("last offset does not equal token count"));
        }
        if let Some(pos) = self.tokens.iter().position(|&t| t >= vocab_size) {
            let document = self.offsets.partition_point(|&o| o <= pos as u64) - 1;
            return Err(Error::TokenOutOfVocab {
                document,
                token: self.tokens[pos],
                vocab_size,
            });
        }
        Ok(())
    }

    pub fn config(&self) -> CorpusConfig {
        self.config
    }

    pub fn vocab_size(&self) -> u32 {
        self.config.vocab_size
    }

    pub fn eos_id(&self) -> TokenId {
        self.config.eos_id
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets
    }

    pub fn token_count(&self) -> u64 {
        self.tokens.len() as u64
    }

    pub fn document_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn document(&self, i: usize) -> &[TokenId] {
        &self.tokens[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }

    pub fn documents(&self) -> impl ExactSizeIterator<Item = &[TokenId]> + '_ {
        self.offsets
            .windows(2)
            .map(move |w| &self.tokens[w[0] as usize..w[1] as usize])
    }

    /// Document containing stream position `pos`.
    pub fn document_of(&self, pos: u64) -> usize {
        self.offsets.partition_point(|&o| o <= pos) - 1
    }

    pub fn index_checksum(&self) -> u64 {
        sha256_u64(&offsets_bytes(&self.offsets))
    }

    /// Content fingerprint over configuration, tokens and index.
    pub fn fingerprint(&self) -> u64 {
        Fingerprint::new()
            .u32s(&[self.config.vocab_size, self.config.eos_id])
            .u32s(&self.tokens)
            .u64s(&self.offsets)
            .finish()
    }

    pub fn stats(&self, spec: &SequenceSpec) -> Result<CorpusStats> {
        self.validate()?;
        spec.validate()?;
        let document_count = self.document_count() as u64;
        let token_count = self.token_count();
        Ok(CorpusStats {
            token_count,
            document_count,
            sequence_count: stream_len(token_count, document_count) / spec.sequence_length as u64,
            mean_document_length: token_count as f64 / document_count as f64,
        })
    }

    /// New corpus without the documents whose ordinals are in `remove`.
    pub fn without_documents(&self, remove: &BTreeSet<usize>) -> Result<Self> {
        let kept: Vec<&[TokenId]> = self
            .documents()
            .enumerate()
            .filter(|(i, _)| !remove.contains(i))
            .map(|(_, d)| d)
            .collect();
        if kept.is_empty() {
            return Err(Error::invalid("removal would leave the corpus empty"));
        }
        TokenCorpus::build(&kept, self.config)
    }

    /// The leading documents whose cumulative length stays within
    /// `max_tokens` (at least one document).
    pub fn prefix_by_tokens(&self, max_tokens: u64) -> Self {
        let mut n = self.offsets.partition_point(|&o| o <= max_tokens) - 1;
        n = n.max(1);
        let end = self.offsets[n] as usize;
        TokenCorpus {
            config: self.config,
            tokens: self.tokens[..end].to_vec(),
            offsets: self.offsets[..=n].to_vec(),
        }
    }

    /// Serialize with the given token width (2 or 4 bytes).
    pub fn write_with_width<W: Write>(&self, out: &mut W, token_width: u32) -> Result<()> {
        match token_width {
            4 => {}
            2 if self.config.vocab_size <= 1 << 16 => {}
            2 => {
                return Err(Error::invalid(format!(
                    "vocab_size {} does not fit 2-byte tokens",
                    self.config.vocab_size
                )))
            }
            w => return Err(Error::invalid(format!("unsupported token width {w}"))),
        }
        let index = offsets_bytes(&self.offsets);
        let mut header = [0u8; HEADER_LEN];
        header[0..4].copy_from_slice(MAGIC);
        header[4..8].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        header[8..12].copy_from_slice(&self.config.vocab_size.to_le_bytes());
        header[12..16].copy_from_slice(&token_width.to_le_bytes());
        header[16..20].copy_from_slice(&self.config.eos_id.to_le_bytes());
        header[20..28].copy_from_slice(&(self.document_count() as u64).to_le_bytes());
        header[28..36].copy_from_slice(&self.token_count().to_le_bytes());
        header[36..44].copy_from_slice(&sha256_u64(&index).to_le_bytes());
        out.write_all(&header)?;
        for chunk in self.tokens.chunks(1 << 16) {
            let bytes: Vec<u8> = if token_width == 4 {
                chunk.iter().flat_map(|t| t.to_le_bytes()).collect()
            } else {
                chunk.iter().flat_map(|&t| (t as u16).to_le_bytes()).collect()
            };
            out.write_all(&bytes)?;
        }
        out.write_all(&index)?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        self.write_with_width(out, 4)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.tokens.len() * 4 + self.offsets.len() * 8);
        self.write_to(&mut buf).expect("in-memory write");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::integrity("file shorter than corpus header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::integrity("bad corpus magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(Error::integrity(format!("unsupported corpus version {version}")));
        }
        let config = CorpusConfig {
            vocab_size: u32_at(8),
            eos_id: u32_at(16),
        };
        let width = u32_at(12) as usize;
        if width != 2 && width != 4 {
            return Err(Error::integrity(format!("unsupported token width {width}")));
        }
        let doc_count = u64_at(20) as usize;
        let token_count = u64_at(28) as usize;
        let checksum = u64_at(36);
        let token_bytes = token_count
            .checked_mul(width)
            .ok_or_else(|| Error::integrity("token count overflow"))?;
        let index_start = HEADER_LEN + token_bytes;
        let index_len = (doc_count + 1) * 8;
        if bytes.len() != index_start + index_len {
            return Err(Error::integrity(format!(
                "file length {} does not match header (expected {})",
                bytes.len(),
                index_start + index_len
            )));
        }
        let index = &bytes[index_start..];
        if sha256_u64(index) != checksum {
            return Err(Error::integrity("document index checksum mismatch"));
        }
        let region = &bytes[HEADER_LEN..index_start];
        let tokens: Vec<TokenId> = if width == 4 {
            region
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        } else {
            region
                .chunks_exact(2)
                .map(|c| u32::from(u16::from_le_bytes(c.try_into().unwrap())))
                .collect()
        };
        let offsets = index
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        TokenCorpus::from_parts(tokens, offsets, config)
    }
}

fn offsets_bytes(offsets: &[u64]) -> Vec<u8> {
    offsets.iter().flat_map(|o| o.to_le_bytes()).collect()
}

/// Length of the packed stream: tokens plus one separator between documents.
pub fn stream_len(token_count: u64, document_count: u64) -> u64 {
    token_count + document_count.saturating_sub(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub sequence_length: usize,
    pub shuffle_seed: u64,
    /// Sequences per optimizer step; only used for reporting.
    pub batch_size: usize,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        SequenceSpec {
            sequence_length: 2048,
            shuffle_seed: 0,
            batch_size: 1024,
        }
    }
}

impl SequenceSpec {
    pub fn new(sequence_length: usize, shuffle_seed: u64) -> Self {
        SequenceSpec {
            sequence_length,
            shuffle_seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequence_length < 8 {
            return Err(Error::invalid(format!(
                "sequence_length {} is below the minimum of 8",
                self.sequence_length
            )));
        }
        Ok(())
    }
}

/// One training sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceView {
    pub index: u64,
    pub tokens: Vec<TokenId>,
    /// Positions of the EOS separators placed between documents.
    pub doc_boundaries: Vec<usize>,
}

/// Precomputed document permutation and stream layout for one
/// `(corpus, spec)` pair. Cheap to query from many threads.
#[derive(Debug, Clone)]
pub struct Sequencer<'a> {
    corpus: &'a TokenCorpus,
    spec: SequenceSpec,
    order: Vec<u32>,
    starts: Vec<u64>,
    stream_len: u64,
}

impl<'a> Sequencer<'a> {
    pub fn new(corpus: &'a TokenCorpus, spec: SequenceSpec) -> Result<Self> {
        spec.validate()?;
        let n = corpus.document_count();
        let mut order: Vec<u32> = (0..n as u32).collect();
        rng::shuffle(&mut rng::seeded(spec.shuffle_seed), &mut order);
        let mut starts = Vec::with_capacity(n);
        let mut pos = 0u64;
        for &d in &order {
            starts.push(pos);
            pos += corpus.document(d as usize).len() as u64 + 1;
        }
        Ok(Sequencer {
            corpus,
            spec,
            order,
            starts,
            stream_len: pos - 1,
        })
    }

    pub fn corpus(&self) -> &'a TokenCorpus {
        self.corpus
    }

    pub fn spec(&self) -> &SequenceSpec {
        &self.spec
    }

    /// Shuffled document order.
    pub fn order(&self) -> &[u32] {
        &self.order
    }

    pub fn stream_len(&self) -> u64 {
        self.stream_len
    }

    pub fn sequence_count(&self) -> u64 {
        self.stream_len / self.spec.sequence_length as u64
    }

    pub fn sequence_at(&self, index: u64) -> Result<SequenceView> {
        let count = self.sequence_count();
        if index >= count {
            return Err(Error::invalid(format!(
                "sequence index {index} out of range ({count} sequences)"
            )));
        }
        let len = self.spec.sequence_length;
        let mut tokens = Vec::with_capacity(len);
        let mut doc_boundaries = Vec::new();
        let mut pos = index * len as u64;
        let mut k = self.starts.partition_point(|&s| s <= pos) - 1;
        while tokens.len() < len {
            let doc = self.corpus.document(self.order[k] as usize);
            let start = self.starts[k];
            let end = start + doc.len() as u64;
            if pos < end {
                let from = (pos - start) as usize;
                let take = (doc.len() - from).min(len - tokens.len());
                tokens.extend_from_slice(&doc[from..from + take]);
                pos += take as u64;
            } else {
                doc_boundaries.push(tokens.len());
                tokens.push(self.corpus.eos_id());
                pos += 1;
                k += 1;
            }
        }
        Ok(SequenceView {
            index,
            tokens,
            doc_boundaries,
        })
    }
}

/// Convenience wrapper building a one-off [`Sequencer`].
pub fn sequence_at(corpus: &TokenCorpus, spec: SequenceSpec, index: u64) -> Result<SequenceView> {
    Sequencer::new(corpus, spec)?.sequence_at(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> CorpusConfig {
        CorpusConfig::new(50304, 0).unwrap()
    }

    #[test]
    fn three_documents_have_expected_index() {
        let docs = vec![vec![1u32; 5], vec![2; 7], vec![3; 2]];
        let c = TokenCorpus::build(&docs, cfg()).unwrap();
        assert_eq!(c.token_count(), 14);
        assert_eq!(c.offsets(), &[0, 5, 12, 14]);
        let stats = c.stats(&SequenceSpec::new(8, 0)).unwrap();
        assert_eq!(stats.document_count, 3);
        assert_eq!(stats.token_count, 14);
        // 14 tokens + 2 separators = 16 -> two sequences of 8
        assert_eq!(stats.sequence_count, 2);
    }

    #[test]
    fn out_of_vocab_names_document() {
        let docs = vec![vec![1u32, 2], vec![3, 50304]];
        match TokenCorpus::build(&docs, cfg()) {
            Err(Error::TokenOutOfVocab { document, token, .. }) => {
                assert_eq!(document, 1);
                assert_eq!(token, 50304);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_inputs_rejected() {
        let none: Vec<Vec<u32>> = vec![];
        assert!(TokenCorpus::build(&none, cfg()).is_err());
        assert!(TokenCorpus::build(&[vec![1u32], vec![]], cfg()).is_err());
    }

    #[test]
    fn two_byte_width_round_trips() {
        let docs = vec![vec![1u32, 2, 3], vec![4, 5]];
        let c = TokenCorpus::build(&docs, cfg()).unwrap();
        let mut buf = Vec::new();
        c.write_with_width(&mut buf, 2).unwrap();
        assert_eq!(buf.len(), HEADER_LEN + 5 * 2 + 3 * 8);
        assert_eq!(TokenCorpus::from_bytes(&buf).unwrap(), c);
    }

    #[test]
    fn corrupted_index_is_detected() {
        let docs = vec![vec![1u32, 2, 3], vec![4, 5]];
        let mut bytes = TokenCorpus::build(&docs, cfg()).unwrap().to_bytes();
        let n = bytes.len();
        bytes[n - 9] ^= 1;
        let err = TokenCorpus::from_bytes(&bytes).unwrap_err();
        assert_eq!(err.kind(), crate::ErrorKind::Integrity);
    }

    #[test]
    fn single_long_document_layout() {
        let doc: Vec<u32> = (1..=4095).collect();
        let c = TokenCorpus::build(&[doc.clone()], cfg()).unwrap();
        let seq = Sequencer::new(&c, SequenceSpec::new(2048, 9)).unwrap();
        assert_eq!(seq.sequence_count(), 1);
        let s0 = seq.sequence_at(0).unwrap();
        assert_eq!(s0.tokens, doc[..2048]);
        assert!(s0.doc_boundaries.is_empty());
        assert!(seq.sequence_at(1).is_err());
    }

    #[test]
    fn sequences_are_deterministic() {
        let docs: Vec<Vec<u32>> = (1..40u32).map(|i| vec![i; (i % 7 + 1) as usize]).collect();
        let c = TokenCorpus::build(&docs, cfg()).unwrap();
        let spec = SequenceSpec::new(16, 1234);
        let a = sequence_at(&c, spec, 3).unwrap();
        let b = sequence_at(&c, spec, 3).unwrap();
        assert_eq!(a, b);
        for &p in &a.doc_boundaries {
            assert_eq!(a.tokens[p], 0);
        }
    }

    #[test]
    fn prefix_keeps_whole_documents() {
        let docs = vec![vec![1u32; 5], vec![2; 7], vec![3; 2]];
        let c = TokenCorpus::build(&docs, cfg()).unwrap();
        assert_eq!(c.prefix_by_tokens(12).document_count(), 2);
        assert_eq!(c.prefix_by_tokens(11).document_count(), 1);
        assert_eq!(c.prefix_by_tokens(1).document_count(), 1);
    }
}
