//! Seeded synthetic text source for desk-scale experiments.
//!
//! A first-order Markov chain: every token has a fixed list of `branching`
//! successors, drawn uniformly from the vocabulary, with Zipf transition
//! weights. Documents start from a Zipf-weighted token. Short contexts recur
//! across the corpus, while long n-grams are almost always unique to one
//! passage. Token 0 is EOS and never generated.

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusConfig, TokenCorpus, TokenId};
use crate::{par, rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub vocab_size: u32,
    pub branching: usize,
    pub zipf_exponent: f64,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            vocab_size: 2048,
            branching: 24,
            zipf_exponent: 1.1,
            min_doc_len: 64,
            max_doc_len: 1024,
        }
    }
}

pub const SYNTH_EOS: TokenId = 0;

/// Cumulative weights for O(log n) sampling.
#[derive(Debug, Clone)]
struct Cumulative(Vec<f64>);

impl Cumulative {
    fn new(weights: impl Iterator<Item = f64>) -> Self {
        let mut acc = 0.0;
        Cumulative(
            weights
                .map(|w| {
                    acc += w;
                    acc
                })
                .collect(),
        )
    }

    fn sample(&self, rng: &mut rng::Rng) -> usize {
        let total = *self.0.last().expect("non-empty");
        let x = rng::unit(rng) * total;
        self.0.partition_point(|&c| c <= x).min(self.0.len() - 1)
    }
}

#[derive(Debug, Clone)]
pub struct MarkovSource {
    config: SourceConfig,
    start: Cumulative,
    successors: Vec<Vec<TokenId>>,
    transition: Cumulative,
}

impl MarkovSource {
    pub fn new(config: SourceConfig, seed: u64) -> Result<Self> {
        let v = config.vocab_size;
        if v < 3 {
            return Err(Error::invalid("synthetic vocabulary needs at least 3 tokens"));
        }
        if config.branching == 0 || config.branching as u32 > v - 1 {
            return Err(Error::invalid("branching must be in 1..vocab_size"));
        }
        if config.min_doc_len == 0 || config.min_doc_len > config.max_doc_len {
            return Err(Error::invalid("document length range is empty"));
        }
        if !(config.zipf_exponent.is_finite() && config.zipf_exponent >= 0.0) {
            return Err(Error::invalid("zipf exponent must be non-negative"));
        }
        let s = config.zipf_exponent;
        // token t (1..V) has Zipf rank t
        let start = Cumulative::new((1..v).map(|t| (t as f64).powf(-s)));
        let mut r = rng::seeded(rng::derive_seed(seed, "successors"));
        let successors: Vec<Vec<TokenId>> = (0..v)
            .map(|_| {
                let mut next: Vec<TokenId> = Vec::with_capacity(config.branching);
                while next.len() < config.branching {
                    let t = 1 + rng::below(&mut r, u64::from(v) - 1) as TokenId;
                    if !next.contains(&t) {
                        next.push(t);
                    }
                }
                next
            })
            .collect();
        let transition = Cumulative::new((1..=config.branching).map(|i| (i as f64).powf(-s)));
        Ok(MarkovSource {
            config,
            start,
            successors,
            transition,
        })
    }

    pub fn config(&self) -> &SourceConfig {
        &self.config
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            vocab_size: self.config.vocab_size,
            eos_id: SYNTH_EOS,
        }
    }

    pub fn passage(&self, len: usize, rng: &mut rng::Rng) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let mut t = self.start.sample(rng) as TokenId + 1;
        out.push(t);
        while out.len() < len {
            t = self.successors[t as usize][self.transition.sample(rng)];
            out.push(t);
        }
        out
    }

    /// Documents totalling at least `tokens` tokens. Document `i` is drawn
    /// from stream `i`, so a shorter request yields a prefix of a longer
    /// one.
    pub fn documents(&self, tokens: u64, seed: u64) -> Vec<Vec<TokenId>> {
        let (lo, hi) = (self.config.min_doc_len as u64, self.config.max_doc_len as u64);
        let mut lens = Vec::new();
        let mut total = 0u64;
        while total < tokens {
            let mut r = rng::seeded_stream(seed, lens.len() as u64);
            let len = lo + rng::below(&mut r, hi - lo + 1);
            lens.push(len as usize);
            total += len;
        }
        par::map_range(lens.len(), |i| {
            let mut r = rng::seeded_stream(seed, i as u64);
            let _ = rng::below(&mut r, hi - lo + 1);
            self.passage(lens[i], &mut r)
        })
    }

    pub fn corpus(&self, tokens: u64, seed: u64) -> Result<TokenCorpus> {
        TokenCorpus::build(&self.documents(tokens, seed), self.corpus_config())
    }
}

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// A pronounceable, unique word per token id.
pub fn word(token: TokenId) -> String {
    if token == SYNTH_EOS {
        return "<eos>".to_string();
    }
    let mut n = token as usize;
    let mut w = String::new();
    loop {
        let syl = n % 80;
        w.push_str(ONSETS[syl / 5]);
        w.push_str(VOWELS[syl % 5]);
        n /= 80;
        if n == 0 {
            break;
        }
    }
    w
}

pub fn render(tokens: &[TokenId]) -> String {
    tokens.iter().map(|&t| word(t)).collect::<Vec<_>>().join(" ")
}
