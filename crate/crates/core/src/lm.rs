//! Token scoring: the per-token log-likelihood exchange format, a remote
//! scoring client, and a count-based n-gram reference LM.
//!
//! # Remote scoring protocol
//!
//! Scoring is a single `POST {base}/score` with body
//!
//! ```json
//! {"sequences": [{"sequence_id": 7, "tokens": [12, 5, 9]}], "with_moments": true}
//! ```
//!
//! and response
//!
//! ```json
//! {"scores": [{"sequence_id": 7, "position": 0, "token_id": 12,
//!              "logp": -3.2, "mu": -4.1, "sigma": 1.3}, ...]}
//! ```
//!
//! One entry per input token. Position `i` is scored given positions `< i`.
//! `mu`/`sigma` are optional. Greedy generation uses `POST {base}/generate`
//! with `{"prefix": [...], "n": 100}` and response `{"tokens": [...]}`.
//! A bearer token is read from `MEMAUDIT_API_KEY` when set.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenCorpus, TokenId};
use crate::decontam::SuffixArray;
use crate::insert::PerturbedCorpusView;
use crate::{digest, par, Error, Result};

/// Floor applied to `sigma`.
pub const SIGMA_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub sequence_id: u64,
    pub position: u32,
    pub token_id: TokenId,
    /// Natural-log probability of `token_id` at `position`.
    pub logp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

impl TokenScore {
    fn check(&self) -> std::result::Result<(), String> {
        if !self.logp.is_finite() || self.logp > 0.0 {
            return Err(format!("logp {} at position {} is not a finite value <= 0", self.logp, self.position));
        }
        if let Some(s) = self.sigma {
            if !(s.is_finite() && s > 0.0) {
                return Err(format!("sigma {s} at position {} is not positive", self.position));
            }
        }
        if matches!(self.mu, Some(m) if !m.is_finite()) {
            return Err(format!("mu at position {} is not finite", self.position));
        }
        Ok(())
    }
}

pub const SCORES_MAGIC: &[u8; 4] = b"MHS1";

/// Packed layout: magic, u64 count, then per score `sequence_id u64,
/// position u32, token u32, logp f32, mu f32, sigma f32, mask u8`
/// (bit 0 = mu present, bit 1 = sigma present), little-endian.
pub fn write_scores_packed<W: Write>(out: &mut W, scores: &[TokenScore]) -> Result<()> {
    out.write_all(SCORES_MAGIC)?;
    out.write_all(&(scores.len() as u64).to_le_bytes())?;
    for s in scores {
        out.write_all(&s.sequence_id.to_le_bytes())?;
        out.write_all(&s.position.to_le_bytes())?;
        out.write_all(&s.token_id.to_le_bytes())?;
        out.write_all(&(s.logp as f32).to_le_bytes())?;
        out.write_all(&(s.mu.unwrap_or(0.0) as f32).to_le_bytes())?;
        out.write_all(&(s.sigma.unwrap_or(0.0) as f32).to_le_bytes())?;
        let mask = u8::from(s.mu.is_some()) | (u8::from(s.sigma.is_some()) << 1);
        out.write_all(&[mask])?;
    }
    Ok(())
}

pub fn read_scores_packed<R: Read>(input: &mut R) -> Result<Vec<TokenScore>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    const REC: usize = 8 + 4 + 4 + 4 * 3 + 1;
    if bytes.len() < 12 || &bytes[..4] != SCORES_MAGIC {
        return Err(Error::integrity("not a packed score file"));
    }
    let n = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + n * REC {
        return Err(Error::integrity("packed score file has the wrong length"));
    }
    let f = |b: &[u8]| f64::from(f32::from_le_bytes(b.try_into().unwrap()));
    Ok(bytes[12..]
        .chunks_exact(REC)
        .map(|r| {
            let mask = r[28];
            TokenScore {
                sequence_id: u64::from_le_bytes(r[0..8].try_into().unwrap()),
                position: u32::from_le_bytes(r[8..12].try_into().unwrap()),
                token_id: u32::from_le_bytes(r[12..16].try_into().unwrap()),
                logp: f(&r[16..20]),
                mu: (mask & 1 != 0).then(|| f(&r[20..24])),
                sigma: (mask & 2 != 0).then(|| f(&r[24..28])),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub sequence_id: u64,
    pub tokens: Vec<TokenId>,
}

/// Anything that can score token sequences and decode greedily.
pub trait Model: Send + Sync {
    fn vocab_size(&self) -> u32;

    /// One score list per request, in request order.
    fn score(&self, requests: &[ScoreRequest], with_moments: bool) -> Result<Vec<Vec<TokenScore>>>;

    /// Exactly `n` greedily decoded tokens after `prefix`.
    fn generate_greedy(&self, prefix: &[TokenId], n: usize) -> Result<Vec<TokenId>>;

    fn supports_moments(&self) -> bool {
        true
    }
}

pub fn score_tokens(model: &dyn Model, tokens: &[TokenId], with_moments: bool) -> Result<Vec<TokenScore>> {
    if tokens.is_empty() {
        return Err(Error::invalid("cannot score an empty token list"));
    }
    let req = ScoreRequest {
        sequence_id: 0,
        tokens: tokens.to_vec(),
    };
    Ok(model.score(std::slice::from_ref(&req), with_moments)?.remove(0))
}

pub fn generate_greedy(model: &dyn Model, prefix: &[TokenId], n_continue: usize) -> Result<Vec<TokenId>> {
    if prefix.is_empty() {
        return Err(Error::invalid("greedy generation needs a non-empty prefix"));
    }
    model.generate_greedy(prefix, n_continue)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGramParams {
    pub order: usize,
    pub add_k: f64,
    /// Interpolation weight per order, lowest order first. Normalized on
    /// use. Defaults to doubling weights 1, 2, 4, ...
    #[serde(default)]
    pub lambdas: Option<Vec<f64>>,
}

impl Default for NGramParams {
    fn default() -> Self {
        NGramParams {
            order: 5,
            add_k: 1e-3,
            lambdas: None,
        }
    }
}

impl NGramParams {
    pub fn weights(&self) -> Result<Vec<f64>> {
        if self.order == 0 {
            return Err(Error::invalid("n-gram order must be at least 1"));
        }
        if !(self.add_k.is_finite() && self.add_k > 0.0) {
            return Err(Error::invalid("add-k constant must be positive"));
        }
        let w = match &self.lambdas {
            Some(l) if l.len() != self.order => {
                return Err(Error::invalid(format!("{} lambdas given for order {}", l.len(), self.order)))
            }
            Some(l) => l.clone(),
            None => (0..self.order).map(|j| (1u64 << j) as f64).collect(),
        };
        if w.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
            return Err(Error::invalid("interpolation weights must be positive"));
        }
        Ok(w)
    }
}

/// Interpolated add-k n-gram model backed by a suffix array.
///
/// Training text is every document followed by a sentinel token
/// (`vocab_size`), so no n-gram crosses a document. For a context `h`,
/// `C(h) = count(h) - count(h S)` is the number of occurrences followed by
/// a real token, and
///
/// `p(w | h) = sum_j l_j (count(h_j w) + k) / (C(h_j) + k V)`
///
/// over the available orders `j` (`h_j` = last `j-1` tokens of `h`), with
/// weights renormalized when the history is shorter than `order - 1`.
#[derive(Debug, Clone)]
pub struct NGramRefLM {
    params: NGramParams,
    weights: Vec<f64>,
    vocab_size: u32,
    text: Vec<TokenId>,
    sa: SuffixArray,
    unigram: Vec<u64>,
    /// Token ids by descending unigram count, then ascending id.
    by_count: Vec<TokenId>,
    /// (unigram count, number of tokens with that count), ascending.
    histogram: Vec<(u64, u64)>,
}

#[derive(Debug, Clone)]
struct Level {
    weight: f64,
    range: Range<usize>,
    depth: usize,
    denom: f64,
}

pub const MODEL_MAGIC: &[u8; 4] = b"MHL1";

impl NGramRefLM {
    pub fn train<D: AsRef<[TokenId]>>(documents: &[D], vocab_size: u32, params: NGramParams) -> Result<Self> {
        if documents.iter().all(|d| d.as_ref().is_empty()) {
            return Err(Error::invalid("cannot train on an empty corpus"));
        }
        let total: usize = documents.iter().map(|d| d.as_ref().len() + 1).sum();
        let mut text = Vec::with_capacity(total);
        for d in documents {
            let d = d.as_ref();
            if d.is_empty() {
                continue;
            }
            if let Some(&t) = d.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::invalid(format!("token {t} is outside the vocabulary (size {vocab_size})")));
            }
            text.extend_from_slice(d);
            text.push(vocab_size);
        }
        Self::from_text(text, vocab_size, params)
    }

    pub fn train_corpus(corpus: &TokenCorpus, params: NGramParams) -> Result<Self> {
        let docs: Vec<&[TokenId]> = corpus.documents().collect();
        Self::train(&docs, corpus.vocab_size(), params)
    }

    /// Train on the training sequences of a (possibly perturbed) view, one
    /// document per sequence.
    pub fn train_view(view: &PerturbedCorpusView<'_>, params: NGramParams) -> Result<Self> {
        let seqs: Vec<Vec<TokenId>> = par::map_range(view.sequence_count() as usize, |i| {
            view.sequence(i as u64).map(|s| s.into_owned())
        })
        .into_iter()
        .collect::<Result<_>>()?;
        Self::train(&seqs, view.base().vocab_size(), params)
    }

    fn from_text(text: Vec<TokenId>, vocab_size: u32, params: NGramParams) -> Result<Self> {
        let sa = SuffixArray::build(&text);
        Self::assemble(text, sa, vocab_size, params)
    }

    fn assemble(text: Vec<TokenId>, sa: SuffixArray, vocab_size: u32, params: NGramParams) -> Result<Self> {
        let weights = params.weights()?;
        let mut unigram = vec![0u64; vocab_size as usize];
        for &t in &text {
            if t < vocab_size {
                unigram[t as usize] += 1;
            }
        }
        let mut by_count: Vec<TokenId> = (0..vocab_size).collect();
        by_count.sort_by(|&a, &b| unigram[b as usize].cmp(&unigram[a as usize]).then(a.cmp(&b)));
        let mut histogram: Vec<(u64, u64)> = Vec::new();
        let mut counts: Vec<u64> = unigram.clone();
        counts.sort_unstable();
        for c in counts {
            match histogram.last_mut() {
                Some((v, n)) if *v == c => *n += 1,
                _ => histogram.push((c, 1)),
            }
        }
        Ok(NGramRefLM {
            params,
            weights,
            vocab_size,
            text,
            sa,
            unigram,
            by_count,
            histogram,
        })
    }

    pub fn params(&self) -> &NGramParams {
        &self.params
    }

    pub fn order(&self) -> usize {
        self.params.order
    }

    /// Number of real (non-sentinel) training tokens.
    pub fn training_tokens(&self) -> u64 {
        self.unigram.iter().sum()
    }

    /// Occurrences of `ngram` in the training text.
    pub fn count(&self, ngram: &[TokenId]) -> u64 {
        self.sa.count(&self.text, ngram) as u64
    }

    /// Occurrences of `context` followed by a real token.
    pub fn context_count(&self, context: &[TokenId]) -> u64 {
        let r = self.sa.range(&self.text, context);
        let ended = self.sa.refine(&self.text, r.clone(), context.len(), self.vocab_size).len();
        (r.len() - ended) as u64
    }

    fn levels(&self, history: &[TokenId]) -> Vec<Level> {
        let m = self.params.order.min(history.len() + 1);
        let total: f64 = self.weights[..m].iter().sum();
        let k = self.params.add_k;
        let v = f64::from(self.vocab_size);
        (0..m)
            .map(|j| {
                let ctx = &history[history.len() - j..];
                let range = self.sa.range(&self.text, ctx);
                let ended = self.sa.refine(&self.text, range.clone(), j, self.vocab_size).len();
                let c = (range.len() - ended) as f64;
                Level {
                    weight: self.weights[j] / total,
                    range,
                    depth: j,
                    denom: c + k * v,
                }
            })
            .collect()
    }

    /// The one place probabilities are computed: `counts[j]` is the count of
    /// the order-`j+1` n-gram ending in the predicted token.
    fn combine(&self, levels: &[Level], counts: impl Iterator<Item = u64>) -> f64 {
        let k = self.params.add_k;
        levels
            .iter()
            .zip(counts)
            .map(|(l, c)| l.weight * (c as f64 + k) / l.denom)
            .sum()
    }

    fn follower_count(&self, level: &Level, token: TokenId) -> u64 {
        self.sa.refine(&self.text, level.range.clone(), level.depth, token).len() as u64
    }

    fn prob_at(&self, levels: &[Level], token: TokenId) -> f64 {
        self.combine(levels, levels.iter().map(|l| self.follower_count(l, token)))
    }

    /// Sorted distinct real tokens following the order-2 context, i.e. every
    /// token with a non-zero count at some order above 1.
    fn followers(&self, levels: &[Level]) -> Vec<TokenId> {
        let Some(l) = levels.get(1) else {
            return Vec::new();
        };
        let slots = &self.sa.as_slice()[l.range.clone()];
        let next = |s: u32| self.text.get(s as usize + l.depth).copied();
        let mut out = Vec::new();
        let mut i = 0;
        while i < slots.len() {
            let Some(t) = next(slots[i]) else {
                i += 1;
                continue;
            };
            if t >= self.vocab_size {
                break;
            }
            out.push(t);
            i += slots[i..].partition_point(|&s| next(s) == Some(t));
        }
        out
    }

    /// `p(token | history)`.
    pub fn prob(&self, history: &[TokenId], token: TokenId) -> f64 {
        let h = &history[history.len().saturating_sub(self.params.order - 1)..];
        self.prob_at(&self.levels(h), token)
    }

    /// Full next-token distribution, `O(V)`.
    pub fn distribution(&self, history: &[TokenId]) -> Vec<f64> {
        let h = &history[history.len().saturating_sub(self.params.order - 1)..];
        let levels = self.levels(h);
        (0..self.vocab_size).map(|t| self.prob_at(&levels, t)).collect()
    }

    /// Mean and standard deviation of `ln p` under `p`, summed exactly:
    /// tokens outside the follower set only differ through their unigram
    /// count, so they are grouped by it.
    fn moments(&self, levels: &[Level], followers: &[TokenId]) -> (f64, f64) {
        let order = levels.len();
        let rest = |c: u64| std::iter::once(c).chain(std::iter::repeat(0).take(order - 1));
        let fp: Vec<f64> = followers.iter().map(|&t| self.prob_at(levels, t)).collect();
        let mut removed: Vec<u64> = followers.iter().map(|&t| self.unigram[t as usize]).collect();
        removed.sort_unstable();
        let groups: Vec<(f64, f64)> = self
            .histogram
            .iter()
            .map(|&(c, n)| {
                let lo = removed.partition_point(|&x| x < c);
                let hi = removed.partition_point(|&x| x <= c);
                ((n - (hi - lo) as u64) as f64, self.combine(levels, rest(c)))
            })
            .filter(|&(n, _)| n > 0.0)
            .collect();
        let term = |p: f64, f: &dyn Fn(f64) -> f64| if p > 0.0 { f(p) } else { 0.0 };
        let sum = |f: &dyn Fn(f64) -> f64| -> f64 {
            fp.iter().map(|&p| term(p, f)).sum::<f64>() + groups.iter().map(|&(n, p)| n * term(p, f)).sum::<f64>()
        };
        let mu = sum(&|p| p * p.ln());
        let var = sum(&|p| p * (p.ln() - mu).powi(2));
        (mu, var.max(0.0).sqrt())
    }

    pub fn score_sequence(&self, sequence_id: u64, tokens: &[TokenId], with_moments: bool) -> Result<Vec<TokenScore>> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::invalid(format!("token {t} is outside the vocabulary (size {})", self.vocab_size)));
        }
        let n = self.params.order;
        Ok((0..tokens.len())
            .map(|i| {
                let levels = self.levels(&tokens[i.saturating_sub(n - 1)..i]);
                let logp = self.prob_at(&levels, tokens[i]).ln();
                let (mu, sigma) = if with_moments {
                    let (mu, sigma) = self.moments(&levels, &self.followers(&levels));
                    (Some(mu), Some(sigma.max(SIGMA_EPS)))
                } else {
                    (None, None)
                };
                TokenScore {
                    sequence_id,
                    position: i as u32,
                    token_id: tokens[i],
                    logp,
                    mu,
                    sigma,
                }
            })
            .collect())
    }

    /// Most probable next token; ties go to the lowest id.
    pub fn argmax(&self, history: &[TokenId]) -> TokenId {
        let h = &history[history.len().saturating_sub(self.params.order - 1)..];
        let levels = self.levels(h);
        let followers = self.followers(&levels);
        let mut candidates = followers.clone();
        // Outside the followers, probability is increasing in unigram count.
        if let Some(&t) = self.by_count.iter().find(|t| followers.binary_search(t).is_err()) {
            candidates.push(t);
        }
        let mut best = (f64::NEG_INFINITY, TokenId::MAX);
        for t in candidates {
            let p = self.prob_at(&levels, t);
            if p > best.0 || (p == best.0 && t < best.1) {
                best = (p, t);
            }
        }
        best.1
    }

    /// Model file: magic, u32 vocab size, u64 params length, params JSON,
    /// u64 text length, text u32s, suffix array u32s, then the SHA-256 of
    /// everything before it.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.text.len() * 8);
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&self.vocab_size.to_le_bytes());
        let params = serde_json::to_vec(&self.params)?;
        buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
        buf.extend_from_slice(&params);
        buf.extend_from_slice(&(self.text.len() as u64).to_le_bytes());
        for &t in &self.text {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        for &s in self.sa.as_slice() {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        let sum = digest::sha256_hex(&buf);
        out.write_all(&buf)?;
        out.write_all(sum.as_bytes())?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::integrity(format!("model file: {m}"));
        if bytes.len() < 4 + 4 + 8 + 8 + 64 || &bytes[..4] != MODEL_MAGIC {
            return Err(bad("bad magic or truncated"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 64);
        if digest::sha256_hex(body).as_bytes() != sum {
            return Err(bad("checksum mismatch"));
        }
        let vocab_size = u32::from_le_bytes(body[4..8].try_into().unwrap());
        let plen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let params: NGramParams = serde_json::from_slice(body.get(16..16 + plen).ok_or_else(|| bad("truncated"))?)?;
        let at = 16 + plen;
        let n = u64::from_le_bytes(body.get(at..at + 8).ok_or_else(|| bad("truncated"))?.try_into().unwrap()) as usize;
        let data = &body[at + 8..];
        if data.len() != n * 8 {
            return Err(bad("length mismatch"));
        }
        let words: Vec<u32> = data.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        let (text, sa) = words.split_at(n);
        let text = text.to_vec();
        let sa = SuffixArray::from_raw(sa.to_vec(), text.len()).ok_or_else(|| bad("suffix array is not a permutation"))?;
        Self::assemble(text, sa, vocab_size, params)
    }
}

impl Model for NGramRefLM {
    fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    fn score(&self, requests: &[ScoreRequest], with_moments: bool) -> Result<Vec<Vec<TokenScore>>> {
        par::try_map(requests, |r| self.score_sequence(r.sequence_id, &r.tokens, with_moments))
    }

    fn generate_greedy(&self, prefix: &[TokenId], n: usize) -> Result<Vec<TokenId>> {
        let keep = self.params.order - 1;
        let mut history: Vec<TokenId> = prefix[prefix.len().saturating_sub(keep)..].to_vec();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let t = self.argmax(&history);
            out.push(t);
            history.push(t);
            if history.len() > keep {
                history.remove(0);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    /// Sequences per request.
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub retries: u32,
    pub timeout_secs: u64,
    pub vocab_size: u32,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, vocab_size: u32) -> Self {
        RemoteConfig {
            base_url: base_url.into(),
            batch_size: 16,
            max_in_flight: 4,
            retries: 3,
            timeout_secs: 60,
            vocab_size,
        }
    }
}

pub struct RemoteModel {
    config: RemoteConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

pub const API_KEY_ENV: &str = "MEMAUDIT_API_KEY";

#[derive(Serialize)]
struct ScoreBody<'a> {
    sequences: &'a [ScoreRequest],
    with_moments: bool,
}

#[derive(Deserialize)]
struct ScoreResponse {
    scores: Vec<TokenScore>,
}

#[derive(Serialize)]
struct GenerateBody<'a> {
    prefix: &'a [TokenId],
    n: usize,
}

#[derive(Deserialize)]
struct GenerateResponse {
    tokens: Vec<TokenId>,
}

impl RemoteModel {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        if config.batch_size == 0 || config.max_in_flight == 0 {
            return Err(Error::invalid("batch size and in-flight limit must be positive"));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(RemoteModel {
            config,
            agent,
            api_key: std::env::var(API_KEY_ENV).ok(),
        })
    }

    fn post_once<T: Serialize>(&self, path: &str, body: &T) -> Result<String> {
        let url = format!("{}/{path}", self.config.base_url.trim_end_matches('/'));
        let mut req = self.agent.post(&url).header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("authorization", format!("Bearer {key}"));
        }
        let payload = serde_json::to_vec(body)?;
        let mut resp = req.send(&payload[..]).map_err(|e| Error::RemoteTransport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::RemoteTransport(e.to_string()))?;
        match status {
            200..=299 => Ok(text),
            429 | 500..=599 => Err(Error::RemoteTransport(format!("{url} returned status {status}"))),
            _ => Err(Error::RemoteMalformed(format!("{url} rejected the request with status {status}"))),
        }
    }

    /// POST with retries on transport failures. Requests are idempotent.
    fn post<T: Serialize>(&self, path: &str, body: &T) -> Result<String> {
        let mut attempt = 0;
        loop {
            match self.post_once(path, body) {
                Err(e) if e.is_retryable() && attempt < self.config.retries => {
                    log::warn!("scoring request failed, retrying: {e}");
                    std::thread::sleep(Duration::from_millis(50 << attempt.min(6)));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn score_batch(&self, batch: &[ScoreRequest], with_moments: bool) -> Result<Vec<Vec<TokenScore>>> {
        let text = self.post(
            "score",
            &ScoreBody {
                sequences: batch,
                with_moments,
            },
        )?;
        let resp: ScoreResponse =
            serde_json::from_str(&text).map_err(|e| Error::RemoteMalformed(format!("score response: {e}")))?;
        let mut out: Vec<Vec<TokenScore>> = batch.iter().map(|r| Vec::with_capacity(r.tokens.len())).collect();
        for s in resp.scores {
            let i = batch
                .iter()
                .position(|r| r.sequence_id == s.sequence_id)
                .ok_or_else(|| Error::RemoteMalformed(format!("unknown sequence id {}", s.sequence_id)))?;
            s.check().map_err(Error::RemoteMalformed)?;
            out[i].push(s);
        }
        for (r, scores) in batch.iter().zip(out.iter_mut()) {
            scores.sort_by_key(|s| s.position);
            let aligned = scores.len() == r.tokens.len()
                && scores
                    .iter()
                    .enumerate()
                    .all(|(i, s)| s.position as usize == i && s.token_id == r.tokens[i]);
            if !aligned {
                return Err(Error::RemoteMalformed(format!(
                    "scores for sequence {} do not match its tokens",
                    r.sequence_id
                )));
            }
        }
        Ok(out)
    }
}

impl Model for RemoteModel {
    fn vocab_size(&self) -> u32 {
        self.config.vocab_size
    }

    fn score(&self, requests: &[ScoreRequest], with_moments: bool) -> Result<Vec<Vec<TokenScore>>> {
        let batches: Vec<&[ScoreRequest]> = requests.chunks(self.config.batch_size).collect();
        let results: Mutex<Vec<Option<Result<Vec<Vec<TokenScore>>>>>> =
            Mutex::new((0..batches.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..self.config.max_in_flight.min(batches.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= batches.len() {
                        break;
                    }
                    let r = self.score_batch(batches[i], with_moments);
                    results.lock().unwrap()[i] = Some(r);
                });
            }
        });
        let mut out = Vec::with_capacity(requests.len());
        for r in results.into_inner().unwrap() {
            out.extend(r.expect("every batch ran")?);
        }
        Ok(out)
    }

    fn generate_greedy(&self, prefix: &[TokenId], n: usize) -> Result<Vec<TokenId>> {
        let text = self.post("generate", &GenerateBody { prefix, n })?;
        let resp: GenerateResponse =
            serde_json::from_str(&text).map_err(|e| Error::RemoteMalformed(format!("generate response: {e}")))?;
        if resp.tokens.len() != n {
            return Err(Error::RemoteMalformed(format!("asked for {n} tokens, got {}", resp.tokens.len())));
        }
        Ok(resp.tokens)
    }
}
