//! Exact-substring contamination detection and removal.
//!
//! A [`SuffixArray`] over the corpus token stream answers "where does this
//! token n-gram occur" by binary search. Short perturbations (up to
//! `short_threshold` tokens) are matched in full; longer ones are probed
//! with windows of `ceil(n/2)` tokens at a stride of `ceil(n/4)`, plus a
//! final window ending at token `n`. Matches must lie inside a single
//! document.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::sync::atomic::{AtomicU32, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenCorpus, TokenId};
use crate::{par, Error, Result};

/// Suffix array over a borrowed token slice. Positions are stored as u32,
/// which bounds the indexed text at `u32::MAX - 1` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuffixArray {
    sa: Vec<u32>,
}

impl SuffixArray {
    /// Prefix doubling that only re-sorts groups which are still tied.
    pub fn build(text: &[TokenId]) -> Self {
        let n = text.len();
        assert!(n < u32::MAX as usize, "text too long for a u32 suffix array");
        let mut sa: Vec<u32> = (0..n as u32).collect();
        par::sort_unstable_by_key(&mut sa, |&i| text[i as usize]);

        let rank: Vec<AtomicU32> = (0..n).map(|_| AtomicU32::new(0)).collect();
        let mut heads = vec![false; n];
        let mut groups = Vec::new();
        let mut start = 0;
        for j in 0..n {
            if j == 0 || text[sa[j] as usize] != text[sa[j - 1] as usize] {
                start = j;
                heads[j] = true;
            }
            rank[sa[j] as usize].store(start as u32, AtomicOrdering::Relaxed);
        }
        let mut j = 0;
        while j < n {
            let mut e = j + 1;
            while e < n && !heads[e] {
                e += 1;
            }
            if e - j > 1 {
                groups.push(j..e);
            }
            j = e;
        }

        let mut h = 1usize;
        while !groups.is_empty() {
            let key = |i: u32| -> u64 {
                let p = i as usize + h;
                if p < n {
                    u64::from(rank[p].load(AtomicOrdering::Relaxed)) + 1
                } else {
                    0
                }
            };
            // Phase 1: sort each tied group by the rank h tokens ahead and
            // mark sub-group heads. Ranks are only read here.
            {
                let mut slices = split_ranges_mut(&mut sa, &mut heads, &groups);
                par::for_each_mut(&mut slices, |(s, hd)| {
                    s.sort_unstable_by_key(|&i| key(i));
                    let mut prev = key(s[0]);
                    hd[0] = true;
                    for k in 1..s.len() {
                        let cur = key(s[k]);
                        hd[k] = cur != prev;
                        prev = cur;
                    }
                });
            }
            // Phase 2: publish the refined ranks and collect groups that are
            // still tied.
            let next: Vec<Vec<Range<usize>>> = par::map(&groups, |g| {
                let mut out = Vec::new();
                let mut sub = g.start;
                for j in g.start..g.end {
                    if heads[j] {
                        if j - sub > 1 {
                            out.push(sub..j);
                        }
                        sub = j;
                    }
                    rank[sa[j] as usize].store(sub as u32, AtomicOrdering::Relaxed);
                }
                if g.end - sub > 1 {
                    out.push(sub..g.end);
                }
                out
            });
            groups = next.into_iter().flatten().collect();
            h *= 2;
        }
        SuffixArray { sa }
    }

    /// Wrap a stored array. Only checks that it is a permutation of
    /// `0..text_len`; sortedness is the caller's responsibility.
    pub fn from_raw(sa: Vec<u32>, text_len: usize) -> Option<Self> {
        if sa.len() != text_len {
            return None;
        }
        let mut seen = vec![false; text_len];
        for &s in &sa {
            let slot = seen.get_mut(s as usize)?;
            if std::mem::replace(slot, true) {
                return None;
            }
        }
        Some(SuffixArray { sa })
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.sa
    }

    pub fn len(&self) -> usize {
        self.sa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sa.is_empty()
    }

    /// Range of suffix-array slots whose suffixes start with `pattern`.
    pub fn range(&self, text: &[TokenId], pattern: &[TokenId]) -> Range<usize> {
        if pattern.is_empty() {
            return 0..self.sa.len();
        }
        let lo = self
            .sa
            .partition_point(|&s| compare_prefix(text, s as usize, pattern) == Ordering::Less);
        let hi = lo
            + self.sa[lo..]
                .partition_point(|&s| compare_prefix(text, s as usize, pattern) == Ordering::Equal);
        lo..hi
    }

    /// Narrow `range`, whose suffixes share their first `depth` tokens, to
    /// those continuing with `token`.
    pub fn refine(&self, text: &[TokenId], range: Range<usize>, depth: usize, token: TokenId) -> Range<usize> {
        let slots = &self.sa[range.clone()];
        let at = |s: u32| text.get(s as usize + depth).copied();
        let lo = slots.partition_point(|&s| at(s) < Some(token));
        let hi = lo + slots[lo..].partition_point(|&s| at(s) == Some(token));
        range.start + lo..range.start + hi
    }

    pub fn count(&self, text: &[TokenId], pattern: &[TokenId]) -> usize {
        self.range(text, pattern).len()
    }

    /// Sorted start positions of `pattern` in `text`.
    pub fn positions(&self, text: &[TokenId], pattern: &[TokenId]) -> Vec<u64> {
        let mut out: Vec<u64> = self.sa[self.range(text, pattern)]
            .iter()
            .map(|&s| u64::from(s))
            .collect();
        out.sort_unstable();
        out
    }
}

/// Compare the suffix at `start`, truncated to `pattern.len()`, with
/// `pattern`. A suffix that ends early orders before the pattern.
fn compare_prefix(text: &[TokenId], start: usize, pattern: &[TokenId]) -> Ordering {
    let end = (start + pattern.len()).min(text.len());
    let suffix = &text[start..end];
    match suffix.cmp(&pattern[..suffix.len()]) {
        Ordering::Equal if suffix.len() < pattern.len() => Ordering::Less,
        o => o,
    }
}

/// Split `sa` and `heads` into the disjoint sub-slices named by `ranges`
/// (sorted, non-overlapping).
fn split_ranges_mut<'a>(
    sa: &'a mut [u32],
    heads: &'a mut [bool],
    ranges: &[Range<usize>],
) -> Vec<(&'a mut [u32], &'a mut [bool])> {
    let mut out = Vec::with_capacity(ranges.len());
    let mut sa_rest = sa;
    let mut hd_rest = heads;
    let mut consumed = 0;
    for r in ranges {
        let (_, tail) = std::mem::take(&mut sa_rest).split_at_mut(r.start - consumed);
        let (group, tail) = tail.split_at_mut(r.len());
        sa_rest = tail;
        let (_, htail) = std::mem::take(&mut hd_rest).split_at_mut(r.start - consumed);
        let (hgroup, htail) = htail.split_at_mut(r.len());
        hd_rest = htail;
        consumed = r.end;
        out.push((group, hgroup));
    }
    out
}

/// Suffix array bound to the corpus it indexes.
#[derive(Debug, Clone)]
pub struct SuffixIndex<'a> {
    corpus: &'a TokenCorpus,
    sa: SuffixArray,
}

impl<'a> SuffixIndex<'a> {
    pub fn build(corpus: &'a TokenCorpus) -> Result<Self> {
        if corpus.token_count() == 0 {
            return Err(Error::invalid("cannot index an empty corpus"));
        }
        Ok(SuffixIndex {
            corpus,
            sa: SuffixArray::build(corpus.tokens()),
        })
    }

    pub fn corpus(&self) -> &'a TokenCorpus {
        self.corpus
    }

    pub fn suffix_array(&self) -> &SuffixArray {
        &self.sa
    }

    /// Sorted corpus-global start positions of `query`.
    pub fn occurrences(&self, query: &[TokenId]) -> Vec<u64> {
        if query.is_empty() {
            return Vec::new();
        }
        self.sa.positions(self.corpus.tokens(), query)
    }

    /// Occurrences that lie entirely inside one document, as
    /// `(document, offset within document)`.
    pub fn document_occurrences(&self, query: &[TokenId]) -> Vec<(u64, u64)> {
        let offsets = self.corpus.offsets();
        self.occurrences(query)
            .into_iter()
            .filter_map(|pos| {
                let doc = self.corpus.document_of(pos);
                (pos + query.len() as u64 <= offsets[doc + 1])
                    .then(|| (doc as u64, pos - offsets[doc]))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Remove matching documents for long perturbations, drop short ones.
    Auto,
    /// Always drop the perturbation (used for test-set records).
    DropPerturbation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContaminationPolicy {
    pub short_threshold: usize,
    pub mode: PolicyMode,
}

impl Default for ContaminationPolicy {
    fn default() -> Self {
        ContaminationPolicy {
            short_threshold: 40,
            mode: PolicyMode::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    RemoveDocuments,
    DropPerturbation,
    Clean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Match {
    pub document_id: u64,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchReport {
    pub perturbation_id: String,
    pub perturbation_length: usize,
    pub corpus_fingerprint: u64,
    pub matches: Vec<Match>,
    pub decision: Decision,
}

impl MatchReport {
    /// Documents named by the matches, deduplicated.
    pub fn documents(&self) -> BTreeSet<u64> {
        self.matches.iter().map(|m| m.document_id).collect()
    }

    /// Re-check every match against the corpus and the perturbation tokens.
    pub fn recheck(&self, corpus: &TokenCorpus, perturbation: &[TokenId]) -> bool {
        self.matches.iter().all(|m| {
            let doc = corpus.document(m.document_id as usize);
            let (o, l) = (m.offset as usize, m.length as usize);
            o + l <= doc.len()
                && probe_windows(perturbation.len(), usize::MAX)
                    .into_iter()
                    .chain(probe_windows(perturbation.len(), 0))
                    .any(|(s, len)| len == l && doc[o..o + l] == perturbation[s..s + len])
        })
    }
}

/// Probe windows `(start, length)` for a perturbation of `n` tokens.
pub fn probe_windows(n: usize, short_threshold: usize) -> Vec<(usize, usize)> {
    if n == 0 {
        return Vec::new();
    }
    if n <= short_threshold {
        return vec![(0, n)];
    }
    let width = n.div_ceil(2);
    let stride = n.div_ceil(4);
    let mut out = Vec::new();
    let mut start = 0;
    while start + width <= n {
        out.push((start, width));
        start += stride;
    }
    if out.last().map(|&(s, w)| s + w) != Some(n) {
        out.push((n - width, width));
    }
    out
}

pub fn find_contamination(
    index: &SuffixIndex<'_>,
    perturbation_id: &str,
    perturbation: &[TokenId],
    policy: &ContaminationPolicy,
) -> Result<MatchReport> {
    scan(index, perturbation_id, perturbation, policy, index.corpus().fingerprint())
}

/// [`find_contamination`] for many perturbations, in input order.
pub fn find_contamination_all<S: AsRef<str> + Sync, T: AsRef<[TokenId]> + Sync>(
    index: &SuffixIndex<'_>,
    perturbations: &[(S, T)],
    policy: &ContaminationPolicy,
) -> Result<Vec<MatchReport>> {
    let fingerprint = index.corpus().fingerprint();
    par::try_map(perturbations, |(id, tokens)| {
        scan(index, id.as_ref(), tokens.as_ref(), policy, fingerprint)
    })
}

fn scan(
    index: &SuffixIndex<'_>,
    perturbation_id: &str,
    perturbation: &[TokenId],
    policy: &ContaminationPolicy,
    corpus_fingerprint: u64,
) -> Result<MatchReport> {
    if perturbation.is_empty() {
        return Err(Error::invalid(format!("perturbation {perturbation_id} is empty")));
    }
    let n = perturbation.len();
    let mut matches = BTreeSet::new();
    for (start, len) in probe_windows(n, policy.short_threshold) {
        for (doc, offset) in index.document_occurrences(&perturbation[start..start + len]) {
            matches.insert(Match {
                document_id: doc,
                offset,
                length: len as u64,
            });
        }
    }
    let decision = if matches.is_empty() {
        Decision::Clean
    } else if policy.mode == PolicyMode::DropPerturbation || n <= policy.short_threshold {
        Decision::DropPerturbation
    } else {
        Decision::RemoveDocuments
    };
    Ok(MatchReport {
        perturbation_id: perturbation_id.to_string(),
        perturbation_length: n,
        corpus_fingerprint,
        matches: matches.into_iter().collect(),
        decision,
    })
}

/// One removed training document and the perturbations that matched it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalEntry {
    pub document_id: u64,
    pub perturbation_ids: Vec<String>,
    pub spans: Vec<(u64, u64)>,
}

#[derive(Debug, Clone)]
pub struct DecontamOutcome {
    pub corpus: TokenCorpus,
    pub dropped_perturbations: Vec<String>,
    pub removal_log: Vec<RemovalEntry>,
}

pub fn apply_decontamination(corpus: &TokenCorpus, reports: &[MatchReport]) -> Result<DecontamOutcome> {
    let fingerprint = corpus.fingerprint();
    if let Some(r) = reports.iter().find(|r| r.corpus_fingerprint != fingerprint) {
        return Err(Error::integrity(format!(
            "report for {} was built against a different corpus",
            r.perturbation_id
        )));
    }
    let mut dropped = Vec::new();
    let mut removals: BTreeMap<u64, RemovalEntry> = BTreeMap::new();
    for report in reports {
        match report.decision {
            Decision::Clean => {}
            Decision::DropPerturbation => dropped.push(report.perturbation_id.clone()),
            Decision::RemoveDocuments => {
                for m in &report.matches {
                    let entry = removals.entry(m.document_id).or_insert_with(|| RemovalEntry {
                        document_id: m.document_id,
                        perturbation_ids: Vec::new(),
                        spans: Vec::new(),
                    });
                    if entry.perturbation_ids.last() != Some(&report.perturbation_id) {
                        entry.perturbation_ids.push(report.perturbation_id.clone());
                    }
                    entry.spans.push((m.offset, m.length));
                }
            }
        }
    }
    let remove: BTreeSet<usize> = removals.keys().map(|&d| d as usize).collect();
    let corpus = if remove.is_empty() {
        corpus.clone()
    } else {
        corpus.without_documents(&remove)?
    };
    Ok(DecontamOutcome {
        corpus,
        dropped_perturbations: dropped,
        removal_log: removals.into_values().collect(),
    })
}
