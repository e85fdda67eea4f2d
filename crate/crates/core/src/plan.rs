//! Duplication assignment and insertion scheduling.
//!
//! Records are randomly partitioned across duplication levels, then every
//! duplicate is placed in a distinct training sequence inside a timing
//! window. The counts are exact: a record at level `d` appears in exactly `d`
//! schedule entries.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::{rng, Error, Result};

/// Default duplication levels.
pub const LEVELS: [u32; 6] = [0, 1, 4, 16, 64, 256];

/// Approximate record ratios per level in [`LEVELS`] order, relative to the
/// 256-duplicate bucket.
pub const DEFAULT_RATIOS: [u64; 6] = [28, 10, 10, 5, 2, 1];

/// Datasets smaller than this use powers of 16 only.
pub const SMALL_DATASET: usize = 200;

pub fn default_levels(record_count: usize) -> Vec<u32> {
    if record_count < SMALL_DATASET {
        vec![0, 16, 256]
    } else {
        LEVELS.to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Copyright,
    Privacy,
    Testset,
}

/// A text to be inserted into the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub id: String,
    pub domain: Domain,
    pub dataset: String,
    pub tokens: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl PerturbationRecord {
    pub fn new(id: impl Into<String>, domain: Domain, dataset: impl Into<String>, tokens: Vec<TokenId>) -> Self {
        PerturbationRecord {
            id: id.into(),
            domain,
            dataset: dataset.into(),
            tokens,
            text: None,
            metadata: BTreeMap::new(),
        }
    }

    /// Records must be non-empty and leave room for two flanking EOS tokens.
    pub fn validate(&self, sequence_length: usize) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::invalid(format!("record {} has no tokens", self.id)));
        }
        if self.tokens.len() + 2 > sequence_length {
            return Err(Error::invalid(format!(
                "record {} has {} tokens; at most {} fit a sequence of {}",
                self.id,
                self.tokens.len(),
                sequence_length.saturating_sub(2),
                sequence_length
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentEntry {
    pub record_id: String,
    pub level: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicationAssignment {
    pub levels: Vec<u32>,
    pub seed: u64,
    assignments: BTreeMap<String, u32>,
}

impl DuplicationAssignment {
    pub fn from_entries(levels: Vec<u32>, seed: u64, entries: &[AssignmentEntry]) -> Result<Self> {
        validate_levels(&levels)?;
        let mut assignments = BTreeMap::new();
        for e in entries {
            if !levels.contains(&e.level) {
                return Err(Error::invalid(format!(
                    "record {} has level {} outside {:?}",
                    e.record_id, e.level, levels
                )));
            }
            if assignments.insert(e.record_id.clone(), e.level).is_some() {
                return Err(Error::invalid(format!("record {} assigned twice", e.record_id)));
            }
        }
        Ok(DuplicationAssignment {
            levels,
            seed,
            assignments,
        })
    }

    pub fn level_of(&self, record_id: &str) -> Option<u32> {
        self.assignments.get(record_id).copied()
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// `(record_id, level)` in record-id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, u32)> + '_ {
        self.assignments.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn ids_at(&self, level: u32) -> Vec<&str> {
        self.iter().filter(|(_, l)| *l == level).map(|(id, _)| id).collect()
    }

    /// Record count per level, including empty levels.
    pub fn counts(&self) -> BTreeMap<u32, usize> {
        let mut out: BTreeMap<u32, usize> = self.levels.iter().map(|&l| (l, 0)).collect();
        for &l in self.assignments.values() {
            *out.entry(l).or_default() += 1;
        }
        out
    }

    pub fn total_duplicates(&self) -> u64 {
        self.assignments.values().map(|&l| u64::from(l)).sum()
    }

    pub fn entries(&self) -> Vec<AssignmentEntry> {
        self.iter()
            .map(|(id, level)| AssignmentEntry {
                record_id: id.to_string(),
                level,
            })
            .collect()
    }

    /// Drop records (e.g. after decontamination). Removed ids are reported.
    pub fn without(&self, ids: &BTreeSet<String>) -> Self {
        let mut out = self.clone();
        out.assignments.retain(|k, _| !ids.contains(k));
        out
    }
}

fn validate_levels(levels: &[u32]) -> Result<()> {
    if levels.first() != Some(&0) {
        return Err(Error::invalid("levels must start with 0"));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!("levels {levels:?} are not strictly increasing")));
    }
    Ok(())
}

/// Records per level implied by integer `ratios`.
///
/// Non-zero levels are filled largest first with
/// `floor(records * ratio / sum(ratios))`; whatever is left goes to level 0.
pub fn level_counts(records: usize, levels: &[u32], ratios: &[u64]) -> Result<Vec<(u32, usize)>> {
    validate_levels(levels)?;
    if ratios.len() != levels.len() {
        return Err(Error::invalid(format!(
            "{} ratios given for {} levels",
            ratios.len(),
            levels.len()
        )));
    }
    let total: u64 = ratios.iter().sum();
    if total == 0 {
        return Err(Error::invalid("ratios sum to zero"));
    }
    let mut counts = vec![0usize; levels.len()];
    let mut used = 0usize;
    for i in (1..levels.len()).rev() {
        let c = (records as u128 * ratios[i] as u128 / total as u128) as usize;
        if c == 0 && ratios[i] > 0 {
            return Err(Error::invalid(format!(
                "{records} records are too few for ratios {ratios:?}: level {} would be empty",
                levels[i]
            )));
        }
        counts[i] = c;
        used += c;
    }
    counts[0] = records - used;
    Ok(levels.iter().copied().zip(counts).collect())
}

pub fn assign_duplications(
    record_ids: &[String],
    levels: &[u32],
    ratios: &[u64],
    seed: u64,
) -> Result<DuplicationAssignment> {
    let counts = level_counts(record_ids.len(), levels, ratios)?;
    assign_with_counts(record_ids, &counts, seed)
}

/// Random partition with exact per-level counts summing to the record count.
///
/// Ids are sorted, shuffled with the seed, and dealt out to levels from the
/// largest level down.
pub fn assign_with_counts(record_ids: &[String], counts: &[(u32, usize)], seed: u64) -> Result<DuplicationAssignment> {
    let levels: Vec<u32> = counts.iter().map(|c| c.0).collect();
    validate_levels(&levels)?;
    let needed: usize = counts.iter().map(|c| c.1).sum();
    if needed != record_ids.len() {
        return Err(Error::invalid(format!(
            "level counts sum to {needed} but there are {} records",
            record_ids.len()
        )));
    }
    let mut ids: Vec<&String> = record_ids.iter().collect();
    ids.sort();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::invalid(format!("duplicate record id {}", w[0])));
    }
    rng::shuffle(&mut rng::seeded(seed), &mut ids);
    let mut assignments = BTreeMap::new();
    let mut next = ids.into_iter();
    for &(level, count) in counts.iter().rev() {
        for id in next.by_ref().take(count) {
            assignments.insert(id.clone(), level);
        }
    }
    Ok(DuplicationAssignment {
        levels,
        seed,
        assignments,
    })
}

/// Fraction-of-training window, half-open `[start, end)` in percent of
/// total training sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start_pct: f64,
    pub end_pct: f64,
}

impl Default for Window {
    fn default() -> Self {
        Window {
            start_pct: 0.0,
            end_pct: 100.0,
        }
    }
}

impl Window {
    pub fn new(start_pct: f64, end_pct: f64) -> Result<Self> {
        let w = Window { start_pct, end_pct };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.start_pct.is_finite()
            && self.end_pct.is_finite()
            && 0.0 <= self.start_pct
            && self.start_pct < self.end_pct
            && self.end_pct <= 100.0;
        if !ok {
            return Err(Error::invalid(format!(
                "window ({}, {}) must satisfy 0 <= start < end <= 100",
                self.start_pct, self.end_pct
            )));
        }
        Ok(())
    }

    /// Sequence index range covered for a run of `total` sequences.
    pub fn sequence_range(&self, total: u64) -> std::ops::Range<u64> {
        let at = |pct: f64| ((pct / 100.0) * total as f64).floor() as u64;
        at(self.start_pct)..at(self.end_pct).min(total)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub sequence_index: u64,
    pub record_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertionSchedule {
    pub window: Window,
    pub seed: u64,
    pub total_sequences: u64,
    /// Sorted by sequence index.
    pub entries: Vec<ScheduleEntry>,
}

impl InsertionSchedule {
    pub fn empty(total_sequences: u64) -> Self {
        InsertionSchedule {
            window: Window::default(),
            seed: 0,
            total_sequences,
            entries: Vec::new(),
        }
    }

    /// Check distinctness, window containment and exact counts.
    pub fn validate(&self, assignment: &DuplicationAssignment) -> Result<()> {
        self.window.validate()?;
        let range = self.window.sequence_range(self.total_sequences);
        let mut seen = BTreeSet::new();
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for e in &self.entries {
            if !range.contains(&e.sequence_index) {
                return Err(Error::invalid(format!(
                    "sequence {} lies outside window {:?}",
                    e.sequence_index, range
                )));
            }
            if !seen.insert(e.sequence_index) {
                return Err(Error::invalid(format!(
                    "sequence {} holds more than one perturbation",
                    e.sequence_index
                )));
            }
            *counts.entry(&e.record_id).or_default() += 1;
        }
        for (id, level) in assignment.iter() {
            let got = counts.remove(id).unwrap_or(0);
            if got != u64::from(level) {
                return Err(Error::invalid(format!(
                    "record {id} scheduled {got} times but assigned level {level}"
                )));
            }
        }
        if let Some(id) = counts.keys().next() {
            return Err(Error::invalid(format!("scheduled record {id} has no assignment")));
        }
        Ok(())
    }
}

pub fn schedule_insertions(
    assignment: &DuplicationAssignment,
    total_sequences: u64,
    window: Window,
    seed: u64,
) -> Result<InsertionSchedule> {
    window.validate()?;
    let range = window.sequence_range(total_sequences);
    let needed = assignment.total_duplicates();
    let available = range.end - range.start;
    if needed > available {
        return Err(Error::invalid(format!(
            "{needed} duplicates do not fit the {available} sequences in window ({}, {})",
            window.start_pct, window.end_pct
        )));
    }
    let mut rng = rng::seeded(seed);
    let slots = rng::sample_distinct(&mut rng, range.start, range.end, needed as usize);
    let mut duplicates: Vec<&str> = Vec::with_capacity(needed as usize);
    for (id, level) in assignment.iter() {
        duplicates.extend(std::iter::repeat(id).take(level as usize));
    }
    rng::shuffle(&mut rng, &mut duplicates);
    let entries = slots
        .into_iter()
        .zip(duplicates)
        .map(|(sequence_index, id)| ScheduleEntry {
            sequence_index,
            record_id: id.to_string(),
        })
        .collect();
    Ok(InsertionSchedule {
        window,
        seed,
        total_sequences,
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStats {
    pub tokens_modified_fraction: f64,
    pub sequences_modified_fraction: f64,
    pub mean_perturbations_per_batch: f64,
}

/// Modification budget from raw totals.
pub fn schedule_stats_from_totals(
    perturbation_tokens: u64,
    modified_sequences: u64,
    corpus_tokens: u64,
    total_sequences: u64,
    batch_size: u64,
) -> ScheduleStats {
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let batches = ratio(total_sequences as f64, batch_size as f64);
    ScheduleStats {
        tokens_modified_fraction: ratio(perturbation_tokens as f64, corpus_tokens as f64),
        sequences_modified_fraction: ratio(modified_sequences as f64, total_sequences as f64),
        mean_perturbations_per_batch: ratio(modified_sequences as f64, batches),
    }
}

/// Modification budget of a schedule; `record_len` maps a record id to its
/// token length.
pub fn schedule_stats(
    schedule: &InsertionSchedule,
    record_len: impl Fn(&str) -> Option<usize>,
    corpus_tokens: u64,
    batch_size: u64,
) -> Result<ScheduleStats> {
    let mut tokens = 0u64;
    for e in &schedule.entries {
        tokens += record_len(&e.record_id)
            .ok_or_else(|| Error::invalid(format!("unknown record {}", e.record_id)))? as u64;
    }
    Ok(schedule_stats_from_totals(
        tokens,
        schedule.entries.len() as u64,
        corpus_tokens,
        schedule.total_sequences,
        batch_size,
    ))
}
