//! Memorization metrics and duplication curves.
//!
//! All choice rules pick the highest (normalized) log-likelihood; ties go to
//! the lowest candidate index and are flagged.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::TokenId;
use crate::lm::{Model, ScoreRequest, TokenScore};
use crate::plan::DuplicationAssignment;
use crate::{Error, Result};

/// Mean per-token log-likelihood.
pub fn norm_loglik(scores: &[TokenScore]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("no token scores to average"));
    }
    Ok(sum_logp(scores) / scores.len() as f64)
}

pub fn sum_logp(scores: &[TokenScore]) -> f64 {
    scores.iter().map(|s| s.logp).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Raw,
    ByteNorm,
    MutualInfo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceTask {
    #[serde(default)]
    pub id: String,
    pub context: Vec<TokenId>,
    pub candidates: Vec<Vec<TokenId>>,
    /// Byte length of each candidate's text.
    pub candidate_bytes: Vec<usize>,
    pub correct_index: usize,
    #[serde(default)]
    pub normalization: Normalization,
}

impl ChoiceTask {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() < 2 {
            return Err(Error::invalid("a choice task needs at least two candidates"));
        }
        if self.correct_index >= self.candidates.len() {
            return Err(Error::invalid("correct index out of range"));
        }
        if self.candidate_bytes.len() != self.candidates.len() {
            return Err(Error::invalid("one byte length per candidate is required"));
        }
        if self.candidates.iter().any(Vec::is_empty) {
            return Err(Error::invalid("empty candidate"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceOutcome {
    pub chosen_index: usize,
    pub correct: bool,
    pub tie: bool,
    /// Per-candidate value the choice maximized.
    pub values: Vec<f64>,
    /// `values[i] - values[chosen]`.
    pub margins: Vec<f64>,
}

/// Index of the maximum; ties go to the lowest index and are reported.
pub fn argmax_lowest(values: &[f64]) -> (usize, bool) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    let tie = values.iter().enumerate().any(|(i, &v)| i != best && v == values[best]);
    (best, tie)
}

/// Pick among candidates given the conditional scores of each candidate's
/// tokens (and unconditional ones for mutual information).
pub fn choice_eval(
    task: &ChoiceTask,
    conditional: &[Vec<TokenScore>],
    unconditional: Option<&[Vec<TokenScore>]>,
) -> Result<ChoiceOutcome> {
    task.validate()?;
    if conditional.len() != task.candidates.len() {
        return Err(Error::invalid("one score list per candidate is required"));
    }
    let sums: Vec<f64> = conditional.iter().map(|s| sum_logp(s)).collect();
    let values: Vec<f64> = match task.normalization {
        Normalization::Raw => sums,
        Normalization::ByteNorm => {
            if task.candidate_bytes.contains(&0) {
                return Err(Error::invalid("byte normalization needs non-empty candidate text"));
            }
            sums.iter().zip(&task.candidate_bytes).map(|(s, &b)| s / b as f64).collect()
        }
        Normalization::MutualInfo => {
            let u = unconditional
                .filter(|u| u.len() == task.candidates.len())
                .ok_or_else(|| Error::invalid("mutual information needs unconditional scores per candidate"))?;
            sums.iter().zip(u).map(|(s, u)| s - sum_logp(u)).collect()
        }
    };
    let (chosen_index, tie) = argmax_lowest(&values);
    let margins = values.iter().map(|v| v - values[chosen_index]).collect();
    Ok(ChoiceOutcome {
        chosen_index,
        correct: chosen_index == task.correct_index,
        tie,
        values,
        margins,
    })
}

/// Score a choice task with a model: each candidate is scored after the
/// context, and alone when mutual information is requested.
pub fn choice_eval_model(model: &dyn Model, task: &ChoiceTask) -> Result<ChoiceOutcome> {
    task.validate()?;
    let k = task.candidates.len() as u64;
    let mut requests: Vec<ScoreRequest> = task
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| ScoreRequest {
            sequence_id: i as u64,
            tokens: task.context.iter().chain(c).copied().collect(),
        })
        .collect();
    if task.normalization == Normalization::MutualInfo {
        requests.extend(task.candidates.iter().enumerate().map(|(i, c)| ScoreRequest {
            sequence_id: k + i as u64,
            tokens: c.clone(),
        }));
    }
    let mut scores = model.score(&requests, false)?;
    let skip = task.context.len();
    let uncond = scores.split_off(task.candidates.len());
    let cond: Vec<Vec<TokenScore>> = scores.into_iter().map(|s| s[skip..].to_vec()).collect();
    choice_eval(task, &cond, (!uncond.is_empty()).then_some(&uncond[..]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preference {
    pub prefers_inserted: bool,
    pub tie: bool,
}

/// Whether the inserted paraphrase beats the held-out one. The inserted
/// paraphrase is candidate 0, so it wins ties.
pub fn paraphrase_preference(
    inserted: &[TokenScore],
    heldout: &[TokenScore],
    bytes: (usize, usize),
    normalization: Normalization,
    unconditional: Option<(&[TokenScore], &[TokenScore])>,
) -> Result<Preference> {
    let task = ChoiceTask {
        id: String::new(),
        context: Vec::new(),
        candidates: vec![vec![0], vec![0]],
        candidate_bytes: vec![bytes.0, bytes.1],
        correct_index: 0,
        normalization,
    };
    let u = unconditional.map(|(a, b)| vec![a.to_vec(), b.to_vec()]);
    let out = choice_eval(&task, &[inserted.to_vec(), heldout.to_vec()], u.as_deref())?;
    Ok(Preference {
        prefers_inserted: out.chosen_index == 0,
        tie: out.tie,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenMetric {
    Exact,
    PrefixMatch,
    WordRecall,
    RougeL,
}

impl GenMetric {
    pub fn name(self) -> &'static str {
        match self {
            GenMetric::Exact => "exact",
            GenMetric::PrefixMatch => "prefix_match",
            GenMetric::WordRecall => "word_recall",
            GenMetric::RougeL => "rouge_l",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenTask {
    #[serde(default)]
    pub id: String,
    pub prefix: Vec<TokenId>,
    pub reference: String,
    pub metric: GenMetric,
    pub continuation_length: usize,
}

/// Lowercase, drop punctuation and the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let cleaned: String = lower.chars().filter(|c| c.is_alphanumeric() || c.is_whitespace()).collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS-based F1 over whitespace tokens.
pub fn rouge_l(reference: &str, generated: &str) -> f64 {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let g: Vec<&str> = generated.split_whitespace().collect();
    let lcs = lcs_len(&r, &g);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / g.len() as f64;
    let rec = lcs as f64 / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

pub fn generative_eval(reference: &str, generated: &str, metric: GenMetric) -> Result<f64> {
    if generated.trim().is_empty() {
        return Err(Error::invalid("generated text is empty"));
    }
    if reference.trim().is_empty() {
        return Err(Error::invalid("reference is empty"));
    }
    let (r, g) = (normalize_answer(reference), normalize_answer(generated));
    let hit = |b: bool| if b { 1.0 } else { 0.0 };
    Ok(match metric {
        GenMetric::Exact => hit(r == g),
        GenMetric::PrefixMatch => hit(g == r || g.starts_with(&format!("{r} "))),
        GenMetric::WordRecall => hit(format!(" {g} ").contains(&format!(" {r} "))),
        GenMetric::RougeL => rouge_l(reference, generated),
    })
}

/// Greedy-decode `cont_len` tokens from the first `prefix_len` tokens and
/// compare with the passage's own continuation.
pub fn k_eidetic(model: &dyn Model, passage: &[TokenId], prefix_len: usize, cont_len: usize) -> Result<bool> {
    if prefix_len == 0 || passage.len() < prefix_len + cont_len {
        return Err(Error::invalid(format!(
            "passage of {} tokens is shorter than prefix {prefix_len} + continuation {cont_len}",
            passage.len()
        )));
    }
    let generated = crate::lm::generate_greedy(model, &passage[..prefix_len], cont_len)?;
    Ok(generated == passage[prefix_len..prefix_len + cont_len])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordResult {
    pub record_id: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub level: u32,
    pub metric: String,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n: usize,
}

const Z95: f64 = 1.959963984540054;

/// Wilson score interval at 95%.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = Z95 * Z95;
    let centre = (p + z2 / (2.0 * n_f)) / (1.0 + z2 / n_f);
    let half = Z95 * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / (1.0 + z2 / n_f);
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Student-t interval at 95%; degenerate for a single value.
pub fn t_interval(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, mean);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let q = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid dof").inverse_cdf(0.975);
    let half = q * (var / n as f64).sqrt();
    (mean - half, mean + half)
}

/// Group per-record values by duplication level. Values that are all 0/1
/// get a Wilson interval, anything else a t interval. Levels without
/// results are skipped with a warning.
pub fn aggregate_by_duplication(
    results: &[RecordResult],
    assignment: &DuplicationAssignment,
    metric: &str,
) -> Result<Vec<CurvePoint>> {
    if metric.contains([',', '\n', '"']) {
        return Err(Error::invalid("metric names may not contain commas, quotes or newlines"));
    }
    let mut groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for r in results {
        let level = assignment
            .level_of(&r.record_id)
            .ok_or_else(|| Error::invalid(format!("record {} is not in the assignment", r.record_id)))?;
        groups.entry(level).or_default().push(r.value);
    }
    let mut out = Vec::new();
    for &level in &assignment.levels {
        let Some(values) = groups.get(&level) else {
            log::warn!("no {metric} results at duplication level {level}; omitted");
            continue;
        };
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let (ci_lo, ci_hi) = if values.iter().all(|&v| v == 0.0 || v == 1.0) {
            wilson_interval(values.iter().filter(|&&v| v == 1.0).count(), n)
        } else {
            t_interval(values)
        };
        out.push(CurvePoint {
            level,
            metric: metric.to_string(),
            mean,
            ci_lo,
            ci_hi,
            n,
        });
    }
    Ok(out)
}

pub const CURVE_HEADER: &str = "level,metric,mean,ci_lo,ci_hi,n";

pub fn write_curve_csv<W: Write>(out: &mut W, points: &[CurvePoint]) -> Result<()> {
    writeln!(out, "{CURVE_HEADER}")?;
    for p in points {
        writeln!(out, "{},{},{},{},{},{}", p.level, p.metric, p.mean, p.ci_lo, p.ci_hi, p.n)?;
    }
    Ok(())
}

pub fn save_curve_csv(path: impl AsRef<Path>, points: &[CurvePoint]) -> Result<()> {
    let mut buf = Vec::new();
    write_curve_csv(&mut buf, points)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_curve_csv<R: BufRead>(input: R) -> Result<Vec<CurvePoint>> {
    let mut lines = input.lines();
    if lines.next().transpose()?.as_deref() != Some(CURVE_HEADER) {
        return Err(Error::invalid(format!("curve file must start with `{CURVE_HEADER}`")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = || Error::invalid(format!("curve file line {}: malformed row", i + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        out.push(CurvePoint {
            level: f[0].parse().map_err(|_| bad())?,
            metric: f[1].to_string(),
            mean: num(f[2])?,
            ci_lo: num(f[3])?,
            ci_hi: num(f[4])?,
            n: f[5].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
