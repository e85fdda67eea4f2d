//! Membership-inference attacks, ROC AUC, benchmark assembly and
//! unlearning splits.
//!
//! Every attack score follows one convention: higher means more
//! member-like.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::lm::{Model, ScoreRequest, TokenScore, SIGMA_EPS};
use crate::plan::DuplicationAssignment;
use crate::{par, rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attack {
    Loss,
    Mink,
    Minkpp,
    Zlib,
}

impl Attack {
    pub const ALL: [Attack; 4] = [Attack::Loss, Attack::Mink, Attack::Minkpp, Attack::Zlib];

    pub fn name(self) -> &'static str {
        match self {
            Attack::Loss => "loss",
            Attack::Mink => "mink",
            Attack::Minkpp => "minkpp",
            Attack::Zlib => "zlib",
        }
    }
}

impl fmt::Display for Attack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attack {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Attack::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown attack {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiaParams {
    pub k_fraction: f64,
    pub zlib_level: u32,
}

impl Default for MiaParams {
    fn default() -> Self {
        MiaParams {
            k_fraction: 0.2,
            zlib_level: 6,
        }
    }
}

impl MiaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err(Error::invalid("k fraction must be in (0, 1]"));
        }
        if self.zlib_level > 9 {
            return Err(Error::invalid("zlib level must be 0..=9"));
        }
        Ok(())
    }

    /// Compact `key=value` list recorded next to every AUC.
    pub fn describe(&self, attack: Attack) -> String {
        match attack {
            Attack::Loss => String::new(),
            Attack::Mink | Attack::Minkpp => format!("k={}", self.k_fraction),
            Attack::Zlib => format!("zlib_level={}", self.zlib_level),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiaScore {
    pub record_id: String,
    pub attack: Attack,
    pub score: f64,
    pub params: String,
}

/// Mean of the lowest `ceil(k * n)` values.
fn lowest_mean(mut values: Vec<f64>, k: f64) -> f64 {
    let take = ((k * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values.sort_by(f64::total_cmp);
    values[..take].iter().sum::<f64>() / take as f64
}

pub fn zlib_len(bytes: &[u8], level: u32) -> usize {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::new(level));
    enc.write_all(bytes).expect("in-memory write");
    enc.finish().expect("in-memory write").len()
}

pub fn attack_score(attack: Attack, scores: &[TokenScore], text: Option<&[u8]>, params: &MiaParams) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("no token scores"));
    }
    params.validate()?;
    let logps: Vec<f64> = scores.iter().map(|s| s.logp).collect();
    let value = match attack {
        // same summation order as mink, so mink at k = 1 is bit-identical
        Attack::Loss => lowest_mean(logps, 1.0),
        Attack::Mink => lowest_mean(logps, params.k_fraction),
        Attack::Minkpp => {
            let z = scores
                .iter()
                .map(|s| match (s.mu, s.sigma) {
                    (Some(mu), Some(sigma)) => Ok((s.logp - mu) / sigma.max(SIGMA_EPS)),
                    _ => Err(Error::invalid("minkpp needs mu and sigma for every token")),
                })
                .collect::<Result<Vec<f64>>>()?;
            lowest_mean(z, params.k_fraction)
        }
        Attack::Zlib => {
            let text = text.ok_or_else(|| Error::invalid("zlib attack needs the record text"))?;
            let len = zlib_len(text, params.zlib_level);
            if text.is_empty() || len == 0 {
                return Err(Error::invalid("zlib attack needs non-empty text"));
            }
            logps.iter().sum::<f64>() / len as f64
        }
    };
    if !value.is_finite() {
        return Err(Error::invalid(format!("{attack} score is not finite")));
    }
    Ok(value)
}

pub fn mia_score(
    record_id: &str,
    attack: Attack,
    scores: &[TokenScore],
    text: Option<&[u8]>,
    params: &MiaParams,
) -> Result<MiaScore> {
    Ok(MiaScore {
        record_id: record_id.to_string(),
        attack,
        score: attack_score(attack, scores, text, params)?,
        params: params.describe(attack),
    })
}

/// `P(member > nonmember) + P(tie) / 2`, exact.
pub fn roc_auc(members: &[f64], nonmembers: &[f64]) -> Result<f64> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::invalid("AUC needs at least one member and one non-member"));
    }
    if members.iter().chain(nonmembers).any(|v| v.is_nan()) {
        return Err(Error::invalid("AUC scores contain NaN"));
    }
    let mut neg = nonmembers.to_vec();
    neg.sort_by(f64::total_cmp);
    // Twice the Mann-Whitney U, kept integral.
    let mut twice_u: u128 = 0;
    for &m in members {
        let below = neg.partition_point(|&x| x < m);
        let upto = neg.partition_point(|&x| x <= m);
        twice_u += 2 * below as u128 + (upto - below) as u128;
    }
    Ok(twice_u as f64 / (2 * members.len() as u128 * neg.len() as u128) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MemberLevel {
    Level(u32),
    AnyNonzero,
}

impl fmt::Display for MemberLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemberLevel::Level(l) => write!(f, "{l}"),
            MemberLevel::AnyNonzero => f.write_str("any_nonzero"),
        }
    }
}

impl FromStr for MemberLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "any_nonzero" | "nonzero" => Ok(MemberLevel::AnyNonzero),
            _ => match s.parse::<u32>() {
                Ok(0) | Err(_) => Err(Error::invalid(format!("member level must be a positive level or any_nonzero, got {s}"))),
                Ok(l) => Ok(MemberLevel::Level(l)),
            },
        }
    }
}

impl Serialize for MemberLevel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MemberLevel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiaBenchmark {
    pub dataset: String,
    pub model_tag: String,
    pub member_level: MemberLevel,
    pub members: Vec<String>,
    pub nonmembers: Vec<String>,
}

pub fn build_mia_benchmark(
    assignment: &DuplicationAssignment,
    member_level: MemberLevel,
    dataset: &str,
    model_tag: &str,
) -> Result<MiaBenchmark> {
    let nonmembers: Vec<String> = assignment.ids_at(0).into_iter().map(str::to_string).collect();
    if nonmembers.is_empty() {
        return Err(Error::invalid("the assignment has no level-0 records to serve as non-members"));
    }
    let members: Vec<String> = assignment
        .iter()
        .filter(|&(_, l)| match member_level {
            MemberLevel::Level(want) => l == want,
            MemberLevel::AnyNonzero => l > 0,
        })
        .map(|(id, _)| id.to_string())
        .collect();
    if members.is_empty() {
        return Err(Error::invalid(format!("no members at level {member_level}")));
    }
    Ok(MiaBenchmark {
        dataset: dataset.to_string(),
        model_tag: model_tag.to_string(),
        member_level,
        members,
        nonmembers,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlearnSplits {
    pub unseen: Vec<String>,
    pub unlearn: Vec<String>,
    pub keep: Vec<String>,
}

/// Split the records at `level` (256 by default in the CLI) into unlearn
/// and keep halves; on an odd count unlearn gets the extra record.
pub fn build_unlearning_splits(assignment: &DuplicationAssignment, level: u32, seed: u64) -> Result<UnlearnSplits> {
    let mut top: Vec<String> = assignment.ids_at(level).into_iter().map(str::to_string).collect();
    if top.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 records at level {level}, found {}", top.len())));
    }
    rng::shuffle(&mut rng::seeded(seed), &mut top);
    let keep = top.split_off(top.len().div_ceil(2));
    let mut unlearn = top;
    let mut keep = keep;
    unlearn.sort();
    keep.sort();
    Ok(UnlearnSplits {
        unseen: assignment.ids_at(0).into_iter().map(str::to_string).collect(),
        unlearn,
        keep,
    })
}

/// A record to attack: its scored tokens and original text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiaRecord {
    pub record_id: String,
    pub tokens: Vec<TokenId>,
    pub text: Option<String>,
}

pub type ScoreTable = BTreeMap<String, BTreeMap<Attack, f64>>;

/// Score every record with every attack. Attacks that need missing inputs
/// (moments, text) are left out for that record.
pub fn score_records(model: &dyn Model, records: &[MiaRecord], attacks: &[Attack], params: &MiaParams) -> Result<ScoreTable> {
    params.validate()?;
    let with_moments = attacks.contains(&Attack::Minkpp) && model.supports_moments();
    let requests: Vec<ScoreRequest> = records
        .iter()
        .enumerate()
        .map(|(i, r)| ScoreRequest {
            sequence_id: i as u64,
            tokens: r.tokens.clone(),
        })
        .collect();
    let scores = model.score(&requests, with_moments)?;
    let rows = par::map_range(records.len(), |i| {
        let r = &records[i];
        let mut row = BTreeMap::new();
        for &a in attacks {
            match attack_score(a, &scores[i], r.text.as_deref().map(str::as_bytes), params) {
                Ok(v) => {
                    row.insert(a, v);
                }
                Err(e) => log::debug!("{a} unavailable for {}: {e}", r.record_id),
            }
        }
        (r.record_id.clone(), row)
    });
    Ok(rows.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucRow {
    pub dataset: String,
    pub model_tag: String,
    pub attack: Attack,
    pub member_level: MemberLevel,
    pub auc: f64,
    pub n_members: usize,
    pub n_nonmembers: usize,
    pub params: String,
}

/// AUC per (benchmark, attack) cell.
pub fn run_mia_suite(
    benchmarks: &[MiaBenchmark],
    attacks: &[Attack],
    scores: &ScoreTable,
    params: &MiaParams,
) -> Result<Vec<AucRow>> {
    let mut missing = BTreeSet::new();
    for b in benchmarks {
        for id in b.members.iter().chain(&b.nonmembers) {
            for a in attacks {
                if scores.get(id).and_then(|r| r.get(a)).is_none() {
                    missing.insert(format!("{id}/{a}"));
                }
            }
        }
    }
    if !missing.is_empty() {
        let list: Vec<String> = missing.into_iter().collect();
        return Err(Error::invalid(format!("missing attack scores: {}", list.join(", "))));
    }
    let cells: Vec<(&MiaBenchmark, Attack)> =
        benchmarks.iter().flat_map(|b| attacks.iter().map(move |&a| (b, a))).collect();
    par::try_map(&cells, |&(b, a)| {
        let pick = |ids: &[String]| -> Vec<f64> { ids.iter().map(|id| scores[id][&a]).collect() };
        Ok(AucRow {
            dataset: b.dataset.clone(),
            model_tag: b.model_tag.clone(),
            attack: a,
            member_level: b.member_level,
            auc: roc_auc(&pick(&b.members), &pick(&b.nonmembers))?,
            n_members: b.members.len(),
            n_nonmembers: b.nonmembers.len(),
            params: params.describe(a),
        })
    })
}

pub const AUC_HEADER: &str = "dataset,model_tag,attack,member_level,auc,n_members,n_nonmembers,params";

pub fn write_auc_csv<W: Write>(out: &mut W, rows: &[AucRow]) -> Result<()> {
    writeln!(out, "{AUC_HEADER}")?;
    for r in rows {
        for field in [&r.dataset, &r.model_tag, &r.params] {
            if field.contains([',', '\n', '"']) {
                return Err(Error::invalid(format!("field `{field}` cannot be written to CSV")));
            }
        }
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.dataset, r.model_tag, r.attack, r.member_level, r.auc, r.n_members, r.n_nonmembers, r.params
        )?;
    }
    Ok(())
}
