//! Desk-scale reference experiments with the n-gram oracle.
//!
//! Two experiments share one synthetic source and one seed:
//!
//! * dilution: the same passages are inserted into corpora of increasing
//!   size (each a prefix of the next); per-level log-likelihood gaps between
//!   the perturbed and standard models, plus k-eidetic rates
//! * mia: membership-inference AUCs per duplication level against both the
//!   perturbed and the standard model
//!
//! Outputs are CSVs and a plain-text report; they depend only on the
//! config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{SequenceSpec, Sequencer, TokenCorpus};
use crate::decontam::{self, ContaminationPolicy, PolicyMode, SuffixIndex};
use crate::insert::{apply_schedule, PerturbedCorpusView};
use crate::lm::{Model, NGramParams, NGramRefLM, ScoreRequest};
use crate::memscore::{self, CurvePoint, RecordResult};
use crate::mia::{self, Attack, AucRow, MemberLevel, MiaBenchmark, MiaParams, MiaRecord};
use crate::plan::{self, Domain, DuplicationAssignment, PerturbationRecord, Window};
use crate::synth::{self, MarkovSource, SourceConfig};
use crate::{par, rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelCount {
    pub level: u32,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DilutionConfig {
    /// Ascending corpus sizes; each corpus is a prefix of the next.
    pub corpus_tokens: Vec<u64>,
    pub sequence_length: usize,
    pub record_length: usize,
    pub levels: Vec<LevelCount>,
    pub eidetic_prefix: usize,
    pub eidetic_continuation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiaConfig {
    pub corpus_tokens: u64,
    pub sequence_length: usize,
    pub record_length: usize,
    pub levels: Vec<LevelCount>,
    #[serde(default = "default_attacks")]
    pub attacks: Vec<Attack>,
    #[serde(default)]
    pub params: MiaParams,
    /// Buckets smaller than this are left out of the null check.
    #[serde(default = "default_min_bucket")]
    pub min_bucket: usize,
}

fn default_attacks() -> Vec<Attack> {
    Attack::ALL.to_vec()
}

fn default_min_bucket() -> usize {
    200
}

fn default_threshold() -> usize {
    40
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default)]
    pub lm: NGramParams,
    #[serde(default)]
    pub window: Window,
    #[serde(default = "default_threshold")]
    pub decontam_threshold: usize,
    #[serde(default)]
    pub dilution: Option<DilutionConfig>,
    #[serde(default)]
    pub mia: Option<MiaConfig>,
}

fn levels(v: &[(u32, usize)]) -> Vec<LevelCount> {
    v.iter().map(|&(level, count)| LevelCount { level, count }).collect()
}

impl ExperimentConfig {
    /// The full desk configuration: 5M/25M-token dilution corpora with 100
    /// passages per level, and a 8M-token MIA corpus.
    pub fn desk() -> Self {
        ExperimentConfig {
            name: "desk".into(),
            seed: 20_240_917,
            source: SourceConfig::default(),
            lm: NGramParams::default(),
            window: Window::default(),
            decontam_threshold: 40,
            dilution: Some(DilutionConfig {
                corpus_tokens: vec![5_000_000, 25_000_000],
                sequence_length: 128,
                record_length: 96,
                levels: levels(&[(0, 100), (1, 100), (4, 100), (16, 100), (64, 100), (256, 100)]),
                eidetic_prefix: 32,
                eidetic_continuation: 64,
            }),
            mia: Some(MiaConfig {
                corpus_tokens: 8_000_000,
                sequence_length: 32,
                record_length: 24,
                levels: levels(&[(0, 3000), (1, 1000), (4, 1000), (16, 1000), (64, 500), (256, 500)]),
                attacks: default_attacks(),
                params: MiaParams::default(),
                min_bucket: 200,
            }),
        }
    }

    /// A seconds-scale configuration exercising every stage.
    pub fn smoke() -> Self {
        ExperimentConfig {
            name: "smoke".into(),
            seed: 7,
            source: SourceConfig {
                vocab_size: 512,
                branching: 12,
                min_doc_len: 32,
                max_doc_len: 256,
                ..SourceConfig::default()
            },
            lm: NGramParams::default(),
            window: Window::default(),
            decontam_threshold: 40,
            dilution: Some(DilutionConfig {
                corpus_tokens: vec![60_000, 200_000],
                sequence_length: 64,
                record_length: 40,
                levels: levels(&[(0, 10), (1, 10), (4, 10), (16, 10), (64, 5)]),
                eidetic_prefix: 10,
                eidetic_continuation: 20,
            }),
            mia: Some(MiaConfig {
                corpus_tokens: 100_000,
                sequence_length: 32,
                record_length: 16,
                levels: levels(&[(0, 40), (1, 20), (16, 20), (64, 10)]),
                attacks: default_attacks(),
                params: MiaParams::default(),
                min_bucket: 200,
            }),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::invalid(format!("experiment config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("experiment config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.lm.weights()?;
        self.window.validate()?;
        let check_levels = |ls: &[LevelCount], what: &str| -> Result<()> {
            let mut seen: Vec<u32> = ls.iter().map(|l| l.level).collect();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != ls.len() || ls.is_empty() {
                return Err(Error::invalid(format!("{what}: levels must be distinct and non-empty")));
            }
            Ok(())
        };
        if let Some(d) = &self.dilution {
            check_levels(&d.levels, "dilution")?;
            if d.corpus_tokens.is_empty() || d.corpus_tokens.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid("dilution corpus sizes must be strictly ascending"));
            }
            if d.record_length < d.eidetic_prefix + d.eidetic_continuation || d.eidetic_prefix == 0 {
                return Err(Error::invalid("records must cover the k-eidetic prefix and continuation"));
            }
            if d.record_length + 2 > d.sequence_length {
                return Err(Error::invalid("dilution records do not fit a sequence"));
            }
        }
        if let Some(m) = &self.mia {
            check_levels(&m.levels, "mia")?;
            m.params.validate()?;
            if !m.levels.iter().any(|l| l.level == 0 && l.count > 0) {
                return Err(Error::invalid("mia needs level-0 records as non-members"));
            }
            if m.record_length == 0 || m.record_length + 2 > m.sequence_length {
                return Err(Error::invalid("mia records do not fit a sequence"));
            }
        }
        if self.dilution.is_none() && self.mia.is_none() {
            return Err(Error::invalid("config has neither a dilution nor a mia section"));
        }
        Ok(())
    }

    fn max_tokens(&self) -> u64 {
        let d = self.dilution.as_ref().and_then(|d| d.corpus_tokens.last().copied()).unwrap_or(0);
        let m = self.mia.as_ref().map_or(0, |m| m.corpus_tokens);
        d.max(m)
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn make_records(
    source: &MarkovSource,
    prefix: &str,
    dataset: &str,
    count: usize,
    len: usize,
    seed: u64,
) -> Vec<PerturbationRecord> {
    par::map_range(count, |i| {
        let tokens = source.passage(len, &mut rng::seeded_stream(seed, i as u64));
        let mut r = PerturbationRecord::new(format!("{prefix}{i:05}"), Domain::Copyright, dataset, tokens);
        r.text = Some(synth::render(&r.tokens));
        r
    })
}

fn total(levels: &[LevelCount]) -> usize {
    levels.iter().map(|l| l.count).sum()
}

fn assign(records: &[PerturbationRecord], levels: &[LevelCount], seed: u64) -> Result<DuplicationAssignment> {
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let counts: Vec<(u32, usize)> = levels.iter().map(|l| (l.level, l.count)).collect();
    plan::assign_with_counts(&ids, &counts, seed)
}

/// Standard and perturbed views of one corpus.
fn perturbed_view<'a>(
    corpus: &'a TokenCorpus,
    sequence_length: usize,
    assignment: &DuplicationAssignment,
    records: &[PerturbationRecord],
    window: Window,
    seed: u64,
) -> Result<PerturbedCorpusView<'a>> {
    let spec = SequenceSpec {
        sequence_length,
        shuffle_seed: rng::derive_seed(seed, "shuffle"),
        ..SequenceSpec::default()
    };
    let sequencer = Sequencer::new(corpus, spec)?;
    let schedule = plan::schedule_insertions(
        assignment,
        sequencer.sequence_count(),
        window,
        rng::derive_seed(seed, "schedule"),
    )?;
    apply_schedule(sequencer, &schedule, records, rng::derive_seed(seed, "splice"))
}

fn norm_logliks(model: &dyn Model, records: &[PerturbationRecord]) -> Result<Vec<f64>> {
    let requests: Vec<ScoreRequest> = records
        .iter()
        .enumerate()
        .map(|(i, r)| ScoreRequest {
            sequence_id: i as u64,
            tokens: r.tokens.clone(),
        })
        .collect();
    model
        .score(&requests, false)?
        .iter()
        .map(|s| memscore::norm_loglik(s))
        .collect()
}

fn results(records: &[PerturbationRecord], values: &[f64]) -> Vec<RecordResult> {
    records
        .iter()
        .zip(values)
        .map(|(r, &value)| RecordResult {
            record_id: r.id.clone(),
            value,
        })
        .collect()
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeResult {
    pub corpus_tokens: u64,
    pub sequences: u64,
    pub curves: Vec<CurvePoint>,
    /// Per level, the per-record log-likelihood gaps.
    pub gaps: BTreeMap<u32, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DilutionCheck {
    pub level: u32,
    pub small_tokens: u64,
    pub large_tokens: u64,
    pub gap_small: f64,
    pub se_small: f64,
    pub gap_large: f64,
    pub se_large: f64,
    /// `gap_large <= gap_small + sqrt(se_small^2 + se_large^2)`.
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DilutionResult {
    pub sizes: Vec<SizeResult>,
    pub checks: Vec<DilutionCheck>,
}

impl DilutionResult {
    pub fn curve(&self, corpus_tokens: u64, metric: &str, level: u32) -> Option<&CurvePoint> {
        self.sizes
            .iter()
            .find(|s| s.corpus_tokens == corpus_tokens)?
            .curves
            .iter()
            .find(|p| p.metric == metric && p.level == level)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiaResult {
    pub rows: Vec<AucRow>,
    pub min_bucket: usize,
}

impl MiaResult {
    pub fn auc(&self, model_tag: &str, attack: Attack, level: MemberLevel) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model_tag == model_tag && r.attack == attack && r.member_level == level)
            .map(|r| r.auc)
    }

    /// Standard-model cells with at least `min_bucket` members whose AUC
    /// lies outside [0.45, 0.55].
    pub fn null_violations(&self) -> Vec<&AucRow> {
        self.rows
            .iter()
            .filter(|r| r.model_tag == "standard" && r.n_members >= self.min_bucket)
            .filter(|r| !(0.45..=0.55).contains(&r.auc))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentOutcome {
    pub name: String,
    pub dilution: Option<DilutionResult>,
    pub mia: Option<MiaResult>,
}

/// Synthetic base corpus plus every experiment's records, decontaminated
/// against each other.
struct Prepared {
    corpus: TokenCorpus,
    dilution_records: Vec<PerturbationRecord>,
    mia_records: Vec<PerturbationRecord>,
}

fn prepare(config: &ExperimentConfig, source: &MarkovSource) -> Result<Prepared> {
    let seed = config.seed;
    let base = stage("corpus", source.corpus(config.max_tokens(), rng::derive_seed(seed, "corpus")))?;
    let dilution_records = config.dilution.as_ref().map_or_else(Vec::new, |d| {
        make_records(source, "p", "passages", total(&d.levels), d.record_length, rng::derive_seed(seed, "passages"))
    });
    let mia_records = config.mia.as_ref().map_or_else(Vec::new, |m| {
        make_records(source, "m", "mia", total(&m.levels), m.record_length, rng::derive_seed(seed, "mia-records"))
    });
    let all: Vec<(&str, &[u32])> = dilution_records
        .iter()
        .chain(&mia_records)
        .map(|r| (r.id.as_str(), r.tokens.as_slice()))
        .collect();
    let outcome = stage("decontam", (|| {
        let index = SuffixIndex::build(&base)?;
        let policy = ContaminationPolicy {
            short_threshold: config.decontam_threshold,
            mode: PolicyMode::Auto,
        };
        let reports = decontam::find_contamination_all(&index, &all, &policy)?;
        decontam::apply_decontamination(&base, &reports)
    })())?;
    if !outcome.dropped_perturbations.is_empty() {
        return Err(Error::invalid(format!(
            "decontam: {} synthetic records collide with the corpus; change the seed",
            outcome.dropped_perturbations.len()
        ))
        .in_stage("decontam"));
    }
    if !outcome.removal_log.is_empty() {
        log::info!("decontam removed {} documents", outcome.removal_log.len());
    }
    Ok(Prepared {
        corpus: outcome.corpus,
        dilution_records,
        mia_records,
    })
}

fn run_dilution(config: &ExperimentConfig, d: &DilutionConfig, prepared: &Prepared) -> Result<DilutionResult> {
    let seed = config.seed;
    let records = &prepared.dilution_records;
    let assignment = stage("plan", assign(records, &d.levels, rng::derive_seed(seed, "dilution-assign")))?;
    let level_of: Vec<u32> = records.iter().map(|r| assignment.level_of(&r.id).unwrap_or(0)).collect();
    let mut sizes = Vec::new();
    for &tokens in &d.corpus_tokens {
        let corpus = prepared.corpus.prefix_by_tokens(tokens);
        let view = stage(
            "insert",
            perturbed_view(&corpus, d.sequence_length, &assignment, records, config.window, rng::derive_seed(seed, "dilution")),
        )?;
        let eidetic = |lm: &NGramRefLM| -> Result<Vec<f64>> {
            par::try_map(records, |r| {
                memscore::k_eidetic(lm, &r.tokens, d.eidetic_prefix, d.eidetic_continuation).map(|b| f64::from(u8::from(b)))
            })
        };
        let (std_ll, std_ke) = {
            let lm = stage("train-lm", NGramRefLM::train_view(&PerturbedCorpusView::identity(view.sequencer().clone()), config.lm.clone()))?;
            (stage("score", norm_logliks(&lm, records))?, stage("eval", eidetic(&lm))?)
        };
        let (pert_ll, pert_ke) = {
            let lm = stage("train-lm", NGramRefLM::train_view(&view, config.lm.clone()))?;
            (stage("score", norm_logliks(&lm, records))?, stage("eval", eidetic(&lm))?)
        };
        let gap: Vec<f64> = pert_ll.iter().zip(&std_ll).map(|(p, s)| p - s).collect();
        let mut curves = Vec::new();
        for (metric, values) in [
            ("loglik_standard", &std_ll),
            ("loglik_perturbed", &pert_ll),
            ("loss_gap", &gap),
            ("k_eidetic_standard", &std_ke),
            ("k_eidetic_perturbed", &pert_ke),
        ] {
            curves.extend(memscore::aggregate_by_duplication(&results(records, values), &assignment, metric)?);
        }
        let mut gaps: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for (g, &l) in gap.iter().zip(&level_of) {
            gaps.entry(l).or_default().push(*g);
        }
        sizes.push(SizeResult {
            corpus_tokens: tokens,
            sequences: view.sequence_count(),
            curves,
            gaps,
        });
    }
    let mut checks = Vec::new();
    for pair in sizes.windows(2) {
        let (small, large) = (&pair[0], &pair[1]);
        for (&level, gs) in &small.gaps {
            if level < 16 {
                continue;
            }
            let (gap_small, se_small) = mean_se(gs);
            let (gap_large, se_large) = mean_se(&large.gaps[&level]);
            checks.push(DilutionCheck {
                level,
                small_tokens: small.corpus_tokens,
                large_tokens: large.corpus_tokens,
                gap_small,
                se_small,
                gap_large,
                se_large,
                pass: gap_large <= gap_small + (se_small.powi(2) + se_large.powi(2)).sqrt(),
            });
        }
    }
    Ok(DilutionResult { sizes, checks })
}

fn run_mia(config: &ExperimentConfig, m: &MiaConfig, prepared: &Prepared) -> Result<MiaResult> {
    let seed = config.seed;
    let records = &prepared.mia_records;
    let assignment = stage("plan", assign(records, &m.levels, rng::derive_seed(seed, "mia-assign")))?;
    let corpus = prepared.corpus.prefix_by_tokens(m.corpus_tokens);
    let view = stage(
        "insert",
        perturbed_view(&corpus, m.sequence_length, &assignment, records, config.window, rng::derive_seed(seed, "mia")),
    )?;
    let targets: Vec<MiaRecord> = records
        .iter()
        .map(|r| MiaRecord {
            record_id: r.id.clone(),
            tokens: r.tokens.clone(),
            text: r.text.clone(),
        })
        .collect();
    let mut selectors: Vec<MemberLevel> = m
        .levels
        .iter()
        .filter(|l| l.level > 0 && l.count > 0)
        .map(|l| MemberLevel::Level(l.level))
        .collect();
    selectors.sort();
    selectors.push(MemberLevel::AnyNonzero);
    let mut rows = Vec::new();
    for tag in ["standard", "perturbed"] {
        let lm = if tag == "standard" {
            NGramRefLM::train_view(&PerturbedCorpusView::identity(view.sequencer().clone()), config.lm.clone())
        } else {
            NGramRefLM::train_view(&view, config.lm.clone())
        };
        let lm = stage("train-lm", lm)?;
        let scores = stage("score", mia::score_records(&lm, &targets, &m.attacks, &m.params))?;
        let benches: Vec<MiaBenchmark> = selectors
            .iter()
            .map(|&s| mia::build_mia_benchmark(&assignment, s, &config.name, tag))
            .collect::<Result<_>>()?;
        rows.extend(stage("mia", mia::run_mia_suite(&benches, &m.attacks, &scores, &m.params))?);
    }
    Ok(MiaResult {
        rows,
        min_bucket: m.min_bucket,
    })
}

pub fn run_dilution_experiment(config: &ExperimentConfig) -> Result<DilutionResult> {
    let d = config
        .dilution
        .as_ref()
        .ok_or_else(|| Error::invalid("config has no dilution section"))?;
    let only = ExperimentConfig { mia: None, ..config.clone() };
    let source = MarkovSource::new(config.source.clone(), rng::derive_seed(config.seed, "source"))?;
    run_dilution(config, d, &prepare(&only, &source)?)
}

pub fn run_null_experiment(config: &ExperimentConfig) -> Result<MiaResult> {
    let m = config.mia.as_ref().ok_or_else(|| Error::invalid("config has no mia section"))?;
    let only = ExperimentConfig { dilution: None, ..config.clone() };
    let source = MarkovSource::new(config.source.clone(), rng::derive_seed(config.seed, "source"))?;
    run_mia(config, m, &prepare(&only, &source)?)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let source = MarkovSource::new(config.source.clone(), rng::derive_seed(config.seed, "source"))?;
    let prepared = prepare(config, &source)?;
    let dilution = config.dilution.as_ref().map(|d| run_dilution(config, d, &prepared)).transpose()?;
    let mia = config.mia.as_ref().map(|m| run_mia(config, m, &prepared)).transpose()?;
    Ok(ExperimentOutcome {
        name: config.name.clone(),
        dilution,
        mia,
    })
}

pub const DILUTION_HEADER: &str = "level,small_tokens,large_tokens,gap_small,se_small,gap_large,se_large,pass";

impl ExperimentOutcome {
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment {}", self.name);
        if let Some(d) = &self.dilution {
            for size in &d.sizes {
                let _ = writeln!(s, "\ncorpus {} tokens, {} sequences", size.corpus_tokens, size.sequences);
                let _ = writeln!(s, "{:>6} {:>12} {:>12} {:>10} {:>8}", "level", "ll_standard", "ll_perturbed", "gap", "eidetic");
                let levels: Vec<u32> = size.gaps.keys().copied().collect();
                for level in levels {
                    let get = |m: &str| {
                        size.curves
                            .iter()
                            .find(|p| p.metric == m && p.level == level)
                            .map_or(f64::NAN, |p| p.mean)
                    };
                    let _ = writeln!(
                        s,
                        "{level:>6} {:>12.4} {:>12.4} {:>10.4} {:>8.3}",
                        get("loglik_standard"),
                        get("loglik_perturbed"),
                        get("loss_gap"),
                        get("k_eidetic_perturbed")
                    );
                }
            }
            let _ = writeln!(s, "\ndilution (larger corpus gap <= smaller gap + pooled SE):");
            for c in &d.checks {
                let _ = writeln!(
                    s,
                    "  level {:>3}: {:.4} ({}) vs {:.4} ({}) {}",
                    c.level,
                    c.gap_small,
                    c.small_tokens,
                    c.gap_large,
                    c.large_tokens,
                    if c.pass { "ok" } else { "REVERSED" }
                );
            }
        }
        if let Some(m) = &self.mia {
            let _ = writeln!(s, "\nMIA AUC (members vs level-0 non-members)");
            for r in &m.rows {
                let _ = writeln!(
                    s,
                    "  {:<9} {:<7} level {:<11} auc {:.4} (n={}/{}) {}",
                    r.model_tag, r.attack, r.member_level, r.auc, r.n_members, r.n_nonmembers, r.params
                );
            }
            let v = m.null_violations();
            let _ = writeln!(s, "standard-model cells outside [0.45, 0.55] with n >= {}: {}", m.min_bucket, v.len());
        }
        s
    }

    /// Write curve CSVs, the dilution table, the AUC table and the report
    /// into `dir`. Returns the written paths.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        if let Some(d) = &self.dilution {
            for size in &d.sizes {
                let p = dir.join(format!("curves_{}.csv", size.corpus_tokens));
                memscore::save_curve_csv(&p, &size.curves)?;
                written.push(p);
            }
            let mut t = format!("{DILUTION_HEADER}\n");
            for c in &d.checks {
                let _ = writeln!(
                    t,
                    "{},{},{},{},{},{},{},{}",
                    c.level, c.small_tokens, c.large_tokens, c.gap_small, c.se_small, c.gap_large, c.se_large, c.pass
                );
            }
            let p = dir.join("dilution.csv");
            std::fs::write(&p, t)?;
            written.push(p);
        }
        if let Some(m) = &self.mia {
            let mut buf = Vec::new();
            mia::write_auc_csv(&mut buf, &m.rows)?;
            let p = dir.join("auc.csv");
            std::fs::write(&p, buf)?;
            written.push(p);
        }
        let p = dir.join("report.txt");
        std::fs::write(&p, self.report())?;
        written.push(p);
        Ok(written)
    }
}
