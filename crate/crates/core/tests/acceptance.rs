//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion
//! straight to stderr so the lines show up without `--nocapture`.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use memaudit::biogen::{self, AttributeTables, Biography};
use memaudit::corpus::{SequenceSpec, Sequencer, TokenCorpus};
use memaudit::decontam::{self, ContaminationPolicy, Decision, PolicyMode, SuffixIndex};
use memaudit::insert;
use memaudit::lm::TokenScore;
use memaudit::memscore::{self, ChoiceTask, Normalization};
use memaudit::mia::{self, Attack, MemberLevel, MiaParams};
use memaudit::plan::{self, Domain, PerturbationRecord, Window};
use memaudit::refexp::{ExperimentConfig, ExperimentOutcome};
use memaudit::rng;
use memaudit::synth::{MarkovSource, SourceConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn report(n: usize, name: &str, v: &Verdict) {
    let line = format!("{} {n}. {name}: {}\n", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn insertion_exactness() -> Verdict {
    let t0 = Instant::now();
    let source = MarkovSource::new(SourceConfig::default(), 101).unwrap();
    let base = source.corpus(10_000_000, 102).unwrap();
    let counts = [(0, 250), (1, 100), (4, 100), (16, 50), (64, 25), (256, 10)];
    let n: usize = counts.iter().map(|c| c.1).sum();
    let records: Vec<PerturbationRecord> = (0..n)
        .map(|i| {
            let tokens = source.passage(64, &mut rng::seeded_stream(103, i as u64));
            PerturbationRecord::new(format!("r{i:04}"), Domain::Copyright, "acceptance", tokens)
        })
        .collect();
    let pairs: Vec<(&str, &[u32])> = records.iter().map(|r| (r.id.as_str(), r.tokens.as_slice())).collect();
    let index = SuffixIndex::build(&base).unwrap();
    let reports = decontam::find_contamination_all(&index, &pairs, &ContaminationPolicy::default()).unwrap();
    let cleaned = decontam::apply_decontamination(&base, &reports).unwrap();
    drop(index);
    if !cleaned.dropped_perturbations.is_empty() {
        return verdict(false, format!("{} records collide with the corpus", cleaned.dropped_perturbations.len()));
    }
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let asg = plan::assign_with_counts(&ids, &counts, 104).unwrap();
    let seq = Sequencer::new(&cleaned.corpus, SequenceSpec::new(512, 105)).unwrap();
    let sched = plan::schedule_insertions(&asg, seq.sequence_count(), Window::default(), 106).unwrap();
    let view = insert::apply_schedule(seq, &sched, &records, 107).unwrap();
    let rep = insert::verify_insertion(&view, &asg, &records).unwrap();
    let elapsed = t0.elapsed();
    let tokens = cleaned.corpus.token_count();
    verdict(
        rep.all_pass && rep.mismatches == 0 && tokens >= 9_900_000 && elapsed < Duration::from_secs(120),
        format!(
            "{} records on {tokens} tokens, {} mismatches, {:.1}s",
            rep.records.len(),
            rep.mismatches,
            secs(elapsed)
        ),
    )
}

/// Every occurrence of every probe window by direct scan.
fn brute_force(docs: &[&[u32]], p: &[u32], threshold: usize) -> (BTreeSet<(u64, u64, u64)>, Decision) {
    let n = p.len();
    let windows: Vec<(usize, usize)> = if n <= threshold {
        vec![(0, n)]
    } else {
        let (w, s) = (n.div_ceil(2), n.div_ceil(4));
        let mut v: Vec<(usize, usize)> = (0..).map(|k| k * s).take_while(|&st| st + w <= n).map(|st| (st, w)).collect();
        if v.last().map(|&(st, _)| st + w) != Some(n) {
            v.push((n - w, w));
        }
        v
    };
    let mut hits = BTreeSet::new();
    for (start, len) in windows {
        let needle = &p[start..start + len];
        for (d, doc) in docs.iter().enumerate() {
            for (off, win) in doc.windows(len).enumerate() {
                if win == needle {
                    hits.insert((d as u64, off as u64, len as u64));
                }
            }
        }
    }
    let decision = match (hits.is_empty(), n <= threshold) {
        (true, _) => Decision::Clean,
        (false, true) => Decision::DropPerturbation,
        (false, false) => Decision::RemoveDocuments,
    };
    (hits, decision)
}

fn decontamination_oracle() -> Verdict {
    let t0 = Instant::now();
    let source = MarkovSource::new(SourceConfig::default(), 201).unwrap();
    let mut docs = source.documents(900_000, 202);
    let mut r = rng::seeded(203);
    // 25 short and 25 long planted copies, plus 50 records that are never planted
    let lens: Vec<usize> = (0..100)
        .map(|i| if i % 2 == 0 { 20 + rng::below(&mut r, 21) as usize } else { 41 + rng::below(&mut r, 80) as usize })
        .collect();
    let records: Vec<(String, Vec<u32>)> = lens
        .iter()
        .enumerate()
        .map(|(i, &len)| (format!("c{i:03}"), source.passage(len, &mut rng::seeded_stream(204, i as u64))))
        .collect();
    let mut planted_short = Vec::new();
    let mut planted_long = Vec::new();
    let mut i = 0;
    while planted_short.len() < 25 || planted_long.len() < 25 {
        let short = records[i].1.len() <= 40;
        let bucket = if short { &mut planted_short } else { &mut planted_long };
        if bucket.len() < 25 {
            bucket.push(i);
        }
        i += 1;
    }
    let planted: BTreeSet<usize> = planted_short.iter().chain(&planted_long).copied().collect();
    let targets = rng::sample_distinct(&mut r, 0, docs.len() as u64, planted.len());
    for (&rec, &d) in planted.iter().zip(&targets) {
        let doc = &mut docs[d as usize];
        let at = rng::below(&mut r, doc.len() as u64 + 1) as usize;
        doc.splice(at..at, records[rec].1.iter().copied());
    }
    let corpus = TokenCorpus::build(&docs, source.corpus_config()).unwrap();
    let policy = ContaminationPolicy {
        short_threshold: 40,
        mode: PolicyMode::Auto,
    };
    let index = SuffixIndex::build(&corpus).unwrap();
    let reports = decontam::find_contamination_all(&index, &records, &policy).unwrap();
    let flagged: BTreeSet<usize> = reports
        .iter()
        .enumerate()
        .filter(|(_, rep)| rep.decision != Decision::Clean)
        .map(|(i, _)| i)
        .collect();
    let tp = flagged.intersection(&planted).count() as f64;
    let precision = if flagged.is_empty() { 0.0 } else { tp / flagged.len() as f64 };
    let recall = tp / planted.len() as f64;

    let doc_slices: Vec<&[u32]> = corpus.documents().collect();
    let disagreements = memaudit::par::map(&records, |(_, p)| brute_force(&doc_slices, p, policy.short_threshold))
        .into_iter()
        .zip(&reports)
        .filter(|((hits, decision), rep)| {
            let got: BTreeSet<(u64, u64, u64)> = rep.matches.iter().map(|m| (m.document_id, m.offset, m.length)).collect();
            got != *hits || rep.decision != *decision
        })
        .count();
    let elapsed = t0.elapsed();
    verdict(
        precision == 1.0 && recall == 1.0 && disagreements == 0 && corpus.token_count() <= 1_000_000 && elapsed < Duration::from_secs(60),
        format!(
            "precision {precision:.3}, recall {recall:.3} on {} planted ({} short, {} long), {disagreements} brute-force disagreements over {} tokens, {:.1}s",
            planted.len(),
            planted_short.len(),
            planted_long.len(),
            corpus.token_count(),
            secs(elapsed)
        ),
    )
}

fn curve_mean(outcome: &ExperimentOutcome, tokens: u64, metric: &str, level: u32) -> f64 {
    outcome.dilution.as_ref().unwrap().curve(tokens, metric, level).map_or(f64::NAN, |p| p.mean)
}

fn memorization_trend(outcome: &ExperimentOutcome, config: &ExperimentConfig) -> Verdict {
    let d = config.dilution.as_ref().unwrap();
    let small = d.corpus_tokens[0];
    let levels = [1, 4, 16, 64, 256];
    let ll: Vec<f64> = levels.iter().map(|&l| curve_mean(outcome, small, "loglik_perturbed", l)).collect();
    let increasing = ll.windows(2).all(|w| w[1] > w[0]);
    let per_level = outcome.dilution.as_ref().unwrap().sizes[0].gaps.values().map(Vec::len).min().unwrap_or(0);
    let lift = curve_mean(outcome, small, "k_eidetic_perturbed", 256) - curve_mean(outcome, small, "k_eidetic_perturbed", 0);
    let shown: Vec<String> = ll.iter().map(|v| format!("{v:.3}")).collect();
    verdict(
        increasing && lift >= 0.3 && per_level >= 100 && config.lm.order == 5,
        format!("norm loglik 1..256 = [{}], k-eidetic lift {lift:.2}, {per_level}+ records per level", shown.join(", ")),
    )
}

fn dilution_trend(outcome: &ExperimentOutcome) -> Verdict {
    let checks = &outcome.dilution.as_ref().unwrap().checks;
    let shown: Vec<String> = checks
        .iter()
        .map(|c| format!("L{} {:.3}->{:.3}", c.level, c.gap_small, c.gap_large))
        .collect();
    let levels: BTreeSet<u32> = checks.iter().map(|c| c.level).collect();
    verdict(
        !checks.is_empty() && checks.iter().all(|c| c.pass) && levels == BTreeSet::from([16, 64, 256]),
        format!("loss gap small->large corpus: {}", shown.join(", ")),
    )
}

fn mia_trend(outcome: &ExperimentOutcome, config: &ExperimentConfig) -> Verdict {
    let m = outcome.mia.as_ref().unwrap();
    let mut levels: Vec<u32> = config.mia.as_ref().unwrap().levels.iter().map(|l| l.level).filter(|&l| l > 0).collect();
    levels.sort_unstable();
    let mut problems = Vec::new();
    let mut at_top = Vec::new();
    for attack in Attack::ALL {
        let aucs: Vec<f64> = levels
            .iter()
            .map(|&l| m.auc("perturbed", attack, MemberLevel::Level(l)).unwrap_or(f64::NAN))
            .collect();
        if !aucs.windows(2).all(|w| w[1] >= w[0]) {
            problems.push(format!("{attack} not monotone {aucs:?}"));
        }
        let top = *aucs.last().unwrap();
        if !(top >= 0.9) {
            problems.push(format!("{attack} auc {top:.3} at top level"));
        }
        at_top.push(format!("{attack} {top:.3}"));
    }
    let null: Vec<&mia::AucRow> = m.rows.iter().filter(|r| r.model_tag == "standard" && r.n_members >= 200).collect();
    let violations = m.null_violations();
    for v in &violations {
        problems.push(format!("standard {} {} auc {:.3}", v.attack, v.member_level, v.auc));
    }
    let (lo, hi) = null.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.auc), hi.max(r.auc)));
    verdict(
        problems.is_empty() && !null.is_empty(),
        if problems.is_empty() {
            format!("perturbed auc at 256: {}; {} standard cells in [{lo:.3}, {hi:.3}]", at_top.join(", "), null.len())
        } else {
            problems.join("; ")
        },
    )
}

fn token_scores(logps: &[f64]) -> Vec<TokenScore> {
    logps
        .iter()
        .enumerate()
        .map(|(i, &logp)| TokenScore {
            sequence_id: 0,
            position: i as u32,
            token_id: 0,
            logp,
            mu: None,
            sigma: None,
        })
        .collect()
}

fn metric_oracles() -> Verdict {
    let mut r = rng::seeded(601);
    let mut failures = Vec::new();

    let mut auc_bad = 0;
    for _ in 0..100 {
        let draw = |r: &mut rng::Rng| -> Vec<f64> {
            let n = 1 + rng::below(r, 80) as usize;
            (0..n).map(|_| rng::below(r, 20) as f64 / 2.0).collect()
        };
        let (m, n) = (draw(&mut r), draw(&mut r));
        let twice: u64 = m
            .iter()
            .flat_map(|a| n.iter().map(move |b| if a > b { 2 } else { u64::from(a == b) }))
            .sum();
        if mia::roc_auc(&m, &n).unwrap() != twice as f64 / (2 * m.len() * n.len()) as f64 {
            auc_bad += 1;
        }
    }
    if auc_bad > 0 {
        failures.push(format!("auc differs on {auc_bad} instances"));
    }

    const WORDS: [&str; 6] = ["a", "the", "cat", "dog", "sat", "mat"];
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let words = |r: &mut rng::Rng| -> Vec<&str> { (0..1 + rng::below(r, 30)).map(|_| WORDS[rng::below(r, 6) as usize]).collect() };
        let (a, b) = (words(&mut r), words(&mut r));
        let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                t[i][j] = if a[i - 1] == b[j - 1] { t[i - 1][j - 1] + 1 } else { t[i - 1][j].max(t[i][j - 1]) };
            }
        }
        let lcs = t[a.len()][b.len()] as f64;
        let f1 = if lcs == 0.0 { 0.0 } else { 2.0 * lcs / (a.len() + b.len()) as f64 };
        worst = worst.max((memscore::rouge_l(&a.join(" "), &b.join(" ")) - f1).abs());
    }
    if worst >= 1e-12 {
        failures.push(format!("rouge-l off by {worst:e}"));
    }

    let all = MiaParams { k_fraction: 1.0, ..MiaParams::default() };
    let mink_bad = (0..500)
        .filter(|_| {
            let n = 1 + rng::below(&mut r, 64) as usize;
            let s = token_scores(&(0..n).map(|_| -12.0 * rng::unit(&mut r)).collect::<Vec<_>>());
            mia::attack_score(Attack::Mink, &s, None, &all).unwrap() != mia::attack_score(Attack::Loss, &s, None, &all).unwrap()
        })
        .count();
    if mink_bad > 0 {
        failures.push(format!("mink(1.0) differs from loss {mink_bad} times"));
    }

    let mut mi_bad = 0;
    for _ in 0..500 {
        let k = 2 + rng::below(&mut r, 6) as usize;
        let cond: Vec<Vec<TokenScore>> = (0..k)
            .map(|_| {
                let n = 1 + rng::below(&mut r, 5) as usize;
                token_scores(&(0..n).map(|_| -(rng::below(&mut r, 40) as f64) / 4.0).collect::<Vec<_>>())
            })
            .collect();
        let uncond = vec![token_scores(&[-2.25, -0.5]); k];
        let task = |normalization| ChoiceTask {
            id: String::new(),
            context: vec![1],
            candidates: vec![vec![2]; k],
            candidate_bytes: vec![3; k],
            correct_index: 0,
            normalization,
        };
        let raw = memscore::choice_eval(&task(Normalization::Raw), &cond, None).unwrap();
        let mi = memscore::choice_eval(&task(Normalization::MutualInfo), &cond, Some(&uncond)).unwrap();
        if raw.chosen_index != mi.chosen_index {
            mi_bad += 1;
        }
    }
    if mi_bad > 0 {
        failures.push(format!("mutual-info argmax differs {mi_bad} times"));
    }

    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "auc x100 exact, rouge-l x500, mink(1.0) x500 exact, mutual-info argmax x500 exact".to_string()
        } else {
            failures.join("; ")
        },
    )
}

const DORA_TEXT: &str = "Dora Sloan is from the United States. Dora was born in Phoenix, Arizona. Dora is an alumni of St. John's College. Dora was born on May 15, 1968. Dora receives email at dora@gmail.com. Dora is a competitive diver. Dora has the unique identifier 4dc0969af29a4324bf5746c50f7209a2.";

fn template_bijectivity() -> Verdict {
    let tables = AttributeTables::default_tables();
    let bad = memaudit::par::map_range(10_000, |i| {
        let bio = biogen::sample_biography(&tables, 700 + i as u64);
        let text = biogen::render_biography(&bio);
        text == bio.rendered_text && biogen::parse_biography(&text).ok().as_ref() == Some(&bio)
    })
    .into_iter()
    .filter(|ok| !ok)
    .count();
    let dora = Biography {
        full_name: "Dora Sloan".into(),
        first_name: "Dora".into(),
        nationality: "the United States".into(),
        birthplace: "Phoenix, Arizona".into(),
        university: "St. John's College".into(),
        birthdate: NaiveDate::from_ymd_opt(1968, 5, 15).unwrap(),
        email: "dora@gmail.com".into(),
        occupation: "competitive diver".into(),
        uuid: "4dc0969af29a4324bf5746c50f7209a2".into(),
        rendered_text: DORA_TEXT.into(),
    };
    let dora_ok = biogen::render_biography(&dora) == DORA_TEXT && biogen::parse_biography(DORA_TEXT).ok() == Some(dora);
    verdict(
        bad == 0 && dora_ok,
        format!("{bad} of 10000 round-trips differ, reference biography {}", if dora_ok { "exact" } else { "differs" }),
    )
}

fn determinism(first: &ExperimentOutcome, config: &ExperimentConfig) -> Verdict {
    let second = memaudit::refexp::run_experiment(config).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let files_a = first.write(a.path()).unwrap();
    second.write(b.path()).unwrap();
    let csvs: Vec<_> = files_a
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| p.file_name().unwrap().to_owned())
        .collect();
    let differing: Vec<String> = csvs
        .iter()
        .filter(|name| std::fs::read(a.path().join(name)).unwrap() != std::fs::read(b.path().join(name)).unwrap())
        .map(|name| name.to_string_lossy().into_owned())
        .collect();
    let has_curves = csvs.iter().any(|n| n.to_string_lossy().starts_with("curves_"));
    let has_auc = csvs.iter().any(|n| n == "auc.csv");
    verdict(
        differing.is_empty() && has_curves && has_auc,
        if differing.is_empty() {
            format!("{} csv files byte-identical across two runs", csvs.len())
        } else {
            format!("differ: {}", differing.join(", "))
        },
    )
}

#[test]
fn acceptance() {
    let _ = std::io::stderr().write_all(b"\n");
    let mut verdicts = Vec::new();
    let mut run = |n: usize, name: &str, v: Verdict| {
        report(n, name, &v);
        verdicts.push((n, v.pass));
    };
    run(1, "insertion exactness", insertion_exactness());
    run(2, "decontamination oracle equivalence", decontamination_oracle());

    let config = ExperimentConfig::desk();
    let t0 = Instant::now();
    let outcome = memaudit::refexp::run_experiment(&config).unwrap();
    let _ = writeln!(std::io::stderr(), "     desk experiment took {:.1}s", secs(t0.elapsed()));
    run(3, "duplication to memorization trend", memorization_trend(&outcome, &config));
    run(4, "dilution trend", dilution_trend(&outcome));
    run(5, "mia monotonicity and null", mia_trend(&outcome, &config));
    run(6, "metric oracles", metric_oracles());
    run(7, "template bijectivity", template_bijectivity());
    run(8, "determinism", determinism(&outcome, &config));

    let failed: Vec<usize> = verdicts.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
