use std::collections::HashMap;

use memaudit::lm::{self, Model, NGramParams, NGramRefLM, TokenScore};
use memaudit::memscore::{self, ChoiceTask, GenMetric, Normalization};
use memaudit::mia::{self, Attack, MiaParams};
use memaudit::ErrorKind;
use proptest::prelude::*;

/// Count-table language model built straight from the definition.
struct Oracle {
    counts: HashMap<Vec<u32>, u64>,
    vocab: u32,
    order: usize,
    add_k: f64,
}

impl Oracle {
    fn new(docs: &[Vec<u32>], vocab: u32, order: usize, add_k: f64) -> Self {
        let mut text = Vec::new();
        for d in docs.iter().filter(|d| !d.is_empty()) {
            text.extend_from_slice(d);
            text.push(vocab);
        }
        let mut counts = HashMap::new();
        for n in 1..=order.max(9) {
            for w in text.windows(n) {
                *counts.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        Oracle { counts, vocab, order, add_k }
    }

    fn count(&self, g: &[u32]) -> u64 {
        self.counts.get(g).copied().unwrap_or(0)
    }

    fn prob(&self, history: &[u32], w: u32) -> f64 {
        let h = &history[history.len().saturating_sub(self.order - 1)..];
        let m = h.len() + 1;
        let weights: Vec<f64> = (0..m).map(|j| 2f64.powi(j as i32)).collect();
        let total: f64 = weights.iter().sum();
        let v = self.vocab as f64;
        (0..m)
            .map(|j| {
                let ctx = &h[h.len() - j..];
                let with = |t: u32| {
                    let mut g = ctx.to_vec();
                    g.push(t);
                    self.count(&g) as f64
                };
                let c_ctx: f64 = (0..self.vocab).map(with).sum();
                weights[j] / total * (with(w) + self.add_k) / (c_ctx + self.add_k * v)
            })
            .sum()
    }
}

fn docs_strategy() -> impl Strategy<Value = Vec<Vec<u32>>> {
    prop::collection::vec(prop::collection::vec(0u32..7, 1..40), 1..8)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ngram_counts_match_hashmap(docs in docs_strategy(), order in 1usize..6) {
        let params = NGramParams { order, ..Default::default() };
        let model = NGramRefLM::train(&docs, 7, params).unwrap();
        let oracle = Oracle::new(&docs, 7, order, 1e-3);
        for (g, &c) in &oracle.counts {
            prop_assert_eq!(model.count(g), c);
        }
        prop_assert_eq!(model.count(&[1, 2, 3, 4, 5, 6, 6, 6]), oracle.count(&[1, 2, 3, 4, 5, 6, 6, 6]));
        let ctx = &docs[0][..docs[0].len().min(2)];
        let followed: u64 = (0..7).map(|t| { let mut g = ctx.to_vec(); g.push(t); oracle.count(&g) }).sum();
        prop_assert_eq!(model.context_count(ctx), followed);
    }

    #[test]
    fn probabilities_match_definition(docs in docs_strategy(), history in prop::collection::vec(0u32..7, 0..6)) {
        let model = NGramRefLM::train(&docs, 7, NGramParams::default()).unwrap();
        let oracle = Oracle::new(&docs, 7, 5, 1e-3);
        let dist = model.distribution(&history);
        prop_assert!(close(dist.iter().sum::<f64>(), 1.0, 1e-12));
        for w in 0..7 {
            prop_assert!(close(dist[w as usize], oracle.prob(&history, w), 1e-12));
            prop_assert_eq!(dist[w as usize], model.prob(&history, w));
        }
        // argmax: highest probability, lowest id on ties
        let mut best = 0;
        for w in 1..7 {
            if dist[w] > dist[best] {
                best = w;
            }
        }
        prop_assert_eq!(model.argmax(&history), best as u32);
    }

    #[test]
    fn moments_match_full_sums(docs in docs_strategy(), seq in prop::collection::vec(0u32..7, 1..12)) {
        let model = NGramRefLM::train(&docs, 7, NGramParams::default()).unwrap();
        let scores = model.score_sequence(0, &seq, true).unwrap();
        for (i, s) in scores.iter().enumerate() {
            let dist = model.distribution(&seq[i.saturating_sub(4)..i]);
            let mu: f64 = dist.iter().map(|p| p * p.ln()).sum();
            let var: f64 = dist.iter().map(|p| p * (p.ln() - mu).powi(2)).sum();
            prop_assert!(close(s.mu.unwrap(), mu, 1e-9));
            prop_assert!(close(s.sigma.unwrap(), var.sqrt().max(lm::SIGMA_EPS), 1e-9));
            prop_assert!(close(s.logp, dist[seq[i] as usize].ln(), 1e-12));
        }
    }

    #[test]
    fn greedy_decoding_follows_argmax(docs in docs_strategy(), prefix in prop::collection::vec(0u32..7, 1..4)) {
        let model = NGramRefLM::train(&docs, 7, NGramParams::default()).unwrap();
        let out = lm::generate_greedy(&model, &prefix, 6).unwrap();
        let mut ctx = prefix.clone();
        for &t in &out {
            prop_assert_eq!(t, model.argmax(&ctx));
            ctx.push(t);
        }
    }

    #[test]
    fn rouge_l_matches_quadratic_dp(
        r in prop::collection::vec(0usize..5, 1..25),
        g in prop::collection::vec(0usize..5, 1..25),
    ) {
        const WORDS: [&str; 5] = ["a", "bb", "cat", "dog", "eel"];
        let rs: Vec<&str> = r.iter().map(|&i| WORDS[i]).collect();
        let gs: Vec<&str> = g.iter().map(|&i| WORDS[i]).collect();
        let mut t = vec![vec![0usize; gs.len() + 1]; rs.len() + 1];
        for i in 1..=rs.len() {
            for j in 1..=gs.len() {
                t[i][j] = if rs[i - 1] == gs[j - 1] { t[i - 1][j - 1] + 1 } else { t[i - 1][j].max(t[i][j - 1]) };
            }
        }
        let lcs = t[rs.len()][gs.len()] as f64;
        let expected = if lcs == 0.0 {
            0.0
        } else {
            let (p, rec) = (lcs / gs.len() as f64, lcs / rs.len() as f64);
            2.0 * p * rec / (p + rec)
        };
        let got = memscore::rouge_l(&rs.join(" "), &gs.join(" "));
        prop_assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn auc_invariances(
        members in prop::collection::vec(-20i32..20, 1..40),
        nonmembers in prop::collection::vec(-20i32..20, 1..40),
    ) {
        let m: Vec<f64> = members.iter().map(|&v| v as f64).collect();
        let n: Vec<f64> = nonmembers.iter().map(|&v| v as f64).collect();
        let auc = mia::roc_auc(&m, &n).unwrap();
        // strictly increasing transforms keep the AUC
        let f = |v: &f64| (v / 7.0).exp() * 3.0 - 1.0;
        let mt: Vec<f64> = m.iter().map(f).collect();
        let nt: Vec<f64> = n.iter().map(f).collect();
        prop_assert_eq!(mia::roc_auc(&mt, &nt).unwrap(), auc);
        // flipping the sign mirrors it; swapping roles too
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        prop_assert!((mia::roc_auc(&neg(&m), &neg(&n)).unwrap() - (1.0 - auc)).abs() < 1e-12);
        prop_assert!((mia::roc_auc(&n, &m).unwrap() - (1.0 - auc)).abs() < 1e-12);
    }
}

#[test]
fn auc_equals_pairwise_counting_on_100_instances() {
    let mut r = memaudit::rng::seeded(11);
    for _ in 0..100 {
        let nm = 1 + memaudit::rng::below(&mut r, 60) as usize;
        let nn = 1 + memaudit::rng::below(&mut r, 60) as usize;
        let draw = |r: &mut memaudit::rng::Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| memaudit::rng::below(r, 15) as f64 / 4.0).collect()
        };
        let m = draw(&mut r, nm);
        let n = draw(&mut r, nn);
        let mut twice = 0u64;
        for a in &m {
            for b in &n {
                twice += if a > b { 2 } else if a == b { 1 } else { 0 };
            }
        }
        let expected = twice as f64 / (2 * nm * nn) as f64;
        assert_eq!(mia::roc_auc(&m, &n).unwrap(), expected);
    }
}

fn scores(logps: &[f64]) -> Vec<TokenScore> {
    logps
        .iter()
        .enumerate()
        .map(|(i, &l)| TokenScore {
            sequence_id: 0,
            position: i as u32,
            token_id: 0,
            logp: l,
            mu: None,
            sigma: None,
        })
        .collect()
}

#[test]
fn mink_at_full_fraction_is_loss() {
    let mut r = memaudit::rng::seeded(5);
    let all = MiaParams { k_fraction: 1.0, ..Default::default() };
    for _ in 0..200 {
        let n = 1 + memaudit::rng::below(&mut r, 50) as usize;
        let logps: Vec<f64> = (0..n).map(|_| -10.0 * memaudit::rng::unit(&mut r)).collect();
        let s = scores(&logps);
        assert_eq!(
            mia::attack_score(Attack::Mink, &s, None, &all).unwrap(),
            mia::attack_score(Attack::Loss, &s, None, &all).unwrap()
        );
    }
}

#[test]
fn mutual_info_with_constant_unconditional_matches_raw() {
    let mut r = memaudit::rng::seeded(9);
    for _ in 0..500 {
        let k = 2 + memaudit::rng::below(&mut r, 5) as usize;
        // dyadic values keep every subtraction exact
        let cond: Vec<Vec<TokenScore>> = (0..k)
            .map(|_| {
                let n = 1 + memaudit::rng::below(&mut r, 4) as usize;
                scores(&(0..n).map(|_| -(memaudit::rng::below(&mut r, 64) as f64) / 8.0).collect::<Vec<_>>())
            })
            .collect();
        let constant = scores(&[-1.5, -0.25]);
        let uncond = vec![constant; k];
        let task = |normalization| ChoiceTask {
            id: String::new(),
            context: vec![],
            candidates: vec![vec![1]; k],
            candidate_bytes: vec![4; k],
            correct_index: 0,
            normalization,
        };
        let raw = memscore::choice_eval(&task(Normalization::Raw), &cond, None).unwrap();
        let mi = memscore::choice_eval(&task(Normalization::MutualInfo), &cond, Some(&uncond)).unwrap();
        assert_eq!(mi.chosen_index, raw.chosen_index);
        assert_eq!(mi.tie, raw.tie);
    }
}

#[test]
fn choice_eval_against_model_uses_candidate_tokens_only() {
    let docs = vec![vec![1, 2, 3, 4], vec![1, 2, 3, 4], vec![1, 2, 5, 6]];
    let model = NGramRefLM::train(&docs, 8, NGramParams::default()).unwrap();
    let task = ChoiceTask {
        id: "t".into(),
        context: vec![1, 2],
        candidates: vec![vec![5, 6], vec![3, 4]],
        candidate_bytes: vec![2, 2],
        correct_index: 1,
        normalization: Normalization::Raw,
    };
    let out = memscore::choice_eval_model(&model, &task).unwrap();
    assert!(out.correct);
    let full = lm::score_tokens(&model, &[1, 2, 3, 4], false).unwrap();
    assert_eq!(out.values[1], full[2].logp + full[3].logp);
}

#[test]
fn wilson_reference_values() {
    // z = 1.959964: 5/10 -> (0.2366, 0.7634), 0/20 -> (0, 0.1611)
    let (lo, hi) = memscore::wilson_interval(5, 10);
    assert!((lo - 0.236593).abs() < 1e-5 && (hi - 0.763407).abs() < 1e-5, "{lo} {hi}");
    let (lo, hi) = memscore::wilson_interval(0, 20);
    assert_eq!(lo, 0.0);
    assert!((hi - 0.161130).abs() < 1e-5, "{hi}");
}

#[test]
fn generative_metrics_by_hand() {
    let ev = |r, g, m| memscore::generative_eval(r, g, m).unwrap();
    assert_eq!(ev("The Cat", "cat", GenMetric::Exact), 1.0);
    assert_eq!(ev("cat", "cat sat", GenMetric::PrefixMatch), 1.0);
    assert_eq!(ev("cat", "catalog", GenMetric::PrefixMatch), 0.0);
    assert_eq!(ev("blue whale", "it was a blue whale indeed", GenMetric::WordRecall), 1.0);
    assert_eq!(ev("a b c d", "a c", GenMetric::RougeL), 2.0 * 1.0 * 0.5 / 1.5);
    assert_eq!(memscore::generative_eval("x", "  ", GenMetric::Exact).unwrap_err().kind(), ErrorKind::Validation);
}

#[test]
fn model_file_round_trip_and_tamper() {
    let docs = vec![vec![1, 2, 3, 1, 2, 4], vec![3, 3, 2]];
    let model = NGramRefLM::train(&docs, 6, NGramParams::default()).unwrap();
    let mut bytes = Vec::new();
    model.write_to(&mut bytes).unwrap();
    let back = NGramRefLM::from_bytes(&bytes).unwrap();
    assert_eq!(back.vocab_size(), 6);
    assert_eq!(back.distribution(&[1, 2]), model.distribution(&[1, 2]));
    bytes[20] ^= 0xff;
    assert_eq!(NGramRefLM::from_bytes(&bytes).unwrap_err().kind(), ErrorKind::Integrity);
}
