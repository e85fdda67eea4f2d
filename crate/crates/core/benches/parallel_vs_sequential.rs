use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use memaudit::corpus::{SequenceSpec, Sequencer};
use memaudit::decontam::{self, ContaminationPolicy, SuffixArray, SuffixIndex};
use memaudit::insert;
use memaudit::lm::{Model, NGramParams, NGramRefLM, ScoreRequest};
use memaudit::par;
use memaudit::plan::{self, Domain, PerturbationRecord, Window};
use memaudit::rng;
use memaudit::synth::{MarkovSource, SourceConfig};

const TOKENS: u64 = 1_000_000;

fn paths() -> [(&'static str, usize); 2] {
    [("sequential", 1), ("parallel", std::thread::available_parallelism().map_or(1, |n| n.get()))]
}

fn records(source: &MarkovSource, n: usize, len: usize) -> Vec<PerturbationRecord> {
    (0..n)
        .map(|i| {
            let tokens = source.passage(len, &mut rng::seeded_stream(3, i as u64));
            PerturbationRecord::new(format!("b{i}"), Domain::Copyright, "bench", tokens)
        })
        .collect()
}

fn bench(c: &mut Criterion) {
    let source = MarkovSource::new(SourceConfig::default(), 1).unwrap();
    let corpus = source.corpus(TOKENS, 2).unwrap();
    let text: Vec<u32> = corpus.documents().flatten().copied().collect();
    let recs = records(&source, 200, 64);

    let mut g = c.benchmark_group("suffix_array");
    g.sample_size(10);
    for (name, workers) in paths() {
        g.bench_function(BenchmarkId::new(name, TOKENS), |b| {
            b.iter(|| par::with_workers(workers, || SuffixArray::build(&text)))
        });
    }
    g.finish();

    let index = SuffixIndex::build(&corpus).unwrap();
    let mut g = c.benchmark_group("decontam");
    g.sample_size(10);
    let pairs: Vec<(&str, &[u32])> = recs.iter().map(|r| (r.id.as_str(), r.tokens.as_slice())).collect();
    for (name, workers) in paths() {
        g.bench_function(name, |b| {
            b.iter(|| {
                par::with_workers(workers, || {
                    decontam::find_contamination_all(&index, &pairs, &ContaminationPolicy::default()).unwrap()
                })
            })
        });
    }
    g.finish();

    let docs: Vec<&[u32]> = corpus.documents().collect();
    let lm = NGramRefLM::train(&docs, source.config().vocab_size, NGramParams::default()).unwrap();
    let requests: Vec<ScoreRequest> = recs
        .iter()
        .enumerate()
        .map(|(i, r)| ScoreRequest {
            sequence_id: i as u64,
            tokens: r.tokens.clone(),
        })
        .collect();
    let mut g = c.benchmark_group("score_with_moments");
    g.sample_size(10);
    for (name, workers) in paths() {
        g.bench_function(name, |b| b.iter(|| par::with_workers(workers, || lm.score(&requests, true).unwrap())));
    }
    g.finish();

    let ids: Vec<String> = recs.iter().map(|r| r.id.clone()).collect();
    let asg = plan::assign_with_counts(&ids, &[(0, 100), (1, 50), (4, 30), (16, 20)], 4).unwrap();
    let seq = Sequencer::new(&corpus, SequenceSpec::new(256, 5)).unwrap();
    let sched = plan::schedule_insertions(&asg, seq.sequence_count(), Window::default(), 6).unwrap();
    let view = insert::apply_schedule(seq, &sched, &recs, 7).unwrap();
    let mut g = c.benchmark_group("verify_insertion");
    g.sample_size(10);
    for (name, workers) in paths() {
        g.bench_function(name, |b| {
            b.iter(|| par::with_workers(workers, || insert::verify_insertion(&view, &asg, &recs).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
