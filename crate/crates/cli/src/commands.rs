use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use memaudit::biogen::{self, AttributeTables, Biography, ChatRecord};
use memaudit::corpus::{CorpusConfig, SequenceSpec, Sequencer, TokenCorpus, TokenId};
use memaudit::decontam::{self, ContaminationPolicy, PolicyMode, SuffixIndex};
use memaudit::insert::{self, DeltaFile, PerturbedCorpusView};
use memaudit::lm::{self, Model, NGramParams, NGramRefLM, RemoteConfig, RemoteModel, ScoreRequest};
use memaudit::memscore::{self, ChoiceTask, GenTask, RecordResult};
use memaudit::mia::{self, MemberLevel, MiaParams, MiaRecord};
use memaudit::plan::{self, Domain, DuplicationAssignment, InsertionSchedule, PerturbationRecord, Window};
use memaudit::refexp::ExperimentConfig;
use memaudit::synth::{self, MarkovSource, SourceConfig};
use memaudit::tokenize::{self, ByteTokenizer, TextDocument, Tokenizer, WhitespaceTokenizer};
use memaudit::{jsonl, rng, Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::manifest::{self, Manifest, Provenance};
use crate::{Command, EvalKind, InputFormat, ModelArgs, Preset, SequenceArgs};

/// Parse a snake_case serde enum from a command-line string.
pub fn parse_serde<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    f(&mut out)?;
    out.flush()?;
    Ok(())
}

fn load_tokenizer(spec: &str, prov: &mut Provenance) -> Result<Box<dyn Tokenizer>> {
    match spec.split_once(':') {
        None if spec == "bytes" => Ok(Box::new(ByteTokenizer)),
        Some(("words", path)) => {
            let path = Path::new(path);
            prov.input("--tokenizer", path)?;
            Ok(Box::new(WhitespaceTokenizer::load(path)?))
        }
        _ => Err(Error::invalid(format!("unknown tokenizer {spec}; use bytes or words:PATH"))),
    }
}

fn load_model(args: &ModelArgs, prov: &mut Provenance) -> Result<Box<dyn Model>> {
    match (&args.model, &args.remote) {
        (Some(path), None) => {
            prov.input("--model", path)?;
            Ok(Box::new(NGramRefLM::load(path)?))
        }
        (None, Some(url)) => {
            let vocab = args
                .vocab_size
                .ok_or_else(|| Error::invalid("--remote needs --vocab-size"))?;
            let config = RemoteConfig {
                batch_size: args.remote_batch,
                max_in_flight: args.max_in_flight,
                retries: args.retries,
                timeout_secs: args.timeout_secs,
                ..RemoteConfig::new(url.clone(), vocab)
            };
            Ok(Box::new(RemoteModel::new(config)?))
        }
        _ => Err(Error::invalid("give exactly one of --model or --remote")),
    }
}

fn load_corpus(flag: &str, path: &Path, prov: &mut Provenance) -> Result<TokenCorpus> {
    prov.input(flag, path)?;
    TokenCorpus::load(path)
}

fn load_jsonl<T: DeserializeOwned>(flag: &str, path: &Path, prov: &mut Provenance) -> Result<Vec<T>> {
    prov.input(flag, path)?;
    jsonl::read(path)
}

fn load_json<T: DeserializeOwned>(flag: &str, path: &Path, prov: &mut Provenance) -> Result<T> {
    prov.input(flag, path)?;
    read_json(path)
}

fn spec_of(seq: &SequenceArgs) -> SequenceSpec {
    SequenceSpec {
        sequence_length: seq.sequence_length,
        shuffle_seed: seq.shuffle_seed,
        batch_size: seq.batch_size,
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::BuildCorpus {
            input,
            format,
            vocab_size,
            eos_id,
            vocab,
            synthetic_tokens,
            seed,
            token_width,
            out,
        } => {
            let mut prov = Provenance::new("build-corpus")?;
            let corpus = match (synthetic_tokens, input) {
                (Some(tokens), _) => {
                    prov.seed("seed", seed);
                    let src = MarkovSource::new(SourceConfig::default(), seed)?;
                    src.corpus(tokens, rng::derive_seed(seed, "documents"))?
                }
                (None, Some(input)) => match format {
                    InputFormat::Tokens => {
                        let docs: Vec<tokenize::TokenizedDocument> = load_jsonl("--input", &input, &mut prov)?;
                        let (Some(v), Some(e)) = (vocab_size, eos_id) else {
                            return Err(Error::invalid("--format tokens needs --vocab-size and --eos-id"));
                        };
                        let tokens: Vec<&[TokenId]> = docs.iter().map(|d| d.tokens.as_slice()).collect();
                        TokenCorpus::build(&tokens, CorpusConfig::new(v, e)?)?
                    }
                    InputFormat::Bytes | InputFormat::Words => {
                        let docs: Vec<TextDocument> = load_jsonl("--input", &input, &mut prov)?;
                        let tok: Box<dyn Tokenizer> = match format {
                            InputFormat::Words => {
                                let path = vocab.as_ref().ok_or_else(|| Error::invalid("--format words needs --vocab"))?;
                                let t = WhitespaceTokenizer::fit(docs.iter().map(|d| d.text.as_str()));
                                t.save(path)?;
                                prov.output("--vocab", path)?;
                                Box::new(t)
                            }
                            _ => Box::new(ByteTokenizer),
                        };
                        let tokenized = tokenize::tokenize_documents(&docs, tok.as_ref());
                        let tokens: Vec<&[TokenId]> = tokenized.iter().map(|d| d.tokens.as_slice()).collect();
                        TokenCorpus::build(&tokens, tok.corpus_config())?
                    }
                },
                (None, None) => return Err(Error::invalid("give --input or --synthetic-tokens")),
            };
            match token_width {
                Some(w) => write_with(&out, |f| corpus.write_with_width(f, w))?,
                None => corpus.save(&out)?,
            }
            prov.output("--out", &out)?;
            log::info!(
                "{} documents, {} tokens, checksum {:016x}",
                corpus.document_count(),
                corpus.token_count(),
                corpus.index_checksum()
            );
            prov.finish(&out)?;
        }

        Command::MakeRecords {
            synthetic,
            length,
            source_seed,
            text,
            biographies,
            tokenizer,
            domain,
            dataset,
            seed,
            out,
        } => {
            let mut prov = Provenance::new("make-records")?;
            let records: Vec<PerturbationRecord> = if let Some(n) = synthetic {
                prov.seed("source_seed", source_seed);
                prov.seed("seed", seed);
                let src = MarkovSource::new(SourceConfig::default(), source_seed)?;
                (0..n)
                    .map(|i| {
                        let tokens = src.passage(length, &mut rng::seeded_stream(seed, i as u64));
                        let mut r = PerturbationRecord::new(format!("{dataset}-{i:06}"), domain, &dataset, tokens);
                        r.text = Some(synth::render(&r.tokens));
                        r
                    })
                    .collect()
            } else {
                let texts: Vec<TextDocument> = if let Some(path) = &text {
                    load_jsonl("--text", path, &mut prov)?
                } else if let Some(path) = &biographies {
                    let bios: Vec<Biography> = load_jsonl("--biographies", path, &mut prov)?;
                    bios.into_iter()
                        .map(|b| TextDocument {
                            id: b.uuid,
                            text: b.rendered_text,
                        })
                        .collect()
                } else {
                    return Err(Error::invalid("give --synthetic, --text or --biographies"));
                };
                let tok = load_tokenizer(&tokenizer, &mut prov)?;
                texts
                    .into_iter()
                    .map(|d| {
                        let mut r = PerturbationRecord::new(d.id, domain, &dataset, tok.encode(&d.text));
                        r.text = Some(d.text);
                        r
                    })
                    .collect()
            };
            jsonl::write(&out, &records)?;
            prov.output("--out", &out)?;
            log::info!("{} records", records.len());
            prov.finish(&out)?;
        }

        Command::Decontam {
            corpus,
            records,
            threshold,
            out,
            out_records,
            report,
        } => {
            let mut prov = Provenance::new("decontam")?;
            let corpus = load_corpus("--corpus", &corpus, &mut prov)?;
            let recs: Vec<PerturbationRecord> = load_jsonl("--records", &records, &mut prov)?;
            let index = SuffixIndex::build(&corpus)?;
            let policy = |mode| ContaminationPolicy {
                short_threshold: threshold,
                mode,
            };
            let (tests, others): (Vec<&PerturbationRecord>, Vec<&PerturbationRecord>) =
                recs.iter().partition(|r| r.domain == Domain::Testset);
            let pairs = |rs: &[&PerturbationRecord]| rs.iter().map(|r| (r.id.clone(), r.tokens.clone())).collect::<Vec<_>>();
            let mut reports = decontam::find_contamination_all(&index, &pairs(&others), &policy(PolicyMode::Auto))?;
            reports.extend(decontam::find_contamination_all(&index, &pairs(&tests), &policy(PolicyMode::DropPerturbation))?);
            let outcome = decontam::apply_decontamination(&corpus, &reports)?;
            let dropped: BTreeSet<&str> = outcome.dropped_perturbations.iter().map(String::as_str).collect();
            let kept: Vec<&PerturbationRecord> = recs.iter().filter(|r| !dropped.contains(r.id.as_str())).collect();
            outcome.corpus.save(&out)?;
            jsonl::write(&out_records, &kept)?;
            #[derive(Serialize)]
            struct Report<'a> {
                short_threshold: usize,
                dropped_perturbations: &'a [String],
                removal_log: &'a [decontam::RemovalEntry],
                reports: &'a [decontam::MatchReport],
            }
            write_json(
                &report,
                &Report {
                    short_threshold: threshold,
                    dropped_perturbations: &outcome.dropped_perturbations,
                    removal_log: &outcome.removal_log,
                    reports: &reports,
                },
            )?;
            prov.output("--out", &out)?;
            prov.output("--out-records", &out_records)?;
            prov.output("--report", &report)?;
            log::info!(
                "removed {} documents, dropped {} records, kept {}",
                outcome.removal_log.len(),
                outcome.dropped_perturbations.len(),
                kept.len()
            );
            prov.finish(&out)?;
        }

        Command::Plan {
            records,
            corpus,
            seq,
            levels,
            ratios,
            window,
            seed,
            out_assignment,
            out_schedule,
        } => {
            let window = match window.as_deref() {
                Some(&[s, e]) => Window::new(s, e)?,
                Some(_) => return Err(Error::invalid("--window takes START END")),
                None => Window::default(),
            };
            let mut prov = Provenance::new("plan")?;
            prov.seed("seed", seed);
            let recs: Vec<PerturbationRecord> = load_jsonl("--records", &records, &mut prov)?;
            let corpus = load_corpus("--corpus", &corpus, &mut prov)?;
            let spec = spec_of(&seq);
            for r in &recs {
                r.validate(spec.sequence_length)?;
            }
            let ids: Vec<String> = recs.iter().map(|r| r.id.clone()).collect();
            let levels = levels.unwrap_or_else(|| plan::default_levels(ids.len()));
            let ratios = match ratios {
                Some(r) => r,
                None if levels == plan::LEVELS => plan::DEFAULT_RATIOS.to_vec(),
                None => {
                    let mut r = vec![1; levels.len()];
                    r[0] = levels.len() as u64;
                    r
                }
            };
            let assignment = plan::assign_duplications(&ids, &levels, &ratios, rng::derive_seed(seed, "assignment"))?;
            let sequencer = Sequencer::new(&corpus, spec)?;
            let schedule = plan::schedule_insertions(
                &assignment,
                sequencer.sequence_count(),
                window,
                rng::derive_seed(seed, "schedule"),
            )?;
            let lens: BTreeMap<&str, usize> = recs.iter().map(|r| (r.id.as_str(), r.tokens.len())).collect();
            let stats = plan::schedule_stats(&schedule, |id| lens.get(id).copied(), corpus.token_count(), spec.batch_size as u64)?;
            log::info!("counts per level {:?}", assignment.counts());
            log::info!(
                "{} insertions; {:.4}% of tokens, {:.4}% of sequences, {:.2} per batch",
                schedule.entries.len(),
                100.0 * stats.tokens_modified_fraction,
                100.0 * stats.sequences_modified_fraction,
                stats.mean_perturbations_per_batch
            );
            write_json(&out_assignment, &assignment)?;
            write_json(&out_schedule, &schedule)?;
            prov.output("--out-assignment", &out_assignment)?;
            prov.output("--out-schedule", &out_schedule)?;
            prov.finish(&out_schedule)?;
        }

        Command::Insert {
            corpus,
            records,
            schedule,
            seq,
            seed,
            out,
            splices,
        } => {
            let mut prov = Provenance::new("insert")?;
            prov.seed("seed", seed);
            let corpus = load_corpus("--corpus", &corpus, &mut prov)?;
            let recs: Vec<PerturbationRecord> = load_jsonl("--records", &records, &mut prov)?;
            let schedule: InsertionSchedule = load_json("--schedule", &schedule, &mut prov)?;
            let sequencer = Sequencer::new(&corpus, spec_of(&seq))?;
            if sequencer.sequence_count() != schedule.total_sequences {
                return Err(Error::invalid(format!(
                    "schedule was planned for {} sequences but the corpus yields {}",
                    schedule.total_sequences,
                    sequencer.sequence_count()
                )));
            }
            let view = insert::apply_schedule(sequencer, &schedule, &recs, seed)?;
            let delta = view.to_delta();
            fs::write(&out, delta.to_bytes()?)?;
            jsonl::write(&splices, view.manifest())?;
            prov.output("--out", &out)?;
            prov.output("--splices", &splices)?;
            log::info!("{} sequences spliced", delta.entries.len());
            prov.finish(&out)?;
        }

        Command::Verify {
            corpus,
            delta,
            records,
            assignment,
            report,
        } => {
            let mut prov = Provenance::new("verify")?;
            let corpus = load_corpus("--corpus", &corpus, &mut prov)?;
            prov.input("--delta", &delta)?;
            let delta = DeltaFile::from_bytes(&fs::read(&delta)?)?;
            let recs: Vec<PerturbationRecord> = load_jsonl("--records", &records, &mut prov)?;
            let assignment: DuplicationAssignment = load_json("--assignment", &assignment, &mut prov)?;
            let spec = SequenceSpec::new(delta.sequence_length as usize, delta.shuffle_seed);
            let view = PerturbedCorpusView::from_delta(Sequencer::new(&corpus, spec)?, delta, Vec::new())?;
            let result = insert::verify_insertion(&view, &assignment, &recs)?;
            write_json(&report, &result)?;
            prov.output("--report", &report)?;
            prov.finish(&report)?;
            if !result.all_pass {
                for r in result.records.iter().filter(|r| !r.passes()).take(10) {
                    log::error!(
                        "{}: assigned {}, found {}, straddling {}",
                        r.record_id,
                        r.assigned,
                        r.found,
                        r.straddling
                    );
                }
                return Err(Error::integrity(format!("{} records failed verification", result.mismatches)));
            }
            log::info!("all {} records verified", result.records.len());
        }

        Command::Biogen {
            n,
            seed,
            tables,
            out,
            prompts,
            format,
            mode,
            target,
            k,
        } => {
            let mut prov = Provenance::new("biogen")?;
            prov.seed("seed", seed);
            let tables = match &tables {
                Some(p) => {
                    prov.input("--tables", p)?;
                    AttributeTables::load(p)?
                }
                None => AttributeTables::default_tables(),
            };
            let bios = biogen::sample_biographies(&tables, n, seed);
            jsonl::write(&out, &bios)?;
            prov.output("--out", &out)?;
            if let Some(path) = &prompts {
                let pool: Vec<String> = bios.iter().map(|b| b.value(target)).collect();
                let pseed = rng::derive_seed(seed, "prompts");
                let made = bios
                    .iter()
                    .enumerate()
                    .map(|(i, b)| {
                        let others: Vec<String> = pool.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v.clone()).collect();
                        biogen::make_attack_prompts(
                            b,
                            format,
                            mode,
                            target,
                            &others,
                            tables.email_domains(),
                            k,
                            rng::derive_seed(pseed, &i.to_string()),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                jsonl::write(path, &made)?;
                prov.output("--prompts", path)?;
            }
            prov.finish(&out)?;
        }

        Command::Chatgen {
            input,
            seed,
            nouns,
            out,
            attacks,
            direction,
            prompted,
            k,
        } => {
            #[derive(Deserialize)]
            struct Dialogue {
                persona: Vec<String>,
                dialogue: Vec<(String, String)>,
            }
            let mut prov = Provenance::new("chatgen")?;
            prov.seed("seed", seed);
            let dialogues: Vec<Dialogue> = load_jsonl("--input", &input, &mut prov)?;
            let nouns = match &nouns {
                Some(p) => {
                    prov.input("--nouns", p)?;
                    fs::read_to_string(p)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect()
                }
                None => biogen::default_nouns(),
            };
            let chats = dialogues
                .into_iter()
                .enumerate()
                .map(|(i, d)| biogen::anonymize_chat(&d.dialogue, d.persona, &nouns, rng::derive_seed(seed, &i.to_string())))
                .collect::<Result<Vec<ChatRecord>>>()?;
            jsonl::write(&out, &chats)?;
            prov.output("--out", &out)?;
            if let Some(path) = &attacks {
                let pool: Vec<String> = match direction {
                    biogen::ChatDirection::PersonaGivenUsername => chats.iter().map(ChatRecord::persona_text).collect(),
                    biogen::ChatDirection::UsernameGivenPersona => chats.iter().map(|c| c.assigned_username.clone()).collect(),
                };
                let aseed = rng::derive_seed(seed, "attacks");
                let made = chats
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        let others: Vec<String> = pool.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v.clone()).collect();
                        biogen::make_chat_attack(c, direction, prompted, &others, k, rng::derive_seed(aseed, &i.to_string()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                jsonl::write(path, &made)?;
                prov.output("--attacks", path)?;
            }
            prov.finish(&out)?;
        }

        Command::TrainLm {
            corpus,
            delta,
            sequence_length,
            shuffle_seed,
            order,
            add_k,
            out,
        } => {
            let mut prov = Provenance::new("train-lm")?;
            let corpus = load_corpus("--corpus", &corpus, &mut prov)?;
            let params = NGramParams {
                order,
                add_k,
                lambdas: None,
            };
            let model = match (&delta, sequence_length) {
                (Some(path), _) => {
                    prov.input("--delta", path)?;
                    let delta = DeltaFile::from_bytes(&fs::read(path)?)?;
                    let spec = SequenceSpec::new(delta.sequence_length as usize, delta.shuffle_seed);
                    let view = PerturbedCorpusView::from_delta(Sequencer::new(&corpus, spec)?, delta, Vec::new())?;
                    NGramRefLM::train_view(&view, params)?
                }
                (None, Some(len)) => {
                    let view = PerturbedCorpusView::identity(Sequencer::new(&corpus, SequenceSpec::new(len, shuffle_seed))?);
                    NGramRefLM::train_view(&view, params)?
                }
                (None, None) => NGramRefLM::train_corpus(&corpus, params)?,
            };
            model.save(&out)?;
            prov.output("--out", &out)?;
            log::info!("trained order-{} model on {} tokens", model.order(), model.training_tokens());
            prov.finish(&out)?;
        }

        Command::Score {
            model,
            input,
            moments,
            packed,
            out,
        } => {
            let mut prov = Provenance::new("score")?;
            let model = load_model(&model, &mut prov)?;
            let docs: Vec<tokenize::TokenizedDocument> = load_jsonl("--input", &input, &mut prov)?;
            let requests: Vec<ScoreRequest> = docs
                .into_iter()
                .enumerate()
                .map(|(i, d)| ScoreRequest {
                    sequence_id: i as u64,
                    tokens: d.tokens,
                })
                .collect();
            if moments && !model.supports_moments() {
                return Err(Error::invalid("the model does not report moments"));
            }
            let scores: Vec<lm::TokenScore> = model.score(&requests, moments)?.into_iter().flatten().collect();
            if packed {
                write_with(&out, |f| lm::write_scores_packed(f, &scores))?;
            } else {
                jsonl::write(&out, &scores)?;
            }
            prov.output("--out", &out)?;
            log::info!("{} token scores for {} sequences", scores.len(), requests.len());
            prov.finish(&out)?;
        }

        Command::Eval {
            model,
            kind,
            input,
            assignment,
            prefix_len,
            cont_len,
            tokenizer,
            out,
            results,
        } => {
            let mut prov = Provenance::new("eval")?;
            let model = load_model(&model, &mut prov)?;
            let assignment: DuplicationAssignment = load_json("--assignment", &assignment, &mut prov)?;
            let (metric, values) = match kind {
                EvalKind::Loglik | EvalKind::Eidetic => {
                    let recs: Vec<PerturbationRecord> = load_jsonl("--input", &input, &mut prov)?;
                    let values = recs
                        .iter()
                        .map(|r| {
                            let v = match kind {
                                EvalKind::Loglik => memscore::norm_loglik(&lm::score_tokens(model.as_ref(), &r.tokens, false)?)?,
                                _ => f64::from(u8::from(memscore::k_eidetic(model.as_ref(), &r.tokens, prefix_len, cont_len)?)),
                            };
                            Ok(RecordResult {
                                record_id: r.id.clone(),
                                value: v,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let name = if matches!(kind, EvalKind::Loglik) { "loglik" } else { "k_eidetic" };
                    (name.to_string(), values)
                }
                EvalKind::Choice => {
                    let tasks: Vec<ChoiceTask> = load_jsonl("--input", &input, &mut prov)?;
                    let values = tasks
                        .iter()
                        .map(|t| {
                            let o = memscore::choice_eval_model(model.as_ref(), t)?;
                            Ok(RecordResult {
                                record_id: t.id.clone(),
                                value: f64::from(u8::from(o.correct)),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    ("choice_accuracy".to_string(), values)
                }
                EvalKind::Gen => {
                    let tasks: Vec<GenTask> = load_jsonl("--input", &input, &mut prov)?;
                    let decode: Box<dyn Fn(&[TokenId]) -> String> = if tokenizer == "synthetic" {
                        Box::new(synth::render)
                    } else {
                        let tok = load_tokenizer(&tokenizer, &mut prov)?;
                        Box::new(move |t| tok.decode(t))
                    };
                    let metric = tasks.first().map(|t| t.metric).ok_or_else(|| Error::invalid("no tasks"))?;
                    if tasks.iter().any(|t| t.metric != metric) {
                        return Err(Error::invalid("all generative tasks in one run must use the same metric"));
                    }
                    let values = tasks
                        .iter()
                        .map(|t| {
                            let generated = lm::generate_greedy(model.as_ref(), &t.prefix, t.continuation_length)?;
                            Ok(RecordResult {
                                record_id: t.id.clone(),
                                value: memscore::generative_eval(&t.reference, &decode(&generated), t.metric)?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    (metric.name().to_string(), values)
                }
            };
            let curve = memscore::aggregate_by_duplication(&values, &assignment, &metric)?;
            memscore::save_curve_csv(&out, &curve)?;
            prov.output("--out", &out)?;
            if let Some(path) = &results {
                jsonl::write(path, &values)?;
                prov.output("--results", path)?;
            }
            for p in &curve {
                log::info!("level {:>4}: {} = {:.4} [{:.4}, {:.4}] n={}", p.level, p.metric, p.mean, p.ci_lo, p.ci_hi, p.n);
            }
            prov.finish(&out)?;
        }

        Command::Mia {
            model,
            records,
            assignment,
            attacks,
            levels,
            k_fraction,
            zlib_level,
            dataset,
            model_tag,
            out,
        } => {
            let params = MiaParams { k_fraction, zlib_level };
            params.validate()?;
            let mut prov = Provenance::new("mia")?;
            let model = load_model(&model, &mut prov)?;
            let recs: Vec<PerturbationRecord> = load_jsonl("--records", &records, &mut prov)?;
            let assignment: DuplicationAssignment = load_json("--assignment", &assignment, &mut prov)?;
            let levels = if levels.is_empty() {
                let mut l: Vec<MemberLevel> = assignment.counts().keys().filter(|&&l| l > 0).map(|&l| MemberLevel::Level(l)).collect();
                l.push(MemberLevel::AnyNonzero);
                l
            } else {
                levels
            };
            let benches = levels
                .iter()
                .map(|&l| mia::build_mia_benchmark(&assignment, l, &dataset, &model_tag))
                .collect::<Result<Vec<_>>>()?;
            let wanted: BTreeSet<&str> = assignment.iter().map(|(id, _)| id).collect();
            let mia_records: Vec<MiaRecord> = recs
                .iter()
                .filter(|r| wanted.contains(r.id.as_str()))
                .map(|r| MiaRecord {
                    record_id: r.id.clone(),
                    tokens: r.tokens.clone(),
                    text: r.text.clone(),
                })
                .collect();
            let table = mia::score_records(model.as_ref(), &mia_records, &attacks, &params)?;
            let rows = mia::run_mia_suite(&benches, &attacks, &table, &params)?;
            write_with(&out, |f| mia::write_auc_csv(f, &rows))?;
            prov.output("--out", &out)?;
            for r in &rows {
                log::info!("{} level {}: auc {:.4} ({} vs {})", r.attack, r.member_level, r.auc, r.n_members, r.n_nonmembers);
            }
            prov.finish(&out)?;
        }

        Command::Splits {
            assignment,
            level,
            seed,
            out,
        } => {
            let mut prov = Provenance::new("splits")?;
            prov.seed("seed", seed);
            let assignment: DuplicationAssignment = load_json("--assignment", &assignment, &mut prov)?;
            let splits = mia::build_unlearning_splits(&assignment, level, seed)?;
            write_json(&out, &splits)?;
            prov.output("--out", &out)?;
            prov.finish(&out)?;
        }

        Command::Refexp { config, preset, out } => {
            let mut prov = Provenance::new("refexp")?;
            let config = match (&config, preset) {
                (Some(path), _) => {
                    prov.input("--config", path)?;
                    ExperimentConfig::load(path)?
                }
                (None, Some(Preset::Desk)) => ExperimentConfig::desk(),
                (None, Some(Preset::Smoke)) => ExperimentConfig::smoke(),
                (None, None) => return Err(Error::invalid("give --config or --preset")),
            };
            prov.seed("seed", config.seed);
            let outcome = memaudit::refexp::run_experiment(&config)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.toml"), config.to_toml()?)?;
            let mut written = outcome.write(&out)?;
            written.push(out.join("config.toml"));
            for p in &written {
                prov.output_under("--out", &out, p)?;
            }
            print!("{}", outcome.report());
            prov.finish(&out)?;
        }

        Command::Plot { curve, title, out } => {
            let mut prov = Provenance::new("plot")?;
            prov.input("--curve", &curve)?;
            let points = memscore::read_curve_csv(BufReader::new(File::open(&curve)?))?;
            fs::write(&out, crate::plot::render_svg(&points, &title))?;
            prov.output("--out", &out)?;
            prov.finish(&out)?;
        }

        Command::Repro { manifest, keep } => repro(&manifest, keep)?,
    }
    Ok(())
}

fn repro(path: &Path, keep: Option<PathBuf>) -> Result<()> {
    let m = Manifest::load(path)?;
    let tmp;
    let dir = match keep {
        Some(d) => {
            fs::create_dir_all(&d)?;
            std::path::absolute(d)?
        }
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let mut argv = m.argv.clone();
    let mut redirect: BTreeMap<PathBuf, PathBuf> = BTreeMap::new();
    for out in &m.outputs {
        if redirect.contains_key(&out.arg) {
            continue;
        }
        let name = out.arg.file_name().ok_or_else(|| Error::invalid("output path has no file name"))?;
        let new = dir.join(name);
        if !manifest::replace_flag(&mut argv, &out.flag, &new.to_string_lossy()) {
            return Err(Error::invalid(format!("flag {} is not in the recorded argv", out.flag)));
        }
        redirect.insert(out.arg.clone(), new);
    }
    log::info!("re-running: memaudit {}", argv.join(" "));
    let status = std::process::Command::new(std::env::current_exe()?)
        .args(&argv)
        .current_dir(&m.cwd)
        .status()?;
    if !status.success() {
        return Err(Error::invalid(format!("re-run exited with {status}")));
    }
    let mut mismatches = 0;
    for out in &m.outputs {
        let base = &redirect[&out.arg];
        let rel = out.path.strip_prefix(&out.arg).unwrap_or(Path::new(""));
        let new = if rel.as_os_str().is_empty() { base.clone() } else { base.join(rel) };
        let digest = memaudit::digest::sha256_file(&new)?;
        let ok = digest == out.sha256;
        mismatches += usize::from(!ok);
        println!("{} {}", if ok { "MATCH" } else { "DIFFER" }, out.path.display());
    }
    if mismatches > 0 {
        return Err(Error::integrity(format!("{mismatches} outputs differ from the recorded digests")));
    }
    Ok(())
}
