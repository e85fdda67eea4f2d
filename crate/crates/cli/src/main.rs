mod commands;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use memaudit::ErrorKind;

#[derive(Parser)]
#[command(name = "memaudit", version, about = "Corpus perturbation and memorization auditing")]
struct Cli {
    /// Worker threads for data-parallel stages (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum InputFormat {
    /// JSONL `{"id", "tokens"}`.
    Tokens,
    /// JSONL `{"id", "text"}` encoded as bytes.
    Bytes,
    /// JSONL `{"id", "text"}` encoded with a fitted word vocabulary.
    Words,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EvalKind {
    Loglik,
    Eidetic,
    Choice,
    Gen,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Desk,
    Smoke,
}

#[derive(Args, Debug, Clone)]
pub struct SequenceArgs {
    #[arg(long, default_value_t = 2048)]
    pub sequence_length: usize,
    #[arg(long, default_value_t = 0)]
    pub shuffle_seed: u64,
    /// Sequences per optimizer step, for budget reporting.
    #[arg(long, default_value_t = 1024)]
    pub batch_size: usize,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Local n-gram model file.
    #[arg(long, conflicts_with = "remote")]
    pub model: Option<PathBuf>,
    /// Base URL of a remote scoring service.
    #[arg(long)]
    pub remote: Option<String>,
    /// Vocabulary size of the remote model.
    #[arg(long, requires = "remote")]
    pub vocab_size: Option<u32>,
    #[arg(long, default_value_t = 16)]
    pub remote_batch: usize,
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
    #[arg(long, default_value_t = 3)]
    pub retries: u32,
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
}

#[derive(Subcommand)]
pub enum Command {
    /// Build a binary token corpus from documents or the synthetic source.
    BuildCorpus {
        #[arg(long, required_unless_present = "synthetic_tokens")]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "tokens")]
        format: InputFormat,
        #[arg(long)]
        vocab_size: Option<u32>,
        #[arg(long)]
        eos_id: Option<u32>,
        /// Word vocabulary written by `--format words`.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Generate this many tokens from the synthetic Markov source.
        #[arg(long, conflicts_with = "input")]
        synthetic_tokens: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Bytes per stored token (2 or 4); chosen from the vocabulary by default.
        #[arg(long)]
        token_width: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Make perturbation records from text, biographies or the synthetic source.
    MakeRecords {
        #[arg(long, conflicts_with_all = ["text", "biographies"])]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 96)]
        length: usize,
        /// Seed of the synthetic source (match `build-corpus --seed`).
        #[arg(long, default_value_t = 0)]
        source_seed: u64,
        #[arg(long)]
        text: Option<PathBuf>,
        #[arg(long)]
        biographies: Option<PathBuf>,
        /// `bytes` or `words:VOCAB_PATH`.
        #[arg(long, default_value = "bytes")]
        tokenizer: String,
        #[arg(long, value_parser = commands::parse_serde::<memaudit::plan::Domain>, default_value = "copyright")]
        domain: memaudit::plan::Domain,
        #[arg(long, default_value = "records")]
        dataset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove accidental collisions between records and the corpus.
    Decontam {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        records: PathBuf,
        /// Records at most this long are dropped instead of removing documents.
        #[arg(long, default_value_t = 40)]
        threshold: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        out_records: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Assign duplication levels and schedule insertions.
    Plan {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        seq: SequenceArgs,
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<u32>>,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<u64>>,
        /// Training window in percent, half-open.
        #[arg(long, num_args = 2, value_names = ["START", "END"], allow_negative_numbers = true)]
        window: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_assignment: PathBuf,
        #[arg(long)]
        out_schedule: PathBuf,
    },
    /// Splice scheduled records into training sequences.
    Insert {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        schedule: PathBuf,
        #[command(flatten)]
        seq: SequenceArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        splices: PathBuf,
    },
    /// Count every record in the perturbed training stream.
    Verify {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        delta: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        assignment: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Sample synthetic biographies and optional attack prompts.
    Biogen {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Attribute tables (TSV); built-in tables by default.
        #[arg(long)]
        tables: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long, value_parser = commands::parse_serde::<memaudit::biogen::PromptFormat>, default_value = "full_prefix")]
        format: memaudit::biogen::PromptFormat,
        #[arg(long, value_parser = commands::parse_serde::<memaudit::biogen::AttackMode>, default_value = "infill")]
        mode: memaudit::biogen::AttackMode,
        #[arg(long, default_value = "email")]
        target: memaudit::biogen::PiiAttribute,
        /// Distractors per prompt.
        #[arg(long, default_value_t = 4)]
        k: usize,
    },
    /// Anonymize dialogues and build persona/username attacks.
    Chatgen {
        /// JSONL `{"persona": [...], "dialogue": [[speaker, text], ...]}`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// One noun per line; built-in list by default.
        #[arg(long)]
        nouns: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        attacks: Option<PathBuf>,
        #[arg(long, value_parser = commands::parse_serde::<memaudit::biogen::ChatDirection>, default_value = "persona_given_username")]
        direction: memaudit::biogen::ChatDirection,
        #[arg(long)]
        prompted: bool,
        #[arg(long, default_value_t = 4)]
        k: usize,
    },
    /// Train the n-gram reference model on a corpus or a perturbed view.
    TrainLm {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        delta: Option<PathBuf>,
        /// Train on identity training sequences of this length instead of documents.
        #[arg(long, conflicts_with = "delta")]
        sequence_length: Option<usize>,
        #[arg(long, default_value_t = 0)]
        shuffle_seed: u64,
        #[arg(long, default_value_t = 5)]
        order: usize,
        #[arg(long, default_value_t = 1e-3)]
        add_k: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-token log probabilities for tokenized sequences.
    Score {
        #[command(flatten)]
        model: ModelArgs,
        /// JSONL `{"id", "tokens"}`; sequence ids are line numbers.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        moments: bool,
        /// Write the packed binary format instead of JSONL.
        #[arg(long)]
        packed: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Memorization metrics aggregated by duplication level.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum)]
        kind: EvalKind,
        /// Records (loglik, eidetic) or tasks (choice, gen) as JSONL.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        assignment: PathBuf,
        #[arg(long, default_value_t = 32)]
        prefix_len: usize,
        #[arg(long, default_value_t = 64)]
        cont_len: usize,
        /// Decoder for generated text: `synthetic`, `bytes` or `words:VOCAB_PATH`.
        #[arg(long, default_value = "synthetic")]
        tokenizer: String,
        #[arg(long)]
        out: PathBuf,
        /// Per-record values as JSONL.
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Membership-inference AUCs by duplication level.
    Mia {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        assignment: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "loss,mink,minkpp,zlib")]
        attacks: Vec<memaudit::mia::Attack>,
        /// Member levels; every non-zero level plus any_nonzero by default.
        #[arg(long = "level")]
        levels: Vec<memaudit::mia::MemberLevel>,
        #[arg(long, default_value_t = 0.2)]
        k_fraction: f64,
        #[arg(long, default_value_t = 6)]
        zlib_level: u32,
        #[arg(long, default_value = "records")]
        dataset: String,
        #[arg(long, default_value = "model")]
        model_tag: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unseen / unlearn / keep splits at one duplication level.
    Splits {
        #[arg(long)]
        assignment: PathBuf,
        #[arg(long)]
        level: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a reference experiment end to end.
    Refexp {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum, required_unless_present = "config")]
        preset: Option<Preset>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a curve CSV as SVG.
    Plot {
        #[arg(long)]
        curve: PathBuf,
        #[arg(long, default_value = "")]
        title: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run the command recorded in a manifest and compare output digests.
    Repro {
        #[arg(long)]
        manifest: PathBuf,
        /// Keep the re-run outputs here instead of a temporary directory.
        #[arg(long)]
        keep: Option<PathBuf>,
    },
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Validation | ErrorKind::Io => 2,
        ErrorKind::Integrity => 3,
        ErrorKind::Remote => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    memaudit::par::init_workers(cli.workers);
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
