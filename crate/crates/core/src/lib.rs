//! Corpus perturbation and memorization auditing.
//!
//! The pipeline inserts duplicated "risk" texts into a tokenized pretraining
//! corpus at controlled duplication levels, checks the corpus for accidental
//! collisions, and measures how strongly a language model memorized each
//! text as a function of its duplication count.
//!
//! Module map:
//!
//! * [`corpus`] binary token corpora and fixed-length training sequences
//! * [`decontam`] suffix-array index and exact-match contamination removal
//! * [`plan`] duplication assignment and insertion scheduling
//! * [`insert`] splicing perturbations into training sequences
//! * [`biogen`] synthetic biographies, attack prompts and chat anonymization
//! * [`lm`] token scores, remote scoring client and the n-gram reference LM
//! * [`memscore`] memorization metrics and duplication curves
//! * [`mia`] membership-inference attacks, ROC AUC and benchmark splits
//! * [`refexp`] end-to-end reference experiments
//!
//! Data-parallel loops run on rayon when the `parallel` feature (default) is
//! enabled and fall back to plain iterators otherwise. Results are identical
//! either way.

pub mod biogen;
pub mod corpus;
pub mod decontam;
pub mod digest;
mod error;
pub mod insert;
pub mod jsonl;
pub mod lm;
pub mod memscore;
pub mod mia;
pub mod par;
pub mod plan;
pub mod refexp;
pub mod rng;
pub mod synth;
pub mod tokenize;

pub use error::{Error, ErrorKind, Result};
