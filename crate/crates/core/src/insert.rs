//! Splicing perturbations into training sequences.
//!
//! A scheduled record is inserted at a document boundary of its target
//! sequence as `EOS record EOS`; the sequence is then cut back to its
//! original length by dropping tokens from the end. Eligible gaps are offset
//! 0 and every position right after an EOS separator, restricted to offsets
//! where the record and both EOS tokens still fit. The record itself is
//! therefore never truncated.
//!
//! Each entry draws its gap from ChaCha8 stream `sequence_index` of the
//! insertion seed, so application order does not matter.
//!
//! # Delta file
//!
//! Little-endian. A 64-byte header (magic `MHD1`, u32 version, u32
//! sequence_length, u32 zero, u64 entry count, u64 base corpus fingerprint,
//! u64 shuffle seed, u64 body checksum, zero padding) followed by entries
//! sorted by sequence index, each a u64 index and `sequence_length` u32
//! tokens. The body checksum is the first eight bytes of SHA-256 over the
//! entry region.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{SequenceSpec, SequenceView, Sequencer, TokenCorpus, TokenId};
use crate::decontam::SuffixArray;
use crate::digest::sha256_u64;
use crate::plan::{DuplicationAssignment, InsertionSchedule, PerturbationRecord};
use crate::{par, rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpliceResult {
    pub sequence_index: u64,
    pub record_id: String,
    pub gap_position: usize,
    pub span_start: usize,
    pub span_length: usize,
    pub dropped_tail_length: usize,
}

/// Gap offsets where a record of `record_len` tokens fits without truncation.
pub fn eligible_gaps(view: &SequenceView, record_len: usize) -> Vec<usize> {
    let Some(limit) = view.tokens.len().checked_sub(record_len + 2) else {
        return Vec::new();
    };
    std::iter::once(0)
        .chain(view.doc_boundaries.iter().map(|&b| b + 1))
        .filter(|&g| g <= limit)
        .collect()
}

pub fn splice(
    view: &SequenceView,
    record: &PerturbationRecord,
    eos_id: TokenId,
    rng: &mut rng::Rng,
) -> Result<(SpliceResult, Vec<TokenId>)> {
    let len = view.tokens.len();
    let m = record.tokens.len();
    if m == 0 {
        return Err(Error::invalid(format!("record {} is empty", record.id)));
    }
    let gaps = eligible_gaps(view, m);
    if gaps.is_empty() {
        return Err(Error::invalid(format!(
            "record {} ({m} tokens) does not fit a sequence of {len}",
            record.id
        )));
    }
    let gap = gaps[rng::below(rng, gaps.len() as u64) as usize];
    let mut tokens = Vec::with_capacity(len);
    tokens.extend_from_slice(&view.tokens[..gap]);
    tokens.push(eos_id);
    tokens.extend_from_slice(&record.tokens);
    tokens.push(eos_id);
    let rest = len - tokens.len();
    tokens.extend_from_slice(&view.tokens[gap..gap + rest]);
    Ok((
        SpliceResult {
            sequence_index: view.index,
            record_id: record.id.clone(),
            gap_position: gap,
            span_start: gap + 1,
            span_length: m,
            dropped_tail_length: m + 2,
        },
        tokens,
    ))
}

/// The standard corpus' training sequences with spliced sequences overlaid.
#[derive(Debug, Clone)]
pub struct PerturbedCorpusView<'a> {
    sequencer: Sequencer<'a>,
    overlay: BTreeMap<u64, Vec<TokenId>>,
    manifest: Vec<SpliceResult>,
}

impl<'a> PerturbedCorpusView<'a> {
    pub fn identity(sequencer: Sequencer<'a>) -> Self {
        PerturbedCorpusView {
            sequencer,
            overlay: BTreeMap::new(),
            manifest: Vec::new(),
        }
    }

    pub fn sequencer(&self) -> &Sequencer<'a> {
        &self.sequencer
    }

    pub fn base(&self) -> &'a TokenCorpus {
        self.sequencer.corpus()
    }

    pub fn sequence_length(&self) -> usize {
        self.sequencer.spec().sequence_length
    }

    pub fn sequence_count(&self) -> u64 {
        self.sequencer.sequence_count()
    }

    pub fn overlay(&self) -> &BTreeMap<u64, Vec<TokenId>> {
        &self.overlay
    }

    pub fn manifest(&self) -> &[SpliceResult] {
        &self.manifest
    }

    pub fn sequence(&self, index: u64) -> Result<Cow<'_, [TokenId]>> {
        match self.overlay.get(&index) {
            Some(t) => Ok(Cow::Borrowed(t)),
            None => Ok(Cow::Owned(self.sequencer.sequence_at(index)?.tokens)),
        }
    }

    /// All training sequences concatenated in order.
    pub fn stream(&self) -> Result<Vec<TokenId>> {
        let n = self.sequence_count() as usize;
        let chunks = par::map_range(n, |i| self.sequence(i as u64).map(Cow::into_owned));
        let mut out = Vec::with_capacity(n * self.sequence_length());
        for chunk in chunks {
            out.extend_from_slice(&chunk?);
        }
        Ok(out)
    }

    /// A standalone corpus with one document per training sequence.
    pub fn flatten(&self) -> Result<TokenCorpus> {
        let stream = self.stream()?;
        let docs: Vec<&[TokenId]> = stream.chunks(self.sequence_length()).collect();
        TokenCorpus::build(&docs, self.base().config())
    }

    pub fn to_delta(&self) -> DeltaFile {
        DeltaFile {
            sequence_length: self.sequence_length() as u32,
            base_fingerprint: self.base().fingerprint(),
            shuffle_seed: self.sequencer.spec().shuffle_seed,
            entries: self.overlay.clone(),
        }
    }

    /// Rebuild a view from a delta file recorded against `sequencer`'s corpus.
    pub fn from_delta(sequencer: Sequencer<'a>, delta: DeltaFile, manifest: Vec<SpliceResult>) -> Result<Self> {
        let spec = sequencer.spec();
        if delta.base_fingerprint != sequencer.corpus().fingerprint() {
            return Err(Error::integrity("delta file was recorded against a different corpus"));
        }
        if delta.sequence_length as usize != spec.sequence_length || delta.shuffle_seed != spec.shuffle_seed {
            return Err(Error::integrity("delta file sequence layout does not match"));
        }
        let count = sequencer.sequence_count();
        if let Some(&i) = delta.entries.keys().find(|&&i| i >= count) {
            return Err(Error::integrity(format!("delta entry {i} beyond {count} sequences")));
        }
        Ok(PerturbedCorpusView {
            sequencer,
            overlay: delta.entries,
            manifest,
        })
    }
}

pub fn apply_schedule<'a>(
    sequencer: Sequencer<'a>,
    schedule: &InsertionSchedule,
    records: &[PerturbationRecord],
    seed: u64,
) -> Result<PerturbedCorpusView<'a>> {
    let by_id: HashMap<&str, &PerturbationRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let count = sequencer.sequence_count();
    let eos = sequencer.corpus().eos_id();
    let spliced = par::try_map(&schedule.entries, |entry| {
        let tag = |e: Error| Error::invalid(format!("entry (sequence {}, record {}): {e}", entry.sequence_index, entry.record_id));
        let record = by_id
            .get(entry.record_id.as_str())
            .ok_or_else(|| tag(Error::invalid("unknown record")))?;
        if entry.sequence_index >= count {
            return Err(tag(Error::invalid(format!("only {count} sequences"))));
        }
        let view = sequencer.sequence_at(entry.sequence_index).map_err(tag)?;
        let mut rng = rng::seeded_stream(seed, entry.sequence_index);
        splice(&view, record, eos, &mut rng).map_err(tag)
    })?;
    let mut overlay = BTreeMap::new();
    let mut manifest = Vec::with_capacity(spliced.len());
    for (result, tokens) in spliced {
        if overlay.insert(result.sequence_index, tokens).is_some() {
            return Err(Error::invalid(format!(
                "sequence {} scheduled twice",
                result.sequence_index
            )));
        }
        manifest.push(result);
    }
    manifest.sort_by_key(|r| r.sequence_index);
    Ok(PerturbedCorpusView {
        sequencer,
        overlay,
        manifest,
    })
}

/// Serialized overlay of spliced sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeltaFile {
    pub sequence_length: u32,
    pub base_fingerprint: u64,
    pub shuffle_seed: u64,
    pub entries: BTreeMap<u64, Vec<TokenId>>,
}

pub const DELTA_MAGIC: &[u8; 4] = b"MHD1";

impl DeltaFile {
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let mut body = Vec::with_capacity(self.entries.len() * (8 + self.sequence_length as usize * 4));
        for (index, tokens) in &self.entries {
            if tokens.len() != self.sequence_length as usize {
                return Err(Error::invalid(format!("delta entry {index} has wrong length")));
            }
            body.extend_from_slice(&index.to_le_bytes());
            for t in tokens {
                body.extend_from_slice(&t.to_le_bytes());
            }
        }
        let mut header = [0u8; 64];
        header[0..4].copy_from_slice(DELTA_MAGIC);
        header[4..8].copy_from_slice(&1u32.to_le_bytes());
        header[8..12].copy_from_slice(&self.sequence_length.to_le_bytes());
        header[16..24].copy_from_slice(&(self.entries.len() as u64).to_le_bytes());
        header[24..32].copy_from_slice(&self.base_fingerprint.to_le_bytes());
        header[32..40].copy_from_slice(&self.shuffle_seed.to_le_bytes());
        header[40..48].copy_from_slice(&sha256_u64(&body).to_le_bytes());
        out.write_all(&header)?;
        out.write_all(&body)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 64 || &bytes[0..4] != DELTA_MAGIC {
            return Err(Error::integrity("not a delta file"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        if u32_at(4) != 1 {
            return Err(Error::integrity("unsupported delta version"));
        }
        let sequence_length = u32_at(8);
        let count = u64_at(16) as usize;
        let body = &bytes[64..];
        let entry_len = 8 + sequence_length as usize * 4;
        if body.len() != count * entry_len {
            return Err(Error::integrity("delta body length does not match header"));
        }
        if sha256_u64(body) != u64_at(40) {
            return Err(Error::integrity("delta body checksum mismatch"));
        }
        let mut entries = BTreeMap::new();
        for chunk in body.chunks_exact(entry_len) {
            let index = u64::from_le_bytes(chunk[..8].try_into().unwrap());
            let tokens = chunk[8..]
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if entries.insert(index, tokens).is_some() {
                return Err(Error::integrity(format!("delta entry {index} repeated")));
            }
        }
        Ok(DeltaFile {
            sequence_length,
            base_fingerprint: u64_at(24),
            shuffle_seed: u64_at(32),
            entries,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordCount {
    pub record_id: String,
    pub assigned: u32,
    pub found: u64,
    /// Occurrences crossing a sequence boundary.
    pub straddling: u64,
}

impl RecordCount {
    pub fn passes(&self) -> bool {
        self.found == u64::from(self.assigned) && self.straddling == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub records: Vec<RecordCount>,
    pub mismatches: usize,
    pub all_pass: bool,
}

/// Count every assigned record in the perturbed training stream.
pub fn verify_insertion(
    view: &PerturbedCorpusView<'_>,
    assignment: &DuplicationAssignment,
    records: &[PerturbationRecord],
) -> Result<VerificationReport> {
    let by_id: HashMap<&str, &PerturbationRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let stream = view.stream()?;
    let sa = SuffixArray::build(&stream);
    let len = view.sequence_length() as u64;
    let ids: Vec<(&str, u32)> = assignment.iter().collect();
    let counts = par::try_map(&ids, |&(id, level)| {
        let record = by_id
            .get(id)
            .ok_or_else(|| Error::invalid(format!("no tokens for assigned record {id}")))?;
        let m = record.tokens.len() as u64;
        let positions = sa.positions(&stream, &record.tokens);
        let straddling = positions.iter().filter(|&&p| p / len != (p + m - 1) / len).count() as u64;
        Ok(RecordCount {
            record_id: id.to_string(),
            assigned: level,
            found: positions.len() as u64,
            straddling,
        })
    })?;
    let mismatches = counts.iter().filter(|c| !c.passes()).count();
    Ok(VerificationReport {
        records: counts,
        mismatches,
        all_pass: mismatches == 0,
    })
}

/// Build a sequencer and apply a schedule in one step.
pub fn perturb<'a>(
    corpus: &'a TokenCorpus,
    spec: SequenceSpec,
    schedule: &InsertionSchedule,
    records: &[PerturbationRecord],
    seed: u64,
) -> Result<PerturbedCorpusView<'a>> {
    apply_schedule(Sequencer::new(corpus, spec)?, schedule, records, seed)
}
