//! Event-log parsing, vocabulary construction and time-unit bucketing.
//!
//! The on-disk corpus format is line-oriented UTF-8 text, one event per
//! line: `entity<TAB>day<TAB>code`. Days are non-negative integers relative
//! to an arbitrary epoch; coarser time units are derived by integer
//! division at bucketing time. Lines starting with `#` and blank lines are
//! ignored. Entities need not be contiguous in the file.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::CodeId;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: expected `entity<TAB>day<TAB>code`, found {found} field(s)")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: day `{value}` is not a non-negative integer")]
    InvalidDay { line: usize, value: String },
    #[error("line {line}: entity id is empty")]
    EmptyEntity { line: usize },
    #[error("line {line}: code is empty or contains whitespace")]
    InvalidCode { line: usize },
    #[error("no code occurred at least {min_count} times; vocabulary is empty")]
    EmptyVocabulary { min_count: u64 },
    #[error("vocabulary file, line {line}: {reason}")]
    InvalidVocabFile { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A single parsed input line: `(entity, day, code)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEvent {
    pub entity_id: String,
    pub day: u32,
    pub code: String,
}

/// One entity's events, day-sorted, with codes as dense ids.
///
/// The id space is provisional (first-appearance order) straight out of
/// [`parse_events`] and final (vocabulary order) after [`build_vocab`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientRecord {
    pub entity_id: String,
    /// `(day, code_id)` pairs sorted ascending by day; input order is
    /// preserved within equal days.
    pub events: Vec<(u32, CodeId)>,
}

/// Parse result: records over a provisional string-keyed code space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCorpus {
    pub records: Vec<PatientRecord>,
    /// Code strings in first-appearance order; index = provisional id.
    pub codes: Vec<String>,
}

/// Code-string ↔ dense-id map with raw occurrence counts.
///
/// Ordered by descending count, ties broken by lexicographic code string,
/// so construction is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    codes: Vec<String>,
    counts: Vec<u64>,
    total: u64,
    index: HashMap<String, CodeId>,
}

/// A fully encoded corpus: dense-id records plus their vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub records: Vec<PatientRecord>,
    pub vocab: Vocabulary,
}

/// One entity's events grouped into discrete time units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketedSequence {
    /// Non-empty code lists keyed by strictly increasing bucket index.
    /// Calendar gaps stay gaps: no empty buckets are materialized, and
    /// relative offsets computed between bucket indices widen across them.
    pub buckets: Vec<Bucket>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bucket {
    pub index: u32,
    pub codes: Vec<CodeId>,
}

impl BucketedSequence {
    /// Total number of code occurrences across all buckets.
    pub fn occurrence_count(&self) -> usize {
        self.buckets.iter().map(|b| b.codes.len()).sum()
    }
}

/// Parse a line-oriented event stream into per-entity records.
///
/// Records come back grouped by entity in first-appearance order, each
/// internally day-sorted (stable within equal days). Codes are interned to
/// provisional ids in first-appearance order. Empty input yields an empty
/// corpus, not an error.
pub fn parse_events<R: BufRead>(reader: R) -> Result<ParsedCorpus, CorpusError> {
    let mut codes: Vec<String> = Vec::new();
    let mut code_index: HashMap<String, CodeId> = HashMap::new();
    let mut records: Vec<PatientRecord> = Vec::new();
    let mut entity_index: HashMap<String, usize> = HashMap::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches(['\n', '\r']);
        let lineno = lineno + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let event = parse_line(line, lineno)?;

        let code_id = match code_index.get(&event.code) {
            Some(&id) => id,
            None => {
                let id = codes.len() as CodeId;
                code_index.insert(event.code.clone(), id);
                codes.push(event.code);
                id
            }
        };
        let rec_pos = match entity_index.get(&event.entity_id) {
            Some(&pos) => pos,
            None => {
                let pos = records.len();
                entity_index.insert(event.entity_id.clone(), pos);
                records.push(PatientRecord {
                    entity_id: event.entity_id,
                    events: Vec::new(),
                });
                pos
            }
        };
        records[rec_pos].events.push((event.day, code_id));
    }

    for record in &mut records {
        record.events.sort_by_key(|&(day, _)| day);
    }
    Ok(ParsedCorpus { records, codes })
}

fn parse_line(line: &str, lineno: usize) -> Result<RawEvent, CorpusError> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(CorpusError::FieldCount {
            line: lineno,
            found: fields.len(),
        });
    }
    let (entity, day_str, code) = (fields[0], fields[1], fields[2]);
    if entity.is_empty() {
        return Err(CorpusError::EmptyEntity { line: lineno });
    }
    let day: i64 = day_str.parse().map_err(|_| CorpusError::InvalidDay {
        line: lineno,
        value: day_str.to_string(),
    })?;
    if day < 0 || day > u32::MAX as i64 {
        return Err(CorpusError::InvalidDay {
            line: lineno,
            value: day_str.to_string(),
        });
    }
    if code.is_empty() || code.chars().any(char::is_whitespace) {
        return Err(CorpusError::InvalidCode { line: lineno });
    }
    Ok(RawEvent {
        entity_id: entity.to_string(),
        day: day as u32,
        code: code.to_string(),
    })
}

/// Build the vocabulary with a minimum-count cutoff and re-encode records
/// to the final dense id space.
///
/// Occurrences of discarded codes are removed from the records; entities
/// left with no events are dropped entirely. Errors if nothing survives.
pub fn build_vocab(parsed: ParsedCorpus, min_count: u64) -> Result<Corpus, CorpusError> {
    let mut raw_counts = vec![0u64; parsed.codes.len()];
    for record in &parsed.records {
        for &(_, code) in &record.events {
            raw_counts[code as usize] += 1;
        }
    }

    let mut survivors: Vec<CodeId> = (0..parsed.codes.len() as CodeId)
        .filter(|&id| raw_counts[id as usize] >= min_count)
        .collect();
    if survivors.is_empty() {
        return Err(CorpusError::EmptyVocabulary { min_count });
    }
    survivors.sort_by(|&a, &b| {
        raw_counts[b as usize]
            .cmp(&raw_counts[a as usize])
            .then_with(|| parsed.codes[a as usize].cmp(&parsed.codes[b as usize]))
    });

    let mut remap: Vec<Option<CodeId>> = vec![None; parsed.codes.len()];
    let mut codes = Vec::with_capacity(survivors.len());
    let mut counts = Vec::with_capacity(survivors.len());
    for (new_id, &old_id) in survivors.iter().enumerate() {
        remap[old_id as usize] = Some(new_id as CodeId);
        codes.push(parsed.codes[old_id as usize].clone());
        counts.push(raw_counts[old_id as usize]);
    }
    let vocab = Vocabulary::from_parts(codes, counts);

    let records: Vec<PatientRecord> = parsed
        .records
        .into_iter()
        .filter_map(|record| {
            let events: Vec<(u32, CodeId)> = record
                .events
                .into_iter()
                .filter_map(|(day, code)| remap[code as usize].map(|id| (day, id)))
                .collect();
            (!events.is_empty()).then_some(PatientRecord {
                entity_id: record.entity_id,
                events,
            })
        })
        .collect();

    Ok(Corpus { records, vocab })
}

/// Group a record's events into time units of `time_unit_days` days.
///
/// The bucket index is `floor(day / time_unit_days)`; duplicate codes
/// within a bucket are kept as a multiset so frequency statistics survive.
pub fn bucketize(record: &PatientRecord, time_unit_days: u32) -> BucketedSequence {
    assert!(time_unit_days >= 1, "time unit must be at least one day");
    let mut buckets: Vec<Bucket> = Vec::new();
    for &(day, code) in &record.events {
        let index = day / time_unit_days;
        match buckets.last_mut() {
            Some(bucket) if bucket.index == index => bucket.codes.push(code),
            _ => buckets.push(Bucket {
                index,
                codes: vec![code],
            }),
        }
    }
    BucketedSequence { buckets }
}

/// Probability of keeping one occurrence of a code under frequency
/// subsampling: `min(1, sqrt(t/f) + t/f)` with `f = count/total` and
/// `t` the rejection threshold. Rare codes (`f <= t`) are always kept.
pub fn keep_probability(count: u64, total_count: u64, sample_threshold: f64) -> f64 {
    debug_assert!(count > 0 && count <= total_count);
    debug_assert!(sample_threshold > 0.0);
    let f = count as f64 / total_count as f64;
    let ratio = sample_threshold / f;
    (ratio.sqrt() + ratio).min(1.0)
}

impl Vocabulary {
    fn from_parts(codes: Vec<String>, counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        let index = codes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i as CodeId))
            .collect();
        Vocabulary {
            codes,
            counts,
            total,
            index,
        }
    }

    /// Build directly from `(code, count)` pairs, applying the canonical
    /// ordering (descending count, then lexicographic).
    pub fn from_counts(pairs: impl IntoIterator<Item = (String, u64)>) -> Self {
        let mut pairs: Vec<(String, u64)> = pairs.into_iter().collect();
        pairs.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let (codes, counts) = pairs.into_iter().unzip();
        Self::from_parts(codes, counts)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn code(&self, id: CodeId) -> &str {
        &self.codes[id as usize]
    }

    pub fn count(&self, id: CodeId) -> u64 {
        self.counts[id as usize]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Code strings in vocabulary order.
    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn total_count(&self) -> u64 {
        self.total
    }

    pub fn id(&self, code: &str) -> Option<CodeId> {
        self.index.get(code).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (CodeId, &str, u64)> {
        self.codes
            .iter()
            .zip(&self.counts)
            .enumerate()
            .map(|(i, (code, &count))| (i as CodeId, code.as_str(), count))
    }

    /// Per-code keep probabilities for subsampling at `threshold`.
    pub fn keep_probabilities(&self, threshold: f64) -> Vec<f64> {
        self.counts
            .iter()
            .map(|&c| keep_probability(c, self.total, threshold))
            .collect()
    }

    /// Write as text: a header line with the vocabulary size, then one
    /// `code<TAB>count` line per code in vocabulary order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CorpusError> {
        writeln!(w, "{}", self.len())?;
        for (_, code, count) in self.iter() {
            writeln!(w, "{code}\t{count}")?;
        }
        Ok(())
    }

    /// Read back the format produced by [`Vocabulary::write_to`].
    pub fn read_from<R: BufRead>(reader: R) -> Result<Self, CorpusError> {
        let mut lines = reader.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        let expected: usize = header
            .trim()
            .parse()
            .map_err(|_| CorpusError::InvalidVocabFile {
                line: 1,
                reason: format!("bad size header `{header}`"),
            })?;
        let mut codes = Vec::with_capacity(expected);
        let mut counts = Vec::with_capacity(expected);
        let mut seen: HashMap<String, ()> = HashMap::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            if line.is_empty() {
                continue;
            }
            let (code, count) =
                line.split_once('\t')
                    .ok_or_else(|| CorpusError::InvalidVocabFile {
                        line: lineno,
                        reason: "expected `code<TAB>count`".into(),
                    })?;
            let count: u64 = count.parse().map_err(|_| CorpusError::InvalidVocabFile {
                line: lineno,
                reason: format!("bad count `{count}`"),
            })?;
            if seen.insert(code.to_string(), ()).is_some() {
                return Err(CorpusError::InvalidVocabFile {
                    line: lineno,
                    reason: format!("duplicate code `{code}`"),
                });
            }
            codes.push(code.to_string());
            counts.push(count);
        }
        if codes.len() != expected {
            return Err(CorpusError::InvalidVocabFile {
                line: 1,
                reason: format!("header says {expected} codes, file has {}", codes.len()),
            });
        }
        Ok(Self::from_parts(codes, counts))
    }
}

/// Re-encode parsed records against an existing vocabulary. Events whose
/// code the vocabulary does not contain are dropped, as are entities left
/// empty; the vocabulary's counts are taken as-is.
pub fn encode_with_vocab(parsed: ParsedCorpus, vocab: Vocabulary) -> Corpus {
    let remap: Vec<Option<CodeId>> = parsed.codes.iter().map(|c| vocab.id(c)).collect();
    let records = parsed
        .records
        .into_iter()
        .filter_map(|record| {
            let events: Vec<(u32, CodeId)> = record
                .events
                .into_iter()
                .filter_map(|(day, code)| remap[code as usize].map(|id| (day, id)))
                .collect();
            (!events.is_empty()).then_some(PatientRecord {
                entity_id: record.entity_id,
                events,
            })
        })
        .collect();
    Corpus { records, vocab }
}

impl Corpus {
    /// Parse and encode a corpus in one go.
    pub fn from_reader<R: BufRead>(reader: R, min_count: u64) -> Result<Self, CorpusError> {
        build_vocab(parse_events(reader)?, min_count)
    }

    /// Total number of event occurrences.
    pub fn event_count(&self) -> usize {
        self.records.iter().map(|r| r.events.len()).sum()
    }

    /// Write the corpus back out in the event-per-line text format.
    pub fn write_events<W: Write>(&self, mut w: W) -> Result<(), CorpusError> {
        for record in &self.records {
            for &(day, code) in &record.events {
                writeln!(
                    w,
                    "{}\t{}\t{}",
                    record.entity_id,
                    day,
                    self.vocab.code(code)
                )?;
            }
        }
        Ok(())
    }
}
