//! Message corpora and code assignments.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, BufRead, Read, Write};

use chrono::{DateTime, TimeZone, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::CodeId;

/// Default floor below which messages are auto-excluded as too short.
pub const DEFAULT_WORD_FLOOR: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MessageId(pub String);

impl MessageId {
    pub fn new(id: impl Into<String>) -> Self {
        MessageId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Borrow<str> for MessageId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl From<&str> for MessageId {
    fn from(s: &str) -> Self {
        MessageId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub id: MessageId,
    pub participant_id: String,
    /// Attribution tag of the question that elicited the message.
    pub elicited_by: String,
    pub text: String,
    pub word_count: usize,
}

/// Whitespace-token count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

impl Message {
    pub fn new(
        id: impl Into<String>,
        participant_id: impl Into<String>,
        elicited_by: impl Into<String>,
        text: impl Into<String>,
    ) -> Self {
        let text = text.into();
        Message {
            id: MessageId(id.into()),
            participant_id: participant_id.into(),
            elicited_by: elicited_by.into(),
            word_count: word_count(&text),
            text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExclusionReason {
    TooShort,
    OffTopic,
    Incomplete,
    Manual,
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExclusionReason::TooShort => "too-short",
            ExclusionReason::OffTopic => "off-topic",
            ExclusionReason::Incomplete => "incomplete",
            ExclusionReason::Manual => "manual",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub message_id: MessageId,
    pub reason: ExclusionReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Ingested messages plus the ids excluded from agreement statistics.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Corpus {
    pub messages: Vec<Message>,
    #[serde(default)]
    pub exclusions: Vec<Exclusion>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus source: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: unknown attribution tag {tag:?}")]
    UnknownAttribution { line: usize, tag: String },
    #[error("unknown message {0}")]
    UnknownMessage(MessageId),
    #[error("stratum {index} needs {needed} messages but only {available} are eligible")]
    StratumUnderflow { index: usize, needed: usize, available: usize },
    #[error("invalid stratum selector {0:?}")]
    BadSelector(String),
    #[error("duplicate assignment for message {message} by coder {coder}")]
    DuplicateAssignment { message: MessageId, coder: String },
    #[error("assignment csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("corpus json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Corpus {
    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("corpus serializes");
        s.push('\n');
        s
    }

    pub fn get(&self, id: &str) -> Option<&Message> {
        self.messages.iter().find(|m| m.id.as_str() == id)
    }

    /// Lookup table by id.
    pub fn index(&self) -> BTreeMap<&str, &Message> {
        self.messages.iter().map(|m| (m.id.as_str(), m)).collect()
    }

    pub fn is_excluded(&self, id: &str) -> bool {
        self.exclusions.iter().any(|e| e.message_id.as_str() == id)
    }

    /// Messages that may enter agreement statistics, in corpus order.
    pub fn eligible(&self) -> impl Iterator<Item = &Message> {
        let excluded: BTreeSet<&str> = self.exclusions.iter().map(|e| e.message_id.as_str()).collect();
        self.messages.iter().filter(move |m| !excluded.contains(m.id.as_str()))
    }

    pub fn eligible_ids(&self) -> BTreeSet<MessageId> {
        self.eligible().map(|m| m.id.clone()).collect()
    }

    /// Flags a message manually (off-topic, incomplete). Re-flagging is a no-op.
    pub fn exclude(
        &mut self,
        id: &str,
        reason: ExclusionReason,
        note: Option<String>,
    ) -> Result<(), CorpusError> {
        if self.get(id).is_none() {
            return Err(CorpusError::UnknownMessage(MessageId::new(id)));
        }
        if !self.is_excluded(id) {
            self.exclusions.push(Exclusion { message_id: MessageId::new(id), reason, note });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IngestConfig {
    pub word_floor: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig { word_floor: DEFAULT_WORD_FLOOR }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub corpus: Corpus,
    pub malformed: Vec<MalformedLine>,
}

#[derive(Deserialize)]
struct MessageRecord {
    #[serde(default)]
    id: Option<String>,
    participant: serde_json::Value,
    attribution: String,
    text: String,
}

/// Reads line-delimited JSON records `{participant, attribution, text}` (optional `id`).
///
/// Message ids default to `msg-<line>`. Malformed lines are reported with their
/// 1-based line number; an attribution tag outside `attributions` aborts ingestion.
pub fn ingest_messages<R: BufRead>(
    source: R,
    attributions: &BTreeSet<String>,
    cfg: &IngestConfig,
) -> Result<IngestReport, CorpusError> {
    let mut report = IngestReport::default();
    let mut ids = BTreeSet::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MessageRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                report.malformed.push(MalformedLine { line: line_no, reason: e.to_string() });
                continue;
            }
        };
        let participant = match record.participant {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            other => {
                report.malformed.push(MalformedLine {
                    line: line_no,
                    reason: format!("participant must be a string or number, got {other}"),
                });
                continue;
            }
        };
        if participant.trim().is_empty() {
            report.malformed.push(MalformedLine { line: line_no, reason: "empty participant".into() });
            continue;
        }
        if !attributions.contains(&record.attribution) {
            return Err(CorpusError::UnknownAttribution { line: line_no, tag: record.attribution });
        }
        let id = record.id.unwrap_or_else(|| format!("msg-{line_no:06}"));
        if !ids.insert(id.clone()) {
            report.malformed.push(MalformedLine { line: line_no, reason: format!("duplicate id {id:?}") });
            continue;
        }
        let message = Message::new(id, participant, record.attribution, record.text);
        if message.word_count < cfg.word_floor {
            report.corpus.exclusions.push(Exclusion {
                message_id: message.id.clone(),
                reason: ExclusionReason::TooShort,
                note: None,
            });
        }
        report.corpus.messages.push(message);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WordStats {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub sd: f64,
}

/// Mean and population SD of word counts per attribution, over every ingested message.
/// Attributions without messages are omitted.
pub fn word_stats(corpus: &Corpus) -> BTreeMap<String, WordStats> {
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for m in &corpus.messages {
        groups.entry(m.elicited_by.as_str()).or_default().push(m.word_count as f64);
    }
    groups
        .into_iter()
        .map(|(tag, xs)| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            (tag.to_string(), WordStats { n: xs.len(), mean, sd: var.sqrt() })
        })
        .collect()
}

/// Which eligible messages a stratum draws from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StratumSelector {
    /// Positions `start..start+len` in the eligible message order.
    Range { start: usize, len: usize },
    Attribution { tag: String },
    All,
}

impl StratumSelector {
    /// Parses `range:<start>:<len>`, `attribution:<tag>` or `all`.
    pub fn parse(s: &str) -> Result<Self, CorpusError> {
        let bad = || CorpusError::BadSelector(s.to_string());
        let mut parts = s.split(':');
        match parts.next() {
            Some("all") if parts.next().is_none() => Ok(StratumSelector::All),
            Some("attribution") => {
                let tag = parts.next().filter(|t| !t.is_empty()).ok_or_else(bad)?;
                if parts.next().is_some() {
                    return Err(bad());
                }
                Ok(StratumSelector::Attribution { tag: tag.to_string() })
            }
            Some("range") => {
                let start = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
                let len = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
                if parts.next().is_some() {
                    return Err(bad());
                }
                Ok(StratumSelector::Range { start, len })
            }
            _ => Err(bad()),
        }
    }

    fn admits(&self, position: usize, message: &Message) -> bool {
        match self {
            StratumSelector::Range { start, len } => position >= *start && position - start < *len,
            StratumSelector::Attribution { tag } => &message.elicited_by == tag,
            StratumSelector::All => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stratum {
    pub selector: StratumSelector,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratifiedSample {
    pub seed: u64,
    /// Sampled ids per stratum, in corpus order.
    pub strata: Vec<Vec<MessageId>>,
}

impl StratifiedSample {
    pub fn all(&self) -> impl Iterator<Item = &MessageId> {
        self.strata.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.strata.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws exactly `n` eligible messages per stratum without replacement. Strata are
/// disjoint: a message drawn for one stratum is not available to later ones.
pub fn sample_stratified(
    corpus: &Corpus,
    strata: &[Stratum],
    seed: u64,
) -> Result<StratifiedSample, CorpusError> {
    let eligible: Vec<&Message> = corpus.eligible().collect();
    let mut taken = vec![false; eligible.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(strata.len());
    for (index, stratum) in strata.iter().enumerate() {
        let candidates: Vec<usize> = eligible
            .iter()
            .enumerate()
            .filter(|(pos, m)| !taken[*pos] && stratum.selector.admits(*pos, m))
            .map(|(pos, _)| pos)
            .collect();
        if candidates.len() < stratum.n {
            return Err(CorpusError::StratumUnderflow {
                index,
                needed: stratum.n,
                available: candidates.len(),
            });
        }
        let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, candidates.len(), stratum.n)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        picked.sort_unstable();
        for &pos in &picked {
            taken[pos] = true;
        }
        out.push(picked.into_iter().map(|pos| eligible[pos].id.clone()).collect());
    }
    Ok(StratifiedSample { seed, strata: out })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub message_id: MessageId,
    /// Human coder name or prompt-variant id.
    pub coder_id: String,
    pub code_id: CodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub justification: Option<String>,
    pub created_at: DateTime<Utc>,
}

impl Assignment {
    pub fn new(message_id: &MessageId, coder_id: &str, code_id: &CodeId, created_at: DateTime<Utc>) -> Self {
        Assignment {
            message_id: message_id.clone(),
            coder_id: coder_id.to_string(),
            code_id: code_id.clone(),
            justification: None,
            created_at,
        }
    }
}

/// Deterministic timestamp `seq` seconds after a fixed epoch; used where wall-clock
/// time would break reproducible exports.
pub fn logical_time(seq: u64) -> DateTime<Utc> {
    let base = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).single().expect("valid epoch");
    base + chrono::Duration::seconds(seq as i64)
}

/// Fails on the first repeated `(message_id, coder_id)` pair.
pub fn check_unique(assignments: &[Assignment]) -> Result<(), CorpusError> {
    let mut seen = BTreeSet::new();
    for a in assignments {
        if !seen.insert((a.message_id.as_str(), a.coder_id.as_str())) {
            return Err(CorpusError::DuplicateAssignment {
                message: a.message_id.clone(),
                coder: a.coder_id.clone(),
            });
        }
    }
    Ok(())
}

/// Codes assigned by one coder, keyed by message.
pub fn codes_by_message<'a>(
    assignments: &'a [Assignment],
    coder: &str,
) -> BTreeMap<&'a MessageId, &'a CodeId> {
    assignments
        .iter()
        .filter(|a| a.coder_id == coder)
        .map(|a| (&a.message_id, &a.code_id))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct AssignmentRow {
    message_id: String,
    coder_id: String,
    code_id: String,
    justification: String,
}

/// Writes the `message_id,coder_id,code_id,justification` export.
pub fn write_assignments_csv<W: Write>(writer: W, assignments: &[Assignment]) -> Result<(), CorpusError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    for a in assignments {
        w.serialize(AssignmentRow {
            message_id: a.message_id.0.clone(),
            coder_id: a.coder_id.clone(),
            code_id: a.code_id.0.clone(),
            justification: a.justification.clone().unwrap_or_default(),
        })?;
    }
    if assignments.is_empty() {
        w.write_record(["message_id", "coder_id", "code_id", "justification"])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the CSV export back. Timestamps are not part of the export and are assigned
/// logically in row order.
pub fn read_assignments_csv<R: Read>(reader: R) -> Result<Vec<Assignment>, CorpusError> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (seq, row) in r.deserialize::<AssignmentRow>().enumerate() {
        let row = row?;
        out.push(Assignment {
            message_id: MessageId(row.message_id),
            coder_id: row.coder_id,
            code_id: CodeId(row.code_id),
            justification: (!row.justification.is_empty()).then_some(row.justification),
            created_at: logical_time(seq as u64),
        });
    }
    Ok(out)
}
