//! Disagreement selection between human and variant codes, coder triage votes and
//! summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{CodeId, CodeKind, Codebook};
use crate::corpus::{Assignment, Corpus, MessageId};
use crate::gateway::majority_vote;
use crate::stats::variant_order_key;

#[derive(Debug, Error)]
pub enum TriageError {
    #[error("agree fraction {0} outside [0, 1]")]
    BadFraction(f64),
    #[error("distinct-code threshold must be at least 2, got {0}")]
    BadThreshold(usize),
    #[error("coder {0:?} is not registered")]
    UnknownCoder(String),
    #[error("no disagreement record for message {0}")]
    UnknownRecord(MessageId),
    #[error("pattern tag {0:?} is not in the vocabulary")]
    UnknownTag(String),
    #[error("{0}")]
    Parse(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SelectionRule {
    /// No variant code equals the human code.
    AllDiffer,
    /// Share of variants agreeing with the human code is at most `p`.
    AgreeFractionAtMost { p: f64 },
    /// Variants produced at least `k` distinct codes.
    DistinctVariantCodesAtLeast { k: usize },
}

impl SelectionRule {
    pub fn validate(&self) -> Result<(), TriageError> {
        match *self {
            SelectionRule::AgreeFractionAtMost { p } if !(0.0..=1.0).contains(&p) => Err(TriageError::BadFraction(p)),
            SelectionRule::DistinctVariantCodesAtLeast { k } if k < 2 => Err(TriageError::BadThreshold(k)),
            _ => Ok(()),
        }
    }

    /// Parses `all-differ`, `agree-at-most:0.2` or `distinct-at-least:3`.
    pub fn parse(s: &str) -> Result<Self, TriageError> {
        let bad = || TriageError::Parse(format!("unknown selection rule {s:?}"));
        let rule = match s.split_once(':') {
            None if s == "all-differ" => SelectionRule::AllDiffer,
            Some(("agree-at-most", p)) => SelectionRule::AgreeFractionAtMost { p: p.parse().map_err(|_| bad())? },
            Some(("distinct-at-least", k)) => {
                SelectionRule::DistinctVariantCodesAtLeast { k: k.parse().map_err(|_| bad())? }
            }
            _ => return Err(bad()),
        };
        rule.validate()?;
        Ok(rule)
    }

    fn matches(&self, human: &CodeId, codes: &[&CodeId]) -> bool {
        let agree = codes.iter().filter(|c| **c == human).count();
        match *self {
            SelectionRule::AllDiffer => agree == 0,
            SelectionRule::AgreeFractionAtMost { p } => agree as f64 <= p * codes.len() as f64,
            SelectionRule::DistinctVariantCodesAtLeast { k } => codes.iter().collect::<BTreeSet<_>>().len() >= k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TriageCategory {
    HumanError,
    LlmError,
    NewCode,
}

impl TriageCategory {
    pub const ALL: [TriageCategory; 3] = [TriageCategory::HumanError, TriageCategory::LlmError, TriageCategory::NewCode];
}

impl fmt::Display for TriageCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TriageCategory::HumanError => "human-error",
            TriageCategory::LlmError => "llm-error",
            TriageCategory::NewCode => "new-code",
        })
    }
}

impl std::str::FromStr for TriageCategory {
    type Err = TriageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TriageCategory::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| TriageError::Parse(format!("unknown triage category {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TriageState {
    #[default]
    Unreviewed,
    HumanError,
    LlmError,
    NewCode,
}

impl From<TriageCategory> for TriageState {
    fn from(c: TriageCategory) -> Self {
        match c {
            TriageCategory::HumanError => TriageState::HumanError,
            TriageCategory::LlmError => TriageState::LlmError,
            TriageCategory::NewCode => TriageState::NewCode,
        }
    }
}

impl fmt::Display for TriageState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TriageState::Unreviewed => f.write_str("unreviewed"),
            TriageState::HumanError => f.write_str("human-error"),
            TriageState::LlmError => f.write_str("llm-error"),
            TriageState::NewCode => f.write_str("new-code"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantCode {
    pub code_id: CodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub justification: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum TriageEvent {
    Vote { seq: u64, coder: String, category: TriageCategory },
    Transition { seq: u64, from: TriageState, to: TriageState },
    Discussion { seq: u64, open: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementRecord {
    pub message_id: MessageId,
    #[serde(default)]
    pub message_text: String,
    #[serde(default)]
    pub attribution: String,
    pub human_code: CodeId,
    pub variant_codes: BTreeMap<String, VariantCode>,
    pub rule_matched: SelectionRule,
    #[serde(default)]
    pub triage: TriageState,
    #[serde(default)]
    pub votes: BTreeMap<String, TriageCategory>,
    #[serde(default)]
    pub needs_discussion: bool,
    #[serde(default)]
    pub notes: String,
    #[serde(default)]
    pub pattern_tags: BTreeSet<String>,
    #[serde(default)]
    pub history: Vec<TriageEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "missing", rename_all = "kebab-case")]
pub enum CoverageGap {
    HumanCode { message_id: MessageId },
    VariantCodes { message_id: MessageId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub rule: SelectionRule,
    /// Messages with a human code and at least one variant code.
    pub examined: usize,
    pub records: Vec<DisagreementRecord>,
    pub coverage_gaps: Vec<CoverageGap>,
}

/// Variant assignments grouped per message, in natural variant order.
fn variant_codes_by_message(variants: &BTreeMap<String, Vec<Assignment>>) -> BTreeMap<&MessageId, Vec<(&str, &Assignment)>> {
    let mut ids: Vec<&String> = variants.keys().collect();
    ids.sort_by_key(|id| variant_order_key(id));
    let mut out: BTreeMap<&MessageId, Vec<(&str, &Assignment)>> = BTreeMap::new();
    for v in ids {
        for a in &variants[v] {
            out.entry(&a.message_id).or_default().push((v.as_str(), a));
        }
    }
    out
}

/// Selects messages whose variant codes conflict with the human code under `rule`.
/// Records come out in message-id order; the input order of variants does not matter.
pub fn select_disagreements(
    human: &[Assignment],
    variants: &BTreeMap<String, Vec<Assignment>>,
    rule: SelectionRule,
) -> Result<Selection, TriageError> {
    rule.validate()?;
    let human_codes: BTreeMap<&MessageId, &CodeId> = human.iter().map(|a| (&a.message_id, &a.code_id)).collect();
    let by_message = variant_codes_by_message(variants);

    let mut gaps = Vec::new();
    for id in by_message.keys().filter(|m| !human_codes.contains_key(*m)) {
        gaps.push(CoverageGap::HumanCode { message_id: (*id).clone() });
    }
    let mut records = Vec::new();
    let mut examined = 0;
    for (message_id, human_code) in &human_codes {
        let Some(entries) = by_message.get(message_id) else {
            gaps.push(CoverageGap::VariantCodes { message_id: (*message_id).clone() });
            continue;
        };
        examined += 1;
        let codes: Vec<&CodeId> = entries.iter().map(|(_, a)| &a.code_id).collect();
        if !rule.matches(human_code, &codes) {
            continue;
        }
        records.push(DisagreementRecord {
            message_id: (*message_id).clone(),
            message_text: String::new(),
            attribution: String::new(),
            human_code: (*human_code).clone(),
            variant_codes: entries
                .iter()
                .map(|(v, a)| {
                    (v.to_string(), VariantCode { code_id: a.code_id.clone(), justification: a.justification.clone() })
                })
                .collect(),
            rule_matched: rule,
            triage: TriageState::Unreviewed,
            votes: BTreeMap::new(),
            needs_discussion: false,
            notes: String::new(),
            pattern_tags: BTreeSet::new(),
            history: Vec::new(),
        });
    }
    gaps.sort_by(|a, b| gap_id(a).cmp(gap_id(b)));
    Ok(Selection { rule, examined, records, coverage_gaps: gaps })
}

fn gap_id(g: &CoverageGap) -> &MessageId {
    match g {
        CoverageGap::HumanCode { message_id } | CoverageGap::VariantCodes { message_id } => message_id,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsensusPolicy {
    /// Every registered coder votes the same category.
    #[default]
    Unanimity,
    /// More than half of the registered coders vote the same category.
    Majority,
}

/// Language-pattern tags reviewers can attach to disagreement records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatternVocabulary(pub BTreeMap<String, String>);

impl Default for PatternVocabulary {
    fn default() -> Self {
        let seed = [
            ("distancing-language", "Keeps the person at arm's length without naming a stigmatizing reason."),
            ("over-conjecture", "Speculates about future behaviour well beyond what the story supports."),
            ("misconception", "Rests on a factual misunderstanding of the condition."),
            ("need-vs-suggestion", "Hard to tell whether the message states a need or offers a suggestion."),
            ("individual-vs-stereotypical", "Hard to tell whether the message is about this person or the group."),
        ];
        PatternVocabulary(seed.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
    }
}

impl PatternVocabulary {
    pub fn contains(&self, tag: &str) -> bool {
        self.0.contains_key(tag)
    }

    pub fn extend(&mut self, tag: impl Into<String>, description: impl Into<String>) {
        self.0.insert(tag.into(), description.into());
    }
}

/// A reviewable set of records plus the coders and policy that triage them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementSet {
    pub coders: BTreeSet<String>,
    #[serde(default)]
    pub policy: ConsensusPolicy,
    #[serde(default)]
    pub vocabulary: PatternVocabulary,
    pub records: Vec<DisagreementRecord>,
    #[serde(default)]
    pub seq: u64,
}

impl DisagreementSet {
    pub fn new(records: Vec<DisagreementRecord>, coders: impl IntoIterator<Item = impl Into<String>>) -> Self {
        DisagreementSet {
            coders: coders.into_iter().map(Into::into).collect(),
            policy: ConsensusPolicy::default(),
            vocabulary: PatternVocabulary::default(),
            records,
            seq: 0,
        }
    }

    pub fn get(&self, message_id: &str) -> Option<&DisagreementRecord> {
        self.records.iter().find(|r| r.message_id.as_str() == message_id)
    }

    fn get_mut(&mut self, message_id: &str) -> Result<&mut DisagreementRecord, TriageError> {
        self.records
            .iter_mut()
            .find(|r| r.message_id.as_str() == message_id)
            .ok_or_else(|| TriageError::UnknownRecord(MessageId::new(message_id)))
    }

    /// Copies message text and attribution from the corpus into each record.
    pub fn attach_messages(&mut self, corpus: &Corpus) {
        let index = corpus.index();
        for r in &mut self.records {
            if let Some(m) = index.get(r.message_id.as_str()) {
                r.message_text = m.text.clone();
                r.attribution = m.elicited_by.clone();
            }
        }
    }

    pub fn set_tags(&mut self, message_id: &str, tags: BTreeSet<String>) -> Result<(), TriageError> {
        if let Some(bad) = tags.iter().find(|t| !self.vocabulary.contains(t)) {
            return Err(TriageError::UnknownTag(bad.clone()));
        }
        self.get_mut(message_id)?.pattern_tags = tags;
        Ok(())
    }

    /// Stores a coder's vote and applies the consensus policy.
    ///
    /// Until consensus the state is unchanged; once every registered coder has voted
    /// without consensus the record is flagged for discussion. A later re-vote that
    /// reaches consensus on a different category is recorded as a transition.
    pub fn record_triage(
        &mut self,
        message_id: &str,
        coder: &str,
        category: TriageCategory,
        notes: Option<&str>,
    ) -> Result<&DisagreementRecord, TriageError> {
        if !self.coders.contains(coder) {
            return Err(TriageError::UnknownCoder(coder.to_string()));
        }
        let policy = self.policy;
        let registered = self.coders.len();
        let mut seq = self.seq;
        let record = self.get_mut(message_id)?;
        let mut next = || {
            seq += 1;
            seq
        };

        record.votes.insert(coder.to_string(), category);
        record.history.push(TriageEvent::Vote { seq: next(), coder: coder.to_string(), category });
        if let Some(n) = notes {
            record.notes = n.to_string();
        }

        let mut tally: BTreeMap<TriageCategory, usize> = BTreeMap::new();
        for c in record.votes.values() {
            *tally.entry(*c).or_default() += 1;
        }
        let all_voted = record.votes.len() == registered;
        let decided = tally.iter().find(|(_, n)| match policy {
            ConsensusPolicy::Unanimity => all_voted && **n == registered,
            ConsensusPolicy::Majority => **n * 2 > registered,
        });
        match decided {
            Some((cat, _)) => {
                let to = TriageState::from(*cat);
                if record.triage != to {
                    record.history.push(TriageEvent::Transition { seq: next(), from: record.triage, to });
                    record.triage = to;
                }
                if record.needs_discussion {
                    record.needs_discussion = false;
                    record.history.push(TriageEvent::Discussion { seq: next(), open: false });
                }
            }
            None if all_voted && !record.needs_discussion => {
                record.needs_discussion = true;
                record.history.push(TriageEvent::Discussion { seq: next(), open: true });
            }
            None => {}
        }
        self.seq = seq;
        Ok(self.get(message_id).expect("record exists"))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("set serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, TriageError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Roster for spreadsheet review: one row per record, one column per variant.
    pub fn write_roster_csv<W: Write>(&self, writer: W) -> Result<(), TriageError> {
        let mut variants: BTreeSet<&str> = BTreeSet::new();
        for r in &self.records {
            variants.extend(r.variant_codes.keys().map(String::as_str));
        }
        let mut variants: Vec<&str> = variants.into_iter().collect();
        variants.sort_by_key(|v| variant_order_key(v));

        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        let mut header: Vec<String> =
            ["message_id", "attribution", "message_text", "human_code", "triage", "needs_discussion", "votes", "pattern_tags", "notes"]
                .iter()
                .map(|s| s.to_string())
                .collect();
        header.extend(variants.iter().map(|v| v.to_string()));
        w.write_record(&header)?;
        for r in &self.records {
            let votes: Vec<String> = r.votes.iter().map(|(c, v)| format!("{c}={v}")).collect();
            let tags: Vec<&str> = r.pattern_tags.iter().map(String::as_str).collect();
            let mut row = vec![
                r.message_id.to_string(),
                r.attribution.clone(),
                r.message_text.clone(),
                r.human_code.to_string(),
                r.triage.to_string(),
                r.needs_discussion.to_string(),
                votes.join(";"),
                tags.join(";"),
                r.notes.clone(),
            ];
            row.extend(variants.iter().map(|v| r.variant_codes.get(*v).map_or(String::new(), |c| c.code_id.to_string())));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Percentage rounded to two decimals.
pub fn percent(count: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    (10_000.0 * count as f64 / total as f64).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryCount {
    pub state: TriageState,
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageSummary {
    pub total: usize,
    pub categories: Vec<CategoryCount>,
    pub needs_discussion: usize,
}

impl TriageSummary {
    pub fn count(&self, state: TriageState) -> usize {
        self.categories.iter().find(|c| c.state == state).map_or(0, |c| c.count)
    }

    pub fn percent(&self, state: TriageState) -> f64 {
        self.categories.iter().find(|c| c.state == state).map_or(0.0, |c| c.percent)
    }
}

fn summarize(states: impl Iterator<Item = (TriageState, bool)>) -> TriageSummary {
    let mut counts: BTreeMap<TriageState, usize> = BTreeMap::new();
    let mut total = 0;
    let mut discussion = 0;
    for (s, d) in states {
        *counts.entry(s).or_default() += 1;
        total += 1;
        discussion += usize::from(d);
    }
    let categories = [TriageState::HumanError, TriageState::LlmError, TriageState::NewCode, TriageState::Unreviewed]
        .into_iter()
        .map(|state| {
            let count = counts.get(&state).copied().unwrap_or(0);
            CategoryCount { state, count, percent: percent(count, total) }
        })
        .collect();
    TriageSummary { total, categories, needs_discussion: discussion }
}

pub fn triage_summary(records: &[DisagreementRecord]) -> TriageSummary {
    summarize(records.iter().map(|r| (r.triage, r.needs_discussion)))
}

/// Same summary, rebuilt from each record's event history alone.
pub fn summary_from_history(records: &[DisagreementRecord]) -> TriageSummary {
    summarize(records.iter().map(|r| {
        let mut state = TriageState::Unreviewed;
        let mut discussion = false;
        for e in &r.history {
            match e {
                TriageEvent::Transition { to, .. } => state = *to,
                TriageEvent::Discussion { open, .. } => discussion = *open,
                TriageEvent::Vote { .. } => {}
            }
        }
        (state, discussion)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CodeClass {
    /// Any stigmatizing code: attributions, the other-bucket and emergent codes.
    S,
    NS,
}

impl fmt::Display for CodeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodeClass::S => "S",
            CodeClass::NS => "NS",
        })
    }
}

pub fn code_class(code: &CodeId, cb: &Codebook) -> CodeClass {
    match cb.get(code.as_str()) {
        Some(c) if c.kind == CodeKind::NonStigmatizing => CodeClass::NS,
        _ => CodeClass::S,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalCell {
    pub human: CodeClass,
    pub llm: CodeClass,
    pub count: usize,
    pub percent: f64,
}

/// Human code class against the class of the modal variant code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalTable {
    pub total: usize,
    pub cells: Vec<DirectionalCell>,
}

impl DirectionalTable {
    pub fn cell(&self, human: CodeClass, llm: CodeClass) -> &DirectionalCell {
        self.cells.iter().find(|c| c.human == human && c.llm == llm).expect("all four cells present")
    }
}

/// The modal variant code uses [`majority_vote`] over variants in natural id order.
pub fn directional_analysis(records: &[DisagreementRecord], cb: &Codebook) -> DirectionalTable {
    let mut counts: BTreeMap<(CodeClass, CodeClass), usize> = BTreeMap::new();
    for r in records {
        let mut ordered: Vec<(&String, &VariantCode)> = r.variant_codes.iter().collect();
        ordered.sort_by_key(|(v, _)| variant_order_key(v));
        let codes: Vec<CodeId> = ordered.iter().map(|(_, c)| c.code_id.clone()).collect();
        let Some((modal, _)) = majority_vote(&codes) else { continue };
        *counts.entry((code_class(&r.human_code, cb), code_class(&modal, cb))).or_default() += 1;
    }
    let total: usize = counts.values().sum();
    let cells = [(CodeClass::S, CodeClass::S), (CodeClass::S, CodeClass::NS), (CodeClass::NS, CodeClass::S), (CodeClass::NS, CodeClass::NS)]
        .into_iter()
        .map(|(human, llm)| {
            let count = counts.get(&(human, llm)).copied().unwrap_or(0);
            DirectionalCell { human, llm, count, percent: percent(count, total) }
        })
        .collect();
    DirectionalTable { total, cells }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionReport {
    pub messages: usize,
    /// Distinct variant codes per message.
    pub per_message: BTreeMap<MessageId, usize>,
    /// distinct-code count -> number of messages.
    pub histogram: BTreeMap<usize, usize>,
}

impl DispersionReport {
    pub fn at_least(&self, k: usize) -> usize {
        self.histogram.range(k..).map(|(_, n)| n).sum()
    }
}

/// Distinct codes the variants gave each message.
pub fn variant_dispersion(variants: &BTreeMap<String, Vec<Assignment>>) -> DispersionReport {
    let mut per: BTreeMap<MessageId, BTreeSet<&CodeId>> = BTreeMap::new();
    for a in variants.values().flatten() {
        per.entry(a.message_id.clone()).or_default().insert(&a.code_id);
    }
    let per_message: BTreeMap<MessageId, usize> = per.into_iter().map(|(m, s)| (m, s.len())).collect();
    let mut histogram = BTreeMap::new();
    for n in per_message.values() {
        *histogram.entry(*n).or_default() += 1;
    }
    DispersionReport { messages: per_message.len(), per_message, histogram }
}
