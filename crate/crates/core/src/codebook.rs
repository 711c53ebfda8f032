//! Versioned coding schemes.
//!
//! A [`Codebook`] is an immutable value: every change produces a new version whose
//! changelog entry records the [`ChangeSet`] against its predecessor. Code ids are frozen
//! at creation, so renaming a code only touches [`Code::name`] and existing assignments
//! keep resolving.

use std::borrow::{Borrow, Cow};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::board::{CodeProposal, ProposalStatus, Theme};
use crate::corpus::MessageId;

/// Stable identifier of a code within a codebook lineage.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CodeId(pub String);

impl CodeId {
    pub fn new(id: impl Into<String>) -> Self {
        CodeId(id.into())
    }

    /// Derives an id from a human-readable name.
    pub fn from_name(name: &str) -> Self {
        CodeId(slugify(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Borrow<str> for CodeId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl From<&str> for CodeId {
    fn from(s: &str) -> Self {
        CodeId(s.to_string())
    }
}

/// Lowercase ASCII slug: alphanumeric runs joined by single dashes.
pub fn slugify(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut pending_dash = false;
    for ch in name.chars() {
        if ch.is_alphanumeric() {
            if pending_dash && !out.is_empty() {
                out.push('-');
            }
            pending_dash = false;
            out.extend(ch.to_lowercase());
        } else {
            pending_dash = true;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodeKind {
    StigmaAttribution,
    NonStigmatizing,
    OtherBucket,
    Emergent,
}

impl CodeKind {
    /// Whether a message carrying this code expresses a stigmatizing attitude.
    pub fn is_stigmatizing(self) -> bool {
        !matches!(self, CodeKind::NonStigmatizing)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodedExample {
    pub message_text: String,
    pub assigned_code: CodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Code {
    pub id: CodeId,
    pub name: String,
    pub kind: CodeKind,
    #[serde(default)]
    pub definition: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    /// Coding rules in precedence order. Qualifiers and exclusions live here too.
    #[serde(default)]
    pub rules: Vec<String>,
    #[serde(default)]
    pub examples: Vec<CodedExample>,
    /// Parent sub-theme or theme name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    /// Disagreement records (by message id) an emergent code was derived from.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<MessageId>,
}

impl Code {
    pub fn new(id: impl Into<String>, name: impl Into<String>, kind: CodeKind) -> Self {
        Code {
            id: CodeId(id.into()),
            name: name.into(),
            kind,
            definition: String::new(),
            keywords: Vec::new(),
            rules: Vec::new(),
            examples: Vec::new(),
            parent: None,
            provenance: Vec::new(),
        }
    }

    /// The label used when a codebook has no explicit other-bucket code.
    pub fn default_other_bucket() -> Self {
        let mut code = Code::new("others", "Stigmatizing (others)", CodeKind::OtherBucket);
        code.definition =
            "A stigmatizing attitude that belongs to an attribution other than the target one."
                .to_string();
        code
    }
}

/// Difference between two codebook versions.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChangeSet {
    pub from_version: u32,
    pub to_version: u32,
    #[serde(default)]
    pub added: Vec<Code>,
    #[serde(default)]
    pub removed: Vec<CodeId>,
    /// New contents of codes present in both versions whose contents differ.
    #[serde(default)]
    pub modified: Vec<Code>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ChangeSet {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.modified.is_empty()
    }

    /// Applies the change set to a code list. Existing order is kept; additions are
    /// appended in change-set order.
    pub fn apply(&self, codes: &[Code]) -> Vec<Code> {
        let removed: BTreeSet<&str> = self.removed.iter().map(|c| c.as_str()).collect();
        let modified: BTreeMap<&str, &Code> =
            self.modified.iter().map(|c| (c.id.as_str(), c)).collect();
        let mut out: Vec<Code> = codes
            .iter()
            .filter(|c| !removed.contains(c.id.as_str()))
            .map(|c| modified.get(c.id.as_str()).map_or_else(|| c.clone(), |m| (*m).clone()))
            .collect();
        out.extend(self.added.iter().cloned());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codebook {
    pub version: u32,
    pub codes: Vec<Code>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub themes: Vec<Theme>,
    #[serde(default)]
    pub changelog: Vec<ChangeSet>,
}

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("version order violated: {from} must be lower than {to}")]
    VersionOrder { from: u32, to: u32 },
    #[error("proposal {proposal} is not ratified")]
    NotRatified { proposal: String },
    #[error("proposal {proposal} references unknown disagreement record {message}")]
    UnknownRecord { proposal: String, message: MessageId },
    #[error("code name collision: {name:?} (id {id})")]
    NameCollision { name: String, id: CodeId },
    #[error("invalid codebook json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Codebook {
    pub fn from_json(text: &str) -> Result<Self, CodebookError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("codebook serializes");
        s.push('\n');
        s
    }

    pub fn get(&self, id: &str) -> Option<&Code> {
        self.codes.iter().find(|c| c.id.as_str() == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }

    pub fn non_stigmatizing(&self) -> Option<&Code> {
        self.codes.iter().find(|c| c.kind == CodeKind::NonStigmatizing)
    }

    /// The book's other-bucket code, or the default one when the book has none.
    pub fn other_bucket(&self) -> Cow<'_, Code> {
        self.codes
            .iter()
            .find(|c| c.kind == CodeKind::OtherBucket)
            .map_or_else(|| Cow::Owned(Code::default_other_bucket()), Cow::Borrowed)
    }

    /// Attribution codes in book order; these are the tags messages are elicited by.
    pub fn attributions(&self) -> impl Iterator<Item = &Code> {
        self.codes.iter().filter(|c| c.kind == CodeKind::StigmaAttribution)
    }

    pub fn attribution_ids(&self) -> BTreeSet<String> {
        self.attributions().map(|c| c.id.0.clone()).collect()
    }

    /// Resolves a code id, including the implicit other-bucket label.
    pub fn resolve(&self, id: &str) -> Option<Cow<'_, Code>> {
        if let Some(code) = self.get(id) {
            return Some(Cow::Borrowed(code));
        }
        let other = self.other_bucket();
        (other.id.as_str() == id).then_some(other)
    }

    /// Builds the next version from a new code list, recording the diff in the changelog.
    pub fn revise(&self, codes: Vec<Code>, note: Option<String>) -> Codebook {
        let mut next = Codebook {
            version: self.version + 1,
            codes,
            themes: self.themes.clone(),
            changelog: self.changelog.clone(),
        };
        let mut change = diff_codebooks(self, &next).expect("next version is higher");
        change.note = note;
        next.changelog.push(change);
        next
    }
}

/// A single invariant violation found by [`validate_codebook`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Violation {
    DuplicateId { id: CodeId },
    EmptyName { id: CodeId },
    EmptyId { index: usize },
    MissingBaseline,
    MultipleBaselines { ids: Vec<CodeId> },
    MultipleOtherBuckets { ids: Vec<CodeId> },
    EmergentWithoutProvenance { id: CodeId },
    UnresolvedExampleCode { code: CodeId, assigned: CodeId },
    UnresolvedParent { code: CodeId, parent: String },
    ChangelogOrder { index: usize, from: u32, to: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId { id } => write!(f, "duplicate code id {id:?}"),
            Violation::EmptyName { id } => write!(f, "code {id:?} has an empty name"),
            Violation::EmptyId { index } => write!(f, "code at index {index} has an empty id"),
            Violation::MissingBaseline => f.write_str("no non-stigmatizing code"),
            Violation::MultipleBaselines { ids } => {
                write!(f, "more than one non-stigmatizing code: {ids:?}")
            }
            Violation::MultipleOtherBuckets { ids } => {
                write!(f, "more than one other-bucket code: {ids:?}")
            }
            Violation::EmergentWithoutProvenance { id } => {
                write!(f, "emergent code {id:?} has no disagreement provenance")
            }
            Violation::UnresolvedExampleCode { code, assigned } => {
                write!(f, "example of {code:?} is assigned to unknown code {assigned:?}")
            }
            Violation::UnresolvedParent { code, parent } => {
                write!(f, "code {code:?} names unknown parent {parent:?}")
            }
            Violation::ChangelogOrder { index, from, to } => {
                write!(f, "changelog entry {index} ({from} -> {to}) does not follow the prior version")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub version: u32,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every code and codebook invariant. Invalid books produce a report, never an error.
pub fn validate_codebook(cb: &Codebook) -> ValidationReport {
    let mut violations = Vec::new();

    let mut seen = BTreeSet::new();
    let mut reported = BTreeSet::new();
    for (index, code) in cb.codes.iter().enumerate() {
        if code.id.0.is_empty() {
            violations.push(Violation::EmptyId { index });
        } else if !seen.insert(code.id.as_str()) && reported.insert(code.id.as_str()) {
            violations.push(Violation::DuplicateId { id: code.id.clone() });
        }
        if code.name.trim().is_empty() {
            violations.push(Violation::EmptyName { id: code.id.clone() });
        }
        if code.kind == CodeKind::Emergent && code.provenance.is_empty() {
            violations.push(Violation::EmergentWithoutProvenance { id: code.id.clone() });
        }
    }

    let baselines: Vec<CodeId> = cb
        .codes
        .iter()
        .filter(|c| c.kind == CodeKind::NonStigmatizing)
        .map(|c| c.id.clone())
        .collect();
    match baselines.len() {
        0 => violations.push(Violation::MissingBaseline),
        1 => {}
        _ => violations.push(Violation::MultipleBaselines { ids: baselines }),
    }
    let others: Vec<CodeId> = cb
        .codes
        .iter()
        .filter(|c| c.kind == CodeKind::OtherBucket)
        .map(|c| c.id.clone())
        .collect();
    if others.len() > 1 {
        violations.push(Violation::MultipleOtherBuckets { ids: others });
    }

    for code in &cb.codes {
        for example in &code.examples {
            if cb.resolve(example.assigned_code.as_str()).is_none() {
                violations.push(Violation::UnresolvedExampleCode {
                    code: code.id.clone(),
                    assigned: example.assigned_code.clone(),
                });
            }
        }
    }

    if !cb.themes.is_empty() {
        let mut names = BTreeSet::new();
        for theme in &cb.themes {
            theme.collect_names(&mut names);
        }
        for code in &cb.codes {
            if let Some(parent) = &code.parent {
                if !names.contains(parent.as_str()) {
                    violations.push(Violation::UnresolvedParent {
                        code: code.id.clone(),
                        parent: parent.clone(),
                    });
                }
            }
        }
    }

    let mut prior: Option<u32> = None;
    for (index, entry) in cb.changelog.iter().enumerate() {
        let chained = prior.is_none_or(|p| entry.from_version == p);
        if entry.from_version >= entry.to_version || entry.to_version > cb.version || !chained {
            violations.push(Violation::ChangelogOrder {
                index,
                from: entry.from_version,
                to: entry.to_version,
            });
        }
        prior = Some(entry.to_version);
    }

    ValidationReport { version: cb.version, violations }
}

/// Partitions the code-level difference between `a` and a later version `b`.
pub fn diff_codebooks(a: &Codebook, b: &Codebook) -> Result<ChangeSet, CodebookError> {
    if a.version >= b.version {
        return Err(CodebookError::VersionOrder { from: a.version, to: b.version });
    }
    let old: BTreeMap<&str, &Code> = a.codes.iter().map(|c| (c.id.as_str(), c)).collect();
    let new: BTreeSet<&str> = b.codes.iter().map(|c| c.id.as_str()).collect();

    let mut change = ChangeSet { from_version: a.version, to_version: b.version, ..Default::default() };
    for code in &b.codes {
        match old.get(code.id.as_str()) {
            None => change.added.push(code.clone()),
            Some(prev) if *prev != code => change.modified.push(code.clone()),
            Some(_) => {}
        }
    }
    change.removed = a
        .codes
        .iter()
        .filter(|c| !new.contains(c.id.as_str()))
        .map(|c| c.id.clone())
        .collect();
    Ok(change)
}

/// Appends ratified proposals as emergent codes in a new version. `base` is untouched.
///
/// `known_records` holds the ids of the disagreement records proposals may cite.
pub fn merge_expansion(
    base: &Codebook,
    proposals: &[CodeProposal],
    known_records: &BTreeSet<MessageId>,
) -> Result<Codebook, CodebookError> {
    let mut taken_names: BTreeMap<String, CodeId> =
        base.codes.iter().map(|c| (c.name.to_lowercase(), c.id.clone())).collect();
    let mut taken_ids: BTreeSet<CodeId> = base.codes.iter().map(|c| c.id.clone()).collect();

    let mut codes = base.codes.clone();
    for proposal in proposals {
        if proposal.status != ProposalStatus::Ratified {
            return Err(CodebookError::NotRatified { proposal: proposal.id.clone() });
        }
        if let Some(message) = proposal.supporting.iter().find(|m| !known_records.contains(*m)) {
            return Err(CodebookError::UnknownRecord {
                proposal: proposal.id.clone(),
                message: message.clone(),
            });
        }
        let id = CodeId::from_name(&proposal.name);
        if let Some(existing) = taken_names.get(&proposal.name.to_lowercase()) {
            return Err(CodebookError::NameCollision { name: proposal.name.clone(), id: existing.clone() });
        }
        if taken_ids.contains(&id) {
            return Err(CodebookError::NameCollision { name: proposal.name.clone(), id });
        }
        taken_names.insert(proposal.name.to_lowercase(), id.clone());
        taken_ids.insert(id.clone());

        let examples = proposal
            .excerpts
            .first()
            .map(|text| CodedExample {
                message_text: text.clone(),
                assigned_code: id.clone(),
                reasoning: None,
            })
            .into_iter()
            .collect();
        codes.push(Code {
            id,
            name: proposal.name.clone(),
            kind: CodeKind::Emergent,
            definition: proposal.description.clone(),
            keywords: proposal.keywords.clone(),
            rules: proposal.rules.clone(),
            examples,
            parent: proposal.parent.clone(),
            provenance: proposal.supporting.iter().cloned().collect(),
        });
    }

    let ids: Vec<&str> = proposals.iter().map(|p| p.id.as_str()).collect();
    let note = if ids.is_empty() {
        None
    } else {
        Some(format!("expansion from proposals {}", ids.join(", ")))
    };
    Ok(base.revise(codes, note))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn book(codes: Vec<Code>) -> Codebook {
        Codebook { version: 1, codes, themes: Vec::new(), changelog: Vec::new() }
    }

    #[test]
    fn slugify_examples() {
        assert_eq!(slugify("Differential Support"), "differential-support");
        assert_eq!(slugify("  Stigmatizing (others) "), "stigmatizing-others");
        assert_eq!(slugify("a--b"), "a-b");
        assert_eq!(slugify("!!!"), "");
    }

    #[test]
    fn duplicate_id_reported_once() {
        let cb = book(vec![
            Code::new("pity", "Stigmatizing (pity)", CodeKind::StigmaAttribution),
            Code::new("pity", "Pity again", CodeKind::StigmaAttribution),
            Code::new("non-stigmatizing", "Non-stigmatizing", CodeKind::NonStigmatizing),
        ]);
        let report = validate_codebook(&cb);
        assert_eq!(report.violations, vec![Violation::DuplicateId { id: "pity".into() }]);
    }

    #[test]
    fn missing_baseline_reported() {
        let cb = book(vec![Code::new("anger", "Stigmatizing (anger)", CodeKind::StigmaAttribution)]);
        assert_eq!(validate_codebook(&cb).violations, vec![Violation::MissingBaseline]);
    }

    #[test]
    fn attribution_scheme_is_valid() {
        let cb = fixtures::attribution_codebook();
        assert_eq!(cb.codes.len(), 8);
        assert_eq!(cb.attributions().count(), 7);
        let report = validate_codebook(&cb);
        assert!(report.is_valid(), "{:?}", report.violations);
    }

    #[test]
    fn emergent_needs_provenance_and_other_bucket_needs_nothing() {
        let mut cb = book(vec![
            Code::new("non-stigmatizing", "Non-stigmatizing", CodeKind::NonStigmatizing),
            Code::new("others", "Stigmatizing (others)", CodeKind::OtherBucket),
            Code::new("condescension", "Condescension", CodeKind::Emergent),
        ]);
        assert_eq!(
            validate_codebook(&cb).violations,
            vec![Violation::EmergentWithoutProvenance { id: "condescension".into() }]
        );
        cb.codes[2].provenance.push(MessageId::new("m1"));
        assert!(validate_codebook(&cb).is_valid());
    }

    #[test]
    fn example_codes_and_changelog_checked() {
        let mut cb = fixtures::attribution_codebook();
        cb.codes[0].examples[0].assigned_code = "nope".into();
        cb.changelog.push(ChangeSet { from_version: 3, to_version: 2, ..Default::default() });
        let report = validate_codebook(&cb);
        assert_eq!(report.violations.len(), 2);
        assert!(matches!(report.violations[0], Violation::UnresolvedExampleCode { .. }));
        assert!(matches!(report.violations[1], Violation::ChangelogOrder { index: 0, .. }));
    }

    #[test]
    fn diff_identity_is_empty() {
        let a = fixtures::attribution_codebook();
        let mut b = a.clone();
        b.version += 1;
        assert!(diff_codebooks(&a, &b).unwrap().is_empty());
    }

    #[test]
    fn diff_requires_increasing_versions() {
        let a = fixtures::attribution_codebook();
        assert!(matches!(diff_codebooks(&a, &a), Err(CodebookError::VersionOrder { .. })));
    }

    #[test]
    fn diff_single_insertion() {
        let a = fixtures::attribution_codebook();
        let mut code = Code::new("condescension", "Condescension", CodeKind::Emergent);
        code.provenance.push(MessageId::new("m9"));
        let mut codes = a.codes.clone();
        codes.push(code.clone());
        let b = a.revise(codes, None);
        let change = diff_codebooks(&a, &b).unwrap();
        assert_eq!(change.added, vec![code]);
        assert!(change.removed.is_empty() && change.modified.is_empty());
        assert_eq!(b.changelog.last().unwrap().from_version, a.version);
    }

    #[test]
    fn expanded_scheme_adds_twelve() {
        let a = fixtures::attribution_codebook();
        let b = fixtures::expanded_codebook();
        assert_eq!(b.codes.len(), 20);
        let change = diff_codebooks(&a, &b).unwrap();
        assert_eq!(change.added.len(), 12);
        assert!(change.removed.is_empty());
    }

    #[test]
    fn rename_keeps_id() {
        let a = fixtures::attribution_codebook();
        let mut codes = a.codes.clone();
        codes[0].name = "Responsibility attribution".into();
        let b = a.revise(codes, Some("rename".into()));
        let change = diff_codebooks(&a, &b).unwrap();
        assert_eq!(change.modified.len(), 1);
        assert_eq!(change.modified[0].id, a.codes[0].id);
        assert!(validate_codebook(&b).is_valid());
    }

    #[test]
    fn other_bucket_resolves_implicitly() {
        let cb = fixtures::attribution_codebook();
        assert!(cb.get("others").is_none());
        assert_eq!(cb.resolve("others").unwrap().kind, CodeKind::OtherBucket);
        assert!(cb.resolve("missing").is_none());
    }
}
