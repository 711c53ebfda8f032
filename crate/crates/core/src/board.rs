//! Inductive board: code proposals over new-code disagreements, LLM naming and grouping
//! suggestions, the theme hierarchy, codebook re-validation, ratings and the autonomous
//! LLM-only baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{Code, CodeId, CodeKind, Codebook};
use crate::corpus::{Assignment, Corpus, Message, MessageId};
use crate::gateway::{run_variant, Gateway, GatewayError, ModelConfig, ParseError, RequestMeta, RunFailure};
use crate::prompt::{PromptContext, PromptVariant};
use crate::stats::{agreement_matrix, pairwise_kappa, AgreementOptions, AgreementReport, Kappa, StatsError};
use crate::triage::{DisagreementSet, TriageState};

#[derive(Debug, Error, PartialEq)]
pub enum BoardError {
    #[error("message {0} is not a triaged new-code disagreement")]
    NotNewCode(MessageId),
    #[error("a proposal needs at least one supporting message")]
    NoSupport,
    #[error("unknown proposal {0}")]
    UnknownProposal(String),
    #[error("unknown suggestion {0}")]
    UnknownSuggestion(String),
    #[error("suggestion {0} was already resolved")]
    SuggestionResolved(String),
    #[error("proposal {0} cannot be ratified without a description")]
    EmptyDescription(String),
    #[error("grouping needs at least two proposals, got {0}")]
    TooFewProposals(usize),
    #[error("grouping is not a partition: {0}")]
    NotPartition(String),
    #[error("grouping violates constraint {0}")]
    ConstraintViolated(String),
    #[error("gateway failure: {0}")]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error("human codes {0:?} are not in codebook version {1}")]
    LabelSetMismatch(Vec<CodeId>, u32),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("rating {rater}: {criterion} score {score} outside 1..=5")]
    ScoreOutOfRange { rater: String, criterion: &'static str, score: u8 },
    #[error("no ratings given")]
    NoRatings,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalStatus {
    #[default]
    Draft,
    UnderDiscussion,
    Ratified,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "by", rename_all = "kebab-case")]
pub enum Contributor {
    Human { coder: String },
    LlmSuggestion,
    /// A human-authored proposal that adopted an LLM suggestion.
    Merged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum ProposalEvent {
    Created { by: String, name: String },
    Renamed { from: String, to: String, by: String },
    Status { from: ProposalStatus, to: ProposalStatus },
    SuggestionAdopted { suggestion: String, name: String, modified: bool },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeProposal {
    pub id: String,
    pub name: String,
    pub description: String,
    pub supporting: BTreeSet<MessageId>,
    #[serde(default)]
    pub excerpts: Vec<String>,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub rules: Vec<String>,
    /// Sub-theme the resulting code sits under.
    #[serde(default)]
    pub parent: Option<String>,
    pub contributor: Contributor,
    #[serde(default)]
    pub status: ProposalStatus,
    #[serde(default)]
    pub history: Vec<ProposalEvent>,
}

impl CodeProposal {
    /// Id of the code this proposal becomes on merge.
    pub fn code_id(&self) -> CodeId {
        CodeId::from_name(&self.name)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuggestionStatus {
    #[default]
    Pending,
    Adopted,
    Modified,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameSuggestion {
    pub id: String,
    pub proposal_id: String,
    pub name: String,
    pub description: String,
    pub status: SuggestionStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Proposal ids.
    pub members: Vec<String>,
}

/// Directive re-sent to the model when regenerating a grouping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GroupingConstraint {
    Merge { members: Vec<String> },
    Split { members: Vec<String> },
}

impl fmt::Display for GroupingConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupingConstraint::Merge { members } => write!(f, "Keep together: {}", members.join(", ")),
            GroupingConstraint::Split { members } => write!(f, "Do not put all of these in one group: {}", members.join(", ")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dimension {
    CognitiveJudgments,
    EmotionalResponses,
    BehavioralResponses,
}

impl Dimension {
    pub fn title(self) -> &'static str {
        match self {
            Dimension::CognitiveJudgments => "Cognitive judgments",
            Dimension::EmotionalResponses => "Emotional responses",
            Dimension::BehavioralResponses => "Behavioral responses",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThemeNode {
    SubTheme(Theme),
    Code(CodeId),
}

/// Theme or sub-theme. Roots of the forest are themes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Theme {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<Dimension>,
    #[serde(default)]
    pub children: Vec<ThemeNode>,
}

impl Theme {
    pub fn new(name: impl Into<String>) -> Self {
        Theme { name: name.into(), description: String::new(), dimension: None, children: Vec::new() }
    }

    pub fn collect_names<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        out.insert(&self.name);
        for child in &self.children {
            if let ThemeNode::SubTheme(t) = child {
                t.collect_names(out);
            }
        }
    }

    /// Code id -> name of the node directly containing it.
    pub fn code_parents(&self, out: &mut Vec<(CodeId, String)>) {
        for child in &self.children {
            match child {
                ThemeNode::Code(id) => out.push((id.clone(), self.name.clone())),
                ThemeNode::SubTheme(t) => t.code_parents(out),
            }
        }
    }

    pub fn code_count(&self) -> usize {
        self.children
            .iter()
            .map(|c| match c {
                ThemeNode::Code(_) => 1,
                ThemeNode::SubTheme(t) => t.code_count(),
            })
            .sum()
    }

    pub fn sub_theme_count(&self) -> usize {
        self.children
            .iter()
            .map(|c| match c {
                ThemeNode::Code(_) => 0,
                ThemeNode::SubTheme(t) => 1 + t.sub_theme_count(),
            })
            .sum()
    }

    pub fn depth(&self) -> usize {
        1 + self
            .children
            .iter()
            .map(|c| match c {
                ThemeNode::Code(_) => 1,
                ThemeNode::SubTheme(t) => t.depth(),
            })
            .max()
            .unwrap_or(0)
    }
}

/// Flat description of a hierarchy: each node names its parent (roots have none).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchySpec {
    pub nodes: Vec<NodeSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub dimension: Option<Dimension>,
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub codes: Vec<CodeId>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum HierarchyError {
    #[error("node name {0:?} used twice")]
    DuplicateName(String),
    #[error("node {node:?} names unknown parent {parent:?}")]
    UnknownParent { node: String, parent: String },
    #[error("cycle through {0:?}")]
    Cycle(String),
    #[error("code {0} has more than one parent")]
    DuplicateParent(CodeId),
    #[error("code {0} is not placed in the hierarchy")]
    Orphan(CodeId),
}

/// Builds the theme forest. Every code in `required` must be placed exactly once.
pub fn build_hierarchy(spec: &HierarchySpec, required: &BTreeSet<CodeId>) -> Result<Vec<Theme>, HierarchyError> {
    let mut by_name: BTreeMap<&str, &NodeSpec> = BTreeMap::new();
    for n in &spec.nodes {
        if by_name.insert(&n.name, n).is_some() {
            return Err(HierarchyError::DuplicateName(n.name.clone()));
        }
    }
    for n in &spec.nodes {
        if let Some(p) = &n.parent {
            if !by_name.contains_key(p.as_str()) {
                return Err(HierarchyError::UnknownParent { node: n.name.clone(), parent: p.clone() });
            }
        }
        let mut seen = BTreeSet::from([n.name.as_str()]);
        let mut cur = n.parent.as_deref();
        while let Some(p) = cur {
            if !seen.insert(p) {
                return Err(HierarchyError::Cycle(n.name.clone()));
            }
            cur = by_name[p].parent.as_deref();
        }
    }
    let mut placed = BTreeSet::new();
    for n in &spec.nodes {
        for c in &n.codes {
            if !placed.insert(c) {
                return Err(HierarchyError::DuplicateParent(c.clone()));
            }
        }
    }
    if let Some(orphan) = required.iter().find(|c| !placed.contains(c)) {
        return Err(HierarchyError::Orphan(orphan.clone()));
    }

    fn build(node: &NodeSpec, spec: &HierarchySpec) -> Theme {
        let mut children: Vec<ThemeNode> = spec
            .nodes
            .iter()
            .filter(|n| n.parent.as_deref() == Some(node.name.as_str()))
            .map(|n| ThemeNode::SubTheme(build(n, spec)))
            .collect();
        children.extend(node.codes.iter().cloned().map(ThemeNode::Code));
        Theme { name: node.name.clone(), description: node.description.clone(), dimension: node.dimension, children }
    }
    Ok(spec.nodes.iter().filter(|n| n.parent.is_none()).map(|n| build(n, spec)).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuggestionFailure {
    pub proposal_id: String,
    pub error: GatewayError,
}

/// Proposals, suggestions and groupings of one project.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Board {
    pub proposals: Vec<CodeProposal>,
    #[serde(default)]
    pub suggestions: Vec<NameSuggestion>,
    #[serde(default)]
    pub groups: Vec<Group>,
    #[serde(default)]
    pub themes: Vec<Theme>,
    #[serde(default)]
    next_proposal: u32,
    #[serde(default)]
    next_suggestion: u32,
}

impl Board {
    pub fn proposal(&self, id: &str) -> Result<&CodeProposal, BoardError> {
        self.proposals.iter().find(|p| p.id == id).ok_or_else(|| BoardError::UnknownProposal(id.to_string()))
    }

    fn proposal_mut(&mut self, id: &str) -> Result<&mut CodeProposal, BoardError> {
        self.proposals.iter_mut().find(|p| p.id == id).ok_or_else(|| BoardError::UnknownProposal(id.to_string()))
    }

    /// Drafts a proposal over disagreement records already triaged as new-code.
    pub fn propose_code(
        &mut self,
        set: &DisagreementSet,
        message_ids: &[&str],
        name: &str,
        description: &str,
        coder: &str,
    ) -> Result<&CodeProposal, BoardError> {
        if message_ids.is_empty() {
            return Err(BoardError::NoSupport);
        }
        let mut supporting = BTreeSet::new();
        let mut excerpts = Vec::new();
        for id in message_ids {
            let record = set
                .get(id)
                .filter(|r| r.triage == TriageState::NewCode)
                .ok_or_else(|| BoardError::NotNewCode(MessageId::new(*id)))?;
            if supporting.insert(record.message_id.clone()) && !record.message_text.is_empty() {
                excerpts.push(record.message_text.clone());
            }
        }
        self.next_proposal += 1;
        self.proposals.push(CodeProposal {
            id: format!("p{}", self.next_proposal),
            name: name.to_string(),
            description: description.to_string(),
            supporting,
            excerpts,
            keywords: Vec::new(),
            rules: Vec::new(),
            parent: None,
            contributor: Contributor::Human { coder: coder.to_string() },
            status: ProposalStatus::Draft,
            history: vec![ProposalEvent::Created { by: coder.to_string(), name: name.to_string() }],
        });
        Ok(self.proposals.last().expect("just pushed"))
    }

    /// Renames a proposal; its id and history are kept.
    pub fn rename(&mut self, id: &str, name: &str, by: &str) -> Result<&CodeProposal, BoardError> {
        let p = self.proposal_mut(id)?;
        if p.name != name {
            p.history.push(ProposalEvent::Renamed { from: p.name.clone(), to: name.to_string(), by: by.to_string() });
            p.name = name.to_string();
        }
        Ok(p)
    }

    pub fn set_details(&mut self, id: &str, keywords: Vec<String>, rules: Vec<String>) -> Result<(), BoardError> {
        let p = self.proposal_mut(id)?;
        p.keywords = keywords;
        p.rules = rules;
        Ok(())
    }

    pub fn set_status(&mut self, id: &str, status: ProposalStatus) -> Result<&CodeProposal, BoardError> {
        let p = self.proposal_mut(id)?;
        if status == ProposalStatus::Ratified {
            if p.supporting.is_empty() {
                return Err(BoardError::NoSupport);
            }
            if p.description.trim().is_empty() {
                return Err(BoardError::EmptyDescription(p.id.clone()));
            }
        }
        if p.status != status {
            p.history.push(ProposalEvent::Status { from: p.status, to: status });
            p.status = status;
        }
        Ok(p)
    }

    pub fn ratified(&self) -> Vec<CodeProposal> {
        self.proposals.iter().filter(|p| p.status == ProposalStatus::Ratified).cloned().collect()
    }

    /// Asks the model for a better name and description of each listed draft. Results
    /// land as pending suggestions; failures are reported per proposal and leave the
    /// drafts untouched.
    pub fn suggest_names(
        &mut self,
        gateway: &Gateway,
        cfg: &ModelConfig,
        proposal_ids: &[&str],
    ) -> Result<(Vec<NameSuggestion>, Vec<SuggestionFailure>), BoardError> {
        let mut made = Vec::new();
        let mut failed = Vec::new();
        for id in proposal_ids {
            let p = self.proposal(id)?.clone();
            let prompt = naming_prompt(&p);
            let meta = RequestMeta { message_id: None, variant_id: Some(format!("naming:{}", p.id)) };
            match gateway.complete_with(&prompt, cfg, 0, &meta, parse_naming) {
                Ok(((name, description), _)) => {
                    self.next_suggestion += 1;
                    let s = NameSuggestion {
                        id: format!("s{}", self.next_suggestion),
                        proposal_id: p.id.clone(),
                        name,
                        description,
                        status: SuggestionStatus::Pending,
                    };
                    self.suggestions.push(s.clone());
                    made.push(s);
                }
                Err(error) => failed.push(SuggestionFailure { proposal_id: p.id.clone(), error }),
            }
        }
        Ok((made, failed))
    }

    /// Applies a pending suggestion, optionally edited. The proposal's contributor becomes
    /// [`Contributor::Merged`].
    pub fn adopt_suggestion(
        &mut self,
        suggestion_id: &str,
        edited: Option<(&str, &str)>,
        by: &str,
    ) -> Result<&CodeProposal, BoardError> {
        let s = self.pending_suggestion(suggestion_id)?;
        let (name, description) = edited.map_or((s.name.clone(), s.description.clone()), |(n, d)| (n.to_string(), d.to_string()));
        let modified = edited.is_some();
        let proposal_id = s.proposal_id.clone();
        self.suggestions.iter_mut().find(|x| x.id == suggestion_id).expect("found above").status =
            if modified { SuggestionStatus::Modified } else { SuggestionStatus::Adopted };
        self.rename(&proposal_id, &name, by)?;
        let p = self.proposal_mut(&proposal_id)?;
        p.description = description;
        p.contributor = Contributor::Merged;
        p.history.push(ProposalEvent::SuggestionAdopted { suggestion: suggestion_id.to_string(), name, modified });
        Ok(p)
    }

    pub fn reject_suggestion(&mut self, suggestion_id: &str) -> Result<(), BoardError> {
        self.pending_suggestion(suggestion_id)?;
        self.suggestions.iter_mut().find(|x| x.id == suggestion_id).expect("found above").status = SuggestionStatus::Rejected;
        Ok(())
    }

    fn pending_suggestion(&self, id: &str) -> Result<NameSuggestion, BoardError> {
        let s = self
            .suggestions
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| BoardError::UnknownSuggestion(id.to_string()))?;
        if s.status != SuggestionStatus::Pending {
            return Err(BoardError::SuggestionResolved(id.to_string()));
        }
        Ok(s.clone())
    }

    /// Asks the model to partition proposals into named groups. The result is advisory;
    /// callers store it with [`Board::groups`] once a human accepts it.
    pub fn suggest_groupings(
        &self,
        gateway: &Gateway,
        cfg: &ModelConfig,
        proposal_ids: &[&str],
        constraints: &[GroupingConstraint],
    ) -> Result<Vec<Group>, BoardError> {
        if proposal_ids.len() < 2 {
            return Err(BoardError::TooFewProposals(proposal_ids.len()));
        }
        let proposals: Vec<&CodeProposal> = proposal_ids.iter().map(|id| self.proposal(id)).collect::<Result<_, _>>()?;
        let prompt = grouping_prompt(&proposals, constraints);
        let meta = RequestMeta { message_id: None, variant_id: Some("grouping".into()) };
        let (groups, _) = gateway.complete_with(&prompt, cfg, 0, &meta, |raw| {
            parse_groups(raw).map_err(|e| ParseError::Other(e.to_string()))
        })?;
        check_partition(&groups, proposal_ids)?;
        for c in constraints {
            let (members, together) = match c {
                GroupingConstraint::Merge { members } => (members, true),
                GroupingConstraint::Split { members } => (members, false),
            };
            let co_grouped = groups.iter().any(|g| members.iter().all(|m| g.members.contains(m)));
            if co_grouped != together {
                return Err(BoardError::ConstraintViolated(c.to_string()));
            }
        }
        Ok(groups)
    }

    /// Hierarchy spec with one root per dimension and each group as a sub-theme holding
    /// its proposals' code ids.
    pub fn hierarchy_from_groups(&self, dimension_of: &BTreeMap<String, Dimension>) -> Result<HierarchySpec, BoardError> {
        let mut roots: Vec<Dimension> = dimension_of.values().copied().collect::<BTreeSet<_>>().into_iter().collect();
        roots.sort();
        let mut nodes: Vec<NodeSpec> = roots
            .iter()
            .map(|d| NodeSpec {
                name: d.title().to_string(),
                description: String::new(),
                dimension: Some(*d),
                parent: None,
                codes: Vec::new(),
            })
            .collect();
        for g in &self.groups {
            let codes = g.members.iter().map(|m| self.proposal(m).map(|p| p.code_id())).collect::<Result<_, _>>()?;
            nodes.push(NodeSpec {
                name: g.name.clone(),
                description: g.description.clone(),
                dimension: None,
                parent: dimension_of.get(&g.name).map(|d| d.title().to_string()),
                codes,
            });
        }
        Ok(HierarchySpec { nodes })
    }

    /// Builds and stores the forest over ratified proposals and records each proposal's
    /// parent sub-theme.
    pub fn apply_hierarchy(&mut self, spec: &HierarchySpec) -> Result<&[Theme], BoardError> {
        let required: BTreeSet<CodeId> = self.ratified().iter().map(|p| p.code_id()).collect();
        let themes = build_hierarchy(spec, &required)?;
        let mut parents = Vec::new();
        for t in &themes {
            t.code_parents(&mut parents);
        }
        let parents: BTreeMap<CodeId, String> = parents.into_iter().collect();
        for p in &mut self.proposals {
            if p.status == ProposalStatus::Ratified {
                p.parent = parents.get(&p.code_id()).cloned();
            }
        }
        self.themes = themes;
        Ok(&self.themes)
    }
}

fn naming_prompt(p: &CodeProposal) -> String {
    let mut out = String::from(
        "You are helping a research team refine codes for a qualitative codebook on mental-illness stigma.\n\
         Suggest a concise, theory-grounded name and a one-sentence description for the draft code below.\n\n",
    );
    out.push_str(&format!("Draft name: {}\nDraft description: {}\nSupporting messages:\n", p.name, p.description));
    for e in &p.excerpts {
        out.push_str(&format!("- \"{e}\"\n"));
    }
    out.push_str("\nAnswer in exactly this format:\nName: <name>\nDescription: <description>\n");
    out
}

fn field<'a>(raw: &'a str, key: &str) -> Option<&'a str> {
    raw.lines().find_map(|l| {
        let l = l.trim();
        l.get(..key.len()).filter(|h| h.eq_ignore_ascii_case(key)).map(|_| l[key.len()..].trim())
    })
}

fn parse_naming(raw: &str) -> Result<(String, String), ParseError> {
    let name = field(raw, "Name:").filter(|s| !s.is_empty()).ok_or_else(|| ParseError::Other("no `Name:` line".into()))?;
    let description = field(raw, "Description:").unwrap_or("");
    Ok((name.to_string(), description.to_string()))
}

fn grouping_prompt(proposals: &[&CodeProposal], constraints: &[GroupingConstraint]) -> String {
    let mut out = String::from(
        "Group the following draft codes into sub-themes. Every code id must appear in exactly one group.\n\nCodes:\n",
    );
    for p in proposals {
        out.push_str(&format!("{}: {} - {}\n", p.id, p.name, p.description));
    }
    if !constraints.is_empty() {
        out.push_str("\nConstraints:\n");
        for c in constraints {
            out.push_str(&format!("- {c}\n"));
        }
    }
    out.push_str("\nAnswer with one line per group:\nGroup: <name> | <description> | <comma-separated code ids>\n");
    out
}

fn parse_groups(raw: &str) -> Result<Vec<Group>, BoardError> {
    let mut groups = Vec::new();
    for line in raw.lines() {
        let Some(rest) = field(line, "Group:") else { continue };
        let parts: Vec<&str> = rest.split('|').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(BoardError::NotPartition(format!("malformed group line {line:?}")));
        }
        let members = parts[2].split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect();
        groups.push(Group { name: parts[0].to_string(), description: parts[1].to_string(), members });
    }
    if groups.is_empty() {
        return Err(BoardError::NotPartition("no group lines".into()));
    }
    Ok(groups)
}

fn check_partition(groups: &[Group], ids: &[&str]) -> Result<(), BoardError> {
    let expected: BTreeSet<&str> = ids.iter().copied().collect();
    let mut seen = BTreeSet::new();
    for g in groups {
        if g.members.is_empty() {
            return Err(BoardError::NotPartition(format!("group {:?} is empty", g.name)));
        }
        for m in &g.members {
            if !expected.contains(m.as_str()) {
                return Err(BoardError::NotPartition(format!("unknown proposal {m}")));
            }
            if !seen.insert(m.as_str()) {
                return Err(BoardError::NotPartition(format!("{m} appears in more than one group")));
            }
        }
    }
    if let Some(missing) = expected.difference(&seen).next() {
        return Err(BoardError::NotPartition(format!("{missing} is not grouped")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftCode {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub quote: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftTheme {
    pub name: String,
    pub description: String,
    pub codes: Vec<DraftCode>,
}

/// Output of the LLM-only baseline. Never ratified.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutonomousDraft {
    pub initial_codes: Vec<DraftCode>,
    pub unique_codes: Vec<DraftCode>,
    pub themes: Vec<DraftTheme>,
    pub ratified: bool,
}

impl AutonomousDraft {
    pub fn theme_count(&self) -> usize {
        self.themes.len()
    }

    pub fn code_count(&self) -> usize {
        self.themes.iter().map(|t| t.codes.len()).sum()
    }

    /// Code entries whose case-folded name already appeared earlier in the draft.
    pub fn duplicate_count(&self) -> usize {
        let mut seen = BTreeSet::new();
        self.themes.iter().flat_map(|t| &t.codes).filter(|c| !seen.insert(c.name.trim().to_lowercase())).count()
    }

    pub fn duplicate_rate(&self) -> f64 {
        match self.code_count() {
            0 => 0.0,
            n => self.duplicate_count() as f64 / n as f64,
        }
    }

    /// Codebook view: one emergent code per distinct name, themes referencing them.
    pub fn to_codebook(&self) -> Codebook {
        let mut codes: Vec<Code> = Vec::new();
        for c in self.themes.iter().flat_map(|t| &t.codes) {
            let id = CodeId::from_name(&c.name);
            if codes.iter().all(|x| x.id != id) {
                let mut code = Code::new(id.as_str(), c.name.clone(), CodeKind::Emergent);
                code.definition = c.description.clone();
                codes.push(code);
            }
        }
        let themes = self
            .themes
            .iter()
            .map(|t| Theme {
                name: t.name.clone(),
                description: t.description.clone(),
                dimension: None,
                children: t.codes.iter().map(|c| ThemeNode::Code(CodeId::from_name(&c.name))).collect(),
            })
            .collect();
        Codebook { version: 0, codes, themes, changelog: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("autonomous induction stage {stage} failed: {error}")]
pub struct InductionError {
    pub stage: u8,
    pub error: GatewayError,
}

pub const MIN_GROUPING_TEMPERATURE: f64 = 0.5;

pub(crate) const STAGE1_MARKER: &str = "Identify up to";
pub(crate) const STAGE2_MARKER: &str = "List only the codes that are unique";
pub(crate) const STAGE3_MARKER: &str = "Group the numbered codes into themes";

/// Three-stage LLM-only induction: initial codes with quotes, de-duplication, and
/// grouping into themes at `grouping_temperature`.
pub fn autonomous_induction(
    messages: &[&Message],
    gateway: &Gateway,
    cfg: &ModelConfig,
    grouping_temperature: f64,
) -> Result<AutonomousDraft, InductionError> {
    if !(grouping_temperature >= MIN_GROUPING_TEMPERATURE) {
        return Err(InductionError {
            stage: 3,
            error: GatewayError::InvalidConfig(format!(
                "grouping temperature {grouping_temperature} is below {MIN_GROUPING_TEMPERATURE}"
            )),
        });
    }
    let empty = AutonomousDraft { initial_codes: vec![], unique_codes: vec![], themes: vec![], ratified: false };
    if messages.is_empty() {
        return Ok(empty);
    }
    let cfg = ModelConfig { votes: 1, ..cfg.clone() };
    let meta = |stage: u8| RequestMeta { message_id: None, variant_id: Some(format!("autonomous:{stage}")) };
    let stage_err = |stage: u8| move |error: GatewayError| InductionError { stage, error };

    let mut p1 = format!(
        "We are coding messages about mental-illness stigma inductively. {STAGE1_MARKER} {} distinct codes in the messages below. \
         Give each code a name of at most three words, a short description and a supporting quote.\n\nMessages:\n",
        messages.len()
    );
    for m in messages {
        p1.push_str(&format!("- [{}] \"{}\"\n", m.id, m.text));
    }
    p1.push_str("\nAnswer with one line per code:\nCode: <name> | <description> | <quote>\n");
    let (initial, _) = gateway.complete_with(&p1, &cfg, 0, &meta(1), parse_draft_codes).map_err(stage_err(1))?;

    let mut p2 = format!("{STAGE2_MARKER} in the following list. Repeat each unique code on its own line.\n\n");
    for (i, c) in initial.iter().enumerate() {
        p2.push_str(&format!("{}. {} | {} | {}\n", i + 1, c.name, c.description, c.quote));
    }
    p2.push_str("\nAnswer with one line per code:\nCode: <name> | <description> | <quote>\n");
    let (unique, _) = gateway.complete_with(&p2, &cfg, 0, &meta(2), parse_draft_codes).map_err(stage_err(2))?;

    let mut p3 = format!("{STAGE3_MARKER}. Use only the code numbers and give each theme a name and a description.\n\n");
    for (i, c) in unique.iter().enumerate() {
        p3.push_str(&format!("{}. {} - {}\n", i + 1, c.name, c.description));
    }
    p3.push_str("\nAnswer with one line per theme:\nTheme: <name> | <description> | <comma-separated code numbers>\n");
    let grouping_cfg = ModelConfig { temperature: grouping_temperature, ..cfg.clone() };
    let (themes, _) = gateway
        .complete_with(&p3, &grouping_cfg, 0, &meta(3), |raw| parse_draft_themes(raw, &unique))
        .map_err(stage_err(3))?;

    Ok(AutonomousDraft { initial_codes: initial, unique_codes: unique, themes, ratified: false })
}

fn parse_draft_codes(raw: &str) -> Result<Vec<DraftCode>, ParseError> {
    let mut out = Vec::new();
    for line in raw.lines() {
        let Some(rest) = field(line, "Code:") else { continue };
        let mut parts = rest.splitn(3, '|').map(str::trim);
        let name = parts.next().unwrap_or("").to_string();
        if name.is_empty() {
            return Err(ParseError::Other(format!("code line without a name: {line:?}")));
        }
        out.push(DraftCode {
            name,
            description: parts.next().unwrap_or("").to_string(),
            quote: parts.next().unwrap_or("").to_string(),
        });
    }
    if out.is_empty() {
        return Err(ParseError::NoLabelLine);
    }
    Ok(out)
}

fn parse_draft_themes(raw: &str, codes: &[DraftCode]) -> Result<Vec<DraftTheme>, ParseError> {
    let mut out = Vec::new();
    for line in raw.lines() {
        let Some(rest) = field(line, "Theme:") else { continue };
        let parts: Vec<&str> = rest.split('|').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(ParseError::Other(format!("malformed theme line {line:?}")));
        }
        let mut members = Vec::new();
        for n in parts[2].split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let idx: usize = n.parse().map_err(|_| ParseError::Other(format!("bad code number {n:?}")))?;
            let code = idx
                .checked_sub(1)
                .and_then(|i| codes.get(i))
                .ok_or_else(|| ParseError::Other(format!("code number {idx} out of range")))?;
            members.push(code.clone());
        }
        out.push(DraftTheme { name: parts[0].to_string(), description: parts[1].to_string(), codes: members });
    }
    if out.is_empty() {
        return Err(ParseError::Other("no theme lines".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Revalidation {
    pub codebook_version: u32,
    pub variant_id: String,
    pub n: usize,
    pub kappa: Kappa,
    pub failures: Vec<RunFailure>,
    pub report: AgreementReport,
}

/// Re-runs deductive coding with `codebook` under `variant` (normally the all-code full
/// ladder) and measures agreement against the human codes.
pub fn revalidate(
    codebook: &Codebook,
    messages: &[&Message],
    human: &[Assignment],
    gateway: &Gateway,
    cfg: &ModelConfig,
    ctx: &PromptContext,
    variant: &PromptVariant,
) -> Result<Revalidation, BoardError> {
    let mut unknown: Vec<CodeId> = human
        .iter()
        .map(|a| &a.code_id)
        .filter(|c| codebook.resolve(c.as_str()).is_none())
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !unknown.is_empty() {
        unknown.dedup();
        return Err(BoardError::LabelSetMismatch(unknown, codebook.version));
    }
    let run = run_variant(gateway, cfg, variant, codebook, ctx, messages);
    let (kappa, n) = pairwise_kappa(human, &run.assignments)?;
    let corpus = Corpus { messages: messages.iter().map(|m| (*m).clone()).collect(), exclusions: Vec::new() };
    let variants = BTreeMap::from([(variant.id.clone(), run.assignments.clone())]);
    let report = agreement_matrix(human, &variants, &corpus, codebook, &AgreementOptions::default())?;
    Ok(Revalidation {
        codebook_version: codebook.version,
        variant_id: variant.id.clone(),
        n,
        kappa,
        failures: run.failures,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookRating {
    pub rater: String,
    pub ease_of_use: u8,
    pub code_clarity: u8,
    pub mutual_exclusivity: u8,
    pub exhaustiveness: u8,
}

impl CodebookRating {
    fn scores(&self) -> [(&'static str, u8); 4] {
        [
            ("ease-of-use", self.ease_of_use),
            ("code-clarity", self.code_clarity),
            ("mutual-exclusivity", self.mutual_exclusivity),
            ("exhaustiveness", self.exhaustiveness),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingMeans {
    pub raters: usize,
    pub ease_of_use: f64,
    pub code_clarity: f64,
    pub mutual_exclusivity: f64,
    pub exhaustiveness: f64,
}

pub fn rate_codebook(ratings: &[CodebookRating]) -> Result<RatingMeans, BoardError> {
    if ratings.is_empty() {
        return Err(BoardError::NoRatings);
    }
    let mut sums = [0u32; 4];
    for r in ratings {
        for (i, (criterion, score)) in r.scores().into_iter().enumerate() {
            if !(1..=5).contains(&score) {
                return Err(BoardError::ScoreOutOfRange { rater: r.rater.clone(), criterion, score });
            }
            sums[i] += u32::from(score);
        }
    }
    let n = ratings.len() as f64;
    Ok(RatingMeans {
        raters: ratings.len(),
        ease_of_use: sums[0] as f64 / n,
        code_clarity: sums[1] as f64 / n,
        mutual_exclusivity: sums[2] as f64 / n,
        exhaustiveness: sums[3] as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::logical_time;
    use crate::gateway::{MockMatch, MockReply, MockRule, MockSpec};
    use crate::triage::{select_disagreements, SelectionRule, TriageCategory};

    fn triaged_set() -> DisagreementSet {
        let a = |m: &str, c: &str, code: &str| Assignment::new(&MessageId::new(m), c, &CodeId::new(code), logical_time(0));
        let human: Vec<Assignment> = (1..=4).map(|i| a(&format!("m{i}"), "h", "anger")).collect();
        let variants = BTreeMap::from([(
            "L1".to_string(),
            (1..=4).map(|i| a(&format!("m{i}"), "L1", "non-stigmatizing")).collect::<Vec<_>>(),
        )]);
        let sel = select_disagreements(&human, &variants, SelectionRule::AllDiffer).unwrap();
        let mut set = DisagreementSet::new(sel.records, ["c1"]);
        for (i, r) in set.records.iter_mut().enumerate() {
            r.message_text = format!("they would treat them differently {i}");
        }
        for m in ["m1", "m2", "m3"] {
            set.record_triage(m, "c1", TriageCategory::NewCode, None).unwrap();
        }
        set.record_triage("m4", "c1", TriageCategory::LlmError, None).unwrap();
        set
    }

    fn fast() -> ModelConfig {
        ModelConfig { backoff_ms: 0, max_retries: 0, ..Default::default() }
    }

    #[test]
    fn propose_and_rename() {
        let set = triaged_set();
        let mut board = Board::default();
        let p = board.propose_code(&set, &["m1"], "special care", "Treats the person differently.", "c1").unwrap();
        assert_eq!((p.id.as_str(), p.supporting.len(), p.status), ("p1", 1, ProposalStatus::Draft));
        let p = board.rename("p1", "differential support", "c1").unwrap();
        assert_eq!(p.id, "p1");
        assert_eq!(p.history.len(), 2);
        assert!(matches!(board.propose_code(&set, &["m4"], "x", "y", "c1"), Err(BoardError::NotNewCode(_))));
    }

    #[test]
    fn ratify_requires_description() {
        let set = triaged_set();
        let mut board = Board::default();
        board.propose_code(&set, &["m1"], "special care", "", "c1").unwrap();
        assert!(matches!(board.set_status("p1", ProposalStatus::Ratified), Err(BoardError::EmptyDescription(_))));
    }

    #[test]
    fn naming_suggestions_adopted_with_provenance() {
        let set = triaged_set();
        let mut board = Board::default();
        board.propose_code(&set, &["m1", "m2"], "treat them differently", "draft", "c1").unwrap();
        let spec = MockSpec {
            rules: vec![MockRule {
                when: MockMatch { contains: Some("treat them differently".into()), ..Default::default() },
                reply: MockReply::Raw { texts: vec!["Name: special care\nDescription: Offers help that singles the person out.".into()] },
            }],
            ..Default::default()
        };
        let (gw, mock) = Gateway::mock(spec);
        let (made, failed) = board.suggest_names(&gw, &fast(), &["p1"]).unwrap();
        assert!(failed.is_empty());
        assert_eq!(made[0].name, "special care");
        assert_eq!(board.proposal("p1").unwrap().name, "treat them differently");
        let p = board.adopt_suggestion(&made[0].id, None, "c1").unwrap();
        assert_eq!((p.name.as_str(), &p.contributor), ("special care", &Contributor::Merged));
        assert!(board.adopt_suggestion(&made[0].id, None, "c1").is_err());

        let (none, _) = board.suggest_names(&gw, &fast(), &[]).unwrap();
        assert!(none.is_empty());
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn naming_failure_leaves_draft() {
        let set = triaged_set();
        let mut board = Board::default();
        board.propose_code(&set, &["m1"], "draft", "d", "c1").unwrap();
        let (gw, _) = Gateway::mock(MockSpec::default());
        let (made, failed) = board.suggest_names(&gw, &fast(), &["p1"]).unwrap();
        assert!(made.is_empty());
        assert_eq!(failed[0].proposal_id, "p1");
        assert_eq!(board.proposal("p1").unwrap().name, "draft");
    }

    fn two_proposals() -> Board {
        let set = triaged_set();
        let mut board = Board::default();
        board.propose_code(&set, &["m1"], "a", "A", "c1").unwrap();
        board.propose_code(&set, &["m2"], "b", "B", "c1").unwrap();
        board
    }

    fn raw(texts: &[(&str, &str)]) -> MockSpec {
        MockSpec {
            rules: texts
                .iter()
                .map(|(when, text)| MockRule {
                    when: MockMatch { contains: Some(when.to_string()), ..Default::default() },
                    reply: MockReply::Raw { texts: vec![text.to_string()] },
                })
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn grouping_partition_and_constraints() {
        let board = two_proposals();
        let (gw, _) = Gateway::mock(raw(&[
            ("Do not put all", "Group: First | one | p1\nGroup: Second | two | p2"),
            ("Group the following", "Group: Both | together | p1, p2"),
        ]));
        let g = board.suggest_groupings(&gw, &fast(), &["p1", "p2"], &[]).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].members.len(), 2);
        let split = GroupingConstraint::Split { members: vec!["p1".into(), "p2".into()] };
        let g = board.suggest_groupings(&gw, &fast(), &["p1", "p2"], &[split]).unwrap();
        assert!(g.iter().all(|x| x.members.len() == 1));
        assert!(matches!(board.suggest_groupings(&gw, &fast(), &["p1"], &[]), Err(BoardError::TooFewProposals(1))));
    }

    #[test]
    fn grouping_rejects_non_partition() {
        let board = two_proposals();
        let (gw, _) = Gateway::mock(raw(&[("Group the following", "Group: Only | one | p1")]));
        assert!(matches!(board.suggest_groupings(&gw, &fast(), &["p1", "p2"], &[]), Err(BoardError::NotPartition(_))));
    }

    fn node(name: &str, parent: Option<&str>, codes: &[&str]) -> NodeSpec {
        NodeSpec {
            name: name.into(),
            description: String::new(),
            dimension: None,
            parent: parent.map(String::from),
            codes: codes.iter().map(|c| CodeId::new(*c)).collect(),
        }
    }

    #[test]
    fn hierarchy_shapes_and_errors() {
        let one = HierarchySpec { nodes: vec![node("T", None, &["c"])] };
        let forest = build_hierarchy(&one, &BTreeSet::from([CodeId::new("c")])).unwrap();
        assert_eq!((forest.len(), forest[0].depth()), (1, 2));

        let cyc = HierarchySpec { nodes: vec![node("A", Some("B"), &[]), node("B", Some("A"), &[])] };
        assert!(matches!(build_hierarchy(&cyc, &BTreeSet::new()), Err(HierarchyError::Cycle(_))));

        let dup = HierarchySpec { nodes: vec![node("A", None, &["c"]), node("B", None, &["c"])] };
        assert_eq!(build_hierarchy(&dup, &BTreeSet::new()), Err(HierarchyError::DuplicateParent(CodeId::new("c"))));

        let orphan = HierarchySpec { nodes: vec![node("A", None, &[])] };
        assert_eq!(
            build_hierarchy(&orphan, &BTreeSet::from([CodeId::new("c")])),
            Err(HierarchyError::Orphan(CodeId::new("c")))
        );
    }

    #[test]
    fn ratings() {
        let r = |c| CodebookRating { rater: "r".into(), ease_of_use: 3, code_clarity: c, mutual_exclusivity: 3, exhaustiveness: 3 };
        let m = rate_codebook(&[r(4), r(4)]).unwrap();
        assert_eq!(m.code_clarity, 4.0);
        assert!(matches!(rate_codebook(&[r(6)]), Err(BoardError::ScoreOutOfRange { .. })));
        assert_eq!(rate_codebook(&[]), Err(BoardError::NoRatings));
    }

    #[test]
    fn induction_guards() {
        let (gw, mock) = Gateway::mock(MockSpec::default());
        assert_eq!(autonomous_induction(&[], &gw, &fast(), 0.7).unwrap().code_count(), 0);
        assert_eq!(mock.calls(), 0);
        let err = autonomous_induction(&[], &gw, &fast(), 0.2).unwrap_err();
        assert_eq!(err.stage, 3);
    }

    #[test]
    fn induction_reports_failing_stage() {
        let m = Message::new("m1", "p", "anger", "some words here for the test");
        let (gw, _) = Gateway::mock(raw(&[(STAGE1_MARKER, "Code: A | a | q\nCode: B | b | q")]));
        let err = autonomous_induction(&[&m], &gw, &fast(), 0.7).unwrap_err();
        assert_eq!(err.stage, 2);
    }
}
