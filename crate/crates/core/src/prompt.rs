//! Prompt-variant grid and prompt assembly.
//!
//! The default grid has 23 variants, numbered `L1`..`L23`:
//!
//! | ids        | scenario    | ladder step            | extras                               |
//! |------------|-------------|------------------------|--------------------------------------|
//! | L1..L5     | all-code    | name .. +exp           |                                      |
//! | L6..L10    | target-code | name .. +exp           |                                      |
//! | L11        | all-code    | +exp                   | CoT                                  |
//! | L12..L23   | target-code | +exp                   | extra examples, 6 orderings x CoT/NoCoT |
//!
//! Ids are positions in that canonical order, so restricting the grid never renumbers
//! the remaining variants.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{Code, CodeId, CodeKind, CodedExample, Codebook};
use crate::corpus::Message;

pub const DEFAULT_ROLE: &str = "a competent coder for mental-illness stigma";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    AllCode,
    TargetCode,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::AllCode => "all-code",
            Scenario::TargetCode => "target-code",
        })
    }
}

/// Codebook components, in ladder order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    Name,
    Vignette,
    Rules,
    Keywords,
    Example,
}

impl Component {
    pub const LADDER: [Component; 5] =
        [Component::Name, Component::Vignette, Component::Rules, Component::Keywords, Component::Example];

    fn step_label(self) -> &'static str {
        match self {
            Component::Name => "name",
            Component::Vignette => "+vig",
            Component::Rules => "+rule",
            Component::Keywords => "+keyword",
            Component::Example => "+exp",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Name => "name",
            Component::Vignette => "vignette",
            Component::Rules => "rules",
            Component::Keywords => "keywords",
            Component::Example => "example",
        })
    }
}

/// Set of components shown per code. Always contains [`Component::Name`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComponentSet(BTreeSet<Component>);

impl ComponentSet {
    /// Cumulative ladder step `1..=5` (1 = name only, 5 = full codebook).
    pub fn ladder_step(step: usize) -> Self {
        assert!((1..=5).contains(&step), "ladder step {step} out of range");
        ComponentSet(Component::LADDER[..step].iter().copied().collect())
    }

    pub fn full() -> Self {
        Self::ladder_step(5)
    }

    pub fn from_components(components: impl IntoIterator<Item = Component>) -> Self {
        let mut set: BTreeSet<Component> = components.into_iter().collect();
        set.insert(Component::Name);
        ComponentSet(set)
    }

    pub fn contains(&self, c: Component) -> bool {
        self.0.contains(&c)
    }

    pub fn iter(&self) -> impl Iterator<Item = Component> + '_ {
        self.0.iter().copied()
    }

    pub fn is_strict_superset(&self, other: &ComponentSet) -> bool {
        self.0.is_superset(&other.0) && self.0.len() > other.0.len()
    }

    /// Label of the highest ladder step contained, e.g. `+keyword`.
    fn top_label(&self) -> &'static str {
        self.0.iter().next_back().map_or("name", |c| c.step_label())
    }
}

impl fmt::Display for ComponentSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|c| c.to_string()).collect();
        f.write_str(&parts.join("+"))
    }
}

/// Example slots relative to a target attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExampleSlot {
    /// Stigmatizing for the target attribution.
    S,
    /// Non-stigmatizing.
    NS,
    /// Stigmatizing for some other attribution.
    O,
}

impl ExampleSlot {
    pub const ALL: [ExampleSlot; 3] = [ExampleSlot::S, ExampleSlot::NS, ExampleSlot::O];
}

impl fmt::Display for ExampleSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExampleSlot::S => "S",
            ExampleSlot::NS => "NS",
            ExampleSlot::O => "O",
        })
    }
}

impl FromStr for ExampleSlot {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "S" => Ok(ExampleSlot::S),
            "NS" => Ok(ExampleSlot::NS),
            "O" => Ok(ExampleSlot::O),
            _ => Err(PromptError::BadOrdering(s.to_string())),
        }
    }
}

/// A permutation of the three example slots, written like `S_NS_O`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ExampleOrdering(pub [ExampleSlot; 3]);

impl ExampleOrdering {
    /// The six orderings in grid order.
    pub fn all() -> [ExampleOrdering; 6] {
        use ExampleSlot::*;
        [
            ExampleOrdering([S, NS, O]),
            ExampleOrdering([S, O, NS]),
            ExampleOrdering([NS, S, O]),
            ExampleOrdering([NS, O, S]),
            ExampleOrdering([O, S, NS]),
            ExampleOrdering([O, NS, S]),
        ]
    }

    /// Zero-based position of `slot` in this ordering.
    pub fn position(&self, slot: ExampleSlot) -> usize {
        self.0.iter().position(|s| *s == slot).expect("ordering is a permutation")
    }

    pub fn first(&self) -> ExampleSlot {
        self.0[0]
    }
}

impl fmt::Display for ExampleOrdering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}_{}", self.0[0], self.0[1], self.0[2])
    }
}

impl FromStr for ExampleOrdering {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let slots: Vec<ExampleSlot> = s.split('_').map(str::parse).collect::<Result<_, _>>()?;
        let distinct: BTreeSet<_> = slots.iter().collect();
        if slots.len() != 3 || distinct.len() != 3 {
            return Err(PromptError::BadOrdering(s.to_string()));
        }
        Ok(ExampleOrdering([slots[0], slots[1], slots[2]]))
    }
}

impl Serialize for ExampleOrdering {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ExampleOrdering {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptVariant {
    /// `L1`..`L23` under the default grid.
    pub id: String,
    pub descriptor: String,
    pub scenario: Scenario,
    pub ladder: ComponentSet,
    pub cot: bool,
    pub extra_examples: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordering: Option<ExampleOrdering>,
}

impl PromptVariant {
    fn new(index: usize, scenario: Scenario, ladder: ComponentSet, cot: bool, ordering: Option<ExampleOrdering>) -> Self {
        let mut descriptor = format!("{scenario}/{}", ladder.top_label());
        if let Some(o) = ordering {
            descriptor.push_str(&format!("/+examples/{o}/{}", if cot { "CoT" } else { "NoCoT" }));
        } else if cot {
            descriptor.push_str("/+CoT");
        }
        PromptVariant {
            id: format!("L{index}"),
            descriptor,
            scenario,
            ladder,
            cot,
            extra_examples: ordering.is_some(),
            ordering,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    pub ladders: bool,
    pub cot: bool,
    pub orderings: bool,
    /// Scenario of the standalone CoT variant.
    pub cot_scenario: Scenario,
    /// Scenario of the ordering variants.
    pub ordering_scenario: Scenario,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            ladders: true,
            cot: true,
            orderings: true,
            cot_scenario: Scenario::AllCode,
            ordering_scenario: Scenario::TargetCode,
        }
    }
}

impl GridConfig {
    pub fn ladders_only() -> Self {
        GridConfig { cot: false, orderings: false, ..Default::default() }
    }
}

pub fn enumerate_variants(cfg: &GridConfig) -> Vec<PromptVariant> {
    let mut out = Vec::new();
    let mut index = 0;
    let mut next = || {
        index += 1;
        index
    };
    for scenario in [Scenario::AllCode, Scenario::TargetCode] {
        for step in 1..=5 {
            let i = next();
            if cfg.ladders {
                out.push(PromptVariant::new(i, scenario, ComponentSet::ladder_step(step), false, None));
            }
        }
    }
    let i = next();
    if cfg.cot {
        out.push(PromptVariant::new(i, cfg.cot_scenario, ComponentSet::full(), true, None));
    }
    for ordering in ExampleOrdering::all() {
        for cot in [true, false] {
            let i = next();
            if cfg.orderings {
                out.push(PromptVariant::new(i, cfg.ordering_scenario, ComponentSet::full(), cot, Some(ordering)));
            }
        }
    }
    out
}

/// Writes the grid as CSV: `id,scenario,ladder,cot,ordering`.
pub fn write_grid_csv<W: Write>(writer: W, variants: &[PromptVariant]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(["id", "scenario", "ladder", "cot", "ordering"])?;
    for v in variants {
        w.write_record([
            v.id.clone(),
            v.scenario.to_string(),
            v.ladder.to_string(),
            v.cot.to_string(),
            v.ordering.map(|o| o.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Project-level material that surrounds the codebook in a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    /// Persona completing "You are ...".
    pub role: String,
    pub vignette: String,
    /// Eliciting question per attribution tag.
    #[serde(default)]
    pub questions: BTreeMap<String, String>,
    /// Examples outside the codebook, per attribution tag, one per slot.
    #[serde(default)]
    pub extra_examples: BTreeMap<String, BTreeMap<ExampleSlot, CodedExample>>,
    #[serde(default = "default_true")]
    pub request_reasoning: bool,
}

fn default_true() -> bool {
    true
}

impl Default for PromptContext {
    fn default() -> Self {
        PromptContext {
            role: DEFAULT_ROLE.to_string(),
            vignette: String::new(),
            questions: BTreeMap::new(),
            extra_examples: BTreeMap::new(),
            request_reasoning: true,
        }
    }
}

impl PromptContext {
    pub fn question_for(&self, attribution: &str) -> &str {
        self.questions.get(attribution).map_or("", String::as_str)
    }
}

/// A legal output label: the code id plus the text shown to the model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Label {
    pub id: CodeId,
    pub display: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet(pub Vec<Label>);

impl LabelSet {
    pub fn iter(&self) -> impl Iterator<Item = &Label> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<&CodeId> {
        self.0.iter().map(|l| &l.id).collect()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.0.iter().any(|l| l.id.as_str() == id)
    }

    /// Case-insensitive exact match on display text or id.
    pub fn resolve(&self, text: &str) -> Option<&Label> {
        let t = text.trim();
        self.0
            .iter()
            .find(|l| l.display.eq_ignore_ascii_case(t) || l.id.as_str().eq_ignore_ascii_case(t))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub role_preamble: String,
    pub instruction_block: String,
    pub content_block: String,
    pub output_contract: String,
    pub legal_labels: LabelSet,
}

impl PromptText {
    /// The prompt bytes sent to the model: instructions always precede content.
    pub fn render(&self) -> String {
        format!(
            "{}\n\n{}\n\n{}\n\n{}\n",
            self.role_preamble, self.instruction_block, self.content_block, self.output_contract
        )
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("{target:?} is not an attribution of this codebook")]
    UnknownTarget { target: String },
    #[error("codebook has no non-stigmatizing code")]
    MissingBaseline,
    #[error("code {code} lacks the {component} component required by the ladder")]
    MissingComponent { code: CodeId, component: String },
    #[error("no extra examples configured for {target:?}")]
    MissingExtraExamples { target: String },
    #[error("no example for slot {0}")]
    MissingSlot(ExampleSlot),
    #[error("variant {0} has extra examples but no ordering")]
    MissingOrdering(String),
    #[error("invalid example ordering {0:?}")]
    BadOrdering(String),
}

/// Arranges one example per slot in `ordering`.
pub fn order_examples<'a>(
    examples: &'a BTreeMap<ExampleSlot, CodedExample>,
    ordering: ExampleOrdering,
) -> Result<Vec<(ExampleSlot, &'a CodedExample)>, PromptError> {
    ordering
        .0
        .iter()
        .map(|slot| examples.get(slot).map(|e| (*slot, e)).ok_or(PromptError::MissingSlot(*slot)))
        .collect()
}

/// Labels a variant may emit for a message elicited by `target`.
///
/// All-code: every code of the book except an other-bucket. Target-code: the target,
/// the non-stigmatizing code and the other-bucket, in that order.
pub fn legal_labels(scenario: Scenario, cb: &Codebook, target: &str) -> Result<LabelSet, PromptError> {
    let label = |c: &Code| Label { id: c.id.clone(), display: c.name.clone() };
    match scenario {
        Scenario::AllCode => {
            Ok(LabelSet(cb.codes.iter().filter(|c| c.kind != CodeKind::OtherBucket).map(label).collect()))
        }
        Scenario::TargetCode => {
            let (t, ns, other) = target_trio(cb, target)?;
            Ok(LabelSet(vec![label(t), label(ns), label(&other)]))
        }
    }
}

fn target_trio<'a>(cb: &'a Codebook, target: &str) -> Result<(&'a Code, &'a Code, Code), PromptError> {
    let t = cb
        .attributions()
        .find(|c| c.id.as_str() == target)
        .ok_or_else(|| PromptError::UnknownTarget { target: target.to_string() })?;
    let ns = cb.non_stigmatizing().ok_or(PromptError::MissingBaseline)?;
    Ok((t, ns, cb.other_bucket().into_owned()))
}

/// Builds the prompt for one message under one variant. Pure: identical inputs give
/// identical bytes.
pub fn assemble_prompt(
    variant: &PromptVariant,
    cb: &Codebook,
    ctx: &PromptContext,
    target: &str,
    message: &Message,
    question: &str,
) -> Result<PromptText, PromptError> {
    if !cb.attributions().any(|c| c.id.as_str() == target) {
        return Err(PromptError::UnknownTarget { target: target.to_string() });
    }
    let legal = legal_labels(variant.scenario, cb, target)?;
    let listed: Vec<Code> = match variant.scenario {
        Scenario::AllCode => cb.codes.iter().filter(|c| c.kind != CodeKind::OtherBucket).cloned().collect(),
        Scenario::TargetCode => {
            let (t, ns, other) = target_trio(cb, target)?;
            vec![t.clone(), ns.clone(), other]
        }
    };

    let ladder = &variant.ladder;
    let mut ins = vec!["### Instructions".to_string()];
    if ladder.contains(Component::Vignette) {
        ins.push("Read the background story and the codebook, then assign exactly one code to the participant message in the content section.".into());
        ins.push(String::new());
        ins.push("Background story:".into());
        ins.push(ctx.vignette.clone());
    } else {
        ins.push("Read the codebook, then assign exactly one code to the participant message in the content section.".into());
    }
    ins.push(String::new());
    ins.push("Codebook:".into());

    for (i, code) in listed.iter().enumerate() {
        ins.push(String::new());
        ins.push(format!("[{}] {}", i + 1, code.name));
        render_components(&mut ins, code, cb, ladder, variant.cot)?;
    }

    if variant.extra_examples {
        let ordering = variant.ordering.ok_or_else(|| PromptError::MissingOrdering(variant.id.clone()))?;
        let examples = ctx
            .extra_examples
            .get(target)
            .ok_or_else(|| PromptError::MissingExtraExamples { target: target.to_string() })?;
        ins.push(String::new());
        ins.push("Additional coded examples:".into());
        for (n, (slot, example)) in order_examples(examples, ordering)?.into_iter().enumerate() {
            let display = slot_display(slot, &listed, cb, target, example)?;
            ins.push(String::new());
            ins.push(format!("Example {}:", n + 1));
            push_example(&mut ins, example, &display, variant.cot)?;
        }
    }

    let content = format!("### Content\nQuestion: {question}\nMessage: \"{}\"", message.text);

    let mut contract = vec!["### Output format".to_string(), "Assign exactly one of these codes:".to_string()];
    contract.extend(legal.iter().map(|l| format!("- {}", l.display)));
    contract.push("Answer in exactly this format:".into());
    contract.push("Code: <one code from the list>".into());
    if ctx.request_reasoning {
        contract.push("Reason: <your reasoning for the code>".into());
    }

    Ok(PromptText {
        role_preamble: format!("You are {}.", ctx.role),
        instruction_block: ins.join("\n"),
        content_block: content,
        output_contract: contract.join("\n"),
        legal_labels: legal,
    })
}

fn render_components(
    out: &mut Vec<String>,
    code: &Code,
    cb: &Codebook,
    ladder: &ComponentSet,
    cot: bool,
) -> Result<(), PromptError> {
    let relaxed = code.kind == CodeKind::OtherBucket;
    let missing = |component: Component| PromptError::MissingComponent {
        code: code.id.clone(),
        component: component.to_string(),
    };
    if ladder.contains(Component::Rules) {
        if !code.definition.is_empty() {
            out.push(format!("Definition: {}", code.definition));
        }
        if !code.rules.is_empty() {
            out.push("Coding rules & specifications:".into());
            out.extend(code.rules.iter().enumerate().map(|(i, r)| format!("  {}. {r}", i + 1)));
        } else if !relaxed {
            return Err(missing(Component::Rules));
        }
    }
    if ladder.contains(Component::Keywords) {
        if !code.keywords.is_empty() {
            out.push(format!("Keywords: {}", code.keywords.join("; ")));
        } else if !relaxed {
            return Err(missing(Component::Keywords));
        }
    }
    if ladder.contains(Component::Example) {
        match code.examples.first() {
            Some(example) => {
                let display = cb
                    .resolve(example.assigned_code.as_str())
                    .map_or_else(|| example.assigned_code.to_string(), |c| c.name.clone());
                out.push("Example:".into());
                push_example(out, example, &display, cot)?;
            }
            None if relaxed => {}
            None => return Err(missing(Component::Example)),
        }
    }
    Ok(())
}

fn push_example(out: &mut Vec<String>, example: &CodedExample, display: &str, cot: bool) -> Result<(), PromptError> {
    out.push(format!("  Message: \"{}\"", example.message_text));
    out.push(format!("  Code: {display}"));
    if cot {
        let reasoning = example.reasoning.as_deref().filter(|r| !r.is_empty()).ok_or_else(|| {
            PromptError::MissingComponent { code: example.assigned_code.clone(), component: "reasoning".into() }
        })?;
        out.push(format!("  Reasoning: {reasoning}"));
    }
    Ok(())
}

fn slot_display(
    slot: ExampleSlot,
    listed: &[Code],
    cb: &Codebook,
    target: &str,
    example: &CodedExample,
) -> Result<String, PromptError> {
    let by_kind = |kind: CodeKind| listed.iter().find(|c| c.kind == kind).map(|c| c.name.clone());
    let name = match slot {
        ExampleSlot::S => cb.get(target).map(|c| c.name.clone()),
        ExampleSlot::NS => by_kind(CodeKind::NonStigmatizing),
        ExampleSlot::O => by_kind(CodeKind::OtherBucket).or_else(|| {
            cb.resolve(example.assigned_code.as_str()).map(|c| c.name.clone())
        }),
    };
    Ok(name.unwrap_or_else(|| example.assigned_code.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn golden_message() -> Message {
        Message::new(
            "golden-1",
            "P0",
            "anger",
            "I would feel embarrassed more than angry, but I would explain their condition to the others.",
        )
    }

    fn variant(id: &str) -> PromptVariant {
        enumerate_variants(&GridConfig::default()).into_iter().find(|v| v.id == id).unwrap()
    }

    #[test]
    fn default_grid_shape() {
        let grid = enumerate_variants(&GridConfig::default());
        assert_eq!(grid.len(), 23);
        let ids: Vec<String> = (1..=23).map(|i| format!("L{i}")).collect();
        assert_eq!(grid.iter().map(|v| v.id.clone()).collect::<Vec<_>>(), ids);
        let all_ladder = grid.iter().filter(|v| v.scenario == Scenario::AllCode && !v.cot && !v.extra_examples).count();
        let target_ladder =
            grid.iter().filter(|v| v.scenario == Scenario::TargetCode && !v.cot && !v.extra_examples).count();
        let cot_only = grid.iter().filter(|v| v.cot && !v.extra_examples).count();
        let orderings = grid.iter().filter(|v| v.extra_examples).count();
        assert_eq!((all_ladder, target_ladder, cot_only, orderings), (5, 5, 1, 12));
        assert_eq!(grid[4].descriptor, "all-code/+exp");
        assert_eq!(grid[10].descriptor, "all-code/+exp/+CoT");
        assert_eq!(grid[11].descriptor, "target-code/+exp/+examples/S_NS_O/CoT");
        assert_eq!(grid[22].descriptor, "target-code/+exp/+examples/O_NS_S/NoCoT");
    }

    #[test]
    fn ladders_only_grid() {
        let grid = enumerate_variants(&GridConfig::ladders_only());
        assert_eq!(grid.len(), 10);
        assert_eq!(grid.last().unwrap().id, "L10");
    }

    #[test]
    fn restricted_grid_keeps_canonical_ids() {
        let cfg = GridConfig { ladders: false, cot: false, ..Default::default() };
        let grid = enumerate_variants(&cfg);
        assert_eq!(grid.len(), 12);
        assert_eq!(grid[0].id, "L12");
    }

    #[test]
    fn ordering_count_and_distinctness() {
        let all = ExampleOrdering::all();
        assert_eq!(all.len() * 2, 12);
        let distinct: BTreeSet<_> = all.iter().map(|o| o.0).collect();
        assert_eq!(distinct.len(), 6);
    }

    #[test]
    fn variant_invariants() {
        for v in enumerate_variants(&GridConfig::default()) {
            assert!(v.ladder.contains(Component::Name));
            assert_eq!(v.ordering.is_some(), v.extra_examples);
        }
    }

    #[test]
    fn ladder_is_strictly_monotone() {
        for step in 2..=5 {
            assert!(ComponentSet::ladder_step(step).is_strict_superset(&ComponentSet::ladder_step(step - 1)));
        }
    }

    #[test]
    fn ordering_parse_roundtrip() {
        for o in ExampleOrdering::all() {
            assert_eq!(o.to_string().parse::<ExampleOrdering>().unwrap(), o);
        }
        assert!("S_S_O".parse::<ExampleOrdering>().is_err());
        assert!("S_NS".parse::<ExampleOrdering>().is_err());
        assert!("S_NS_X".parse::<ExampleOrdering>().is_err());
    }

    fn slot_examples() -> BTreeMap<ExampleSlot, CodedExample> {
        ExampleSlot::ALL
            .iter()
            .map(|s| {
                (*s, CodedExample { message_text: s.to_string(), assigned_code: CodeId::new(s.to_string()), reasoning: None })
            })
            .collect()
    }

    #[test]
    fn order_examples_follows_ordering() {
        let ex = slot_examples();
        let seq = |o: &str| -> Vec<ExampleSlot> {
            order_examples(&ex, o.parse().unwrap()).unwrap().into_iter().map(|(s, _)| s).collect()
        };
        assert_eq!(seq("S_NS_O"), vec![ExampleSlot::S, ExampleSlot::NS, ExampleSlot::O]);
        assert_eq!(seq("O_NS_S"), vec![ExampleSlot::O, ExampleSlot::NS, ExampleSlot::S]);
        let all: Vec<Vec<ExampleSlot>> = ExampleOrdering::all().iter().map(|o| seq(&o.to_string())).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
        let mut missing = ex.clone();
        missing.remove(&ExampleSlot::NS);
        assert_eq!(
            order_examples(&missing, ExampleOrdering::all()[0]).unwrap_err(),
            PromptError::MissingSlot(ExampleSlot::NS)
        );
    }

    #[test]
    fn name_only_all_code_lists_eight_names() {
        let cb = fixtures::attribution_codebook();
        let ctx = fixtures::prompt_context();
        let p = assemble_prompt(&variant("L1"), &cb, &ctx, "anger", &golden_message(), "Q?").unwrap();
        let text = p.render();
        for code in &cb.codes {
            assert!(p.instruction_block.contains(&format!("] {}", code.name)));
            assert!(!text.contains(&code.definition));
        }
        assert!(!text.contains("Background story"));
        assert_eq!(p.legal_labels.len(), 8);
    }

    #[test]
    fn full_all_code_ladder_matches_golden() {
        let cb = fixtures::attribution_codebook();
        let ctx = fixtures::prompt_context();
        let msg = golden_message();
        let p = assemble_prompt(&variant("L5"), &cb, &ctx, "anger", &msg, ctx.question_for("anger")).unwrap();
        assert_eq!(p.render(), fixtures::GOLDEN_ALL_CODE_FULL);
    }

    #[test]
    fn target_code_lists_three_labels_and_only_target_components() {
        let cb = fixtures::attribution_codebook();
        let ctx = fixtures::prompt_context();
        let p = assemble_prompt(&variant("L10"), &cb, &ctx, "fear", &golden_message(), "Q?").unwrap();
        let ids: Vec<&str> = p.legal_labels.iter().map(|l| l.id.as_str()).collect();
        assert_eq!(ids, vec!["fear", "non-stigmatizing", "others"]);
        let fear = cb.get("fear").unwrap();
        let anger = cb.get("anger").unwrap();
        assert!(p.instruction_block.contains(&fear.definition));
        assert!(!p.instruction_block.contains(&anger.definition));
        assert!(!p.instruction_block.contains(&anger.name));
    }

    #[test]
    fn ordering_with_cot_places_examples_in_order_with_reasoning() {
        let cb = fixtures::attribution_codebook();
        let ctx = fixtures::prompt_context();
        let v = enumerate_variants(&GridConfig::default())
            .into_iter()
            .find(|v| v.ordering == Some("O_NS_S".parse().unwrap()) && v.cot)
            .unwrap();
        let p = assemble_prompt(&v, &cb, &ctx, "anger", &golden_message(), "Q?").unwrap();
        let extra = &ctx.extra_examples["anger"];
        let block = p.instruction_block.split("Additional coded examples:").nth(1).unwrap();
        let pos = |slot: ExampleSlot| block.find(&extra[&slot].message_text).unwrap();
        assert!(pos(ExampleSlot::O) < pos(ExampleSlot::NS));
        assert!(pos(ExampleSlot::NS) < pos(ExampleSlot::S));
        for slot in ExampleSlot::ALL {
            assert!(block.contains(extra[&slot].reasoning.as_deref().unwrap()));
        }
        let no_cot = enumerate_variants(&GridConfig::default())
            .into_iter()
            .find(|v| v.ordering == Some("O_NS_S".parse().unwrap()) && !v.cot)
            .unwrap();
        let p2 = assemble_prompt(&no_cot, &cb, &ctx, "anger", &golden_message(), "Q?").unwrap();
        assert!(!p2.render().contains("Reasoning:"));
    }

    #[test]
    fn missing_component_is_an_error() {
        let mut cb = fixtures::attribution_codebook();
        cb.codes[3].examples.clear();
        let ctx = fixtures::prompt_context();
        let err = assemble_prompt(&variant("L5"), &cb, &ctx, "anger", &golden_message(), "Q?").unwrap_err();
        assert_eq!(err, PromptError::MissingComponent { code: "fear".into(), component: "example".into() });
        // lower ladder steps do not need examples
        assert!(assemble_prompt(&variant("L4"), &cb, &ctx, "anger", &golden_message(), "Q?").is_ok());
    }

    #[test]
    fn unknown_target_rejected() {
        let cb = fixtures::attribution_codebook();
        let ctx = fixtures::prompt_context();
        let err = assemble_prompt(&variant("L1"), &cb, &ctx, "envy", &golden_message(), "Q?").unwrap_err();
        assert!(matches!(err, PromptError::UnknownTarget { .. }));
    }

    #[test]
    fn output_contract_names_each_label_once() {
        let cb = fixtures::attribution_codebook();
        let ctx = fixtures::prompt_context();
        for v in enumerate_variants(&GridConfig::default()) {
            let p = assemble_prompt(&v, &cb, &ctx, "pity", &golden_message(), "Q?").unwrap();
            for l in p.legal_labels.iter() {
                let line = format!("- {}", l.display);
                assert_eq!(p.output_contract.lines().filter(|x| *x == line).count(), 1, "{}", v.id);
            }
            let instr = p.render().find("### Instructions").unwrap();
            let content = p.render().find("### Content").unwrap();
            assert!(instr < content);
        }
    }

    #[test]
    fn grid_csv_header() {
        let mut buf = Vec::new();
        write_grid_csv(&mut buf, &enumerate_variants(&GridConfig::default())).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 24);
        assert_eq!(lines[0], "id,scenario,ladder,cot,ordering");
        assert_eq!(lines[1], "L1,all-code,name,false,");
        assert_eq!(lines[12], "L12,target-code,name+vignette+rules+keywords+example,true,S_NS_O");
    }
}
