//! Bundled synthetic fixtures.
//!
//! The static fixtures (codebooks, prompt context, golden prompt) live under
//! `fixtures/`. The generators below build replay data whose counts are fixed by
//! construction, plus the seeded corpus and mock scripts used by the demo pipeline.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::board::{CodebookRating, Dimension, ThemeNode, STAGE1_MARKER, STAGE2_MARKER, STAGE3_MARKER};
use crate::codebook::{CodeId, CodeKind, Codebook};
use crate::corpus::{logical_time, Assignment, Corpus, Message, MessageId};
use crate::gateway::{coder_id_for, MockMatch, MockReply, MockRule, MockSpec};
use crate::prompt::{enumerate_variants, GridConfig, PromptContext, PromptVariant};
use crate::triage::TriageCategory;

pub const ATTRIBUTION_CODEBOOK_JSON: &str = include_str!("../fixtures/attribution_codebook.json");
pub const EXPANDED_CODEBOOK_JSON: &str = include_str!("../fixtures/expanded_codebook.json");
pub const PROMPT_CONTEXT_JSON: &str = include_str!("../fixtures/prompt_context.json");
pub const GOLDEN_ALL_CODE_FULL: &str = include_str!("../fixtures/golden/all_code_full_ladder.txt");

pub const ATTRIBUTIONS: [&str; 7] =
    ["responsibility", "anger", "pity", "fear", "helping", "coercive-segregation", "social-distance"];
pub const NON_STIGMATIZING: &str = "non-stigmatizing";
pub const OTHERS: &str = "others";

pub fn attribution_codebook() -> Codebook {
    Codebook::from_json(ATTRIBUTION_CODEBOOK_JSON).expect("bundled codebook parses")
}

pub fn expanded_codebook() -> Codebook {
    Codebook::from_json(EXPANDED_CODEBOOK_JSON).expect("bundled codebook parses")
}

pub fn prompt_context() -> PromptContext {
    serde_json::from_str(PROMPT_CONTEXT_JSON).expect("bundled prompt context parses")
}

/// Message used for the golden prompt.
pub fn golden_message() -> Message {
    Message::new(
        "golden-1",
        "P0",
        "anger",
        "I would feel embarrassed more than angry, but I would explain their condition to the others.",
    )
}

pub fn attribution_set() -> BTreeSet<String> {
    ATTRIBUTIONS.iter().map(|s| s.to_string()).collect()
}

fn assignment(message: &str, coder: &str, code: &str, seq: usize) -> Assignment {
    Assignment::new(&MessageId::new(message), coder, &CodeId::new(code), logical_time(seq as u64))
}

/// Two label sequences with planted agreement: the first coder's labels are category
/// `i` repeated `counts[i]` times; the second copies them and shifts `disagreements`
/// evenly spaced positions to the next category.
pub fn planted_pair(counts: &[usize], disagreements: usize) -> (Vec<usize>, Vec<usize>) {
    let k = counts.len();
    let a: Vec<usize> = counts.iter().enumerate().flat_map(|(i, &c)| std::iter::repeat_n(i, c)).collect();
    let n = a.len();
    assert!(disagreements <= n);
    let mut b = a.clone();
    for j in 0..disagreements {
        let p = j * n / disagreements;
        b[p] = (a[p] + 1) % k;
    }
    (a, b)
}

pub struct HumanHumanFixture {
    pub codebook: Codebook,
    pub coder_a: Vec<Assignment>,
    pub coder_b: Vec<Assignment>,
    pub disagreements: usize,
}

/// 100-message double-coded sample: 23 disagreements over the 8 original codes, or 9
/// over the 20 codes of the expanded scheme.
pub fn human_human_fixture(expanded: bool) -> HumanHumanFixture {
    let (codebook, counts, d) = if expanded {
        let mut counts = vec![57, 3, 3, 3, 3, 3];
        counts.extend([2; 14]);
        (expanded_codebook(), counts, 9)
    } else {
        (attribution_codebook(), vec![59, 6, 6, 6, 6, 6, 6, 5], 23)
    };
    let ids: Vec<&str> = codebook.codes.iter().map(|c| c.id.as_str()).collect();
    assert_eq!(ids.len(), counts.len());
    let (a, b) = planted_pair(&counts, d);
    let mk = |labels: &[usize], coder: &str| -> Vec<Assignment> {
        labels.iter().enumerate().map(|(i, l)| assignment(&format!("hh-{:03}", i + 1), coder, ids[*l], i)).collect()
    };
    let coder_a = mk(&a, "coder-1");
    let coder_b = mk(&b, "coder-2");
    HumanHumanFixture { codebook, coder_a, coder_b, disagreements: d }
}

pub struct RevalidationFixture {
    pub messages: Vec<Message>,
    pub human: Vec<Assignment>,
    pub expanded: Codebook,
    /// Expanded codebook after a round of clarified definitions.
    pub clarified: Codebook,
    /// Scripted model replies for the first and second re-validation passes.
    pub first_pass: MockSpec,
    pub second_pass: MockSpec,
    pub variant: PromptVariant,
}

pub fn all_code_full_ladder() -> PromptVariant {
    enumerate_variants(&GridConfig::default()).into_iter().find(|v| v.id == "L5").expect("L5 exists")
}

/// 273 messages coded by humans over the 20 expanded codes, with scripted model codes
/// giving 200 and then 192 disagreements.
pub fn revalidation_fixture() -> RevalidationFixture {
    let expanded = expanded_codebook();
    let ids: Vec<CodeId> = expanded.codes.iter().map(|c| c.id.clone()).collect();
    let mut counts = vec![21, 14, 14, 14, 14, 14];
    counts.extend([13; 14]);
    let (human_labels, first) = planted_pair(&counts, 200);
    let (_, second) = planted_pair(&counts, 192);

    let messages: Vec<Message> = (0..human_labels.len())
        .map(|i| {
            Message::new(
                format!("rv-{:03}", i + 1),
                format!("P{:03}", i % 97),
                ATTRIBUTIONS[i % ATTRIBUTIONS.len()],
                format!("Re-check message {} about how I would treat the person in the story.", i + 1),
            )
        })
        .collect();
    let human = human_labels
        .iter()
        .enumerate()
        .map(|(i, l)| assignment(messages[i].id.as_str(), "human", ids[*l].as_str(), i))
        .collect();
    let variant = all_code_full_ladder();
    let script = |labels: &[usize]| MockSpec {
        script: BTreeMap::from([(
            variant.id.clone(),
            labels.iter().enumerate().map(|(i, l)| (messages[i].id.to_string(), ids[*l].to_string())).collect(),
        )]),
        ..Default::default()
    };
    let first_pass = script(&first);
    let second_pass = script(&second);

    let mut codes = expanded.codes.clone();
    for c in codes.iter_mut().filter(|c| c.kind == CodeKind::Emergent) {
        c.definition.push_str(" Apply only when the message states this directly rather than implying it.");
    }
    let clarified = expanded.revise(codes, Some("clarified emergent definitions".into()));
    RevalidationFixture { messages, human, expanded, clarified, first_pass, second_pass, variant }
}

/// Planned direction of a disagreement: human class and modal variant class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    HumanStigmaModelNon,
    HumanNonModelStigma,
    BothStigma,
}

pub struct DisagreementFixture {
    pub corpus: Corpus,
    pub human: Vec<Assignment>,
    pub variants: BTreeMap<String, Vec<Assignment>>,
    /// Category every coder assigns to each planted record.
    pub planted: BTreeMap<MessageId, TriageCategory>,
    pub directions: BTreeMap<MessageId, Direction>,
    pub coders: Vec<String>,
}

/// Planted all-differ messages per attribution.
pub const PLANTED_PER_ATTRIBUTION: [(&str, usize); 7] = [
    ("coercive-segregation", 88),
    ("anger", 51),
    ("fear", 47),
    ("responsibility", 32),
    ("social-distance", 24),
    ("pity", 18),
    ("helping", 13),
];

fn shuffled<T: Clone>(parts: &[(T, usize)], rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut out: Vec<T> = parts.iter().flat_map(|(t, n)| std::iter::repeat_n(t.clone(), *n)).collect();
    out.shuffle(rng);
    out
}

/// 4,143 messages x 23 variants with 273 planted all-differ messages. Triage
/// categories split 51 / 41 / 181 and directions 160 / 14 / 99.
pub fn disagreement_fixture() -> DisagreementFixture {
    const MESSAGES: usize = 4143;
    let variant_ids: Vec<String> = (1..=23).map(|i| format!("L{i}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4143);

    let messages: Vec<Message> = (0..MESSAGES)
        .map(|i| {
            Message::new(
                format!("d-{:04}", i + 1),
                format!("P{:03}", i % 211),
                ATTRIBUTIONS[i % 7],
                format!("Synthetic reply {} about living next to the person in the story.", i + 1),
            )
        })
        .collect();

    let mut planted_idx: BTreeSet<usize> = BTreeSet::new();
    for (attr, quota) in PLANTED_PER_ATTRIBUTION {
        let of_attr: Vec<usize> = (0..MESSAGES).filter(|i| ATTRIBUTIONS[i % 7] == attr).collect();
        let stride = of_attr.len() / quota;
        planted_idx.extend((0..quota).map(|j| of_attr[j * stride]));
    }
    let directions = shuffled(
        &[(Direction::HumanStigmaModelNon, 160), (Direction::HumanNonModelStigma, 14), (Direction::BothStigma, 99)],
        &mut rng,
    );
    let categories = shuffled(
        &[(TriageCategory::HumanError, 51), (TriageCategory::LlmError, 41), (TriageCategory::NewCode, 181)],
        &mut rng,
    );

    let mut human = Vec::with_capacity(MESSAGES);
    let mut variants: BTreeMap<String, Vec<Assignment>> =
        variant_ids.iter().map(|v| (v.clone(), Vec::with_capacity(MESSAGES))).collect();
    let mut planted = BTreeMap::new();
    let mut planned_directions = BTreeMap::new();
    let mut plan_index = 0;
    for (i, m) in messages.iter().enumerate() {
        let target = m.elicited_by.as_str();
        let other_attr = ATTRIBUTIONS[(ATTRIBUTIONS.iter().position(|a| *a == target).unwrap() + 1) % 7];
        let (human_code, codes): (&str, Vec<&str>) = if planted_idx.contains(&i) {
            let dir = directions[plan_index];
            planted.insert(m.id.clone(), categories[plan_index]);
            planned_directions.insert(m.id.clone(), dir);
            plan_index += 1;
            match dir {
                Direction::HumanStigmaModelNon => {
                    let mut c = vec![NON_STIGMATIZING; 16];
                    c.extend([OTHERS; 4]);
                    c.extend([other_attr; 3]);
                    (target, c)
                }
                Direction::HumanNonModelStigma => {
                    let mut c = vec![target; 16];
                    c.extend([OTHERS; 7]);
                    (NON_STIGMATIZING, c)
                }
                Direction::BothStigma => {
                    let mut c = vec![OTHERS; 14];
                    c.extend([NON_STIGMATIZING; 9]);
                    (target, c)
                }
            }
        } else {
            let pool = [target, NON_STIGMATIZING, OTHERS];
            let h = *pool.choose(&mut rng).unwrap();
            let anchor = i % 23;
            let c = (0..23)
                .map(|v| if v == anchor || rng.random_bool(0.75) { h } else { *pool.choose(&mut rng).unwrap() })
                .collect();
            (h, c)
        };
        human.push(assignment(m.id.as_str(), "human", human_code, i));
        for (v, code) in variant_ids.iter().zip(codes) {
            variants.get_mut(v).unwrap().push(assignment(m.id.as_str(), &coder_id_for(v), code, i));
        }
    }
    assert_eq!(planted.len(), 273);
    DisagreementFixture {
        corpus: Corpus { messages, exclusions: Vec::new() },
        human,
        variants,
        planted,
        directions: planned_directions,
        coders: vec!["coder-1".into(), "coder-2".into(), "coder-3".into()],
    }
}

/// 4,153 messages x 23 variants; exactly 599 messages get three or more distinct codes.
pub fn dispersion_fixture() -> (BTreeMap<String, Vec<Assignment>>, BTreeSet<MessageId>) {
    const MESSAGES: usize = 4153;
    const PLANTED: usize = 599;
    let codes: Vec<&str> = ATTRIBUTIONS.iter().copied().chain([NON_STIGMATIZING]).collect();
    let planted_idx: BTreeSet<usize> = (0..PLANTED).map(|j| j * MESSAGES / PLANTED).collect();
    let mut variants: BTreeMap<String, Vec<Assignment>> = BTreeMap::new();
    let mut planted = BTreeSet::new();
    for i in 0..MESSAGES {
        let id = format!("s-{:04}", i + 1);
        let distinct = if planted_idx.contains(&i) {
            planted.insert(MessageId::new(id.clone()));
            3 + i % 3
        } else {
            1 + i % 2
        };
        for v in 0..23 {
            let code = codes[(i + v % distinct) % codes.len()];
            let vid = format!("L{}", v + 1);
            variants.entry(vid.clone()).or_default().push(assignment(&id, &coder_id_for(&vid), code, i));
        }
    }
    (variants, planted)
}

pub struct PrimacyFixture {
    pub grid: Vec<PromptVariant>,
    pub runs: BTreeMap<String, Vec<Assignment>>,
    pub targets: BTreeMap<MessageId, String>,
    pub baseline: CodeId,
}

/// Per-variant target-code counts for the ordering variants, grouped by where the
/// target example sits: totals 5,675 (first), 5,241 (second), 5,017 (last).
pub const PRIMACY_S_COUNTS: [[u64; 4]; 3] =
    [[1419, 1419, 1419, 1418], [1311, 1310, 1310, 1310], [1255, 1254, 1254, 1254]];

/// Ordering-variant runs over 4,153 messages built to the counts above.
pub fn primacy_fixture() -> PrimacyFixture {
    const MESSAGES: u64 = 4153;
    let grid = enumerate_variants(&GridConfig::default());
    let targets: BTreeMap<MessageId, String> =
        (0..MESSAGES).map(|i| (MessageId::new(format!("o-{:04}", i + 1)), ATTRIBUTIONS[i as usize % 7].to_string())).collect();
    let mut used = [0usize; 3];
    let mut runs = BTreeMap::new();
    for v in grid.iter().filter(|v| v.ordering.is_some()) {
        let ordering = v.ordering.unwrap();
        let s_pos = ordering.position(crate::prompt::ExampleSlot::S);
        let ns_pos = ordering.position(crate::prompt::ExampleSlot::NS);
        let s = PRIMACY_S_COUNTS[s_pos][used[s_pos]];
        used[s_pos] += 1;
        let ns = 1600 + [40, 0, 0][ns_pos] - [0, 0, 30][ns_pos];
        let coder = coder_id_for(&v.id);
        let list = targets
            .iter()
            .enumerate()
            .map(|(i, (m, t))| {
                let i = i as u64;
                let code = if i < s {
                    t.as_str()
                } else if i < s + ns {
                    NON_STIGMATIZING
                } else {
                    OTHERS
                };
                assignment(m.as_str(), &coder, code, i as usize)
            })
            .collect();
        runs.insert(v.id.clone(), list);
    }
    PrimacyFixture { grid, runs, targets, baseline: CodeId::new(NON_STIGMATIZING) }
}

/// Unique code names, descriptions and quotes of the autonomous-baseline replay.
pub const AUTONOMOUS_CODES: [(&str, &str); 10] = [
    ("Hospitalization Debate", "Whether the person should be admitted to hospital."),
    ("Home Treatment Preference", "Treatment at home is preferred over an institution."),
    ("Professional Assessment Advocacy", "A professional should assess the person first."),
    ("Anger Management", "The person needs to control their temper."),
    ("Community Support Importance", "Neighbours and community should help out."),
    ("Workplace Support", "Colleagues and employers should accommodate the person."),
    ("Sympathy and Concern", "Feeling sorry for or worried about the person."),
    ("Mental State Misinterpretation", "Misreading the person's behaviour or intentions."),
    ("Tenant Acceptance", "Deciding whether to rent to the person."),
    ("Traveling Concerns", "Reluctance to travel or carpool with the person."),
];

/// Theme names with 1-based indices into [`AUTONOMOUS_CODES`]; 26 entries, 10 distinct.
pub const AUTONOMOUS_THEMES: [(&str, &[usize]); 11] = [
    ("Health Management", &[1, 2, 3, 4]),
    ("Support Systems", &[5, 6, 7]),
    ("Mental Health Focus", &[8, 4, 3]),
    ("Social Acceptance and Integration", &[9, 6]),
    ("Emotional and Psychological Well-being", &[7, 4, 8]),
    ("Advocacy and Debate", &[1, 3]),
    ("Safety and Concerns", &[10, 8]),
    ("Preference and Choice in Care", &[1, 2]),
    ("Community and Social Support", &[5, 6]),
    ("Conflict and Management", &[4, 9]),
    ("Mobility and Accessibility", &[10]),
];

/// Scripted replies for the three baseline stages.
pub fn autonomous_baseline_mock() -> MockSpec {
    let code_lines = |codes: &[(&str, &str)]| -> String {
        codes
            .iter()
            .map(|(n, d)| format!("Code: {n} | {d} | \"I would keep some distance.\""))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let mut initial: Vec<(&str, &str)> = AUTONOMOUS_CODES.to_vec();
    initial.extend_from_slice(&AUTONOMOUS_CODES[..4]);
    let themes = AUTONOMOUS_THEMES
        .iter()
        .map(|(name, idx)| {
            let nums: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
            format!("Theme: {name} | Codes about {} | {}", name.to_lowercase(), nums.join(", "))
        })
        .collect::<Vec<_>>()
        .join("\n");
    let rule = |marker: &str, text: String| MockRule {
        when: MockMatch { contains: Some(marker.to_string()), ..Default::default() },
        reply: MockReply::Raw { texts: vec![text] },
    };
    MockSpec {
        rules: vec![
            rule(STAGE2_MARKER, code_lines(&AUTONOMOUS_CODES)),
            rule(STAGE3_MARKER, themes),
            rule(STAGE1_MARKER, code_lines(&initial)),
        ],
        ..Default::default()
    }
}

fn ratings(rows: [[u8; 4]; 4], prefix: &str) -> Vec<CodebookRating> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| CodebookRating {
            rater: format!("{prefix}-{}", i + 1),
            ease_of_use: r[0],
            code_clarity: r[1],
            mutual_exclusivity: r[2],
            exhaustiveness: r[3],
        })
        .collect()
}

/// Four raters scoring the collaboratively built codebook
/// (ease of use, clarity, mutual exclusivity, exhaustiveness).
pub fn collaborative_ratings() -> Vec<CodebookRating> {
    ratings([[4, 5, 4, 4], [4, 5, 4, 4], [4, 5, 4, 4], [4, 4, 4, 4]], "collab")
}

pub fn autonomous_ratings() -> Vec<CodebookRating> {
    ratings([[3, 3, 2, 4], [3, 2, 2, 3], [4, 3, 2, 4], [3, 2, 1, 3]], "auto")
}

/// Emergent code planned for a demo disagreement, with the draft name coders start from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmergentPlan {
    pub code: CodeId,
    pub draft_name: String,
}

pub struct DemoFixture {
    /// Corpus as JSONL, including a few messages below the word floor.
    pub jsonl: String,
    /// Human codes for every eligible message.
    pub human: Vec<Assignment>,
    /// Scripted replies for all 23 variants.
    pub coding_mock: MockSpec,
    /// Category each coder votes for each hard message.
    pub triage_plan: BTreeMap<MessageId, Vec<TriageCategory>>,
    /// Emergent code behind each hard message the coders call new-code.
    pub emergent_plan: BTreeMap<MessageId, EmergentPlan>,
    /// Naming and grouping replies for the board.
    pub board_mock: MockSpec,
    /// Model replies for re-validation under the expanded codebook.
    pub revalidation_mock: MockSpec,
    /// Human codes after recoding new-code messages to their emergent code.
    pub revalidation_human: Vec<Assignment>,
}

const STIGMA_TEMPLATES: [(&str, &str); 7] = [
    ("responsibility", "I think {name} brought this on themselves by not taking care of their health."),
    ("anger", "Honestly I would be irritated that {name} cannot just pull it together at work."),
    ("pity", "I would feel so sorry for {name}, it must be a sad and hopeless life."),
    ("fear", "I would be nervous around {name} because they could snap at any moment."),
    ("helping", "I would not go out of my way to help {name} with their problems."),
    ("coercive-segregation", "People like {name} should be kept in a hospital where they cannot cause trouble."),
    ("social-distance", "I would rather not have {name} living next door to my family."),
];

const NEUTRAL_TEMPLATES: [&str; 4] = [
    "I would treat {name} like any other neighbour and say hello when we meet.",
    "Depression is an illness and {name} deserves the same respect as anyone else.",
    "I would be happy to work with {name} and would check in if they needed anything.",
    "It would not change how I see {name}, everyone goes through hard times.",
];

const EMERGENT_TEMPLATES: [&str; 12] = [
    "I doubt {name} could ever hold a normal conversation with the people around them again.",
    "Someone like {name} probably stops eating and washing until they hurt themselves.",
    "You never know what {name} will do next, one day fine and the next day not.",
    "It is probably the medication or bad parenting that made {name} act this way.",
    "I would be a bit embarrassed if my friends saw me spending time with {name}.",
    "Poor thing, {name} just cannot manage life like the rest of us can.",
    "Being around {name} would make me feel awkward and I would not know what to say.",
    "I would stay polite with {name} but I would not get emotionally involved with them.",
    "Someone should manage {name}'s money and decisions for them until they are better.",
    "I would rent to {name} as long as they prove they are on their treatment.",
    "I would treat {name} differently at work and give them the easy tasks.",
    "I would not tell {name} myself, but I would ask a friend to keep them away.",
];

const NAMES: [&str; 6] = ["Avery", "my coworker", "the neighbour", "my cousin", "the tenant", "my classmate"];

/// Variant accuracy used by the coding mock; later ladder steps and CoT do better.
fn variant_accuracy(v: &PromptVariant) -> f64 {
    let step = v.ladder.iter().count() as f64;
    let mut p = 0.55 + 0.06 * step;
    if v.cot {
        p += 0.03;
    }
    p.min(0.92)
}

/// Seeded corpus of 147 messages (7 attributions x 21) with human codes and scripted
/// model behaviour. About one message in seven is "hard": every variant disagrees with
/// the human code.
pub fn demo_fixture(seed: u64) -> DemoFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let expanded = expanded_codebook();
    let emergent: Vec<&crate::codebook::Code> = expanded.codes.iter().filter(|c| c.kind == CodeKind::Emergent).collect();
    let grid = enumerate_variants(&GridConfig::default());
    let base_labels: Vec<&str> = ATTRIBUTIONS.iter().copied().chain([NON_STIGMATIZING]).collect();

    let mut jsonl = String::new();
    let mut human = Vec::new();
    let mut revalidation_human = Vec::new();
    let mut triage_plan = BTreeMap::new();
    let mut emergent_plan = BTreeMap::new();
    let mut coding: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut revalidation: BTreeMap<String, String> = BTreeMap::new();

    let mut line = 0usize;
    for round in 0..21 {
        for (a, attr) in ATTRIBUTIONS.iter().enumerate() {
            line += 1;
            let id = format!("demo-{line:04}");
            let participant = format!("P{:02}", (line - 1) / 3 + 1);
            let name = NAMES[rng.random_range(0..NAMES.len())];
            let hard = rng.random_bool(1.0 / 7.0);
            let stigmatizing = rng.random_bool(0.6);
            let emergent_idx = (round * 7 + a) % emergent.len();
            let text = if hard {
                EMERGENT_TEMPLATES[emergent_idx].replace("{name}", name)
            } else if stigmatizing {
                STIGMA_TEMPLATES[a].1.replace("{name}", name)
            } else {
                NEUTRAL_TEMPLATES[rng.random_range(0..NEUTRAL_TEMPLATES.len())].replace("{name}", name)
            };
            let record = serde_json::json!({"id": id, "participant": participant, "attribution": attr, "text": text});
            jsonl.push_str(&record.to_string());
            jsonl.push('\n');

            let human_code = if hard || stigmatizing { *attr } else { NON_STIGMATIZING };
            human.push(assignment(&id, "human", human_code, human.len()));

            for v in &grid {
                let label = if hard {
                    if rng.random_bool(0.7) { NON_STIGMATIZING.to_string() } else { other_label(v, a) }
                } else if rng.random_bool(variant_accuracy(v)) {
                    human_code.to_string()
                } else {
                    noise_label(v, a, human_code, &mut rng)
                };
                coding.entry(v.id.clone()).or_default().insert(id.clone(), label);
            }

            let mut recoded = human_code.to_string();
            if hard {
                let votes: Vec<TriageCategory> = if rng.random_bool(0.8) {
                    vec![TriageCategory::NewCode; 3]
                } else if rng.random_bool(0.5) {
                    vec![TriageCategory::LlmError; 3]
                } else {
                    vec![TriageCategory::NewCode, TriageCategory::NewCode, TriageCategory::HumanError]
                };
                if votes.iter().all(|c| *c == TriageCategory::NewCode) {
                    let code = emergent[emergent_idx];
                    emergent_plan.insert(
                        MessageId::new(id.clone()),
                        EmergentPlan { code: code.id.clone(), draft_name: format!("draft {}", code.keywords[0]) },
                    );
                    recoded = code.id.to_string();
                }
                triage_plan.insert(MessageId::new(id.clone()), votes);
            }
            let reval_label = if rng.random_bool(0.7) {
                recoded.clone()
            } else {
                base_labels[rng.random_range(0..base_labels.len())].to_string()
            };
            revalidation.insert(id.clone(), reval_label);
            revalidation_human.push(assignment(&id, "human", &recoded, revalidation_human.len()));
        }
    }
    for (i, text) in ["Not sure.", "No comment here.", "idk"].iter().enumerate() {
        let record = serde_json::json!({"id": format!("demo-short-{}", i + 1), "participant": "P99", "attribution": ATTRIBUTIONS[i], "text": text});
        jsonl.push_str(&record.to_string());
        jsonl.push('\n');
    }

    let board_mock = demo_board_mock(&expanded);
    DemoFixture {
        jsonl,
        human,
        coding_mock: MockSpec { script: coding, ..Default::default() },
        triage_plan,
        emergent_plan,
        board_mock,
        revalidation_mock: MockSpec {
            script: BTreeMap::from([(all_code_full_ladder().id, revalidation)]),
            ..Default::default()
        },
        revalidation_human,
    }
}

fn other_label(v: &PromptVariant, attr: usize) -> String {
    match v.scenario {
        crate::prompt::Scenario::TargetCode => OTHERS.to_string(),
        crate::prompt::Scenario::AllCode => ATTRIBUTIONS[(attr + 3) % 7].to_string(),
    }
}

fn noise_label(v: &PromptVariant, attr: usize, human: &str, rng: &mut ChaCha8Rng) -> String {
    let pool: Vec<String> = match v.scenario {
        crate::prompt::Scenario::TargetCode => vec![ATTRIBUTIONS[attr].into(), NON_STIGMATIZING.into(), OTHERS.into()],
        crate::prompt::Scenario::AllCode => {
            ATTRIBUTIONS.iter().map(|s| s.to_string()).chain([NON_STIGMATIZING.to_string()]).collect()
        }
    };
    let choices: Vec<&String> = pool.iter().filter(|c| c.as_str() != human).collect();
    choices.choose(rng).map(|s| s.to_string()).unwrap_or_else(|| human.to_string())
}

/// Naming replies keyed on each draft name.
fn demo_board_mock(expanded: &Codebook) -> MockSpec {
    let rules = expanded
        .codes
        .iter()
        .filter(|c| c.kind == CodeKind::Emergent)
        .map(|c| MockRule {
            when: MockMatch { contains: Some(format!("Draft name: draft {}\n", c.keywords[0])), ..Default::default() },
            reply: MockReply::Raw { texts: vec![format!("Name: {}\nDescription: {}", c.name, c.definition)] },
        })
        .collect();
    MockSpec { rules, ..Default::default() }
}

/// Scripted grouping reply placing each proposal under the sub-theme its code sits in
/// within `expanded`, plus the dimension of every group it names.
pub fn demo_grouping(
    expanded: &Codebook,
    proposals: &[(String, CodeId)],
) -> (MockSpec, BTreeMap<String, Dimension>) {
    let mut groups: BTreeMap<String, (String, Dimension, Vec<String>)> = BTreeMap::new();
    for theme in &expanded.themes {
        let Some(dimension) = theme.dimension else { continue };
        for child in &theme.children {
            let ThemeNode::SubTheme(sub) = child else { continue };
            let mut parents = Vec::new();
            sub.code_parents(&mut parents);
            for (pid, code) in proposals {
                if parents.iter().any(|(c, _)| c == code) {
                    groups
                        .entry(sub.name.clone())
                        .or_insert_with(|| (sub.description.clone(), dimension, Vec::new()))
                        .2
                        .push(pid.clone());
                }
            }
        }
    }
    let text = groups
        .iter()
        .map(|(name, (desc, _, members))| format!("Group: {name} | {desc} | {}", members.join(", ")))
        .collect::<Vec<_>>()
        .join("\n");
    let spec = MockSpec {
        rules: vec![MockRule {
            when: MockMatch { contains: Some("Group the following draft codes".into()), ..Default::default() },
            reply: MockReply::Raw { texts: vec![text] },
        }],
        ..Default::default()
    };
    (spec, groups.into_iter().map(|(name, (_, d, _))| (name, d)).collect())
}
