//! End-to-end demo: deductive runs, disagreement triage and codebook expansion over the
//! bundled synthetic corpus with scripted model replies.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::board::{
    autonomous_induction, rate_codebook, revalidate, Board, BoardError, InductionError, ProposalStatus, RatingMeans,
};
use crate::codebook::{diff_codebooks, merge_expansion, validate_codebook, CodeKind, CodebookError};
use crate::corpus::{ingest_messages, CorpusError, IngestConfig, Message, MessageId};
use crate::fixtures::{self, DemoFixture};
use crate::gateway::{run_variant, sha256_hex, Gateway, GatewayError, ModelConfig, VariantRun};
use crate::prompt::{enumerate_variants, write_grid_csv, GridConfig};
use crate::stats::{
    agreement_matrix, chi_square_independence, positional_frequency, AgreementOptions, CiConfig, Kappa, LabelView,
    StatsError,
};
use crate::triage::{
    directional_analysis, select_disagreements, triage_summary, variant_dispersion, DisagreementSet, SelectionRule,
    TriageCategory, TriageError, TriageState,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Triage(#[from] TriageError),
    #[error(transparent)]
    Board(#[from] BoardError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Induction(#[from] InductionError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Headline numbers of one demo run, also written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub seed: u64,
    pub messages: usize,
    pub excluded: usize,
    pub variants: usize,
    pub run_failures: usize,
    pub best_variant: Option<String>,
    pub best_total_kappa: Option<f64>,
    pub disagreements: usize,
    pub triage: BTreeMap<String, usize>,
    pub needs_discussion: usize,
    pub proposals_ratified: usize,
    pub expanded_codebook_version: u32,
    pub revalidation_kappa: Kappa,
    pub autonomous_themes: usize,
    pub autonomous_codes: usize,
    pub autonomous_duplicates: usize,
    pub collaborative_ratings: RatingMeans,
    pub autonomous_ratings: RatingMeans,
    /// Report file -> sha256 of its contents, excluding this summary.
    pub files: BTreeMap<String, String>,
}

struct Out {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl Out {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), PipelineError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Invalid(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

fn demo_cfg() -> ModelConfig {
    ModelConfig { backend: "mock".into(), backoff_ms: 0, ..Default::default() }
}

pub const DEMO_CODERS: [&str; 3] = ["coder-1", "coder-2", "coder-3"];

/// Runs the demo with seed `seed` and writes every report under `out_dir`. The output
/// depends only on the seed.
pub fn run_demo(seed: u64, out_dir: &Path) -> Result<DemoSummary, PipelineError> {
    let fx: DemoFixture = fixtures::demo_fixture(seed);
    let mut out = Out { dir: out_dir.to_path_buf(), files: BTreeMap::new() };
    fs::create_dir_all(out_dir)?;
    let cfg = demo_cfg();
    let base = fixtures::attribution_codebook();
    let expanded_reference = fixtures::expanded_codebook();
    let ctx = fixtures::prompt_context();

    // corpus
    let report = ingest_messages(Cursor::new(fx.jsonl.as_bytes()), &fixtures::attribution_set(), &IngestConfig::default())?;
    if !report.malformed.is_empty() {
        return Err(PipelineError::Invalid(format!("{} malformed demo lines", report.malformed.len())));
    }
    let corpus = report.corpus;
    let eligible: Vec<&Message> = corpus.eligible().collect();
    let eligible_ids = corpus.eligible_ids();
    out.json("corpus.json", &corpus)?;
    let human: Vec<_> = fx.human.iter().filter(|a| eligible_ids.contains(&a.message_id)).cloned().collect();

    // deductive runs
    let grid = enumerate_variants(&GridConfig::default());
    let mut grid_csv = Vec::new();
    write_grid_csv(&mut grid_csv, &grid)?;
    out.write("grid.csv", &grid_csv)?;
    let (gateway, _) = Gateway::mock(fx.coding_mock.clone());
    let runs: Vec<VariantRun> = grid.iter().map(|v| run_variant(&gateway, &cfg, v, &base, &ctx, &eligible)).collect();
    let mut run_failures = 0;
    for run in &runs {
        run_failures += run.failures.len();
        out.json(&format!("runs/{}.json", run.variant_id), run)?;
    }
    let variants: BTreeMap<String, Vec<_>> = runs.iter().map(|r| (r.variant_id.clone(), r.assignments.clone())).collect();

    let opts = AgreementOptions {
        view: LabelView::TargetRelative,
        ci: Some(CiConfig { seed, ..Default::default() }),
    };
    let agreement = agreement_matrix(&human, &variants, &corpus, &base, &opts)?;
    let mut csv_bytes = Vec::new();
    agreement.write_csv(&mut csv_bytes)?;
    out.write("agreement.csv", &csv_bytes)?;
    out.json("agreement.json", &agreement)?;
    let best = agreement
        .variants
        .iter()
        .filter_map(|v| agreement.total(v).and_then(Kappa::value).map(|k| (v.clone(), k)))
        .fold(None::<(String, f64)>, |acc, (v, k)| match acc {
            Some((_, best)) if best >= k => acc,
            _ => Some((v, k)),
        });

    let targets: BTreeMap<MessageId, String> = eligible.iter().map(|m| (m.id.clone(), m.elicited_by.clone())).collect();
    let baseline = base.non_stigmatizing().map(|c| c.id.clone()).expect("bundled codebook has a baseline");
    let positional = positional_frequency(&variants, &grid, &targets, &baseline)?;
    let chi = chi_square_independence(&positional.table);
    out.json("primacy.json", &serde_json::json!({
        "table": positional,
        "chi_square": chi.as_ref().ok(),
        "error": chi.as_ref().err().map(|e| e.to_string()),
    }))?;

    // triage
    let selection = select_disagreements(&human, &variants, SelectionRule::AllDiffer)?;
    let mut set = DisagreementSet::new(selection.records, DEMO_CODERS);
    set.attach_messages(&corpus);
    let ids: Vec<String> = set.records.iter().map(|r| r.message_id.to_string()).collect();
    for id in &ids {
        let votes = fx
            .triage_plan
            .get(&MessageId::new(id.clone()))
            .cloned()
            .unwrap_or_else(|| vec![TriageCategory::LlmError; DEMO_CODERS.len()]);
        for (coder, category) in DEMO_CODERS.iter().zip(votes) {
            set.record_triage(id, coder, category, None)?;
        }
        if set.get(id).is_some_and(|r| r.triage == TriageState::NewCode) {
            set.set_tags(id, BTreeSet::from(["over-conjecture".to_string()]))?;
        }
    }
    let summary = triage_summary(&set.records);
    let directional = directional_analysis(&set.records, &base);
    let dispersion = variant_dispersion(&variants);
    out.write("disagreements.json", format!("{}\n", set.to_json()).as_bytes())?;
    let mut roster = Vec::new();
    set.write_roster_csv(&mut roster)?;
    out.write("roster.csv", &roster)?;
    out.json("triage_summary.json", &summary)?;
    out.json("directional.json", &directional)?;
    out.json("dispersion.json", &serde_json::json!({
        "messages": dispersion.messages,
        "histogram": dispersion.histogram,
        "at_least_3": dispersion.at_least(3),
    }))?;

    // inductive board
    let mut board = Board::default();
    let mut by_code: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for r in set.records.iter().filter(|r| r.triage == TriageState::NewCode) {
        if let Some(plan) = fx.emergent_plan.get(&r.message_id) {
            by_code.entry(plan.draft_name.clone()).or_default().push(r.message_id.as_str());
        }
    }
    let mut proposal_ids = Vec::new();
    for (draft, messages) in &by_code {
        let p = board.propose_code(&set, messages, draft, "Draft code from triage.", DEMO_CODERS[0])?;
        proposal_ids.push(p.id.clone());
    }
    let (naming, _) = Gateway::mock(fx.board_mock.clone());
    let pid_refs: Vec<&str> = proposal_ids.iter().map(String::as_str).collect();
    let (suggestions, failed) = board.suggest_names(&naming, &cfg, &pid_refs)?;
    if let Some(f) = failed.first() {
        return Err(PipelineError::Invalid(format!("naming failed for {}: {}", f.proposal_id, f.error)));
    }
    for s in &suggestions {
        board.adopt_suggestion(&s.id, None, DEMO_CODERS[1])?;
    }
    let mut code_pairs = Vec::new();
    for pid in &proposal_ids {
        let code_id = board.proposal(pid)?.code_id();
        let reference = expanded_reference
            .get(code_id.as_str())
            .filter(|c| c.kind == CodeKind::Emergent)
            .ok_or_else(|| PipelineError::Invalid(format!("no reference code for {code_id}")))?;
        board.set_details(pid, reference.keywords.clone(), reference.rules.clone())?;
        board.set_status(pid, ProposalStatus::Ratified)?;
        code_pairs.push((pid.clone(), code_id));
    }
    if code_pairs.len() >= 2 {
        let (grouping_spec, dimension_of) = fixtures::demo_grouping(&expanded_reference, &code_pairs);
        let (grouping, _) = Gateway::mock(grouping_spec);
        let grouping_cfg = ModelConfig { temperature: 0.5, ..cfg.clone() };
        board.groups = board.suggest_groupings(&grouping, &grouping_cfg, &pid_refs, &[])?;
        let spec = board.hierarchy_from_groups(&dimension_of)?;
        board.apply_hierarchy(&spec)?;
    }
    out.json("board.json", &board)?;

    let known: BTreeSet<MessageId> = set.records.iter().map(|r| r.message_id.clone()).collect();
    let mut merged = merge_expansion(&base, &board.ratified(), &known)?;
    merged.themes = board.themes.clone();
    let validation = validate_codebook(&merged);
    if !validation.is_valid() {
        return Err(PipelineError::Invalid(format!("expanded codebook invalid: {:?}", validation)));
    }
    out.write("codebook_expanded.json", format!("{}\n", merged.to_json()).as_bytes())?;
    out.json("codebook_diff.json", &diff_codebooks(&base, &merged)?)?;

    let reval_human: Vec<_> =
        fx.revalidation_human.iter().filter(|a| eligible_ids.contains(&a.message_id)).cloned().collect();
    let (reval_gateway, _) = Gateway::mock(fx.revalidation_mock.clone());
    let reval = revalidate(&merged, &eligible, &reval_human, &reval_gateway, &cfg, &ctx, &fixtures::all_code_full_ladder())?;
    out.json("revalidation.json", &reval)?;

    // LLM-only baseline and ratings
    let (auto_gateway, _) = Gateway::mock(fixtures::autonomous_baseline_mock());
    let draft = autonomous_induction(&eligible, &auto_gateway, &cfg, 0.7)?;
    out.json("autonomous_draft.json", &draft)?;
    let collaborative_ratings = rate_codebook(&fixtures::collaborative_ratings())?;
    let autonomous_ratings = rate_codebook(&fixtures::autonomous_ratings())?;
    out.json("ratings.json", &serde_json::json!({
        "collaborative": collaborative_ratings,
        "autonomous": autonomous_ratings,
    }))?;

    let summary = DemoSummary {
        seed,
        messages: eligible.len(),
        excluded: corpus.exclusions.len(),
        variants: runs.len(),
        run_failures,
        best_variant: best.as_ref().map(|b| b.0.clone()),
        best_total_kappa: best.map(|b| b.1),
        disagreements: set.records.len(),
        triage: summary.categories.iter().map(|c| (c.state.to_string(), c.count)).collect(),
        needs_discussion: summary.needs_discussion,
        proposals_ratified: board.ratified().len(),
        expanded_codebook_version: merged.version,
        revalidation_kappa: reval.kappa,
        autonomous_themes: draft.theme_count(),
        autonomous_codes: draft.code_count(),
        autonomous_duplicates: draft.duplicate_count(),
        collaborative_ratings,
        autonomous_ratings,
        files: out.files.clone(),
    };
    out.json("summary.json", &summary)?;
    Ok(summary)
}
