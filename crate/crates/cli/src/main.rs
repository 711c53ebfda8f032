//! `qcode` command-line tool.
//!
//! Every command reads and writes plain files (JSON, JSONL, CSV) and prints a JSON
//! result on stdout. Model access goes through `--backend`, or the `[backend]` table of
//! the config file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qcode_core::board::{autonomous_induction, revalidate, Board};
use qcode_core::codebook::{diff_codebooks, merge_expansion, validate_codebook};
use qcode_core::corpus::{
    ingest_messages, read_assignments_csv, sample_stratified, word_stats, IngestConfig, Stratum, StratumSelector,
};
use qcode_core::gateway::{coder_id_for, run_variant, sha256_hex, BackendSpec, HttpConfig, MockSpec, ModelConfig, VariantRun};
use qcode_core::prompt::{enumerate_variants, write_grid_csv, GridConfig, PromptContext, PromptVariant};
use qcode_core::stats::{
    agreement_matrix, chi_square_independence, pairwise_kappa, positional_frequency, AgreementOptions, CiConfig, LabelView,
};
use qcode_core::triage::{
    directional_analysis, select_disagreements, triage_summary, DisagreementSet, SelectionRule, TriageCategory,
};
use qcode_core::{fixtures, Assignment, Codebook, Corpus, Message, MessageId};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "qcode", version, about = "Human-LLM collaborative qualitative coding")]
struct Cli {
    /// TOML file with `[model]` and `[backend]` tables.
    #[arg(long, global = true, env = "QCODE_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    #[command(subcommand)]
    Codebook(CodebookCmd),
    #[command(subcommand)]
    Corpus(CorpusCmd),
    #[command(subcommand)]
    Grid(GridCmd),
    #[command(subcommand)]
    Run(RunCmd),
    #[command(subcommand)]
    Stats(StatsCmd),
    #[command(subcommand)]
    Triage(TriageCmd),
    #[command(subcommand)]
    Board(BoardCmd),
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Serve the HTTP API over a project store directory.
    Serve {
        #[arg(long, default_value = "qcode-data")]
        root: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Subcommand)]
enum CodebookCmd {
    /// Check a codebook file; exits non-zero when it has errors.
    Validate { file: PathBuf },
    Diff { from: PathBuf, to: PathBuf },
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Ingest JSONL messages into a corpus file.
    Ingest {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Codebook whose attribution codes define the legal tags (default: bundled).
        #[arg(long)]
        codebook: Option<PathBuf>,
        #[arg(long)]
        word_floor: Option<usize>,
    },
    Stats { corpus: PathBuf },
    /// Stratified sample; strata are `<selector>=<n>`, e.g. `attribution:fear=5`.
    Sample {
        corpus: PathBuf,
        #[arg(long = "stratum", required = true)]
        strata: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum GridCmd {
    Export {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Mock reply script (JSON).
    #[arg(long)]
    mock_spec: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    votes: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

#[derive(Subcommand)]
enum RunCmd {
    /// Code a corpus with one or more prompt variants.
    Code {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Variant id, or `all` for the full grid. Repeatable.
        #[arg(long = "variant", default_value = "all")]
        variants: Vec<String>,
        #[arg(long)]
        prompt_context: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
    },
}

#[derive(Subcommand)]
enum StatsCmd {
    /// Cohen's kappa between two assignment files (CSV or JSON).
    Kappa { a: PathBuf, b: PathBuf },
    /// Positional frequency table and chi-square test over a run directory.
    Primacy {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
    },
    /// Variant by attribution kappa matrix.
    Matrix {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        human: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long, value_enum, default_value_t = View::TargetRelative)]
        view: View,
        #[arg(long)]
        ci: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum View {
    Raw,
    TargetRelative,
}

#[derive(Subcommand)]
enum TriageCmd {
    /// Build a disagreement set from a run directory.
    Select {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        human: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "all-differ")]
        rule: String,
        #[arg(long, value_delimiter = ',', required = true)]
        coders: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    Vote {
        #[arg(long)]
        set: PathBuf,
        #[arg(long)]
        message: String,
        #[arg(long)]
        coder: String,
        /// human-error, llm-error or new-code.
        #[arg(long)]
        category: String,
        #[arg(long)]
        notes: Option<String>,
    },
    Summary {
        #[arg(long)]
        set: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
    },
}

#[derive(Subcommand)]
enum BoardCmd {
    /// Add a draft code for some disagreement messages.
    Propose {
        #[arg(long)]
        board: PathBuf,
        #[arg(long)]
        set: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        messages: Vec<String>,
        #[arg(long)]
        name: String,
        #[arg(long, default_value = "")]
        description: String,
        #[arg(long)]
        coder: String,
    },
    /// Ask the model for names of draft codes (all drafts when none are given).
    Suggest {
        #[arg(long)]
        board: PathBuf,
        #[arg(long, value_delimiter = ',')]
        proposals: Vec<String>,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Merge ratified proposals into a new codebook version.
    Merge {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        board: PathBuf,
        #[arg(long)]
        set: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-code the human-coded messages with a codebook and report kappa.
    Revalidate {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        human: PathBuf,
        #[arg(long, default_value = "L5")]
        variant: String,
        #[arg(long)]
        prompt_context: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Model-only codebook draft over the corpus.
    Baseline {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        grouping_temperature: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Run the bundled synthetic study end to end with the mock backend.
    Demo {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    backend: Option<BackendSpec>,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn model_backend(cfg: &Config, args: &BackendArgs) -> Result<(ModelConfig, BackendSpec)> {
    let mut model = cfg.model.clone().unwrap_or_default();
    if let Some(m) = &args.model {
        model.model = m.clone();
    }
    if let Some(t) = args.temperature {
        model.temperature = t;
    }
    if let Some(v) = args.votes {
        model.votes = v;
    }
    let backend = match args.backend {
        Some(BackendKind::Mock) => BackendSpec::Mock { spec: read_mock(args.mock_spec.as_deref())? },
        Some(BackendKind::Http) => {
            let endpoint = args.endpoint.clone().ok_or_else(|| anyhow!("--backend http needs --endpoint"))?;
            let mut http: HttpConfig = serde_json::from_value(json!({ "endpoint": endpoint }))?;
            if let Some(BackendSpec::Http(base)) = &cfg.backend {
                http.api_key_env = base.api_key_env.clone();
                http.timeout_secs = base.timeout_secs;
            }
            BackendSpec::Http(http)
        }
        None => match (&cfg.backend, &args.mock_spec) {
            (Some(b), None) => b.clone(),
            (_, spec) => BackendSpec::Mock { spec: read_mock(spec.as_deref())? },
        },
    };
    model.validate().map_err(|e| anyhow!("{e}"))?;
    Ok((model, backend))
}

fn read_mock(path: Option<&Path>) -> Result<MockSpec> {
    match path {
        None => Ok(MockSpec::default()),
        Some(p) => MockSpec::from_json(&read(p)?).with_context(|| format!("parsing mock spec {}", p.display())),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn codebook(path: &Path) -> Result<Codebook> {
    Codebook::from_json(&read(path)?).with_context(|| format!("parsing codebook {}", path.display()))
}

fn corpus(path: &Path) -> Result<Corpus> {
    Corpus::from_json(&read(path)?).with_context(|| format!("parsing corpus {}", path.display()))
}

fn prompt_context(path: Option<&Path>) -> Result<PromptContext> {
    match path {
        Some(p) => read_json(p),
        None => Ok(fixtures::prompt_context()),
    }
}

/// Assignments from CSV (by extension) or a JSON array.
fn assignments(path: &Path) -> Result<Vec<Assignment>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        read_assignments_csv(f).with_context(|| format!("parsing {}", path.display()))
    } else {
        read_json(path)
    }
}

/// Variant runs stored under `dir/<variant>/assignments.json`.
fn run_dir(dir: &Path) -> Result<BTreeMap<String, Vec<Assignment>>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading run directory {}", dir.display()))? {
        let path = entry?.path().join("assignments.json");
        if path.is_file() {
            let run: VariantRun = read_json(&path)?;
            out.insert(run.variant_id.clone(), run.assignments);
        }
    }
    if out.is_empty() {
        bail!("no variant runs under {}", dir.display());
    }
    Ok(out)
}

fn select_variants(requested: &[String]) -> Result<Vec<PromptVariant>> {
    let grid = enumerate_variants(&GridConfig::default());
    if requested.iter().any(|v| v == "all") {
        return Ok(grid);
    }
    requested
        .iter()
        .map(|id| grid.iter().find(|v| &v.id == id).cloned().ok_or_else(|| anyhow!("variant {id} is not in the grid")))
        .collect()
}

fn parse_view(v: View) -> LabelView {
    match v {
        View::Raw => LabelView::Raw,
        View::TargetRelative => LabelView::TargetRelative,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Codebook(cmd) => codebook_cmd(cmd),
        Command::Corpus(cmd) => corpus_cmd(cmd),
        Command::Grid(GridCmd::Export { out, format }) => {
            let grid = enumerate_variants(&GridConfig::default());
            let mut buf = Vec::new();
            match format {
                Format::Csv => write_grid_csv(&mut buf, &grid)?,
                Format::Json => {
                    serde_json::to_writer_pretty(&mut buf, &grid)?;
                    buf.push(b'\n');
                }
            }
            match out {
                Some(p) => fs::write(&p, buf).with_context(|| format!("writing {}", p.display()))?,
                None => std::io::stdout().write_all(&buf)?,
            }
            Ok(())
        }
        Command::Run(RunCmd::Code { codebook: cb, corpus: cp, variants, prompt_context: pc, out, backend }) => {
            let (model, spec) = model_backend(&cfg, &backend)?;
            run_code(&codebook(&cb)?, &corpus(&cp)?, &select_variants(&variants)?, &prompt_context(pc.as_deref())?, &model, &spec, &out)
        }
        Command::Stats(cmd) => stats_cmd(cmd),
        Command::Triage(cmd) => triage_cmd(cmd),
        Command::Board(cmd) => board_cmd(cmd, &cfg),
        Command::Pipeline(PipelineCmd::Demo { seed, out }) => {
            let summary = qcode_core::pipeline::run_demo(seed, &out)?;
            print(&summary)
        }
        Command::Serve { root, addr } => {
            let rt = tokio::runtime::Runtime::new()?;
            eprintln!("serving {} on http://{addr}/v1", root.display());
            rt.block_on(qcode_service::serve(root, addr))?;
            Ok(())
        }
    }
}

fn codebook_cmd(cmd: CodebookCmd) -> Result<()> {
    match cmd {
        CodebookCmd::Validate { file } => {
            let report = validate_codebook(&codebook(&file)?);
            print(&report)?;
            if !report.is_valid() {
                bail!("{} is not a valid codebook", file.display());
            }
            Ok(())
        }
        CodebookCmd::Diff { from, to } => print(&diff_codebooks(&codebook(&from)?, &codebook(&to)?)?),
    }
}

fn corpus_cmd(cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::Ingest { input, out, codebook: cb, word_floor } => {
            let tags = match cb {
                Some(p) => codebook(&p)?.attribution_ids(),
                None => fixtures::attribution_set(),
            };
            let mut ingest = IngestConfig::default();
            if let Some(w) = word_floor {
                ingest.word_floor = w;
            }
            let f = fs::File::open(&input).with_context(|| format!("opening {}", input.display()))?;
            let report = ingest_messages(BufReader::new(f), &tags, &ingest)?;
            write_json(&out, &report.corpus)?;
            print(&json!({
                "messages": report.corpus.messages.len(),
                "excluded": report.corpus.exclusions.len(),
                "malformed": report.malformed,
            }))
        }
        CorpusCmd::Stats { corpus: p } => {
            let c = corpus(&p)?;
            print(&json!({ "messages": c.messages.len(), "excluded": c.exclusions.len(), "words": word_stats(&c) }))
        }
        CorpusCmd::Sample { corpus: p, strata, seed } => {
            let strata = strata
                .iter()
                .map(|s| {
                    let (sel, n) = s.rsplit_once('=').ok_or_else(|| anyhow!("stratum {s:?} must look like <selector>=<n>"))?;
                    Ok(Stratum { selector: StratumSelector::parse(sel)?, n: n.parse().with_context(|| format!("stratum size in {s:?}"))? })
                })
                .collect::<Result<Vec<_>>>()?;
            print(&sample_stratified(&corpus(&p)?, &strata, seed)?)
        }
    }
}

/// Per-variant manifest written next to each variant's assignments.
#[derive(Serialize)]
struct VariantManifest<'a> {
    variant: &'a PromptVariant,
    codebook_version: u32,
    model: &'a ModelConfig,
    backend: &'a str,
    coder_id: String,
    messages: usize,
    assignments: usize,
    failures: usize,
    assignments_sha256: String,
}

fn run_code(
    cb: &Codebook,
    corpus: &Corpus,
    variants: &[PromptVariant],
    ctx: &PromptContext,
    model: &ModelConfig,
    spec: &BackendSpec,
    out: &Path,
) -> Result<()> {
    let gateway = spec.gateway()?;
    let messages: Vec<&Message> = corpus.eligible().collect();
    let mut summary = Vec::new();
    for variant in variants {
        let run = run_variant(&gateway, model, variant, cb, ctx, &messages);
        let dir = out.join(&variant.id);
        let body = serde_json::to_string_pretty(&run)? + "\n";
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("assignments.json"), &body)?;
        let manifest = VariantManifest {
            variant,
            codebook_version: cb.version,
            model,
            backend: gateway.backend_id(),
            coder_id: coder_id_for(&variant.id),
            messages: messages.len(),
            assignments: run.assignments.len(),
            failures: run.failures.len(),
            assignments_sha256: sha256_hex(body.as_bytes()),
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        summary.push(json!({ "variant": variant.id, "assignments": run.assignments.len(), "failures": run.failures.len() }));
    }
    print(&json!({ "out": out, "variants": summary }))
}

fn stats_cmd(cmd: StatsCmd) -> Result<()> {
    match cmd {
        StatsCmd::Kappa { a, b } => {
            let (a, b) = (assignments(&a)?, assignments(&b)?);
            if a.is_empty() || b.is_empty() {
                bail!("kappa needs at least one assignment in each input");
            }
            let (kappa, n) = pairwise_kappa(&a, &b)?;
            print(&json!({ "n": n, "kappa": kappa }))
        }
        StatsCmd::Primacy { run, corpus: cp, codebook: cbp } => {
            let cb = codebook(&cbp)?;
            let baseline = cb
                .non_stigmatizing()
                .map(|c| c.id.clone())
                .ok_or_else(|| anyhow!("codebook has no non-stigmatizing code"))?;
            let targets: BTreeMap<MessageId, String> =
                corpus(&cp)?.messages.into_iter().map(|m| (m.id, m.elicited_by)).collect();
            let grid = enumerate_variants(&GridConfig::default());
            let table = positional_frequency(&run_dir(&run)?, &grid, &targets, &baseline)?;
            let chi = chi_square_independence(&table.table);
            match chi {
                Ok(chi) => print(&json!({ "table": table, "chi_square": chi })),
                Err(e) => print(&json!({ "table": table, "chi_square": null, "error": e.to_string() })),
            }
        }
        StatsCmd::Matrix { run, human, corpus: cp, codebook: cbp, view, ci, seed } => {
            let opts = AgreementOptions {
                view: parse_view(view),
                ci: ci.then(|| CiConfig { seed, ..CiConfig::default() }),
            };
            let report = agreement_matrix(&assignments(&human)?, &run_dir(&run)?, &corpus(&cp)?, &codebook(&cbp)?, &opts)?;
            print(&report)
        }
    }
}

fn triage_cmd(cmd: TriageCmd) -> Result<()> {
    match cmd {
        TriageCmd::Select { run, human, corpus: cp, rule, coders, out } => {
            let rule = SelectionRule::parse(&rule)?;
            let selection = select_disagreements(&assignments(&human)?, &run_dir(&run)?, rule)?;
            let mut set = DisagreementSet::new(selection.records, coders);
            set.attach_messages(&corpus(&cp)?);
            write_json(&out, &set)?;
            print(&json!({ "examined": selection.examined, "records": set.records.len(), "coverage_gaps": selection.coverage_gaps }))
        }
        TriageCmd::Vote { set, message, coder, category, notes } => {
            let category: TriageCategory = serde_json::from_value(Value::String(category.clone()))
                .map_err(|_| anyhow!("unknown category {category:?}"))?;
            let mut s = DisagreementSet::from_json(&read(&set)?)?;
            let record = s.record_triage(&message, &coder, category, notes.as_deref())?.clone();
            write_json(&set, &s)?;
            print(&record)
        }
        TriageCmd::Summary { set, codebook: cbp } => {
            let s = DisagreementSet::from_json(&read(&set)?)?;
            let cb = codebook(&cbp)?;
            print(&json!({ "triage": triage_summary(&s.records), "directional": directional_analysis(&s.records, &cb) }))
        }
    }
}

fn load_board(path: &Path) -> Result<Board> {
    if path.exists() {
        read_json(path)
    } else {
        Ok(Board::default())
    }
}

fn board_cmd(cmd: BoardCmd, cfg: &Config) -> Result<()> {
    match cmd {
        BoardCmd::Propose { board, set, messages, name, description, coder } => {
            let s = DisagreementSet::from_json(&read(&set)?)?;
            let mut b = load_board(&board)?;
            let ids: Vec<&str> = messages.iter().map(String::as_str).collect();
            let p = b.propose_code(&s, &ids, &name, &description, &coder)?.clone();
            write_json(&board, &b)?;
            print(&p)
        }
        BoardCmd::Suggest { board, proposals, backend } => {
            let (model, spec) = model_backend(cfg, &backend)?;
            let gateway = spec.gateway()?;
            let mut b = load_board(&board)?;
            let ids: Vec<String> = if proposals.is_empty() {
                b.proposals.iter().filter(|p| p.status == qcode_core::board::ProposalStatus::Draft).map(|p| p.id.clone()).collect()
            } else {
                proposals
            };
            let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
            let (made, failed) = b.suggest_names(&gateway, &model, &ids)?;
            write_json(&board, &b)?;
            let failed: Vec<Value> =
                failed.iter().map(|f| json!({ "proposal_id": f.proposal_id, "error": f.error.to_string() })).collect();
            print(&json!({ "suggestions": made, "failed": failed }))
        }
        BoardCmd::Merge { codebook: cbp, board, set, out } => {
            let base = codebook(&cbp)?;
            let b = load_board(&board)?;
            let s = DisagreementSet::from_json(&read(&set)?)?;
            let known: BTreeSet<MessageId> = s.records.iter().map(|r| r.message_id.clone()).collect();
            let mut merged = merge_expansion(&base, &b.ratified(), &known)?;
            if !b.themes.is_empty() {
                merged.themes = b.themes.clone();
            }
            let report = validate_codebook(&merged);
            if !report.is_valid() {
                print(&report)?;
                bail!("merged codebook failed validation");
            }
            let diff = diff_codebooks(&base, &merged)?;
            write_json(&out, &merged)?;
            print(&json!({ "version": merged.version, "codes": merged.codes.len(), "diff": diff }))
        }
        BoardCmd::Revalidate { codebook: cbp, corpus: cp, human, variant, prompt_context: pc, backend } => {
            let (model, spec) = model_backend(cfg, &backend)?;
            let gateway = spec.gateway()?;
            let cb = codebook(&cbp)?;
            let c = corpus(&cp)?;
            let human = assignments(&human)?;
            let variant = select_variants(&[variant])?.remove(0);
            let coded: BTreeSet<&MessageId> = human.iter().map(|a| &a.message_id).collect();
            let messages: Vec<&Message> = c.eligible().filter(|m| coded.contains(&m.id)).collect();
            let result = revalidate(&cb, &messages, &human, &gateway, &model, &prompt_context(pc.as_deref())?, &variant)?;
            print(&result)
        }
        BoardCmd::Baseline { corpus: cp, grouping_temperature, out, backend } => {
            let (model, spec) = model_backend(cfg, &backend)?;
            let gateway = spec.gateway()?;
            let c = corpus(&cp)?;
            let messages: Vec<&Message> = c.eligible().collect();
            let draft = autonomous_induction(&messages, &gateway, &model, grouping_temperature)?;
            if let Some(p) = out {
                write_json(&p, &draft)?;
            }
            print(&json!({
                "themes": draft.theme_count(),
                "codes": draft.code_count(),
                "duplicates": draft.duplicate_count(),
                "duplicate_rate": draft.duplicate_rate(),
            }))
        }
    }
}
