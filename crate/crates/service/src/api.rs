//! `/v1` routes. Mutating routes require an `X-Request-Id` header; project routes
//! require `Authorization: Bearer <token>`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Cursor;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post, put};
use axum::{Json, Router};
use qcode_core::board::{
    autonomous_induction, revalidate, Board, CodeProposal, Dimension, Group, GroupingConstraint, HierarchySpec,
    ProposalStatus, MIN_GROUPING_TEMPERATURE,
};
use qcode_core::codebook::{diff_codebooks, merge_expansion, validate_codebook};
use qcode_core::corpus::{check_unique, ingest_messages, read_assignments_csv, word_stats, IngestConfig};
use qcode_core::gateway::{BackendSpec, ModelConfig};
use qcode_core::prompt::{enumerate_variants, GridConfig, PromptContext};
use qcode_core::stats::{agreement_matrix, chi_square_independence, positional_frequency, AgreementOptions, CiConfig, LabelView};
use qcode_core::triage::{
    directional_analysis, select_disagreements, triage_summary, variant_dispersion, ConsensusPolicy, DisagreementSet,
    SelectionRule, TriageCategory, TriageState,
};
use qcode_core::{Assignment, Codebook, Message, MessageId};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::ApiError;
use crate::store::{Job, JobStatus, Reply, RunRequest, Store, Tx};

type Shared = Arc<Store>;
type ApiResult = Result<Response, ApiError>;

pub fn router(store: Shared) -> Router {
    let project = Router::new()
        .route("/", get(get_project).delete(archive_project))
        .route("/events", get(get_events))
        .route("/corpus", post(upload_corpus).get(get_corpus))
        .route("/corpus/stats", get(corpus_stats))
        .route("/human-codes", put(put_human_codes).get(get_human_codes))
        .route("/prompt-context", put(put_prompt_context).get(get_prompt_context))
        .route("/codebooks", post(publish_codebook).get(list_codebooks))
        .route("/codebooks/{version}", get(get_codebook))
        .route("/codebooks/{version}/diff/{other}", get(codebook_diff))
        .route("/runs", post(launch_run).get(list_runs))
        .route("/runs/{run}", get(get_run))
        .route("/runs/{run}/variants/{variant}", get(get_run_variant))
        .route("/runs/{run}/agreement", get(run_agreement))
        .route("/runs/{run}/dispersion", get(run_dispersion))
        .route("/runs/{run}/primacy", get(run_primacy))
        .route("/disagreements", post(create_disagreements).get(list_disagreements))
        .route("/disagreements/{set}", get(get_queue))
        .route("/disagreements/{set}/summary", get(disagreement_summary))
        .route("/disagreements/{set}/vocabulary", post(add_vocabulary))
        .route("/disagreements/{set}/records/{message}", get(get_record))
        .route("/disagreements/{set}/records/{message}/votes", post(post_vote))
        .route("/disagreements/{set}/records/{message}/tags", put(put_tags))
        .route("/board", get(get_board))
        .route("/board/proposals", post(create_proposal))
        .route("/board/proposals/{proposal}", patch(update_proposal))
        .route("/board/suggestions", post(suggest_names))
        .route("/board/suggestions/{suggestion}/adopt", post(adopt_suggestion))
        .route("/board/suggestions/{suggestion}/reject", post(reject_suggestion))
        .route("/board/groupings", post(suggest_groupings))
        .route("/board/groups", put(put_groups))
        .route("/board/hierarchy", put(put_hierarchy))
        .route("/board/merge", post(merge_board))
        .route("/baseline", post(run_baseline).get(get_baseline))
        .route("/revalidations", post(launch_revalidation).get(list_revalidations))
        .route("/revalidations/{id}", get(get_revalidation));
    Router::new()
        .route("/v1/health", get(|| async { Json(json!({"status": "ok"})) }))
        .route("/v1/grid", get(grid))
        .route("/v1/projects", get(list_projects).post(create_project))
        .nest("/v1/projects/{project}", project)
        .with_state(store)
}

fn bearer(headers: &HeaderMap) -> Option<String> {
    let value = headers.get("authorization")?.to_str().ok()?;
    value.strip_prefix("Bearer ").map(|t| t.trim().to_string())
}

fn request_id(headers: &HeaderMap) -> Result<String, ApiError> {
    headers
        .get("x-request-id")
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|s| !s.is_empty() && s.len() <= 200)
        .map(str::to_string)
        .ok_or_else(|| ApiError::bad_request("mutating requests need an X-Request-Id header").with_code("missing-request-id"))
}

trait WithCode {
    fn with_code(self, code: &str) -> Self;
}

impl WithCode for ApiError {
    fn with_code(mut self, code: &str) -> Self {
        self.code = code.to_string();
        self
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")).with_code("bad-json"))
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("API payloads serialize")
}

fn respond(reply: Reply) -> Response {
    let status = StatusCode::from_u16(reply.status).unwrap_or(StatusCode::OK);
    let mut response = (status, Json(reply.body)).into_response();
    if reply.replayed {
        response.headers_mut().insert("idempotent-replay", HeaderValue::from_static("true"));
    }
    response
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(format!("worker panicked: {e}")))?
}

/// Authorizes, then runs `f` as the project's writer under the request id.
async fn mutation<F>(store: Shared, project: String, headers: HeaderMap, body: Bytes, action: &'static str, f: F) -> Result<Reply, ApiError>
where
    F: FnOnce(&mut Tx<'_>, &[u8]) -> Result<Reply, ApiError> + Send + 'static,
{
    let rid = request_id(&headers)?;
    let token = bearer(&headers);
    blocking(move || {
        store.authorize(&project, token.as_deref())?;
        store.mutate(&project, &rid, action, &body, |tx| f(tx, &body))
    })
    .await
}

async fn reading<F>(store: Shared, project: String, headers: HeaderMap, f: F) -> ApiResult
where
    F: FnOnce(&Tx<'_>) -> Result<Value, ApiError> + Send + 'static,
{
    let token = bearer(&headers);
    let value = blocking(move || {
        store.authorize(&project, token.as_deref())?;
        let tx = store.reader(&project)?;
        f(&tx)
    })
    .await?;
    Ok(Json(value).into_response())
}

async fn grid() -> Json<Value> {
    Json(to_value(&enumerate_variants(&GridConfig::default())))
}

async fn list_projects(State(store): State<Shared>) -> ApiResult {
    let list = blocking(move || store.list_projects()).await?;
    Ok(Json(json!({ "projects": list })).into_response())
}

#[derive(Deserialize)]
struct CreateProject {
    id: String,
    #[serde(default)]
    name: String,
}

async fn create_project(State(store): State<Shared>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let rid = request_id(&headers)?;
    let req: CreateProject = parse(&body)?;
    let reply = blocking(move || store.create_project(&req.id, &req.name, &rid, &body)).await?;
    Ok(respond(reply))
}

async fn get_project(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap) -> ApiResult {
    reading(store, project, headers, |tx| Ok(tx.project.view())).await
}

async fn archive_project(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap) -> ApiResult {
    let reply = mutation(store, project, headers, Bytes::new(), "archive-project", |tx, _| {
        tx.project.archived = true;
        Ok(Reply::ok(tx.project.view()))
    })
    .await?;
    Ok(respond(reply))
}

async fn get_events(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap) -> ApiResult {
    reading(store, project, headers, |tx| {
        let text = std::fs::read_to_string(tx.path("events.log")).unwrap_or_default();
        let events: Vec<Value> = text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect();
        Ok(json!({ "events": events }))
    })
    .await
}

// ---- corpus, human codes, prompt context

async fn upload_corpus(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let reply = mutation(store, project, headers, body, "upload-corpus", |tx, body| {
        if !tx.project.runs.is_empty() {
            return Err(ApiError::conflict("corpus-in-use", "runs already reference the current corpus"));
        }
        let attributions = match tx.project.latest_codebook() {
            Some(v) => tx.codebook(v)?.attribution_ids(),
            None => qcode_core::fixtures::attribution_set(),
        };
        let report = ingest_messages(Cursor::new(body), &attributions, &IngestConfig::default())
            .map_err(|e| ApiError::unprocessable("invalid-corpus", e.to_string()))?;
        tx.write("corpus.json", &report.corpus)?;
        let info = crate::store::CorpusInfo {
            messages: report.corpus.messages.len(),
            excluded: report.corpus.exclusions.len(),
        };
        tx.project.corpus = Some(info.clone());
        Ok(Reply::created(json!({
            "messages": info.messages,
            "excluded": info.excluded,
            "malformed": report.malformed,
        })))
    })
    .await?;
    Ok(respond(reply))
}

async fn get_corpus(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap) -> ApiResult {
    reading(store, project, headers, |tx| Ok(to_value(&tx.corpus()?))).await
}

async fn corpus_stats(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap) -> ApiResult {
    reading(store, project, headers, |tx| {
        let corpus = tx.corpus()?;
        Ok(json!({
            "messages": corpus.messages.len(),
            "excluded": corpus.exclusions.len(),
            "words": word_stats(&corpus),
        }))
    })
    .await
}

async fn put_human_codes(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let is_csv = headers
        .get("content-type")
        .and_then(|v| v.to_str().ok())
        .is_some_and(|c| c.starts_with("text/csv"));
    let reply = mutation(store, project, headers, body, "put-human-codes", move |tx, body| {
        let assignments: Vec<Assignment> = if is_csv {
            read_assignments_csv(body).map_err(|e| ApiError::bad_request(e.to_string()))?
        } else {
            parse(body)?
        };
        check_unique(&assignments).map_err(|e| ApiError::unprocessable("duplicate-assignment", e.to_string()))?;
        let corpus = tx.corpus()?;
        if let Some(a) = assignments.iter().find(|a| corpus.get(a.message_id.as_str()).is_none()) {
            return Err(ApiError::unprocessable("unknown-message", format!("message {} is not in the corpus", a.message_id)));
        }
        tx.write("human.json", &assignments)?;
        tx.project.human_assignments = assignments.len();
        Ok(Reply::ok(json!({ "assignments": assignments.len() })))
    })
    .await?;
    Ok(respond(reply))
}

async fn get_human_codes(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap) -> ApiResult {
    reading(store, project, headers, |tx| Ok(to_value(&tx.human()?))).await
}

async fn put_prompt_context(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let reply = mutation(store, project, headers, body, "put-prompt-context", |tx, body| {
        let ctx: PromptContext = parse(body)?;
        tx.write("prompt_context.json", &ctx)?;
        Ok(Reply::ok(json!({ "attributions": ctx.questions.len() })))
    })
    .await?;
    Ok(respond(reply))
}

async fn get_prompt_context(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap) -> ApiResult {
    reading(store, project, headers, |tx| Ok(to_value(&tx.prompt_context()?))).await
}

// ---- codebooks

fn publish(tx: &mut Tx<'_>, mut cb: Codebook) -> Result<Reply, ApiError> {
    let report = validate_codebook(&cb);
    if !report.is_valid() {
        return Err(ApiError::unprocessable("invalid-codebook", "codebook failed validation").with_details(to_value(&report)));
    }
    let version = tx.project.latest_codebook().unwrap_or(0) + 1;
    cb.version = version;
    tx.write(&format!("codebooks/v{version}.json"), &cb)?;
    tx.project.codebook_versions.push(version);
    Ok(Reply::created(json!({ "version": version, "codes": cb.codes.len() })))
}

async fn publish_codebook(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let reply = mutation(store, project, headers, body, "publish-codebook", |tx, body| {
        let text = std::str::from_utf8(body).map_err(|_| ApiError::bad_request("body is not UTF-8"))?;
        let cb = Codebook::from_json(text).map_err(|e| ApiError::bad_request(e.to_string()).with_code("bad-json"))?;
        publish(tx, cb)
    })
    .await?;
    Ok(respond(reply))
}

async fn list_codebooks(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap) -> ApiResult {
    reading(store, project, headers, |tx| Ok(json!({ "versions": tx.project.codebook_versions }))).await
}

async fn get_codebook(State(store): State<Shared>, Path((project, version)): Path<(String, u32)>, headers: HeaderMap) -> ApiResult {
    reading(store, project, headers, move |tx| Ok(to_value(&tx.codebook(version)?))).await
}

async fn codebook_diff(
    State(store): State<Shared>,
    Path((project, a, b)): Path<(String, u32, u32)>,
    headers: HeaderMap,
) -> ApiResult {
    reading(store, project, headers, move |tx| {
        let diff = diff_codebooks(&tx.codebook(a)?, &tx.codebook(b)?).map_err(|e| ApiError::unprocessable("diff", e.to_string()))?;
        Ok(to_value(&diff))
    })
    .await
}

// ---- runs

fn resolve_variants(requested: &[String]) -> Result<Vec<String>, ApiError> {
    let grid = enumerate_variants(&GridConfig::default());
    if requested.iter().any(|v| v == "all") {
        return Ok(grid.into_iter().map(|v| v.id).collect());
    }
    if requested.is_empty() {
        return Err(ApiError::unprocessable("no-variants", "no variants requested"));
    }
    let mut out = Vec::new();
    for v in &grid {
        if requested.contains(&v.id) {
            out.push(v.id.clone());
        }
    }
    if let Some(unknown) = requested.iter().find(|r| !out.contains(r)) {
        return Err(ApiError::unprocessable("unknown-variant", format!("variant {unknown} is not in the grid")));
    }
    Ok(out)
}

async fn launch_run(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let pid = project.clone();
    let reply = mutation(store.clone(), project, headers, body, "launch-run", |tx, body| {
        let request: RunRequest = parse(body)?;
        tx.codebook(request.codebook_version)?;
        tx.corpus()?;
        request.model.validate().map_err(|e| ApiError::unprocessable("invalid-model", e.to_string()))?;
        if let BackendSpec::Http(cfg) = &request.backend {
            if std::env::var(&cfg.api_key_env).is_err() {
                return Err(ApiError::unprocessable("backend", format!("environment variable {} is not set", cfg.api_key_env)));
            }
        }
        let variants = resolve_variants(&request.variants)?;
        let run_id = tx.project.next_id("run");
        let job = Job { run_id: run_id.clone(), status: JobStatus::Queued, request, variants, completed: Vec::new(), error: None };
        tx.write(&format!("jobs/{run_id}.json"), &job)?;
        Ok(Reply::accepted(json!({ "run_id": run_id, "status": job.status, "variants": job.variants })))
    })
    .await?;
    if !reply.replayed {
        let run_id = reply.body["run_id"].as_str().unwrap_or_default().to_string();
        tokio::task::spawn_blocking(move || {
            let _ = store.execute_run(&pid, &run_id);
        });
    }
    Ok(respond(reply))
}

async fn list_runs(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap) -> ApiResult {
    reading(store, project, headers, |tx| {
        let mut jobs = Vec::new();
        for n in 1..=tx.project.counters.get("run").copied().unwrap_or(0) {
            let job = tx.job(&format!("run-{n}"))?;
            jobs.push(json!({ "run_id": job.run_id, "status": job.status, "completed": job.completed.len(), "variants": job.variants.len() }));
        }
        Ok(json!({ "runs": jobs }))
    })
    .await
}

async fn get_run(State(store): State<Shared>, Path((project, run)): Path<(String, String)>, headers: HeaderMap) -> ApiResult {
    reading(store, project, headers, move |tx| {
        let job = tx.job(&run)?;
        let manifest = if job.status == JobStatus::Done { Some(tx.manifest(&run)?) } else { None };
        Ok(json!({
            "run_id": job.run_id,
            "status": job.status,
            "variants": job.variants,
            "completed": job.completed,
            "error": job.error,
            "manifest": manifest,
        }))
    })
    .await
}

async fn get_run_variant(
    State(store): State<Shared>,
    Path((project, run, variant)): Path<(String, String, String)>,
    headers: HeaderMap,
) -> ApiResult {
    reading(store, project, headers, move |tx| {
        let mut runs = tx.run_variants(&run)?;
        runs.remove(&variant).map(|r| to_value(&r)).ok_or_else(|| ApiError::not_found("variant", &variant))
    })
    .await
}

fn run_assignments(tx: &Tx<'_>, run: &str) -> Result<BTreeMap<String, Vec<Assignment>>, ApiError> {
    Ok(tx.run_variants(run)?.into_iter().map(|(k, v)| (k, v.assignments)).collect())
}

#[derive(Deserialize)]
struct AgreementQuery {
    #[serde(default)]
    view: Option<LabelView>,
    #[serde(default)]
    ci: bool,
    #[serde(default)]
    resamples: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
}

async fn run_agreement(
    State(store): State<Shared>,
    Path((project, run)): Path<(String, String)>,
    Query(q): Query<AgreementQuery>,
    headers: HeaderMap,
) -> ApiResult {
    reading(store, project, headers, move |tx| {
        let manifest = tx.manifest(&run)?;
        let cb = tx.codebook(manifest.codebook_version)?;
        let variants = run_assignments(tx, &run)?;
        let ci = q.ci.then(|| {
            let d = CiConfig::default();
            CiConfig { resamples: q.resamples.unwrap_or(d.resamples), seed: q.seed.unwrap_or(d.seed), ..d }
        });
        let opts = AgreementOptions { view: q.view.unwrap_or(LabelView::TargetRelative), ci };
        let report = agreement_matrix(&tx.human()?, &variants, &tx.corpus()?, &cb, &opts)
            .map_err(|e| ApiError::unprocessable("agreement", e.to_string()))?;
        Ok(to_value(&report))
    })
    .await
}

async fn run_dispersion(State(store): State<Shared>, Path((project, run)): Path<(String, String)>, headers: HeaderMap) -> ApiResult {
    reading(store, project, headers, move |tx| {
        let report = variant_dispersion(&run_assignments(tx, &run)?);
        Ok(json!({ "messages": report.messages, "histogram": report.histogram, "at_least_3": report.at_least(3) }))
    })
    .await
}

async fn run_primacy(State(store): State<Shared>, Path((project, run)): Path<(String, String)>, headers: HeaderMap) -> ApiResult {
    reading(store, project, headers, move |tx| {
        let manifest = tx.manifest(&run)?;
        let cb = tx.codebook(manifest.codebook_version)?;
        let baseline = cb
            .non_stigmatizing()
            .map(|c| c.id.clone())
            .ok_or_else(|| ApiError::unprocessable("no-baseline", "codebook has no non-stigmatizing code"))?;
        let targets: BTreeMap<MessageId, String> =
            tx.corpus()?.messages.into_iter().map(|m| (m.id, m.elicited_by)).collect();
        let grid = enumerate_variants(&GridConfig::default());
        let table = positional_frequency(&run_assignments(tx, &run)?, &grid, &targets, &baseline)
            .map_err(|e| ApiError::unprocessable("primacy", e.to_string()))?;
        let chi = chi_square_independence(&table.table).map_err(|e| ApiError::unprocessable("primacy", e.to_string()))?;
        Ok(json!({ "table": table, "chi_square": chi }))
    })
    .await
}

// ---- disagreements

#[derive(Deserialize)]
struct CreateSet {
    run_id: String,
    #[serde(default = "default_rule")]
    rule: String,
    coders: Vec<String>,
    #[serde(default)]
    policy: ConsensusPolicy,
}

fn default_rule() -> String {
    "all-differ".into()
}

fn load_set(tx: &Tx<'_>, set: &str) -> Result<DisagreementSet, ApiError> {
    tx.read(&format!("disagreements/{set}.json"))?.ok_or_else(|| ApiError::not_found("disagreement-set", set))
}

fn save_set(tx: &Tx<'_>, id: &str, set: &DisagreementSet) -> Result<(), ApiError> {
    tx.write(&format!("disagreements/{id}.json"), set)
}

async fn create_disagreements(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let reply = mutation(store, project, headers, body, "create-disagreement-set", |tx, body| {
        let req: CreateSet = parse(body)?;
        let rule = SelectionRule::parse(&req.rule).map_err(|e| ApiError::unprocessable("invalid-rule", e.to_string()))?;
        if req.coders.is_empty() {
            return Err(ApiError::unprocessable("no-coders", "a disagreement set needs at least one coder"));
        }
        let variants = run_assignments(tx, &req.run_id)?;
        let selection = select_disagreements(&tx.human()?, &variants, rule)
            .map_err(|e| ApiError::unprocessable("selection", e.to_string()))?;
        let mut set = DisagreementSet::new(selection.records, req.coders);
        set.policy = req.policy;
        set.attach_messages(&tx.corpus()?);
        let id = tx.project.next_id("set");
        save_set(tx, &id, &set)?;
        tx.write(&format!("disagreements/{id}.meta.json"), &json!({ "run_id": req.run_id, "rule": rule }))?;
        tx.project.disagreement_sets.push(id.clone());
        Ok(Reply::created(json!({
            "set_id": id,
            "examined": selection.examined,
            "records": set.records.len(),
            "coverage_gaps": selection.coverage_gaps,
        })))
    })
    .await?;
    Ok(respond(reply))
}

async fn list_disagreements(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap) -> ApiResult {
    reading(store, project, headers, |tx| Ok(json!({ "sets": tx.project.disagreement_sets }))).await
}

#[derive(Deserialize)]
struct QueueQuery {
    state: Option<TriageState>,
    attribution: Option<String>,
    tag: Option<String>,
    needs_discussion: Option<bool>,
    /// Records this coder has not voted on yet.
    pending_for: Option<String>,
    #[serde(default)]
    offset: usize,
    limit: Option<usize>,
}

async fn get_queue(
    State(store): State<Shared>,
    Path((project, set)): Path<(String, String)>,
    Query(q): Query<QueueQuery>,
    headers: HeaderMap,
) -> ApiResult {
    reading(store, project, headers, move |tx| {
        let set = load_set(tx, &set)?;
        let matching: Vec<_> = set
            .records
            .iter()
            .filter(|r| q.state.is_none_or(|s| r.triage == s))
            .filter(|r| q.attribution.as_ref().is_none_or(|a| &r.attribution == a))
            .filter(|r| q.tag.as_ref().is_none_or(|t| r.pattern_tags.contains(t)))
            .filter(|r| q.needs_discussion.is_none_or(|d| r.needs_discussion == d))
            .filter(|r| q.pending_for.as_ref().is_none_or(|c| !r.votes.contains_key(c)))
            .collect();
        let total = matching.len();
        let page: Vec<_> = matching.into_iter().skip(q.offset).take(q.limit.unwrap_or(usize::MAX)).collect();
        Ok(json!({ "total": total, "coders": set.coders, "vocabulary": set.vocabulary, "records": page }))
    })
    .await
}

async fn get_record(
    State(store): State<Shared>,
    Path((project, set, message)): Path<(String, String, String)>,
    headers: HeaderMap,
) -> ApiResult {
    reading(store, project, headers, move |tx| {
        let set = load_set(tx, &set)?;
        set.get(&message).map(to_value).ok_or_else(|| ApiError::not_found("record", &message))
    })
    .await
}

#[derive(Deserialize)]
struct Vote {
    coder: String,
    category: TriageCategory,
    #[serde(default)]
    notes: Option<String>,
}

fn triage_error(e: qcode_core::triage::TriageError) -> ApiError {
    use qcode_core::triage::TriageError as E;
    match e {
        E::UnknownRecord(m) => ApiError::not_found("record", m),
        E::UnknownCoder(c) => ApiError::unprocessable("unknown-coder", format!("coder {c} is not registered on this set")),
        E::UnknownTag(t) => ApiError::unprocessable("unknown-tag", format!("tag {t} is not in the vocabulary")),
        other => ApiError::unprocessable("triage", other.to_string()),
    }
}

async fn post_vote(
    State(store): State<Shared>,
    Path((project, set_id, message)): Path<(String, String, String)>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let reply = mutation(store, project, headers, body, "triage-vote", move |tx, body| {
        let vote: Vote = parse(body)?;
        let mut set = load_set(tx, &set_id)?;
        let record = set
            .record_triage(&message, &vote.coder, vote.category, vote.notes.as_deref())
            .map_err(triage_error)?
            .clone();
        save_set(tx, &set_id, &set)?;
        Ok(Reply::ok(to_value(&record)))
    })
    .await?;
    Ok(respond(reply))
}

#[derive(Deserialize)]
struct Tags {
    tags: BTreeSet<String>,
}

async fn put_tags(
    State(store): State<Shared>,
    Path((project, set_id, message)): Path<(String, String, String)>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let reply = mutation(store, project, headers, body, "set-tags", move |tx, body| {
        let tags: Tags = parse(body)?;
        let mut set = load_set(tx, &set_id)?;
        set.set_tags(&message, tags.tags).map_err(triage_error)?;
        save_set(tx, &set_id, &set)?;
        Ok(Reply::ok(to_value(set.get(&message).expect("tagged above"))))
    })
    .await?;
    Ok(respond(reply))
}

#[derive(Deserialize)]
struct VocabularyEntry {
    tag: String,
    description: String,
}

async fn add_vocabulary(
    State(store): State<Shared>,
    Path((project, set_id)): Path<(String, String)>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let reply = mutation(store, project, headers, body, "add-vocabulary", move |tx, body| {
        let entry: VocabularyEntry = parse(body)?;
        if entry.tag.trim().is_empty() {
            return Err(ApiError::unprocessable("empty-tag", "tag must not be empty"));
        }
        let mut set = load_set(tx, &set_id)?;
        set.vocabulary.extend(entry.tag, entry.description);
        save_set(tx, &set_id, &set)?;
        Ok(Reply::ok(to_value(&set.vocabulary)))
    })
    .await?;
    Ok(respond(reply))
}

async fn disagreement_summary(
    State(store): State<Shared>,
    Path((project, set_id)): Path<(String, String)>,
    headers: HeaderMap,
) -> ApiResult {
    reading(store, project, headers, move |tx| {
        let set = load_set(tx, &set_id)?;
        let meta: Value = tx.read(&format!("disagreements/{set_id}.meta.json"))?.unwrap_or(Value::Null);
        let run = meta["run_id"].as_str().unwrap_or_default();
        let cb = tx.codebook(tx.manifest(run)?.codebook_version)?;
        Ok(json!({
            "triage": triage_summary(&set.records),
            "directional": directional_analysis(&set.records, &cb),
        }))
    })
    .await
}

// ---- board

fn load_board(tx: &Tx<'_>) -> Result<Board, ApiError> {
    Ok(tx.read("board.json")?.unwrap_or_default())
}

fn board_error(e: qcode_core::board::BoardError) -> ApiError {
    use qcode_core::board::BoardError as E;
    match e {
        E::UnknownProposal(p) => ApiError::not_found("proposal", p),
        E::UnknownSuggestion(s) => ApiError::not_found("suggestion", s),
        E::SuggestionResolved(s) => ApiError::conflict("suggestion-resolved", format!("suggestion {s} was already resolved")),
        E::Hierarchy(h) => ApiError::unprocessable("hierarchy", h.to_string()),
        E::Gateway(g) => ApiError::new(502, "model-failure", g.to_string()),
        other => ApiError::unprocessable("board", other.to_string()),
    }
}

async fn get_board(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap) -> ApiResult {
    reading(store, project, headers, |tx| Ok(to_value(&load_board(tx)?))).await
}

#[derive(Deserialize)]
struct NewProposal {
    set_id: String,
    message_ids: Vec<String>,
    name: String,
    #[serde(default)]
    description: String,
    coder: String,
}

async fn create_proposal(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let reply = mutation(store, project, headers, body, "create-proposal", |tx, body| {
        let req: NewProposal = parse(body)?;
        let set = load_set(tx, &req.set_id)?;
        let mut board = load_board(tx)?;
        let ids: Vec<&str> = req.message_ids.iter().map(String::as_str).collect();
        let p = board.propose_code(&set, &ids, &req.name, &req.description, &req.coder).map_err(board_error)?.clone();
        tx.write("board.json", &board)?;
        Ok(Reply::created(to_value(&p)))
    })
    .await?;
    Ok(respond(reply))
}

#[derive(Deserialize)]
struct ProposalUpdate {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    description: Option<String>,
    #[serde(default)]
    keywords: Option<Vec<String>>,
    #[serde(default)]
    rules: Option<Vec<String>>,
    #[serde(default)]
    status: Option<ProposalStatus>,
    by: String,
}

async fn update_proposal(
    State(store): State<Shared>,
    Path((project, proposal)): Path<(String, String)>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let reply = mutation(store, project, headers, body, "update-proposal", move |tx, body| {
        let req: ProposalUpdate = parse(body)?;
        let mut board = load_board(tx)?;
        let current: CodeProposal = board.proposal(&proposal).map_err(board_error)?.clone();
        if let Some(name) = &req.name {
            board.rename(&proposal, name, &req.by).map_err(board_error)?;
        }
        if let Some(d) = req.description {
            board.proposals.iter_mut().find(|p| p.id == proposal).expect("exists").description = d;
        }
        if req.keywords.is_some() || req.rules.is_some() {
            board
                .set_details(&proposal, req.keywords.unwrap_or(current.keywords), req.rules.unwrap_or(current.rules))
                .map_err(board_error)?;
        }
        if let Some(status) = req.status {
            board.set_status(&proposal, status).map_err(board_error)?;
        }
        tx.write("board.json", &board)?;
        Ok(Reply::ok(to_value(board.proposal(&proposal).map_err(board_error)?)))
    })
    .await?;
    Ok(respond(reply))
}

#[derive(Deserialize)]
struct ModelCall {
    #[serde(default)]
    proposal_ids: Vec<String>,
    #[serde(default)]
    constraints: Vec<GroupingConstraint>,
    backend: BackendSpec,
    #[serde(default)]
    model: ModelConfig,
}

async fn suggest_names(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let reply = mutation(store, project, headers, body, "suggest-names", |tx, body| {
        let req: ModelCall = parse(body)?;
        let gateway = req.backend.gateway().map_err(|e| ApiError::unprocessable("backend", e.to_string()))?;
        let mut board = load_board(tx)?;
        let ids: Vec<&str> = req.proposal_ids.iter().map(String::as_str).collect();
        let (made, failed) = board.suggest_names(&gateway, &req.model, &ids).map_err(board_error)?;
        tx.write("board.json", &board)?;
        let failed: Vec<Value> =
            failed.iter().map(|f| json!({ "proposal_id": f.proposal_id, "error": f.error.to_string() })).collect();
        Ok(Reply::created(json!({ "suggestions": made, "failed": failed })))
    })
    .await?;
    Ok(respond(reply))
}

#[derive(Deserialize)]
struct Adopt {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    description: Option<String>,
    by: String,
}

async fn adopt_suggestion(
    State(store): State<Shared>,
    Path((project, suggestion)): Path<(String, String)>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let reply = mutation(store, project, headers, body, "adopt-suggestion", move |tx, body| {
        let req: Adopt = parse(body)?;
        let mut board = load_board(tx)?;
        let edited = match (&req.name, &req.description) {
            (None, None) => None,
            (name, description) => {
                let s = board
                    .suggestions
                    .iter()
                    .find(|s| s.id == suggestion)
                    .ok_or_else(|| ApiError::not_found("suggestion", &suggestion))?;
                Some((name.clone().unwrap_or(s.name.clone()), description.clone().unwrap_or(s.description.clone())))
            }
        };
        let p = board
            .adopt_suggestion(&suggestion, edited.as_ref().map(|(n, d)| (n.as_str(), d.as_str())), &req.by)
            .map_err(board_error)?
            .clone();
        tx.write("board.json", &board)?;
        Ok(Reply::ok(to_value(&p)))
    })
    .await?;
    Ok(respond(reply))
}

async fn reject_suggestion(
    State(store): State<Shared>,
    Path((project, suggestion)): Path<(String, String)>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let reply = mutation(store, project, headers, body, "reject-suggestion", move |tx, _| {
        let mut board = load_board(tx)?;
        board.reject_suggestion(&suggestion).map_err(board_error)?;
        tx.write("board.json", &board)?;
        Ok(Reply::ok(json!({ "id": suggestion, "status": "rejected" })))
    })
    .await?;
    Ok(respond(reply))
}

/// Advisory: returns the model's grouping without storing it.
async fn suggest_groupings(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let token = bearer(&headers);
    let value = blocking(move || {
        store.authorize(&project, token.as_deref())?;
        let tx = store.reader(&project)?;
        let req: ModelCall = parse(&body)?;
        let gateway = req.backend.gateway().map_err(|e| ApiError::unprocessable("backend", e.to_string()))?;
        let board = load_board(&tx)?;
        let ids: Vec<&str> = req.proposal_ids.iter().map(String::as_str).collect();
        let cfg = ModelConfig { temperature: req.model.temperature.max(MIN_GROUPING_TEMPERATURE), ..req.model };
        let groups = board.suggest_groupings(&gateway, &cfg, &ids, &req.constraints).map_err(board_error)?;
        Ok(json!({ "groups": groups }))
    })
    .await?;
    Ok(Json(value).into_response())
}

async fn put_groups(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let reply = mutation(store, project, headers, body, "put-groups", |tx, body| {
        let groups: Vec<Group> = parse(body)?;
        let mut board = load_board(tx)?;
        let mut seen = BTreeSet::new();
        for g in &groups {
            for m in &g.members {
                board.proposal(m).map_err(board_error)?;
                if !seen.insert(m.clone()) {
                    return Err(ApiError::unprocessable("not-partition", format!("{m} appears in more than one group")));
                }
            }
        }
        board.groups = groups;
        tx.write("board.json", &board)?;
        Ok(Reply::ok(json!({ "groups": board.groups })))
    })
    .await?;
    Ok(respond(reply))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum HierarchyInput {
    Spec { spec: HierarchySpec },
    Dimensions { dimensions: BTreeMap<String, Dimension> },
}

async fn put_hierarchy(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let reply = mutation(store, project, headers, body, "put-hierarchy", |tx, body| {
        let input: HierarchyInput = parse(body)?;
        let mut board = load_board(tx)?;
        let spec = match input {
            HierarchyInput::Spec { spec } => spec,
            HierarchyInput::Dimensions { dimensions } => board.hierarchy_from_groups(&dimensions).map_err(board_error)?,
        };
        board.apply_hierarchy(&spec).map_err(board_error)?;
        tx.write("board.json", &board)?;
        Ok(Reply::ok(json!({ "themes": board.themes })))
    })
    .await?;
    Ok(respond(reply))
}

#[derive(Deserialize)]
struct Merge {
    base_version: u32,
    set_id: String,
}

async fn merge_board(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let reply = mutation(store, project, headers, body, "merge-board", |tx, body| {
        let req: Merge = parse(body)?;
        let base = tx.codebook(req.base_version)?;
        let set = load_set(tx, &req.set_id)?;
        let board = load_board(tx)?;
        let known: BTreeSet<MessageId> = set.records.iter().map(|r| r.message_id.clone()).collect();
        let mut merged = merge_expansion(&base, &board.ratified(), &known)
            .map_err(|e| ApiError::unprocessable("merge", e.to_string()))?;
        if !board.themes.is_empty() {
            merged.themes = board.themes.clone();
        }
        let diff = diff_codebooks(&base, &merged).map_err(|e| ApiError::unprocessable("merge", e.to_string()))?;
        let mut reply = publish(tx, merged)?;
        reply.body["diff"] = to_value(&diff);
        Ok(reply)
    })
    .await?;
    Ok(respond(reply))
}

// ---- baseline and revalidation

#[derive(Deserialize)]
struct BaselineRequest {
    backend: BackendSpec,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default = "default_grouping_temperature")]
    grouping_temperature: f64,
    #[serde(default)]
    limit: Option<usize>,
}

fn default_grouping_temperature() -> f64 {
    0.7
}

async fn run_baseline(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let reply = mutation(store, project, headers, body, "autonomous-baseline", |tx, body| {
        let req: BaselineRequest = parse(body)?;
        let gateway = req.backend.gateway().map_err(|e| ApiError::unprocessable("backend", e.to_string()))?;
        let corpus = tx.corpus()?;
        let messages: Vec<&Message> = corpus.eligible().take(req.limit.unwrap_or(usize::MAX)).collect();
        let draft = autonomous_induction(&messages, &gateway, &req.model, req.grouping_temperature)
            .map_err(|e| ApiError::unprocessable("baseline", e.to_string()))?;
        tx.write("baseline.json", &draft)?;
        Ok(Reply::created(json!({
            "themes": draft.theme_count(),
            "codes": draft.code_count(),
            "duplicates": draft.duplicate_count(),
            "duplicate_rate": draft.duplicate_rate(),
            "draft": draft,
        })))
    })
    .await?;
    Ok(respond(reply))
}

async fn get_baseline(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap) -> ApiResult {
    reading(store, project, headers, |tx| {
        tx.read::<Value>("baseline.json")?.ok_or_else(|| ApiError::not_found("baseline", "draft"))
    })
    .await
}

#[derive(Deserialize)]
struct RevalidationRequest {
    codebook_version: u32,
    #[serde(default = "default_revalidation_variant")]
    variant: String,
    backend: BackendSpec,
    #[serde(default)]
    model: ModelConfig,
}

fn default_revalidation_variant() -> String {
    "L5".into()
}

async fn launch_revalidation(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let reply = mutation(store, project, headers, body, "revalidate", |tx, body| {
        let req: RevalidationRequest = parse(body)?;
        let cb = tx.codebook(req.codebook_version)?;
        let variant = enumerate_variants(&GridConfig::default())
            .into_iter()
            .find(|v| v.id == req.variant)
            .ok_or_else(|| ApiError::unprocessable("unknown-variant", format!("variant {} is not in the grid", req.variant)))?;
        let gateway = req.backend.gateway().map_err(|e| ApiError::unprocessable("backend", e.to_string()))?;
        let corpus = tx.corpus()?;
        let human = tx.human()?;
        let coded: BTreeSet<&MessageId> = human.iter().map(|a| &a.message_id).collect();
        let messages: Vec<&Message> = corpus.eligible().filter(|m| coded.contains(&m.id)).collect();
        let result = revalidate(&cb, &messages, &human, &gateway, &req.model, &tx.prompt_context()?, &variant)
            .map_err(board_error)?;
        let id = tx.project.next_id("revalidation");
        tx.write(&format!("revalidations/{id}.json"), &result)?;
        tx.project.revalidations.push(id.clone());
        Ok(Reply::created(json!({ "id": id, "codebook_version": result.codebook_version, "n": result.n, "kappa": result.kappa, "failures": result.failures.len() })))
    })
    .await?;
    Ok(respond(reply))
}

async fn list_revalidations(State(store): State<Shared>, Path(project): Path<String>, headers: HeaderMap) -> ApiResult {
    reading(store, project, headers, |tx| Ok(json!({ "revalidations": tx.project.revalidations }))).await
}

async fn get_revalidation(State(store): State<Shared>, Path((project, id)): Path<(String, String)>, headers: HeaderMap) -> ApiResult {
    reading(store, project, headers, move |tx| {
        tx.read::<Value>(&format!("revalidations/{id}.json"))?.ok_or_else(|| ApiError::not_found("revalidation", &id))
    })
    .await
}
