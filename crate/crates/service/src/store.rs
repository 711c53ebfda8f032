//! Single-directory project store.
//!
//! Layout under the root:
//!
//! ```text
//! projects/<id>/project.json        project document
//! projects/<id>/codebooks/v<N>.json published codebook versions
//! projects/<id>/corpus.json         ingested corpus
//! projects/<id>/human.json          human assignments
//! projects/<id>/jobs/<run>.json     run job status
//! projects/<id>/runs/<run>/         committed runs (manifest.json, variants/<id>.json)
//! projects/<id>/disagreements/<set>.json
//! projects/<id>/board.json
//! projects/<id>/revalidations/<id>.json
//! projects/<id>/requests/<hash>.json replayable responses keyed by request id
//! projects/<id>/events.log          append-only JSON lines
//! .staging/                         runs in progress, renamed into place on commit
//! ```
//!
//! Every document is written to a temporary file and renamed, so a crash leaves either
//! the old or the new version.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use qcode_core::gateway::{run_variant, sha256_hex, BackendSpec, ModelConfig};
use qcode_core::prompt::{enumerate_variants, GridConfig, PromptContext};
use qcode_core::{fixtures, Codebook, Corpus, Message};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::ApiError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub archived: bool,
    pub token_sha256: String,
    #[serde(default)]
    pub codebook_versions: Vec<u32>,
    #[serde(default)]
    pub corpus: Option<CorpusInfo>,
    #[serde(default)]
    pub human_assignments: usize,
    #[serde(default)]
    pub runs: Vec<String>,
    #[serde(default)]
    pub disagreement_sets: Vec<String>,
    #[serde(default)]
    pub revalidations: Vec<String>,
    #[serde(default)]
    pub counters: BTreeMap<String, u64>,
}

impl Project {
    pub fn next_id(&mut self, kind: &str) -> String {
        let n = self.counters.entry(kind.to_string()).or_insert(0);
        *n += 1;
        format!("{kind}-{n}")
    }

    pub fn latest_codebook(&self) -> Option<u32> {
        self.codebook_versions.iter().copied().max()
    }

    /// Public view without the token hash.
    pub fn view(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("project serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("token_sha256");
            map.remove("counters");
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub messages: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

/// Parameters of a variant run as submitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRequest {
    pub codebook_version: u32,
    /// Variant ids, or `["all"]`.
    #[serde(default = "all_variants")]
    pub variants: Vec<String>,
    #[serde(default = "default_backend")]
    pub backend: BackendSpec,
    #[serde(default)]
    pub model: ModelConfig,
}

fn all_variants() -> Vec<String> {
    vec!["all".into()]
}

fn default_backend() -> BackendSpec {
    BackendSpec::Mock { spec: Default::default() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Job {
    pub run_id: String,
    pub status: JobStatus,
    pub request: RunRequest,
    /// Resolved variant ids in grid order.
    pub variants: Vec<String>,
    #[serde(default)]
    pub completed: Vec<String>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant_id: String,
    pub assignments: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub codebook_version: u32,
    pub model: ModelConfig,
    pub backend: String,
    pub messages: usize,
    pub variants: Vec<VariantSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RequestRecord {
    request_id: String,
    action: String,
    body_sha256: String,
    status: u16,
    body: Value,
}

/// Response of a mutating call.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub status: u16,
    pub body: Value,
    pub replayed: bool,
}

impl Reply {
    pub fn ok(body: Value) -> Self {
        Reply { status: 200, body, replayed: false }
    }

    pub fn created(body: Value) -> Self {
        Reply { status: 201, body, replayed: false }
    }

    pub fn accepted(body: Value) -> Self {
        Reply { status: 202, body, replayed: false }
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ApiError> {
    let dir = path.parent().ok_or_else(|| ApiError::internal("document path has no parent"))?;
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".{}.tmp-{:016x}", path.file_name().unwrap().to_string_lossy(), rand::rng().random::<u64>()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ApiError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| ApiError::internal(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>, ApiError> {
    match fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| ApiError::internal(format!("corrupt document {}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

pub struct Store {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Store {
    /// Opens (creating if needed) a store. Staged runs left by a crash are discarded and
    /// their jobs marked failed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Arc<Store>, ApiError> {
        let root = root.into();
        fs::create_dir_all(root.join("projects"))?;
        let staging = root.join(".staging");
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        let store = Arc::new(Store { root, locks: Mutex::new(HashMap::new()) });
        for project in store.project_ids()? {
            let jobs = store.project_dir(&project).join("jobs");
            let Ok(entries) = fs::read_dir(&jobs) else { continue };
            for entry in entries {
                let path = entry?.path();
                if path.extension().is_none_or(|e| e != "json") {
                    continue;
                }
                if let Some(mut job) = read_json::<Job>(&path)? {
                    if matches!(job.status, JobStatus::Queued | JobStatus::Running) {
                        job.status = JobStatus::Failed;
                        job.error = Some("interrupted by a restart".into());
                        write_json(&path, &job)?;
                    }
                }
            }
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn project_dir(&self, id: &str) -> PathBuf {
        self.root.join("projects").join(id)
    }

    fn lock(&self, id: &str) -> Arc<Mutex<()>> {
        self.locks.lock().unwrap().entry(id.to_string()).or_default().clone()
    }

    fn project_ids(&self) -> Result<Vec<String>, ApiError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(self.root.join("projects"))? {
            let entry = entry?;
            if entry.path().join("project.json").exists() {
                ids.push(entry.file_name().to_string_lossy().to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn list_projects(&self) -> Result<Vec<Value>, ApiError> {
        self.project_ids()?.iter().map(|id| self.project(id).map(|p| p.view())).collect()
    }

    pub fn project(&self, id: &str) -> Result<Project, ApiError> {
        if !valid_id(id) {
            return Err(ApiError::not_found("project", id));
        }
        read_json(&self.project_dir(id).join("project.json"))?.ok_or_else(|| ApiError::not_found("project", id))
    }

    pub fn authorize(&self, id: &str, token: Option<&str>) -> Result<Project, ApiError> {
        let project = self.project(id)?;
        match token {
            Some(t) if sha256_hex(t.as_bytes()) == project.token_sha256 => Ok(project),
            Some(_) => Err(ApiError::new(403, "forbidden", "token does not grant access to this project")),
            None => Err(ApiError::new(401, "unauthorized", "missing bearer token")),
        }
    }

    /// Creates a project and returns it with its bearer token. The token is only ever
    /// returned here; the store keeps its hash.
    pub fn create_project(&self, id: &str, name: &str, request_id: &str, body: &[u8]) -> Result<Reply, ApiError> {
        if !valid_id(id) {
            return Err(ApiError::bad_request(format!("project id {id:?} must be 1-64 of [A-Za-z0-9_-]")));
        }
        let lock = self.lock(id);
        let _guard = lock.lock().unwrap();
        let dir = self.project_dir(id);
        let requests = dir.join("requests");
        if let Some(r) = replay(&requests, request_id, "create-project", body)? {
            return Ok(r);
        }
        if dir.join("project.json").exists() {
            return Err(ApiError::conflict("project-exists", format!("project {id} already exists")));
        }
        let token = format!("{:032x}{:032x}", rand::rng().random::<u128>(), rand::rng().random::<u128>());
        let project = Project {
            id: id.to_string(),
            name: name.to_string(),
            archived: false,
            token_sha256: sha256_hex(token.as_bytes()),
            codebook_versions: Vec::new(),
            corpus: None,
            human_assignments: 0,
            runs: Vec::new(),
            disagreement_sets: Vec::new(),
            revalidations: Vec::new(),
            counters: BTreeMap::new(),
        };
        write_json(&dir.join("project.json"), &project)?;
        let mut view = project.view();
        view["token"] = Value::String(token);
        let reply = Reply::created(view);
        remember(&requests, request_id, "create-project", body, &reply)?;
        append_event(&dir, request_id, "create-project", id)?;
        Ok(reply)
    }

    /// Runs `f` as the single writer of project `id`. A request id seen before replays
    /// the stored response; reusing it with a different body is a conflict. Failed calls
    /// leave no trace, so they can be retried with the same id.
    pub fn mutate<F>(&self, id: &str, request_id: &str, action: &str, body: &[u8], f: F) -> Result<Reply, ApiError>
    where
        F: FnOnce(&mut Tx<'_>) -> Result<Reply, ApiError>,
    {
        let lock = self.lock(id);
        let _guard = lock.lock().unwrap();
        let project = self.project(id)?;
        let dir = self.project_dir(id);
        let requests = dir.join("requests");
        if let Some(r) = replay(&requests, request_id, action, body)? {
            return Ok(r);
        }
        if project.archived && action != "archive-project" {
            return Err(ApiError::conflict("archived", format!("project {id} is archived")));
        }
        let before = project.clone();
        let mut tx = Tx { store: self, dir: dir.clone(), project };
        let reply = f(&mut tx)?;
        if tx.project != before {
            write_json(&dir.join("project.json"), &tx.project)?;
        }
        remember(&requests, request_id, action, body, &reply)?;
        append_event(&dir, request_id, action, &reply_target(&reply))?;
        Ok(reply)
    }

    /// Read-only view of a project's documents.
    pub fn reader(&self, id: &str) -> Result<Tx<'_>, ApiError> {
        let project = self.project(id)?;
        Ok(Tx { store: self, dir: self.project_dir(id), project })
    }

    /// Executes a queued run job: codes every variant into a staging directory, then
    /// renames it into place and records the run on the project.
    pub fn execute_run(&self, project_id: &str, run_id: &str) -> Result<(), ApiError> {
        let dir = self.project_dir(project_id);
        let job_path = dir.join("jobs").join(format!("{run_id}.json"));
        let mut job: Job = read_json(&job_path)?.ok_or_else(|| ApiError::not_found("run", run_id))?;
        let result = self.run_job(project_id, &mut job, &job_path);
        let lock = self.lock(project_id);
        let _guard = lock.lock().unwrap();
        match result {
            Ok(staged) => {
                let target = dir.join("runs").join(run_id);
                fs::create_dir_all(dir.join("runs"))?;
                fs::rename(&staged, &target)?;
                let mut project = self.project(project_id)?;
                project.runs.push(run_id.to_string());
                write_json(&dir.join("project.json"), &project)?;
                job.status = JobStatus::Done;
                write_json(&job_path, &job)?;
                append_event(&dir, "", "commit-run", run_id)?;
                Ok(())
            }
            Err(e) => {
                job.status = JobStatus::Failed;
                job.error = Some(e.message.clone());
                write_json(&job_path, &job)?;
                append_event(&dir, "", "fail-run", run_id)?;
                Err(e)
            }
        }
    }

    fn run_job(&self, project_id: &str, job: &mut Job, job_path: &Path) -> Result<PathBuf, ApiError> {
        let reader = self.reader(project_id)?;
        let codebook = reader.codebook(job.request.codebook_version)?;
        let corpus = reader.corpus()?;
        let ctx = reader.prompt_context()?;
        let gateway = job.request.backend.gateway().map_err(|e| ApiError::unprocessable("backend", e.to_string()))?;
        let messages: Vec<&Message> = corpus.eligible().collect();
        let grid = enumerate_variants(&GridConfig::default());
        let staged = self.root.join(".staging").join(format!("{project_id}--{}", job.run_id));
        if staged.exists() {
            fs::remove_dir_all(&staged)?;
        }
        fs::create_dir_all(staged.join("variants"))?;
        job.status = JobStatus::Running;
        write_json(job_path, job)?;

        let mut summaries = Vec::new();
        for vid in job.variants.clone() {
            let variant = grid.iter().find(|v| v.id == vid).ok_or_else(|| ApiError::not_found("variant", &vid))?;
            let run = run_variant(&gateway, &job.request.model, variant, &codebook, &ctx, &messages);
            write_json(&staged.join("variants").join(format!("{vid}.json")), &run)?;
            summaries.push(VariantSummary {
                variant_id: vid.clone(),
                assignments: run.assignments.len(),
                failures: run.failures.len(),
            });
            job.completed.push(vid);
            write_json(job_path, job)?;
        }
        let manifest = RunManifest {
            run_id: job.run_id.clone(),
            codebook_version: codebook.version,
            model: job.request.model.clone(),
            backend: gateway.backend_id().to_string(),
            messages: messages.len(),
            variants: summaries,
        };
        write_json(&staged.join("manifest.json"), &manifest)?;
        Ok(staged)
    }
}

fn request_path(dir: &Path, request_id: &str) -> PathBuf {
    dir.join(format!("{}.json", sha256_hex(request_id.as_bytes())))
}

fn replay(dir: &Path, request_id: &str, action: &str, body: &[u8]) -> Result<Option<Reply>, ApiError> {
    let Some(rec) = read_json::<RequestRecord>(&request_path(dir, request_id))? else { return Ok(None) };
    if rec.action != action || rec.body_sha256 != sha256_hex(body) {
        return Err(ApiError::conflict(
            "request-id-reused",
            format!("request id {request_id:?} was already used for a different request"),
        ));
    }
    Ok(Some(Reply { status: rec.status, body: rec.body, replayed: true }))
}

fn remember(dir: &Path, request_id: &str, action: &str, body: &[u8], reply: &Reply) -> Result<(), ApiError> {
    let rec = RequestRecord {
        request_id: request_id.to_string(),
        action: action.to_string(),
        body_sha256: sha256_hex(body),
        status: reply.status,
        body: reply.body.clone(),
    };
    write_json(&request_path(dir, request_id), &rec)
}

fn reply_target(reply: &Reply) -> String {
    ["id", "run_id", "set_id", "version", "message_id"]
        .iter()
        .find_map(|k| reply.body.get(*k).map(|v| v.to_string().trim_matches('"').to_string()))
        .unwrap_or_default()
}

fn append_event(dir: &Path, request_id: &str, action: &str, target: &str) -> Result<(), ApiError> {
    let line = serde_json::json!({"request_id": request_id, "action": action, "target": target});
    let mut f = OpenOptions::new().create(true).append(true).open(dir.join("events.log"))?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Access to one project's documents, either inside [`Store::mutate`] or read-only.
pub struct Tx<'a> {
    store: &'a Store,
    dir: PathBuf,
    pub project: Project,
}

impl Tx<'_> {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn read<T: DeserializeOwned>(&self, rel: &str) -> Result<Option<T>, ApiError> {
        read_json(&self.path(rel))
    }

    pub fn write<T: Serialize>(&self, rel: &str, value: &T) -> Result<(), ApiError> {
        write_json(&self.path(rel), value)
    }

    pub fn codebook(&self, version: u32) -> Result<Codebook, ApiError> {
        if !self.project.codebook_versions.contains(&version) {
            return Err(ApiError::unprocessable(
                "unknown-codebook-version",
                format!("codebook version {version} is not published in project {}", self.project.id),
            ));
        }
        self.read(&format!("codebooks/v{version}.json"))?
            .ok_or_else(|| ApiError::internal(format!("codebook v{version} listed but missing")))
    }

    pub fn corpus(&self) -> Result<Corpus, ApiError> {
        self.read("corpus.json")?.ok_or_else(|| ApiError::unprocessable("no-corpus", "no corpus uploaded yet"))
    }

    pub fn human(&self) -> Result<Vec<qcode_core::Assignment>, ApiError> {
        self.read("human.json")?.ok_or_else(|| ApiError::unprocessable("no-human-codes", "no human codes uploaded yet"))
    }

    /// The uploaded prompt context, or the bundled one.
    pub fn prompt_context(&self) -> Result<PromptContext, ApiError> {
        Ok(self.read("prompt_context.json")?.unwrap_or_else(fixtures::prompt_context))
    }

    pub fn job(&self, run_id: &str) -> Result<Job, ApiError> {
        self.read(&format!("jobs/{run_id}.json"))?.ok_or_else(|| ApiError::not_found("run", run_id))
    }

    /// Committed run variants by id.
    pub fn run_variants(&self, run_id: &str) -> Result<BTreeMap<String, qcode_core::gateway::VariantRun>, ApiError> {
        let manifest = self.manifest(run_id)?;
        let mut out = BTreeMap::new();
        for v in &manifest.variants {
            let run = self
                .read(&format!("runs/{run_id}/variants/{}.json", v.variant_id))?
                .ok_or_else(|| ApiError::internal(format!("run {run_id} misses variant {}", v.variant_id)))?;
            out.insert(v.variant_id.clone(), run);
        }
        Ok(out)
    }

    pub fn manifest(&self, run_id: &str) -> Result<RunManifest, ApiError> {
        if !self.project.runs.iter().any(|r| r == run_id) {
            let job = self.job(run_id)?;
            return Err(ApiError::conflict("run-not-finished", format!("run {run_id} is {:?}", job.status)));
        }
        self.read(&format!("runs/{run_id}/manifest.json"))?
            .ok_or_else(|| ApiError::internal(format!("run {run_id} has no manifest")))
    }

    pub fn store(&self) -> &Store {
        self.store
    }
}
