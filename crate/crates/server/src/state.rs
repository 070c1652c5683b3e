//! Session registry, background load and embedding jobs, persistence.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::http::StatusCode;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::broadcast;
use vizarel_core::embedding::{embed_session_with, JobControl};
use vizarel_core::ingest::{load_session_from_reader, write_session, LoadOptions};
use vizarel_core::viewport::{
    build_viewport, lasso_select, Selection, SelectionOrigin, SelectionRegistry, ViewportInputs,
    ViewportQuery, ViewportRegistry,
};
use vizarel_core::{
    Embedding, EmbeddingConfig, EmbeddingError, ExperienceId, IngestReport, Session,
    ViewportDescriptor, ViewportError, ViewportPayload,
};

use crate::error::{ApiError, ErrorBody};

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    /// Directory for uploads, re-serialized sessions and embedding sidecars.
    /// Without one a temporary directory is used and nothing survives a restart.
    pub data_dir: Option<PathBuf>,
    /// Static UI bundle served at `/`.
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Loading,
    Ready,
    Failed,
}

impl SessionStatus {
    fn as_str(self) -> &'static str {
        match self {
            SessionStatus::Loading => "loading",
            SessionStatus::Ready => "ready",
            SessionStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingStatus {
    None,
    Running,
    Ready,
    Failed,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct HandleReport {
    #[serde(flatten)]
    pub ingest: IngestReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionHandle {
    pub session_id: String,
    pub name: String,
    pub status: SessionStatus,
    pub report: HandleReport,
    pub embedding_status: EmbeddingStatus,
}

/// Snapshot of a session's embedding job, taken under one lock.
#[derive(Debug, Clone, Serialize)]
pub struct EmbeddingView {
    pub session_id: String,
    pub status: EmbeddingStatus,
    pub generation: u64,
    pub progress: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<EmbeddingConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Arc<Embedding>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionCreated {
    pub selection_id: String,
    pub size: usize,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Session {
        session_id: String,
        status: SessionStatus,
    },
    Embedding {
        session_id: String,
        status: EmbeddingStatus,
        generation: u64,
    },
}

enum LoadState {
    Loading,
    Ready {
        session: Arc<Session>,
        report: IngestReport,
    },
    Failed(ApiError),
}

struct EmbeddingSlot {
    generation: u64,
    status: EmbeddingStatus,
    control: Option<Arc<JobControl>>,
    config: Option<EmbeddingConfig>,
    result: Option<Arc<Embedding>>,
    error: Option<ErrorBody>,
}

impl Default for EmbeddingSlot {
    fn default() -> Self {
        Self {
            generation: 0,
            status: EmbeddingStatus::None,
            control: None,
            config: None,
            result: None,
            error: None,
        }
    }
}

pub struct SessionEntry {
    pub id: String,
    pub name: String,
    render_root: Option<PathBuf>,
    load: RwLock<LoadState>,
    embedding: Mutex<EmbeddingSlot>,
    selections: RwLock<SelectionRegistry>,
    viewports: RwLock<ViewportRegistry>,
}

impl SessionEntry {
    fn new(id: String, name: String, render_root: Option<PathBuf>) -> Self {
        Self {
            id,
            name,
            render_root,
            load: RwLock::new(LoadState::Loading),
            embedding: Mutex::new(EmbeddingSlot::default()),
            selections: RwLock::new(SelectionRegistry::default()),
            viewports: RwLock::new(ViewportRegistry::default()),
        }
    }

    pub fn handle(&self) -> SessionHandle {
        let (status, report) = match &*self.load.read() {
            LoadState::Loading => (SessionStatus::Loading, HandleReport::default()),
            LoadState::Ready { report, .. } => (
                SessionStatus::Ready,
                HandleReport {
                    ingest: report.clone(),
                    error: None,
                },
            ),
            LoadState::Failed(e) => (
                SessionStatus::Failed,
                HandleReport {
                    ingest: IngestReport::default(),
                    error: Some(e.body()),
                },
            ),
        };
        SessionHandle {
            session_id: self.id.clone(),
            name: self.name.clone(),
            status,
            report,
            embedding_status: self.embedding.lock().status,
        }
    }

    pub fn status(&self) -> SessionStatus {
        match &*self.load.read() {
            LoadState::Loading => SessionStatus::Loading,
            LoadState::Ready { .. } => SessionStatus::Ready,
            LoadState::Failed(_) => SessionStatus::Failed,
        }
    }

    /// The loaded session, or SESSION_NOT_READY.
    pub fn ready(&self) -> Result<Arc<Session>, ApiError> {
        match &*self.load.read() {
            LoadState::Ready { session, .. } => Ok(session.clone()),
            LoadState::Loading => Err(ApiError::not_ready(&self.id, "loading")),
            LoadState::Failed(_) => Err(ApiError::not_ready(&self.id, "failed")),
        }
    }

    pub fn embedding_view(&self) -> EmbeddingView {
        let slot = self.embedding.lock();
        EmbeddingView {
            session_id: self.id.clone(),
            status: slot.status,
            generation: slot.generation,
            progress: slot.control.as_ref().map_or(0, |c| c.progress()),
            config: slot.config.clone(),
            embedding: match slot.status {
                EmbeddingStatus::Ready => slot.result.clone(),
                _ => None,
            },
            error: slot.error.clone(),
        }
    }

    fn ready_embedding(&self) -> Option<Arc<Embedding>> {
        let slot = self.embedding.lock();
        match slot.status {
            EmbeddingStatus::Ready => slot.result.clone(),
            _ => None,
        }
    }

    pub fn create_viewport(&self, mut descriptor: ViewportDescriptor) -> Result<String, ApiError> {
        self.ready()?;
        descriptor.binding.session_id = self.id.clone();
        Ok(self.viewports.write().create(descriptor)?)
    }

    pub fn viewport(&self, id: &str) -> Result<ViewportDescriptor, ApiError> {
        Ok(self.viewports.read().get(id)?.clone())
    }

    pub fn viewports(&self) -> Vec<ViewportDescriptor> {
        self.viewports.read().iter().cloned().collect()
    }

    /// Builds a payload for `descriptor` with per-request overrides applied.
    pub fn viewport_data(
        &self,
        descriptor: &ViewportDescriptor,
        query: &ViewportQuery,
    ) -> Result<ViewportPayload, ApiError> {
        let session = self.ready()?;
        let mut descriptor = descriptor.clone();
        descriptor.binding = descriptor.binding.merged(query);
        descriptor.binding.session_id = self.id.clone();
        let embedding = self.ready_embedding();
        let selections = self.selections.read();
        let inputs = ViewportInputs {
            session: &session,
            embedding: embedding.as_deref(),
            selections: &selections,
        };
        Ok(build_viewport(&descriptor, inputs)?)
    }

    pub fn create_selection(&self, request: SelectionRequest) -> Result<SelectionCreated, ApiError> {
        let session = self.ready()?;
        let selection = match request {
            SelectionRequest::Polygon(polygon) => {
                let embedding = self.ready_embedding().ok_or(ViewportError::EmbeddingNotReady)?;
                lasso_select(&embedding, &polygon)?
            }
            SelectionRequest::Ids(ids) => Selection::from_ids(&session, ids, SelectionOrigin::Click)?,
            SelectionRequest::Episode(k) => Selection::episode(&session, k)?,
        };
        let size = selection.len();
        let selection_id = self.selections.write().insert(selection);
        Ok(SelectionCreated { selection_id, size })
    }

    pub fn render_path(&self, episode: usize, t: usize) -> Result<PathBuf, ApiError> {
        let session = self.ready()?;
        let exp = session
            .resolve(ExperienceId::new(episode, t))
            .map_err(ViewportError::from)?;
        let render = exp.render.as_deref().ok_or(ViewportError::NoRenders)?;
        Ok(match &self.render_root {
            Some(root) => root.join(render),
            None => PathBuf::from(render),
        })
    }
}

/// Body of `POST .../selections`.
#[derive(Debug, Clone, PartialEq)]
pub enum SelectionRequest {
    Polygon(Vec<[f64; 2]>),
    Ids(Vec<ExperienceId>),
    Episode(usize),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum IdForm {
    Pair([usize; 2]),
    Object(ExperienceId),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectionBody {
    polygon: Option<Vec<[f64; 2]>>,
    ids: Option<Vec<IdForm>>,
    episode: Option<usize>,
}

impl SelectionRequest {
    pub fn from_json(bytes: &[u8]) -> Result<Self, ApiError> {
        let body: SelectionBody = serde_json::from_slice(bytes)
            .map_err(|e| ApiError::bad_request(format!("selection body: {e}")))?;
        match (body.polygon, body.ids, body.episode) {
            (Some(p), None, None) => Ok(SelectionRequest::Polygon(p)),
            (None, Some(ids), None) => Ok(SelectionRequest::Ids(
                ids.into_iter()
                    .map(|f| match f {
                        IdForm::Pair([e, t]) => ExperienceId::new(e, t),
                        IdForm::Object(id) => id,
                    })
                    .collect(),
            )),
            (None, None, Some(k)) => Ok(SelectionRequest::Episode(k)),
            _ => Err(ApiError::bad_request(
                "selection body needs exactly one of `polygon`, `ids`, `episode`",
            )),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PersistedMeta {
    name: String,
    render_root: Option<PathBuf>,
}

struct Inner {
    config: ServerConfig,
    work_dir: PathBuf,
    _temp: Option<tempfile::TempDir>,
    sessions: RwLock<BTreeMap<String, Arc<SessionEntry>>>,
    events: broadcast::Sender<Event>,
}

/// Shared service state; cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

/// First 16 hex digits of the SHA-256 of a log's bytes.
pub fn content_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

impl AppState {
    /// Creates the state and restores sessions persisted under `data_dir`.
    pub fn open(config: ServerConfig) -> io::Result<Self> {
        let (work_dir, temp) = match &config.data_dir {
            Some(dir) => (dir.clone(), None),
            None => {
                let t = tempfile::Builder::new().prefix("vizarel-").tempdir()?;
                (t.path().to_path_buf(), Some(t))
            }
        };
        fs::create_dir_all(work_dir.join("uploads"))?;
        fs::create_dir_all(work_dir.join("sessions"))?;
        let (events, _) = broadcast::channel(256);
        let state = Self {
            inner: Arc::new(Inner {
                config,
                work_dir,
                _temp: temp,
                sessions: RwLock::new(BTreeMap::new()),
                events,
            }),
        };
        if state.inner.config.data_dir.is_some() {
            state.restore()?;
        }
        Ok(state)
    }

    pub fn config(&self) -> &ServerConfig {
        &self.inner.config
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Event> {
        self.inner.events.subscribe()
    }

    fn emit(&self, event: Event) {
        // no subscribers is fine
        let _ = self.inner.events.send(event);
    }

    pub fn session(&self, id: &str) -> Result<Arc<SessionEntry>, ApiError> {
        self.inner
            .sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::unknown_session(id))
    }

    pub fn handles(&self) -> Vec<SessionHandle> {
        self.inner.sessions.read().values().map(|e| e.handle()).collect()
    }

    fn persist_dir(&self) -> Option<PathBuf> {
        self.inner.config.data_dir.as_ref().map(|d| d.join("sessions"))
    }

    /// Registers uploaded log bytes and starts loading them in the
    /// background. Returns the handle and whether a new session was created.
    pub fn create_from_bytes(
        &self,
        bytes: Vec<u8>,
        name: Option<String>,
    ) -> Result<(SessionHandle, bool), ApiError> {
        let id = content_digest(&bytes);
        if let Ok(existing) = self.session(&id) {
            return Ok((existing.handle(), false));
        }
        let uploads = self.inner.work_dir.join("uploads");
        let path = uploads.join(format!("{id}.jsonl"));
        fs::write(&path, &bytes).map_err(|e| ApiError::internal(format!("storing upload: {e}")))?;
        let options = LoadOptions {
            inline_render_dir: Some(uploads.join(format!("{id}.renders"))),
            render_root: Some(uploads),
        };
        let name = name.unwrap_or_else(|| format!("upload-{id}"));
        Ok(self.start_load(id, name, bytes, options))
    }

    /// Registers a log file on the server's filesystem. Relative render
    /// references resolve against the file's directory.
    pub fn create_from_path(
        &self,
        path: &Path,
        name: Option<String>,
    ) -> Result<(SessionHandle, bool), ApiError> {
        let bytes = fs::read(path).map_err(|e| {
            ApiError::new(StatusCode::BAD_REQUEST, "IO_ERROR", format!("{}: {e}", path.display()))
        })?;
        let id = content_digest(&bytes);
        if let Ok(existing) = self.session(&id) {
            return Ok((existing.handle(), false));
        }
        let name = name.unwrap_or_else(|| {
            path.file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| id.clone())
        });
        let options = LoadOptions::for_log_file(path);
        Ok(self.start_load(id, name, bytes, options))
    }

    fn start_load(
        &self,
        id: String,
        name: String,
        bytes: Vec<u8>,
        options: LoadOptions,
    ) -> (SessionHandle, bool) {
        let entry = {
            let mut sessions = self.inner.sessions.write();
            if let Some(existing) = sessions.get(&id) {
                return (existing.handle(), false);
            }
            let entry = Arc::new(SessionEntry::new(id.clone(), name, options.render_root.clone()));
            sessions.insert(id.clone(), entry.clone());
            entry
        };
        let handle = entry.handle();
        let state = self.clone();
        std::thread::spawn(move || {
            let result = load_session_from_reader(BufReader::new(&bytes[..]), &options);
            state.finish_load(&entry, result);
        });
        (handle, true)
    }

    fn finish_load(
        &self,
        entry: &SessionEntry,
        result: Result<(Session, IngestReport), vizarel_core::IngestError>,
    ) {
        let status = match result {
            Ok((session, report)) => {
                if let Err(e) = self.persist_session(entry, &session) {
                    tracing::warn!("persisting session {}: {e}", entry.id);
                }
                *entry.load.write() = LoadState::Ready {
                    session: Arc::new(session),
                    report,
                };
                SessionStatus::Ready
            }
            Err(e) => {
                *entry.load.write() = LoadState::Failed(e.into());
                SessionStatus::Failed
            }
        };
        tracing::info!("session {} {}", entry.id, status.as_str());
        self.emit(Event::Session {
            session_id: entry.id.clone(),
            status,
        });
    }

    fn persist_session(&self, entry: &SessionEntry, session: &Session) -> io::Result<()> {
        let Some(dir) = self.persist_dir() else {
            return Ok(());
        };
        let log = dir.join(format!("{}.jsonl", entry.id));
        if !log.exists() {
            let mut out = BufWriter::new(fs::File::create(&log)?);
            write_session(session, &mut out)?;
            out.flush()?;
        }
        let meta = PersistedMeta {
            name: entry.name.clone(),
            render_root: entry.render_root.as_ref().map(|p| fs::canonicalize(p).unwrap_or(p.clone())),
        };
        fs::write(dir.join(format!("{}.json", entry.id)), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    fn restore(&self) -> io::Result<()> {
        let Some(dir) = self.persist_dir() else {
            return Ok(());
        };
        let mut logs: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        logs.sort();
        for log in logs {
            let Some(id) = log.file_stem().map(|s| s.to_string_lossy().into_owned()) else {
                continue;
            };
            let meta: PersistedMeta = match fs::read(dir.join(format!("{id}.json")))
                .ok()
                .and_then(|b| serde_json::from_slice(&b).ok())
            {
                Some(m) => m,
                None => continue,
            };
            let entry = Arc::new(SessionEntry::new(id.clone(), meta.name, meta.render_root.clone()));
            let options = LoadOptions {
                render_root: meta.render_root,
                inline_render_dir: None,
            };
            let file = fs::File::open(&log)?;
            match load_session_from_reader(BufReader::new(file), &options) {
                Ok((session, report)) => {
                    let sidecar = dir.join(format!("{id}.embedding.json"));
                    if let Some(embedding) = fs::read(&sidecar)
                        .ok()
                        .and_then(|b| serde_json::from_slice::<Embedding>(&b).ok())
                    {
                        let mut slot = entry.embedding.lock();
                        slot.generation = 1;
                        slot.status = EmbeddingStatus::Ready;
                        slot.config = Some(embedding.config.clone());
                        slot.result = Some(Arc::new(embedding));
                    }
                    *entry.load.write() = LoadState::Ready {
                        session: Arc::new(session),
                        report,
                    };
                }
                Err(e) => {
                    tracing::warn!("restoring {}: {e}", log.display());
                    *entry.load.write() = LoadState::Failed(e.into());
                }
            }
            self.inner.sessions.write().insert(id, entry);
        }
        Ok(())
    }

    /// Starts an embedding job, cancelling any job already running for the
    /// session. The previous result stops being served immediately.
    pub fn request_embedding(
        &self,
        session_id: &str,
        config: EmbeddingConfig,
    ) -> Result<EmbeddingView, ApiError> {
        let entry = self.session(session_id)?;
        let session = entry.ready()?;
        config.validate_for(&session)?;
        let control = Arc::new(JobControl::default());
        let generation = {
            let mut slot = entry.embedding.lock();
            if let Some(old) = slot.control.take() {
                old.cancel();
            }
            slot.generation += 1;
            slot.status = EmbeddingStatus::Running;
            slot.control = Some(control.clone());
            slot.config = Some(config.clone());
            slot.result = None;
            slot.error = None;
            slot.generation
        };
        self.emit(Event::Embedding {
            session_id: entry.id.clone(),
            status: EmbeddingStatus::Running,
            generation,
        });
        let state = self.clone();
        let job_entry = entry.clone();
        std::thread::spawn(move || {
            let result = embed_session_with(&session, &config, &control);
            state.finish_embedding(&job_entry, generation, result);
        });
        Ok(entry.embedding_view())
    }

    fn finish_embedding(
        &self,
        entry: &SessionEntry,
        generation: u64,
        result: Result<Embedding, EmbeddingError>,
    ) {
        let status = {
            let mut slot = entry.embedding.lock();
            if slot.generation != generation {
                return;
            }
            match result {
                Ok(embedding) => {
                    let embedding = Arc::new(embedding);
                    if let Err(e) = self.persist_embedding(&entry.id, &embedding) {
                        tracing::warn!("persisting embedding for {}: {e}", entry.id);
                    }
                    slot.result = Some(embedding);
                    slot.status = EmbeddingStatus::Ready;
                }
                Err(EmbeddingError::Cancelled) => return,
                Err(e) => {
                    slot.error = Some(ApiError::from(e).body());
                    slot.status = EmbeddingStatus::Failed;
                }
            }
            slot.status
        };
        self.emit(Event::Embedding {
            session_id: entry.id.clone(),
            status,
            generation,
        });
    }

    fn persist_embedding(&self, id: &str, embedding: &Embedding) -> io::Result<()> {
        let Some(dir) = self.persist_dir() else {
            return Ok(());
        };
        fs::write(dir.join(format!("{id}.embedding.json")), serde_json::to_vec(embedding)?)
    }
}
