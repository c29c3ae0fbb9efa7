//! Interactive-composition sessions, persisted one directory per session:
//!
//! ```text
//! <state>/<id>/input.png        8-bit RGB as uploaded, never rewritten
//! <state>/<id>/seg.png          16-bit segment ids
//! <state>/<id>/refs/ref_<i>.png candidate references
//! <state>/<id>/assignment.json  current choices, scores and edit log
//! <state>/<id>/result.png       latest colorization
//! <state>/<id>/session.json     id, version, timestamps, params, classes
//! ```
//!
//! Images are snapped to the 8-bit grid when a session is created, so state
//! reloaded from disk equals the state held in memory.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::colorizer::{lightness_of, ColorizerModel};
use crate::colorspace::RgbImage;
use crate::composition::{assign_segments, edit_assignment, CompositionAssignment, EditAction};
use crate::imagination::{BackendRegistry, LatentCode, ReferenceSet, SegmentationMap};
use crate::io::{load_labels_png, load_rgb, save_labels_png, save_rgb};
use crate::pipeline::{imagine, render, PipelineError, PipelineParams, Stage};

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("session `{0}` not found")]
    NotFound(String),
    #[error("invalid edit: {0}")]
    InvalidEdit(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("session storage: {0}")]
    Storage(String),
}

impl SessionError {
    pub fn stage(&self) -> Stage {
        match self {
            SessionError::Pipeline(e) => e.stage,
            SessionError::InvalidEdit(_) => Stage::Composition,
            _ => Stage::Session,
        }
    }
}

fn storage(e: impl std::fmt::Display) -> SessionError {
    SessionError::Storage(e.to_string())
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    /// Bumped on every state change; echoed back by clients with edits.
    pub version: u64,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub params: PipelineParams,
    pub width: usize,
    pub height: usize,
    /// Class id of every segment.
    pub classes: BTreeMap<u32, u32>,
    /// Display name of every class present.
    pub class_names: BTreeMap<u32, String>,
    pub latents: Vec<LatentCode>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub meta: SessionMeta,
    pub input: RgbImage,
    pub references: ReferenceSet,
    pub assignment: CompositionAssignment,
    pub result: RgbImage,
}

impl Session {
    pub fn segmentation(&self) -> &SegmentationMap {
        &self.references.segmentation
    }

    pub fn lightness(&self) -> Array2<f32> {
        lightness_of(&self.input)
    }

    pub fn save(&self, dir: &Path) -> Result<(), SessionError> {
        let refs = dir.join("refs");
        std::fs::create_dir_all(&refs).map_err(storage)?;
        let input = dir.join("input.png");
        if !input.exists() {
            save_rgb(&self.input, &input).map_err(storage)?;
        }
        save_labels_png(self.segmentation().labels(), dir.join("seg.png")).map_err(storage)?;
        for (i, r) in self.references.references.iter().enumerate() {
            let path = refs.join(format!("ref_{i}.png"));
            if !path.exists() {
                save_rgb(r, path).map_err(storage)?;
            }
        }
        self.save_mutable(dir)
    }

    /// Everything an edit or recolorize can change.
    fn save_mutable(&self, dir: &Path) -> Result<(), SessionError> {
        let json = serde_json::to_string_pretty(&self.assignment).map_err(storage)?;
        write_atomic(&dir.join("assignment.json"), json.as_bytes())?;
        save_rgb(&self.result, dir.join("result.png")).map_err(storage)?;
        let json = serde_json::to_string_pretty(&self.meta).map_err(storage)?;
        write_atomic(&dir.join("session.json"), json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Session, SessionError> {
        let read = |name: &str| std::fs::read_to_string(dir.join(name)).map_err(storage);
        let meta: SessionMeta = serde_json::from_str(&read("session.json")?).map_err(storage)?;
        let assignment: CompositionAssignment = serde_json::from_str(&read("assignment.json")?).map_err(storage)?;
        let input = load_rgb(dir.join("input.png")).map_err(storage)?;
        let labels = load_labels_png(dir.join("seg.png")).map_err(storage)?;
        let segmentation = SegmentationMap::from_parts(labels, meta.classes.clone()).map_err(storage)?;
        let references = (0..meta.latents.len())
            .map(|i| load_rgb(dir.join("refs").join(format!("ref_{i}.png"))).map_err(storage))
            .collect::<Result<Vec<_>, _>>()?;
        let references = ReferenceSet::new(references, meta.latents.clone(), segmentation).map_err(storage)?;
        if assignment.reference_count() != references.len() {
            return Err(storage("assignment and references disagree"));
        }
        let result = load_rgb(dir.join("result.png")).map_err(storage)?;
        Ok(Session { meta, input, references, assignment, result })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), SessionError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(storage)?;
    std::fs::rename(&tmp, path).map_err(storage)
}

/// Result of an edit under optimistic concurrency: the edit is always
/// applied (last writer wins); `conflict` reports that the client's version
/// was stale.
#[derive(Clone, Debug)]
pub struct EditOutcome {
    pub session: Session,
    pub conflict: bool,
}

/// Sessions under one state directory. Edits to one session are serialised;
/// distinct sessions proceed independently.
pub struct SessionStore {
    root: PathBuf,
    registry: Arc<BackendRegistry>,
    model: Arc<Mutex<ColorizerModel>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

impl SessionStore {
    pub fn new(
        root: impl Into<PathBuf>,
        registry: Arc<BackendRegistry>,
        model: Arc<Mutex<ColorizerModel>>,
    ) -> Result<Self, SessionError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(storage)?;
        Ok(SessionStore { root, registry, model, sessions: Mutex::new(HashMap::new()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    fn render(&self, session: &Session) -> Result<RgbImage, SessionError> {
        let model = self.model.lock().map_err(|_| storage("model lock poisoned"))?;
        let out = render(&session.lightness(), &session.references, &session.assignment, &model)?;
        Ok(out.result.quantized())
    }

    /// Imagine, compose and colorize `input`, then persist the session.
    pub fn create(&self, input: &RgbImage, params: &PipelineParams) -> Result<Session, SessionError> {
        let input = input.quantized();
        let lightness = lightness_of(&input);
        let imagined = imagine(&lightness, params, &self.registry)?;
        let segmentation = imagined.segmentation;
        let quantized: Vec<RgbImage> = imagined.references.references.iter().map(RgbImage::quantized).collect();
        let references = ReferenceSet::new(quantized, imagined.references.latents.clone(), segmentation.clone())
            .map_err(|e| PipelineError::new(Stage::Generation, e))?;
        let lum = lightness.mapv(|v| v / 100.0);
        let assignment = assign_segments(&lum, &references).map_err(|e| PipelineError::new(Stage::Composition, e))?;
        let segmenter = self.registry.segmenter(&params.segmenter).map_err(|e| PipelineError::new(Stage::Context, e))?;
        let class_names =
            segmentation.classes().values().map(|&c| (c, segmenter.class_name(c))).collect::<BTreeMap<_, _>>();
        let now = now_ms();
        let (height, width) = input.dim();
        let meta = SessionMeta {
            id: uuid::Uuid::new_v4().simple().to_string(),
            version: 1,
            created_ms: now,
            updated_ms: now,
            params: params.clone(),
            width,
            height,
            classes: segmentation.classes().clone(),
            class_names,
            latents: references.latents.clone(),
        };
        let mut session = Session { meta, input, references, assignment, result: RgbImage::uniform(height, width, [0.0; 3]).expect("valid") };
        session.result = self.render(&session)?;
        session.save(&self.dir(&session.meta.id))?;
        let id = session.meta.id.clone();
        self.sessions.lock().expect("store lock").insert(id, Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    fn handle(&self, id: &str) -> Result<Arc<Mutex<Session>>, SessionError> {
        let mut sessions = self.sessions.lock().expect("store lock");
        if let Some(s) = sessions.get(id) {
            return Ok(s.clone());
        }
        let valid = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-');
        let dir = self.dir(id);
        if !valid || !dir.join("session.json").exists() {
            return Err(SessionError::NotFound(id.to_string()));
        }
        let s = Arc::new(Mutex::new(Session::load(&dir)?));
        sessions.insert(id.to_string(), s.clone());
        Ok(s)
    }

    pub fn get(&self, id: &str) -> Result<Session, SessionError> {
        Ok(self.handle(id)?.lock().expect("session lock").clone())
    }

    /// Ids of every session on disk, sorted.
    pub fn list(&self) -> Result<Vec<String>, SessionError> {
        let mut ids: Vec<String> = std::fs::read_dir(&self.root)
            .map_err(storage)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("session.json").exists())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// Apply an edit. `expected_version` is the version the client last saw.
    pub fn apply_edit(
        &self,
        id: &str,
        segment_id: u32,
        action: EditAction,
        expected_version: Option<u64>,
    ) -> Result<EditOutcome, SessionError> {
        let handle = self.handle(id)?;
        let mut session = handle.lock().expect("session lock");
        let conflict = expected_version.is_some_and(|v| v != session.meta.version);
        let next = edit_assignment(&session.assignment, segment_id, action)
            .map_err(|e| SessionError::InvalidEdit(e.to_string()))?;
        let mut updated = session.clone();
        updated.assignment = next;
        updated.meta.version += 1;
        updated.meta.updated_ms = now_ms().max(session.meta.updated_ms);
        updated.save_mutable(&self.dir(id))?;
        *session = updated;
        Ok(EditOutcome { session: session.clone(), conflict })
    }

    /// Re-render from the cached references and current assignment. The
    /// version changes only when the result does.
    pub fn recolorize(&self, id: &str) -> Result<Session, SessionError> {
        let handle = self.handle(id)?;
        let mut session = handle.lock().expect("session lock");
        let result = self.render(&session)?;
        if result != session.result {
            let mut updated = session.clone();
            updated.result = result;
            updated.meta.version += 1;
            updated.meta.updated_ms = now_ms().max(session.meta.updated_ms);
            updated.save_mutable(&self.dir(id))?;
            *session = updated;
        }
        Ok(session.clone())
    }
}
