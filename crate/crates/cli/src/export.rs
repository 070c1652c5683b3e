//! Headless viewport export: load a log, optionally embed and select, and
//! write one payload file per descriptor.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;
use vizarel_core::embedding::embed_session;
use vizarel_core::viewport::{
    build_viewport, lasso_select, Selection, SelectionOrigin, SelectionRegistry, ViewportInputs,
    ViewportRegistry,
};
use vizarel_core::{
    load_session, Embedding, EmbeddingConfig, EmbeddingError, ExperienceId, IngestError,
    ViewportDescriptor, ViewportError,
};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{0}")]
    Ingest(#[from] IngestError),
    #[error("{0}")]
    Embedding(#[from] EmbeddingError),
    #[error("{0}")]
    Viewport(#[from] ViewportError),
    #[error("descriptor file: {0}")]
    Descriptor(String),
    #[error("writing payloads: {0}")]
    Io(#[from] std::io::Error),
}

impl ExportError {
    pub fn code(&self) -> &'static str {
        match self {
            ExportError::Ingest(e) => e.code(),
            ExportError::Embedding(e) => e.code(),
            ExportError::Viewport(e) => e.code(),
            ExportError::Descriptor(_) => "INVALID_DESCRIPTOR",
            ExportError::Io(_) => "IO_ERROR",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            ExportError::Ingest(e) => e.exit_code(),
            ExportError::Io(_) => 1,
            ExportError::Descriptor(_) => 3,
            ExportError::Embedding(_) | ExportError::Viewport(_) => 6,
        }
    }
}

/// A named selection in an export plan.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSpec {
    pub id: String,
    #[serde(default)]
    pub polygon: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub ids: Option<Vec<ExperienceId>>,
    #[serde(default)]
    pub episode: Option<usize>,
}

/// Contents of a descriptor file. A bare descriptor or a bare array of
/// descriptors is also accepted.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportPlan {
    #[serde(default)]
    pub embedding: Option<EmbeddingConfig>,
    #[serde(default)]
    pub selections: Vec<SelectionSpec>,
    pub viewports: Vec<ViewportDescriptor>,
}

impl ExportPlan {
    pub fn parse(text: &str) -> Result<Self, ExportError> {
        let bad = |e: serde_json::Error| ExportError::Descriptor(e.to_string());
        let value: Value = serde_json::from_str(text).map_err(bad)?;
        match &value {
            Value::Array(_) => Ok(ExportPlan {
                embedding: None,
                selections: Vec::new(),
                viewports: serde_json::from_value(value).map_err(bad)?,
            }),
            Value::Object(map) if map.contains_key("viewport_type") => Ok(ExportPlan {
                embedding: None,
                selections: Vec::new(),
                viewports: vec![serde_json::from_value(value).map_err(bad)?],
            }),
            _ => serde_json::from_value(value).map_err(bad),
        }
    }
}

/// Runs `plan` against the log at `log` and writes `<viewport id>.json`
/// files into `out_dir`. Returns the written paths in plan order.
pub fn export(log: &Path, plan: &ExportPlan, out_dir: &Path) -> Result<Vec<PathBuf>, ExportError> {
    let (session, _report) = load_session(log)?;
    let embedding: Option<Embedding> = match &plan.embedding {
        Some(config) => Some(embed_session(&session, config)?),
        None => None,
    };

    let mut selections = SelectionRegistry::default();
    let mut names = BTreeMap::new();
    for spec in &plan.selections {
        let selection = match (&spec.polygon, &spec.ids, spec.episode) {
            (Some(polygon), None, None) => {
                let emb = embedding.as_ref().ok_or(ViewportError::EmbeddingNotReady)?;
                lasso_select(emb, polygon)?
            }
            (None, Some(ids), None) => Selection::from_ids(&session, ids.iter().copied(), SelectionOrigin::Click)?,
            (None, None, Some(k)) => Selection::episode(&session, k)?,
            _ => {
                return Err(ExportError::Descriptor(format!(
                    "selection `{}` needs exactly one of polygon, ids, episode",
                    spec.id
                )))
            }
        };
        names.insert(spec.id.clone(), selections.insert(selection));
    }

    let mut registry = ViewportRegistry::default();
    let mut stored = Vec::new();
    for descriptor in &plan.viewports {
        let mut descriptor = descriptor.clone();
        if let Some(name) = &descriptor.binding.selection_id {
            if let Some(id) = names.get(name) {
                descriptor.binding.selection_id = Some(id.clone());
            }
        }
        let id = registry.create(descriptor)?;
        stored.push(id);
    }

    let inputs = ViewportInputs {
        session: &session,
        embedding: embedding.as_ref(),
        selections: &selections,
    };
    let mut payloads = Vec::new();
    for id in &stored {
        let payload = build_viewport(registry.get(id)?, inputs)?;
        payloads.push((id.clone(), payload));
    }

    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (id, payload) in payloads {
        let path = out_dir.join(format!("{id}.json"));
        let mut bytes = serde_json::to_vec_pretty(&payload).map_err(std::io::Error::other)?;
        bytes.push(b'\n');
        fs::write(&path, bytes)?;
        written.push(path);
    }
    Ok(written)
}
