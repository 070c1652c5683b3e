//! Viewports: a typed view over a session, backed by one of four specs
//! (image buffer, line plot, scatter plot, histogram). A descriptor binds a
//! viewport type and spec to a data stream; builders turn it into a
//! render-ready payload whose every datum carries its experience id.

mod builders;
pub mod selection;
pub mod stats;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::Embedding;
use crate::rollout::{ExperienceId, ModelError, Session};

pub use builders::*;
pub use selection::{lasso_select, point_in_polygon, Selection, SelectionOrigin, SelectionRegistry};
pub use stats::Histogram;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ViewportError {
    #[error("episode {0} not found")]
    EpisodeNotFound(usize),
    #[error("experience {0} not found")]
    NotFound(ExperienceId),
    #[error("value estimates are missing; TD-based viewports are disabled")]
    MissingValueEstimate,
    #[error("no render references for this data")]
    NoRenders,
    #[error("log carries no reward components")]
    NoComponents,
    #[error("selection is empty")]
    EmptySelection,
    #[error("selection has {0} members, need at least 2")]
    SelectionTooSmall(usize),
    #[error("stream `{0}` unavailable")]
    StreamUnavailable(String),
    #[error("degenerate polygon: {0}")]
    DegeneratePolygon(String),
    #[error("incompatible spec: {0}")]
    IncompatibleSpec(String),
    #[error("unknown selection `{0}`")]
    UnknownSelection(String),
    #[error("unknown viewport `{0}`")]
    UnknownViewport(String),
    #[error("missing binding: {0}")]
    MissingBinding(String),
    #[error("embedding not ready")]
    EmbeddingNotReady,
    #[error("embedding does not belong to this session")]
    EmbeddingMismatch,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

impl ViewportError {
    pub fn code(&self) -> &'static str {
        match self {
            ViewportError::EpisodeNotFound(_) => "EPISODE_NOT_FOUND",
            ViewportError::NotFound(_) => "NOT_FOUND",
            ViewportError::MissingValueEstimate => "MISSING_VALUE_ESTIMATE",
            ViewportError::NoRenders => "NO_RENDERS",
            ViewportError::NoComponents => "NO_COMPONENTS",
            ViewportError::EmptySelection => "EMPTY_SELECTION",
            ViewportError::SelectionTooSmall(_) => "SELECTION_TOO_SMALL",
            ViewportError::StreamUnavailable(_) => "STREAM_UNAVAILABLE",
            ViewportError::DegeneratePolygon(_) => "DEGENERATE_POLYGON",
            ViewportError::IncompatibleSpec(_) => "INCOMPATIBLE_SPEC",
            ViewportError::UnknownSelection(_) => "UNKNOWN_SELECTION",
            ViewportError::UnknownViewport(_) => "UNKNOWN_VIEWPORT",
            ViewportError::MissingBinding(_) => "MISSING_BINDING",
            ViewportError::EmbeddingNotReady => "EMBEDDING_NOT_READY",
            ViewportError::EmbeddingMismatch => "EMBEDDING_MISMATCH",
            ViewportError::InvalidParameter(_) => "INVALID_PARAMETER",
        }
    }
}

impl From<ModelError> for ViewportError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::MissingValueEstimate { .. } => ViewportError::MissingValueEstimate,
            ModelError::NotFound(id) => ViewportError::NotFound(id),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecKind {
    ImageBuffer,
    LinePlot,
    ScatterPlot,
    Histogram,
}

/// Kind-specific settings. Only the fields belonging to the spec's kind may
/// be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecOptions {
    /// histogram
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    /// histogram: also report entropy per episode over the same bins
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy_by_episode: Option<bool>,
    /// line_plot
    #[serde(skip_serializing_if = "Option::is_none")]
    pub series_labels: Option<Vec<String>>,
    /// scatter_plot
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_size: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_axis: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_axis: Option<String>,
}

pub const DEFAULT_BINS: usize = 16;
pub const DEFAULT_BASE_SIZE: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spec {
    pub kind: SpecKind,
    #[serde(default)]
    pub options: SpecOptions,
}

impl Spec {
    pub fn new(kind: SpecKind) -> Self {
        Self {
            kind,
            options: SpecOptions::default(),
        }
    }

    pub fn histogram(bins: usize) -> Self {
        Self {
            kind: SpecKind::Histogram,
            options: SpecOptions {
                bins: Some(bins),
                ..SpecOptions::default()
            },
        }
    }

    pub fn validate(&self) -> Result<(), ViewportError> {
        let o = &self.options;
        let bad = |m: &str| Err(ViewportError::IncompatibleSpec(m.to_string()));
        let histogram_opts = o.bins.is_some() || o.entropy_by_episode.is_some();
        let line_opts = o.series_labels.is_some();
        let scatter_opts = o.base_size.is_some() || o.x_axis.is_some() || o.y_axis.is_some();
        match self.kind {
            SpecKind::Histogram => {
                if line_opts || scatter_opts {
                    return bad("histogram accepts only `bins` and `entropy_by_episode`");
                }
                if o.bins == Some(0) {
                    return bad("histogram bins must be positive");
                }
            }
            SpecKind::LinePlot => {
                if histogram_opts || scatter_opts {
                    return bad("line_plot accepts only `series_labels`");
                }
            }
            SpecKind::ScatterPlot => {
                if histogram_opts || line_opts {
                    return bad("scatter_plot accepts only `base_size`, `x_axis`, `y_axis`");
                }
                if let Some(b) = o.base_size {
                    if !(b > 0.0 && b.is_finite()) {
                        return bad("scatter_plot base_size must be positive");
                    }
                }
            }
            SpecKind::ImageBuffer => {
                if histogram_opts || line_opts || scatter_opts {
                    return bad("image_buffer takes no options");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewportType {
    State,
    Action,
    Reward,
    ReplayBuffer,
    Distribution,
    TensorComparison,
    Trajectory,
}

impl ViewportType {
    pub const ALL: [ViewportType; 7] = [
        ViewportType::State,
        ViewportType::Action,
        ViewportType::Reward,
        ViewportType::ReplayBuffer,
        ViewportType::Distribution,
        ViewportType::TensorComparison,
        ViewportType::Trajectory,
    ];

    pub fn admits(self, kind: SpecKind) -> bool {
        use SpecKind::*;
        match self {
            ViewportType::State => matches!(kind, ImageBuffer | LinePlot),
            ViewportType::Action | ViewportType::Reward | ViewportType::Trajectory => kind == LinePlot,
            ViewportType::ReplayBuffer | ViewportType::TensorComparison => kind == ScatterPlot,
            ViewportType::Distribution => kind == Histogram,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationScope {
    #[default]
    Global,
    PerEpisode,
}

/// What a viewport reads from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Binding {
    pub session_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episode: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stream: Option<String>,
    pub normalization: NormalizationScope,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_threshold: Option<f64>,
}

/// Per-request overrides of a stored binding.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewportQuery {
    pub episode: Option<usize>,
    pub t: Option<usize>,
    pub selection: Option<String>,
    pub stream: Option<String>,
    pub normalization: Option<NormalizationScope>,
    pub threshold: Option<f64>,
}

impl Binding {
    pub fn merged(&self, q: &ViewportQuery) -> Binding {
        Binding {
            session_id: self.session_id.clone(),
            episode: q.episode.or(self.episode),
            t: q.t.or(self.t),
            selection_id: q.selection.clone().or_else(|| self.selection_id.clone()),
            stream: q.stream.clone().or_else(|| self.stream.clone()),
            normalization: q.normalization.unwrap_or(self.normalization),
            std_threshold: q.threshold.or(self.std_threshold),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewportDescriptor {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub viewport_type: ViewportType,
    pub spec: Spec,
    #[serde(default)]
    pub binding: Binding,
}

impl ViewportDescriptor {
    pub fn new(viewport_type: ViewportType, spec: Spec) -> Self {
        Self {
            id: None,
            viewport_type,
            spec,
            binding: Binding::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ViewportError> {
        if !self.viewport_type.admits(self.spec.kind) {
            return Err(ViewportError::IncompatibleSpec(format!(
                "{:?} viewport cannot be backed by a {:?} spec",
                self.viewport_type, self.spec.kind
            )));
        }
        self.spec.validate()?;
        if let Some(th) = self.binding.std_threshold {
            if !(th >= 0.0 && th.is_finite()) {
                return Err(ViewportError::IncompatibleSpec("std_threshold must be >= 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub x: Vec<usize>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntropy {
    pub episode: usize,
    pub count: usize,
    pub entropy_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayloadContent {
    LinePlot {
        series: Vec<Series>,
    },
    ScatterPlot {
        coords: Vec<[f64; 2]>,
        sizes: Vec<f64>,
    },
    Histogram {
        stream: String,
        edges: Vec<f64>,
        counts: Vec<usize>,
        total: usize,
        entropy_bits: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        entropy_by_episode: Option<Vec<EpisodeEntropy>>,
    },
    ImageBuffer {
        episode: usize,
        t: usize,
        render: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        url: Option<String>,
    },
    TensorComparison {
        stream: String,
        labels: Vec<String>,
        members: Vec<Vec<f64>>,
        mean: Vec<f64>,
        std: Vec<f64>,
        threshold: f64,
        highlighted: Vec<bool>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewportPayload {
    pub descriptor_id: String,
    pub viewport_type: ViewportType,
    pub content: PayloadContent,
    /// Experience id of every datum, in datum order.
    pub crosslink: Vec<ExperienceId>,
}

impl ViewportPayload {
    /// Shape checks every payload must pass: datum counts agree with the
    /// crosslink list and histogram counts add up.
    pub fn check_schema(&self) -> Result<(), String> {
        let n = self.crosslink.len();
        match &self.content {
            PayloadContent::LinePlot { series } => {
                for s in series {
                    if s.x.len() != n || s.y.len() != n {
                        return Err(format!("series `{}` length differs from crosslink", s.name));
                    }
                }
            }
            PayloadContent::ScatterPlot { coords, sizes } => {
                if coords.len() != n || sizes.len() != n {
                    return Err("scatter length differs from crosslink".into());
                }
            }
            PayloadContent::Histogram {
                edges,
                counts,
                total,
                entropy_bits,
                ..
            } => {
                if edges.len() != counts.len() + 1 {
                    return Err("histogram edges/counts mismatch".into());
                }
                if counts.iter().sum::<usize>() != *total || *total != n {
                    return Err("histogram counts do not sum to the selection size".into());
                }
                let bound = (counts.len() as f64).log2() + 1e-12;
                if !(*entropy_bits >= 0.0 && *entropy_bits <= bound) {
                    return Err("entropy out of range".into());
                }
            }
            PayloadContent::ImageBuffer { .. } => {
                if n != 1 {
                    return Err("image payload must reference exactly one experience".into());
                }
            }
            PayloadContent::TensorComparison {
                labels,
                members,
                mean,
                std,
                highlighted,
                ..
            } => {
                let d = labels.len();
                if members.len() != n || members.iter().any(|m| m.len() != d) {
                    return Err("tensor members mismatch".into());
                }
                if mean.len() != d || std.len() != d || highlighted.len() != d {
                    return Err("tensor stats mismatch".into());
                }
            }
        }
        Ok(())
    }
}

/// Stored descriptors for one session.
#[derive(Debug, Clone, Default)]
pub struct ViewportRegistry {
    next: u64,
    descriptors: BTreeMap<String, ViewportDescriptor>,
}

impl ViewportRegistry {
    /// Validates and stores a descriptor, returning its id. A caller-chosen
    /// id is kept when it is not already taken.
    pub fn create(&mut self, mut descriptor: ViewportDescriptor) -> Result<String, ViewportError> {
        descriptor.validate()?;
        let id = match descriptor.id.take() {
            Some(id) if self.descriptors.contains_key(&id) => {
                return Err(ViewportError::InvalidParameter(format!("viewport id `{id}` already exists")));
            }
            Some(id) if !id.is_empty() => id,
            _ => loop {
                self.next += 1;
                let candidate = format!("vp-{}", self.next);
                if !self.descriptors.contains_key(&candidate) {
                    break candidate;
                }
            },
        };
        descriptor.id = Some(id.clone());
        self.descriptors.insert(id.clone(), descriptor);
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Result<&ViewportDescriptor, ViewportError> {
        self.descriptors
            .get(id)
            .ok_or_else(|| ViewportError::UnknownViewport(id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ViewportDescriptor> {
        self.descriptors.values()
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }
}

/// Everything a descriptor may need at build time.
#[derive(Clone, Copy)]
pub struct ViewportInputs<'a> {
    pub session: &'a Session,
    pub embedding: Option<&'a Embedding>,
    pub selections: &'a SelectionRegistry,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> Spec {
        Spec::new(SpecKind::LinePlot)
    }

    #[test]
    fn compatibility_table() {
        let mut reg = ViewportRegistry::default();
        assert!(reg
            .create(ViewportDescriptor::new(ViewportType::ReplayBuffer, Spec::new(SpecKind::ScatterPlot)))
            .is_ok());
        assert!(matches!(
            reg.create(ViewportDescriptor::new(ViewportType::Trajectory, Spec::histogram(8))),
            Err(ViewportError::IncompatibleSpec(_))
        ));
        assert!(matches!(
            reg.create(ViewportDescriptor::new(ViewportType::Distribution, Spec::histogram(0))),
            Err(ViewportError::IncompatibleSpec(_))
        ));
        for t in ViewportType::ALL {
            let admitted: Vec<_> = [SpecKind::ImageBuffer, SpecKind::LinePlot, SpecKind::ScatterPlot, SpecKind::Histogram]
                .into_iter()
                .filter(|k| t.admits(*k))
                .collect();
            assert!(!admitted.is_empty());
        }
        assert!(ViewportType::State.admits(SpecKind::ImageBuffer));
        assert!(!ViewportType::Action.admits(SpecKind::ImageBuffer));
    }

    #[test]
    fn options_must_match_kind() {
        let mut spec = line();
        spec.options.bins = Some(4);
        assert!(spec.validate().is_err());
        let mut spec = Spec::new(SpecKind::ScatterPlot);
        spec.options.base_size = Some(-1.0);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn registry_ids() {
        let mut reg = ViewportRegistry::default();
        let a = reg.create(ViewportDescriptor::new(ViewportType::Action, line())).unwrap();
        let b = reg.create(ViewportDescriptor::new(ViewportType::Action, line())).unwrap();
        assert_ne!(a, b);
        let mut named = ViewportDescriptor::new(ViewportType::Reward, line());
        named.id = Some("mine".into());
        assert_eq!(reg.create(named.clone()).unwrap(), "mine");
        assert!(reg.create(named).is_err());
        assert_eq!(reg.len(), 3);
        assert!(matches!(reg.get("nope"), Err(ViewportError::UnknownViewport(_))));
    }

    #[test]
    fn descriptor_json_shape() {
        let json = r#"{"viewport_type":"distribution","spec":{"kind":"histogram","options":{"bins":8}},"binding":{"selection_id":"sel-1","stream":"reward"}}"#;
        let d: ViewportDescriptor = serde_json::from_str(json).unwrap();
        assert_eq!(d.spec.options.bins, Some(8));
        assert_eq!(d.binding.normalization, NormalizationScope::Global);
        d.validate().unwrap();
    }

    #[test]
    fn query_overrides_binding() {
        let b = Binding {
            episode: Some(1),
            stream: Some("reward".into()),
            ..Binding::default()
        };
        let q = ViewportQuery {
            episode: Some(4),
            normalization: Some(NormalizationScope::PerEpisode),
            ..ViewportQuery::default()
        };
        let m = b.merged(&q);
        assert_eq!(m.episode, Some(4));
        assert_eq!(m.stream.as_deref(), Some("reward"));
        assert_eq!(m.normalization, NormalizationScope::PerEpisode);
    }
}
