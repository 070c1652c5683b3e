use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::selection::Selection;
use super::stats::{bin_counts, column_stats, entropy_bits, histogram};
use super::{
    EpisodeEntropy, NormalizationScope, PayloadContent, Series, SpecKind, ViewportDescriptor,
    ViewportError, ViewportInputs, ViewportPayload, ViewportType, DEFAULT_BASE_SIZE, DEFAULT_BINS,
};
use crate::embedding::Embedding;
use crate::rollout::{normalize_abs, Episode, ExperienceId, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateMode {
    Components,
    Render,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistributionStream {
    ActionDim(usize),
    Reward,
    TdError,
}

impl FromStr for DistributionStream {
    type Err = ViewportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let dim = |rest: &str| {
            rest.parse::<usize>()
                .map(DistributionStream::ActionDim)
                .map_err(|_| ViewportError::StreamUnavailable(s.to_string()))
        };
        match s {
            "reward" => Ok(DistributionStream::Reward),
            "td_error" => Ok(DistributionStream::TdError),
            "action" => Ok(DistributionStream::ActionDim(0)),
            _ => {
                if let Some(rest) = s.strip_prefix("action_dim_") {
                    dim(rest)
                } else if let Some(rest) = s.strip_prefix("action:") {
                    dim(rest)
                } else {
                    Err(ViewportError::StreamUnavailable(s.to_string()))
                }
            }
        }
    }
}

impl DistributionStream {
    fn name(self) -> String {
        match self {
            DistributionStream::ActionDim(k) => format!("action_dim_{k}"),
            DistributionStream::Reward => "reward".into(),
            DistributionStream::TdError => "td_error".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorStream {
    Obs,
    Action,
}

impl FromStr for TensorStream {
    type Err = ViewportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "obs" => Ok(TensorStream::Obs),
            "action" => Ok(TensorStream::Action),
            other => Err(ViewportError::StreamUnavailable(other.to_string())),
        }
    }
}

fn episode(session: &Session, index: usize) -> Result<&Episode, ViewportError> {
    session
        .episode(index)
        .ok_or(ViewportError::EpisodeNotFound(index))
}

fn payload(viewport_type: ViewportType, content: PayloadContent, crosslink: Vec<ExperienceId>) -> ViewportPayload {
    ViewportPayload {
        descriptor_id: String::new(),
        viewport_type,
        content,
        crosslink,
    }
}

fn timeline(ep: &Episode) -> (Vec<usize>, Vec<ExperienceId>) {
    (
        ep.steps.iter().map(|s| s.t).collect(),
        ep.steps.iter().map(|s| s.id()).collect(),
    )
}

/// Components mode: one line per observation dimension. Render mode: the
/// image for timestep `t`.
pub fn build_state_viewport(
    session: &Session,
    episode_index: usize,
    mode: StateMode,
    t: usize,
) -> Result<ViewportPayload, ViewportError> {
    let ep = episode(session, episode_index)?;
    match mode {
        StateMode::Components => {
            let (x, ids) = timeline(ep);
            let series = (0..session.meta.obs_dim)
                .map(|k| Series {
                    name: session.meta.obs_label(k),
                    x: x.clone(),
                    y: ep.steps.iter().map(|s| s.obs[k]).collect(),
                })
                .collect();
            Ok(payload(ViewportType::State, PayloadContent::LinePlot { series }, ids))
        }
        StateMode::Render => {
            if !ep.has_renders() {
                return Err(ViewportError::NoRenders);
            }
            let step = ep
                .steps
                .get(t)
                .ok_or(ViewportError::NotFound(ExperienceId::new(episode_index, t)))?;
            let render = step.render.clone().ok_or(ViewportError::NoRenders)?;
            Ok(payload(
                ViewportType::State,
                PayloadContent::ImageBuffer {
                    episode: episode_index,
                    t,
                    render,
                    url: None,
                },
                vec![step.id()],
            ))
        }
    }
}

pub fn build_action_viewport(session: &Session, episode_index: usize) -> Result<ViewportPayload, ViewportError> {
    let ep = episode(session, episode_index)?;
    let (x, ids) = timeline(ep);
    let series = (0..session.meta.action_dim)
        .map(|k| Series {
            name: session.meta.action_label(k),
            x: x.clone(),
            y: ep.steps.iter().map(|s| s.action[k]).collect(),
        })
        .collect();
    Ok(payload(ViewportType::Action, PayloadContent::LinePlot { series }, ids))
}

/// Scalar mode: reward and discounted return. Components mode: one line per
/// logged reward component.
pub fn build_reward_viewport(
    session: &Session,
    episode_index: usize,
    components: bool,
) -> Result<ViewportPayload, ViewportError> {
    let ep = episode(session, episode_index)?;
    let (x, ids) = timeline(ep);
    let series = if components {
        let rows: Vec<&Vec<f64>> = ep
            .steps
            .iter()
            .map(|s| s.reward_components.as_ref())
            .collect::<Option<_>>()
            .ok_or(ViewportError::NoComponents)?;
        let width = rows.first().map_or(0, |r| r.len());
        if width == 0 {
            return Err(ViewportError::NoComponents);
        }
        (0..width)
            .map(|k| Series {
                name: session.meta.reward_component_label(k),
                x: x.clone(),
                y: rows.iter().map(|r| r[k]).collect(),
            })
            .collect()
    } else {
        let rewards = ep.rewards();
        let returns = session
            .episode_returns(episode_index)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| crate::rollout::compute_returns(&rewards, session.meta.discount));
        vec![
            Series {
                name: "reward".into(),
                x: x.clone(),
                y: rewards,
            },
            Series {
                name: "return".into(),
                x,
                y: returns,
            },
        ]
    };
    Ok(payload(ViewportType::Reward, PayloadContent::LinePlot { series }, ids))
}

/// Scatter of the embedding with sizes `base * (0.25 + 0.75 * |td|_norm)`.
pub fn build_replay_buffer_viewport(
    session: &Session,
    embedding: &Embedding,
    base_size: f64,
) -> Result<ViewportPayload, ViewportError> {
    if embedding.ids.iter().any(|id| session.resolve(*id).is_err()) {
        return Err(ViewportError::EmbeddingMismatch);
    }
    let sizes = embedding
        .point_sizes
        .iter()
        .map(|s| base_size * (0.25 + 0.75 * s))
        .collect();
    Ok(payload(
        ViewportType::ReplayBuffer,
        PayloadContent::ScatterPlot {
            coords: embedding.coords.clone(),
            sizes,
        },
        embedding.ids.clone(),
    ))
}

fn stream_value(session: &Session, id: ExperienceId, stream: DistributionStream) -> Result<f64, ViewportError> {
    let exp = session.resolve(id)?;
    match stream {
        DistributionStream::Reward => Ok(exp.reward),
        DistributionStream::ActionDim(k) => exp
            .action
            .get(k)
            .copied()
            .ok_or_else(|| ViewportError::StreamUnavailable(stream.name())),
        DistributionStream::TdError => {
            let td = session
                .td_errors
                .as_ref()
                .ok_or_else(|| ViewportError::StreamUnavailable(stream.name()))?;
            Ok(td[session.flat_index(id)?])
        }
    }
}

/// Histogram of one stream over the selected experiences, with its entropy.
pub fn build_distribution_viewport(
    session: &Session,
    selection: &Selection,
    stream: DistributionStream,
    bins: usize,
    entropy_by_episode: bool,
) -> Result<ViewportPayload, ViewportError> {
    if selection.is_empty() {
        return Err(ViewportError::EmptySelection);
    }
    if bins == 0 {
        return Err(ViewportError::InvalidParameter("bins must be positive".into()));
    }
    let values: Vec<f64> = selection
        .members
        .iter()
        .map(|id| stream_value(session, *id, stream))
        .collect::<Result<_, _>>()?;
    let hist = histogram(&values, bins);

    let by_episode = entropy_by_episode.then(|| {
        let mut groups: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
        for (id, v) in selection.members.iter().zip(&values) {
            groups.entry(id.episode).or_default().push(*v);
        }
        groups
            .into_iter()
            .map(|(episode, vals)| {
                let counts = bin_counts(&vals, &hist.edges);
                EpisodeEntropy {
                    episode,
                    count: vals.len(),
                    entropy_bits: entropy_bits(&counts),
                }
            })
            .collect()
    });

    Ok(payload(
        ViewportType::Distribution,
        PayloadContent::Histogram {
            stream: stream.name(),
            total: hist.total(),
            edges: hist.edges,
            counts: hist.counts,
            entropy_bits: hist.entropy_bits,
            entropy_by_episode: by_episode,
        },
        selection.members.clone(),
    ))
}

/// Per-dimension mean and population std across the selected tensors;
/// dimensions with std strictly above `std_threshold` are highlighted.
pub fn build_tensor_comparison_viewport(
    session: &Session,
    selection: &Selection,
    stream: TensorStream,
    std_threshold: f64,
) -> Result<ViewportPayload, ViewportError> {
    if selection.len() < 2 {
        return Err(ViewportError::SelectionTooSmall(selection.len()));
    }
    if !(std_threshold >= 0.0) {
        return Err(ViewportError::InvalidParameter("std_threshold must be >= 0".into()));
    }
    let members: Vec<Vec<f64>> = selection
        .members
        .iter()
        .map(|id| {
            let exp = session.resolve(*id)?;
            Ok(match stream {
                TensorStream::Obs => exp.obs.clone(),
                TensorStream::Action => exp.action.clone(),
            })
        })
        .collect::<Result<_, ViewportError>>()?;
    let (mean, std) = column_stats(&members);
    let labels = (0..mean.len())
        .map(|k| match stream {
            TensorStream::Obs => session.meta.obs_label(k),
            TensorStream::Action => session.meta.action_label(k),
        })
        .collect();
    let highlighted = std.iter().map(|&s| s > std_threshold).collect();
    Ok(payload(
        ViewportType::TensorComparison,
        PayloadContent::TensorComparison {
            stream: match stream {
                TensorStream::Obs => "obs".into(),
                TensorStream::Action => "action".into(),
            },
            labels,
            members,
            mean,
            std,
            threshold: std_threshold,
            highlighted,
        },
        selection.members.clone(),
    ))
}

/// Normalized |TD error| over the whole episode containing `anchor`.
pub fn build_trajectory_viewport(
    session: &Session,
    anchor: ExperienceId,
    normalization: NormalizationScope,
) -> Result<ViewportPayload, ViewportError> {
    session.resolve(anchor)?;
    let all = session.td_errors.as_ref().ok_or(ViewportError::MissingValueEstimate)?;
    let ep = episode(session, anchor.episode)?;
    let y = match normalization {
        NormalizationScope::PerEpisode => {
            normalize_abs(session.episode_td_errors(anchor.episode).unwrap_or_default())
        }
        NormalizationScope::Global => {
            let start = session.flat_index(ExperienceId::new(anchor.episode, 0))?;
            normalize_abs(all)[start..start + ep.len()].to_vec()
        }
    };
    let (x, ids) = timeline(ep);
    Ok(payload(
        ViewportType::Trajectory,
        PayloadContent::LinePlot {
            series: vec![Series {
                name: "|td_error|".into(),
                x,
                y,
            }],
        },
        ids,
    ))
}

/// Builds the payload for a stored descriptor.
pub fn build_viewport(
    descriptor: &ViewportDescriptor,
    inputs: ViewportInputs<'_>,
) -> Result<ViewportPayload, ViewportError> {
    descriptor.validate()?;
    let b = &descriptor.binding;
    let session = inputs.session;
    let selection = || -> Result<&Selection, ViewportError> {
        let id = b
            .selection_id
            .as_deref()
            .ok_or_else(|| ViewportError::MissingBinding("selection_id".into()))?;
        inputs.selections.get(id)
    };
    let opts = &descriptor.spec.options;

    let mut out = match descriptor.viewport_type {
        ViewportType::State => {
            let mode = match descriptor.spec.kind {
                SpecKind::ImageBuffer => StateMode::Render,
                _ => StateMode::Components,
            };
            build_state_viewport(session, b.episode.unwrap_or(0), mode, b.t.unwrap_or(0))?
        }
        ViewportType::Action => build_action_viewport(session, b.episode.unwrap_or(0))?,
        ViewportType::Reward => {
            let components = match b.stream.as_deref() {
                None | Some("reward") => false,
                Some("reward_components") => true,
                Some(other) => return Err(ViewportError::StreamUnavailable(other.to_string())),
            };
            build_reward_viewport(session, b.episode.unwrap_or(0), components)?
        }
        ViewportType::ReplayBuffer => {
            let embedding = inputs.embedding.ok_or(ViewportError::EmbeddingNotReady)?;
            build_replay_buffer_viewport(session, embedding, opts.base_size.unwrap_or(DEFAULT_BASE_SIZE))?
        }
        ViewportType::Distribution => {
            let stream: DistributionStream = b.stream.as_deref().unwrap_or("action").parse()?;
            build_distribution_viewport(
                session,
                selection()?,
                stream,
                opts.bins.unwrap_or(DEFAULT_BINS),
                opts.entropy_by_episode.unwrap_or(false),
            )?
        }
        ViewportType::TensorComparison => {
            let stream: TensorStream = b.stream.as_deref().unwrap_or("action").parse()?;
            build_tensor_comparison_viewport(session, selection()?, stream, b.std_threshold.unwrap_or(0.0))?
        }
        ViewportType::Trajectory => {
            let anchor = match (b.episode, b.t) {
                (Some(e), t) => ExperienceId::new(e, t.unwrap_or(0)),
                (None, _) => *selection()?
                    .members
                    .first()
                    .ok_or(ViewportError::EmptySelection)?,
            };
            build_trajectory_viewport(session, anchor, b.normalization)?
        }
    };

    if let Some(labels) = &opts.series_labels {
        if let PayloadContent::LinePlot { series } = &mut out.content {
            for (s, label) in series.iter_mut().zip(labels) {
                s.name = label.clone();
            }
        }
    }
    if let PayloadContent::ImageBuffer { episode, t, url, .. } = &mut out.content {
        if !b.session_id.is_empty() {
            *url = Some(format!("/api/v1/sessions/{}/render/{episode}/{t}", b.session_id));
        }
    }
    out.descriptor_id = descriptor.id.clone().unwrap_or_default();
    Ok(out)
}
