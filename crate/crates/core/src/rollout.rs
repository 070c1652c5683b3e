//! Experiences, episodes and sessions, plus the derived per-step quantities
//! (discounted returns, TD errors, normalized magnitudes, feature vectors)
//! that the viewports are built from.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("missing value estimate at episode {episode}, t={t}")]
    MissingValueEstimate { episode: usize, t: usize },
    #[error("experience {0} not found")]
    NotFound(ExperienceId),
}

impl ModelError {
    pub fn code(&self) -> &'static str {
        match self {
            ModelError::MissingValueEstimate { .. } => "MISSING_VALUE_ESTIMATE",
            ModelError::NotFound(_) => "NOT_FOUND",
        }
    }
}

/// Identifies one experience by (episode index, timestep).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExperienceId {
    pub episode: usize,
    pub t: usize,
}

impl ExperienceId {
    pub fn new(episode: usize, t: usize) -> Self {
        Self { episode, t }
    }
}

impl fmt::Display for ExperienceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.episode, self.t)
    }
}

/// One logged environment step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub episode_index: usize,
    pub t: usize,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub reward_components: Option<Vec<f64>>,
    pub next_obs: Vec<f64>,
    pub done: bool,
    pub value: Option<f64>,
    pub next_value: Option<f64>,
    /// Render reference: a path relative to the session's render root.
    pub render: Option<String>,
}

impl Experience {
    pub fn id(&self) -> ExperienceId {
        ExperienceId::new(self.episode_index, self.t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub index: usize,
    pub steps: Vec<Experience>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn has_renders(&self) -> bool {
        self.steps.iter().any(|s| s.render.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub env_name: String,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub discount: f64,
    pub obs_labels: Option<Vec<String>>,
    pub action_labels: Option<Vec<String>>,
    pub reward_component_labels: Option<Vec<String>>,
}

impl SessionMeta {
    pub fn obs_label(&self, k: usize) -> String {
        label_or(&self.obs_labels, k, "obs")
    }

    pub fn action_label(&self, k: usize) -> String {
        label_or(&self.action_labels, k, "action")
    }

    pub fn reward_component_label(&self, k: usize) -> String {
        label_or(&self.reward_component_labels, k, "reward")
    }
}

fn label_or(labels: &Option<Vec<String>>, k: usize, prefix: &str) -> String {
    labels
        .as_ref()
        .and_then(|l| l.get(k).cloned())
        .unwrap_or_else(|| format!("{prefix}[{k}]"))
}

/// A loaded rollout set. Immutable once built; the derived caches are
/// filled by [`Session::new`].
#[derive(Debug, Clone)]
pub struct Session {
    pub meta: SessionMeta,
    pub episodes: Vec<Episode>,
    /// Per-experience TD errors in enumeration order, when every step has
    /// the value estimates they need.
    pub td_errors: Option<Vec<f64>>,
    /// Per-experience discounted returns in enumeration order.
    pub returns: Option<Vec<f64>>,
    /// Directory render references are resolved against.
    pub render_root: Option<PathBuf>,
    /// Notes about repairs made while assembling the session.
    pub repairs: Vec<String>,
    offsets: Vec<usize>,
}

impl PartialEq for Session {
    // render_root is where the data happens to live, not part of its content.
    fn eq(&self, other: &Self) -> bool {
        self.meta == other.meta
            && self.episodes == other.episodes
            && self.td_errors == other.td_errors
            && self.returns == other.returns
    }
}

impl Session {
    /// Builds a session and computes its caches. Episode and step indices are
    /// taken as given; ingestion is responsible for normalizing them.
    pub fn new(meta: SessionMeta, episodes: Vec<Episode>) -> Self {
        let mut offsets = Vec::with_capacity(episodes.len() + 1);
        let mut total = 0;
        for ep in &episodes {
            offsets.push(total);
            total += ep.len();
        }
        offsets.push(total);

        let returns: Vec<f64> = episodes
            .iter()
            .flat_map(|ep| compute_returns(&ep.rewards(), meta.discount))
            .collect();
        let td_errors = episodes
            .iter()
            .map(|ep| compute_td_errors(ep, meta.discount))
            .collect::<Result<Vec<_>, _>>()
            .ok()
            .map(|v| v.concat());

        Self {
            meta,
            episodes,
            td_errors,
            returns: Some(returns),
            render_root: None,
            repairs: Vec::new(),
            offsets,
        }
    }

    pub fn with_render_root(mut self, root: Option<PathBuf>) -> Self {
        self.render_root = root;
        self
    }

    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn td_available(&self) -> bool {
        self.td_errors.is_some()
    }

    pub fn renders_available(&self) -> bool {
        !self.is_empty() && self.experiences().all(|e| e.render.is_some())
    }

    pub fn episode(&self, index: usize) -> Option<&Episode> {
        self.episodes.get(index)
    }

    /// All experiences, episode-major and timestep-minor.
    pub fn experiences(&self) -> impl Iterator<Item = &Experience> + '_ {
        self.episodes.iter().flat_map(|ep| ep.steps.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ExperienceId> + '_ {
        self.experiences().map(Experience::id)
    }

    /// Position of `id` in enumeration order.
    pub fn flat_index(&self, id: ExperienceId) -> Result<usize, ModelError> {
        let ep = self.episodes.get(id.episode).ok_or(ModelError::NotFound(id))?;
        if id.t >= ep.len() {
            return Err(ModelError::NotFound(id));
        }
        Ok(self.offsets[id.episode] + id.t)
    }

    pub fn resolve(&self, id: ExperienceId) -> Result<&Experience, ModelError> {
        self.episodes
            .get(id.episode)
            .and_then(|ep| ep.steps.get(id.t))
            .ok_or(ModelError::NotFound(id))
    }

    /// Slice of the cached TD errors that belongs to one episode.
    pub fn episode_td_errors(&self, index: usize) -> Option<&[f64]> {
        let td = self.td_errors.as_ref()?;
        let start = *self.offsets.get(index)?;
        let end = *self.offsets.get(index + 1)?;
        Some(&td[start..end])
    }

    pub fn episode_returns(&self, index: usize) -> Option<&[f64]> {
        let ret = self.returns.as_ref()?;
        let start = *self.offsets.get(index)?;
        let end = *self.offsets.get(index + 1)?;
        Some(&ret[start..end])
    }
}

/// Discounted return for every step, via one backward pass
/// `R_t = r_t + discount * R_{t+1}`.
pub fn compute_returns(rewards: &[f64], discount: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, &r) in out.iter_mut().zip(rewards).rev() {
        acc = r + discount * acc;
        *o = acc;
    }
    out
}

/// One-step TD residuals `r_t + discount * v(s_{t+1}) * (1 - done_t) - v(s_t)`
/// using the logged critic values.
pub fn compute_td_errors(episode: &Episode, discount: f64) -> Result<Vec<f64>, ModelError> {
    episode
        .steps
        .iter()
        .map(|s| {
            let missing = || ModelError::MissingValueEstimate {
                episode: s.episode_index,
                t: s.t,
            };
            let value = s.value.ok_or_else(missing)?;
            let bootstrap = if s.done {
                0.0
            } else {
                discount * s.next_value.ok_or_else(missing)?
            };
            Ok(s.reward + bootstrap - value)
        })
        .collect()
}

/// `|v| / max|v|`, or all zeros when the maximum magnitude is zero.
pub fn normalize_abs(values: &[f64]) -> Vec<f64> {
    let max = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| v.abs() / max).collect()
}

/// Which experience fields are concatenated into a feature vector. The
/// order is fixed: obs, action, reward, next_obs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub obs: bool,
    pub action: bool,
    pub reward: bool,
    pub next_obs: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            obs: true,
            action: true,
            reward: true,
            next_obs: true,
        }
    }
}

impl FeatureConfig {
    pub fn obs_only() -> Self {
        Self {
            obs: true,
            action: false,
            reward: false,
            next_obs: false,
        }
    }

    pub fn dims(&self, meta: &SessionMeta) -> usize {
        let mut d = 0;
        if self.obs {
            d += meta.obs_dim;
        }
        if self.action {
            d += meta.action_dim;
        }
        if self.reward {
            d += 1;
        }
        if self.next_obs {
            d += meta.obs_dim;
        }
        d
    }

    pub fn is_empty(&self) -> bool {
        !(self.obs || self.action || self.reward || self.next_obs)
    }
}

pub fn feature_vector(exp: &Experience, config: &FeatureConfig) -> Vec<f64> {
    let mut v = Vec::new();
    if config.obs {
        v.extend_from_slice(&exp.obs);
    }
    if config.action {
        v.extend_from_slice(&exp.action);
    }
    if config.reward {
        v.push(exp.reward);
    }
    if config.next_obs {
        v.extend_from_slice(&exp.next_obs);
    }
    v
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn meta(obs_dim: usize, action_dim: usize, discount: f64) -> SessionMeta {
        SessionMeta {
            env_name: "test".into(),
            obs_dim,
            action_dim,
            discount,
            obs_labels: None,
            action_labels: None,
            reward_component_labels: None,
        }
    }

    /// Episode whose steps carry `rewards`, scalar obs `[t]`, action `[0]`
    /// and (when given) value estimates.
    pub fn episode(index: usize, rewards: &[f64], values: Option<&[f64]>) -> Episode {
        let n = rewards.len();
        let steps = rewards
            .iter()
            .enumerate()
            .map(|(t, &r)| Experience {
                episode_index: index,
                t,
                obs: vec![t as f64],
                action: vec![0.0],
                reward: r,
                reward_components: None,
                next_obs: vec![t as f64 + 1.0],
                done: t + 1 == n,
                value: values.map(|v| v[t]),
                next_value: values.and_then(|v| v.get(t + 1).copied()),
                render: None,
            })
            .collect();
        Episode { index, steps }
    }
}
