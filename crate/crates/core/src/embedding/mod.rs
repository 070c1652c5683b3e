//! Two-dimensional embeddings of a session's experiences for the replay
//! buffer viewport.

pub mod pca;
pub mod tsne;

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rollout::{feature_vector, normalize_abs, ExperienceId, FeatureConfig, Session};

pub use pca::{pca_fit, pca_project, PcaProjection};
pub use tsne::{
    calibrate_sigmas, conditional_probabilities, joint_probabilities, kl_divergence, kl_gradient,
    pairwise_sq_distances, tsne_embed, tsne_embed_with, SquareMatrix, TsneOutput,
};

/// Observation width above which PCA preprocessing is always applied.
pub const HIGH_DIM_OBS: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("t-SNE needs at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("could not bracket the bandwidth of point {0}")]
    CalibrationFailure(usize),
    #[error("invalid embedding config: {0}")]
    InvalidConfig(String),
    #[error("session has no experiences")]
    EmptySession,
    #[error("embedding job cancelled")]
    Cancelled,
}

impl EmbeddingError {
    pub fn code(&self) -> &'static str {
        match self {
            EmbeddingError::TooFewPoints(_) => "TOO_FEW_POINTS",
            EmbeddingError::CalibrationFailure(_) => "CALIBRATION_FAILURE",
            EmbeddingError::InvalidConfig(_) => "INVALID_CONFIG",
            EmbeddingError::EmptySession => "EMPTY_SESSION",
            EmbeddingError::Cancelled => "CANCELLED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMethod {
    Pca,
    Tsne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub method: EmbeddingMethod,
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch_iteration: usize,
    pub seed: u64,
    pub pca_preprocess_dims: usize,
    /// Sessions larger than this are uniformly subsampled before embedding.
    pub max_points: usize,
    pub features: FeatureConfig,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            method: EmbeddingMethod::Tsne,
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch_iteration: 250,
            seed: 0,
            pca_preprocess_dims: 50,
            max_points: 5000,
            features: FeatureConfig::default(),
        }
    }
}

impl EmbeddingConfig {
    /// Checks settings that do not depend on the data.
    pub fn validate(&self) -> Result<(), EmbeddingError> {
        let invalid = |m: &str| Err(EmbeddingError::InvalidConfig(m.into()));
        if self.pca_preprocess_dims == 0 {
            return invalid("pca_preprocess_dims must be positive");
        }
        if self.max_points == 0 {
            return invalid("max_points must be positive");
        }
        if self.features.is_empty() {
            return invalid("feature selection is empty");
        }
        if self.method == EmbeddingMethod::Pca {
            return Ok(());
        }
        if !(self.perplexity > 0.0 && self.perplexity.is_finite()) {
            return invalid("perplexity must be positive");
        }
        if self.iterations == 0 {
            return invalid("iterations must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid("learning_rate must be positive");
        }
        if !(self.early_exaggeration >= 1.0 && self.early_exaggeration.is_finite()) {
            return invalid("early_exaggeration must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.final_momentum) {
            return invalid("momentum must lie in [0, 1)");
        }
        Ok(())
    }

    /// Checks settings against the number of points to be embedded.
    pub fn validate_tsne(&self, n_points: usize) -> Result<(), EmbeddingError> {
        self.validate()?;
        if self.perplexity >= n_points as f64 {
            return Err(EmbeddingError::InvalidConfig(format!(
                "perplexity {} must be below the point count {n_points}",
                self.perplexity
            )));
        }
        Ok(())
    }

    /// Validates against a session, accounting for subsampling.
    pub fn validate_for(&self, session: &Session) -> Result<(), EmbeddingError> {
        let n = session.len().min(self.max_points);
        match self.method {
            EmbeddingMethod::Pca => self.validate(),
            EmbeddingMethod::Tsne if n < 4 => Err(EmbeddingError::TooFewPoints(n)),
            EmbeddingMethod::Tsne => self.validate_tsne(n),
        }
    }
}

/// Cancellation flag and iteration counter shared with a running job.
#[derive(Debug, Default)]
pub struct JobControl {
    cancelled: AtomicBool,
    progress: AtomicUsize,
}

impl JobControl {
    pub fn cancel(&self) {
        self.cancelled.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.cancelled.load(Ordering::Relaxed)
    }

    pub fn progress(&self) -> usize {
        self.progress.load(Ordering::Relaxed)
    }

    pub(crate) fn set_progress(&self, iteration: usize) {
        self.progress.store(iteration, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub coords: Vec<[f64; 2]>,
    /// Normalized |TD error| per point; zeros when TD errors are unavailable.
    pub point_sizes: Vec<f64>,
    pub ids: Vec<ExperienceId>,
    pub config: EmbeddingConfig,
    pub warnings: Vec<String>,
    pub initial_kl: Option<f64>,
    pub final_kl: Option<f64>,
}

impl Embedding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn embed_session(
    session: &Session,
    config: &EmbeddingConfig,
) -> Result<Embedding, EmbeddingError> {
    embed_session_with(session, config, &JobControl::default())
}

pub fn embed_session_with(
    session: &Session,
    config: &EmbeddingConfig,
    control: &JobControl,
) -> Result<Embedding, EmbeddingError> {
    if session.is_empty() {
        return Err(EmbeddingError::EmptySession);
    }
    config.validate_for(session)?;
    let mut warnings = Vec::new();

    let mut indices: Vec<usize> = (0..session.len()).collect();
    if session.len() > config.max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        indices = rand::seq::index::sample(&mut rng, session.len(), config.max_points).into_vec();
        indices.sort_unstable();
        warnings.push(format!(
            "{} experiences subsampled to {} for embedding",
            session.len(),
            config.max_points
        ));
    }
    let all: Vec<_> = session.experiences().collect();
    let ids: Vec<ExperienceId> = indices.iter().map(|&k| all[k].id()).collect();
    let mut features: Vec<Vec<f64>> = indices
        .iter()
        .map(|&k| feature_vector(all[k], &config.features))
        .collect();

    if session.meta.obs_dim > HIGH_DIM_OBS {
        warnings.push(format!(
            "observations have {} dimensions; PCA preprocessing to {} dimensions applied",
            session.meta.obs_dim, config.pca_preprocess_dims
        ));
    }
    let dims = features[0].len();

    let (coords, initial_kl, final_kl) = match config.method {
        EmbeddingMethod::Pca => {
            let projected = pca_project(&features, 2);
            let coords = projected
                .iter()
                .map(|r| [r.first().copied().unwrap_or(0.0), r.get(1).copied().unwrap_or(0.0)])
                .collect();
            (coords, None, None)
        }
        EmbeddingMethod::Tsne => {
            if dims > config.pca_preprocess_dims {
                features = pca_project(&features, config.pca_preprocess_dims);
            }
            let out = tsne_embed_with(&features, config, control)?;
            (out.coords, Some(out.initial_kl), Some(out.final_kl))
        }
    };

    let point_sizes = match &session.td_errors {
        Some(td) => {
            let normalized = normalize_abs(td);
            indices.iter().map(|&k| normalized[k]).collect()
        }
        None => vec![0.0; ids.len()],
    };

    Ok(Embedding {
        coords,
        point_sizes,
        ids,
        config: config.clone(),
        warnings,
        initial_kl,
        final_kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::fixtures;

    fn session(n_eps: usize, len: usize, with_values: bool) -> Session {
        let episodes = (0..n_eps)
            .map(|e| {
                let rewards: Vec<f64> = (0..len).map(|t| ((t * 7 + e * 3) % 5) as f64 - 2.0).collect();
                let values: Vec<f64> = rewards.iter().map(|r| r * 0.3).collect();
                let mut ep = fixtures::episode(e, &rewards, with_values.then_some(values.as_slice()));
                for s in &mut ep.steps {
                    s.obs = vec![s.t as f64, (e as f64).sin()];
                    s.next_obs = vec![s.t as f64 + 1.0, (e as f64).cos()];
                }
                ep
            })
            .collect();
        Session::new(fixtures::meta(2, 1, 0.9), episodes)
    }

    #[test]
    fn zero_td_gives_zero_sizes() {
        let mut s = session(2, 5, true);
        s.td_errors = Some(vec![0.0; s.len()]);
        let e = embed_session(&s, &EmbeddingConfig { method: EmbeddingMethod::Pca, ..Default::default() }).unwrap();
        assert!(e.point_sizes.iter().all(|&x| x == 0.0));
        let s = session(2, 5, false);
        let e = embed_session(&s, &EmbeddingConfig { method: EmbeddingMethod::Pca, ..Default::default() }).unwrap();
        assert!(e.point_sizes.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ids_follow_enumeration_order() {
        let s = session(3, 4, true);
        let e = embed_session(&s, &EmbeddingConfig { method: EmbeddingMethod::Pca, ..Default::default() }).unwrap();
        assert_eq!(e.ids, s.ids().collect::<Vec<_>>());
        assert_eq!(e.coords.len(), 12);
        assert_eq!(e.point_sizes.iter().cloned().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn tsne_is_deterministic() {
        let s = session(4, 10, true);
        let cfg = EmbeddingConfig { perplexity: 5.0, iterations: 200, seed: 7, ..Default::default() };
        assert_eq!(embed_session(&s, &cfg).unwrap(), embed_session(&s, &cfg).unwrap());
    }

    #[test]
    fn subsampling_is_seeded_and_ordered() {
        let s = session(5, 20, true);
        let cfg = EmbeddingConfig {
            method: EmbeddingMethod::Pca,
            max_points: 30,
            seed: 3,
            ..Default::default()
        };
        let a = embed_session(&s, &cfg).unwrap();
        assert_eq!(a.len(), 30);
        assert!(a.ids.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a.warnings.len(), 1);
        assert_eq!(a.ids, embed_session(&s, &cfg).unwrap().ids);
    }

    #[test]
    fn config_validation() {
        let s = session(1, 10, true);
        let cfg = EmbeddingConfig { perplexity: 10.0, ..Default::default() };
        assert!(matches!(embed_session(&s, &cfg), Err(EmbeddingError::InvalidConfig(_))));
        let cfg = EmbeddingConfig { momentum: 1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let small = session(1, 3, true);
        let cfg = EmbeddingConfig { perplexity: 2.0, ..Default::default() };
        assert_eq!(embed_session(&small, &cfg), Err(EmbeddingError::TooFewPoints(3)));
    }

    #[test]
    fn reward_scaling_does_not_move_obs_only_embedding() {
        let s = session(3, 8, true);
        let mut scaled = s.clone();
        for ep in &mut scaled.episodes {
            for st in &mut ep.steps {
                st.reward *= 10.0;
            }
        }
        let features = FeatureConfig::obs_only();
        let cfg = EmbeddingConfig { perplexity: 5.0, iterations: 100, features, ..Default::default() };
        assert_eq!(embed_session(&s, &cfg).unwrap().coords, embed_session(&scaled, &cfg).unwrap().coords);
    }
}
