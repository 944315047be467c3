use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{objective, Dense, Observations};
use super::{ConsensusError, ModelParams, RatingsDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawTrainConfig")]
pub struct TrainConfig {
    /// Embedding dimension.
    pub k: usize,
    pub lambda_i: f64,
    pub lambda_f: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop once an epoch would change the loss by less than this fraction.
    pub tolerance: f64,
    pub seed: u64,
    /// Half-width of the uniform range new entities are initialised from.
    pub init_scale: f64,
}

pub const DEFAULT_LAMBDA_I: f64 = 0.15;
/// Default ratio of the intercept penalty to the embedding penalty.
pub const PENALTY_RATIO: f64 = 5.0;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 1,
            lambda_i: DEFAULT_LAMBDA_I,
            lambda_f: DEFAULT_LAMBDA_I / PENALTY_RATIO,
            learning_rate: 0.05,
            max_epochs: 20_000,
            tolerance: 1e-7,
            seed: 0,
            init_scale: 0.1,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrainConfig {
    k: Option<usize>,
    lambda_i: Option<f64>,
    lambda_f: Option<f64>,
    learning_rate: Option<f64>,
    max_epochs: Option<usize>,
    tolerance: Option<f64>,
    seed: Option<u64>,
    init_scale: Option<f64>,
}

impl From<RawTrainConfig> for TrainConfig {
    fn from(raw: RawTrainConfig) -> Self {
        let d = TrainConfig::default();
        let lambda_i = raw.lambda_i.unwrap_or(d.lambda_i);
        TrainConfig {
            k: raw.k.unwrap_or(d.k),
            lambda_i,
            lambda_f: raw.lambda_f.unwrap_or(lambda_i / PENALTY_RATIO),
            learning_rate: raw.learning_rate.unwrap_or(d.learning_rate),
            max_epochs: raw.max_epochs.unwrap_or(d.max_epochs),
            tolerance: raw.tolerance.unwrap_or(d.tolerance),
            seed: raw.seed.unwrap_or(d.seed),
            init_scale: raw.init_scale.unwrap_or(d.init_scale),
        }
    }
}

impl TrainConfig {
    /// Sets the intercept penalty and the embedding penalty at the default ratio.
    pub fn with_lambda_i(mut self, lambda_i: f64) -> Self {
        self.lambda_i = lambda_i;
        self.lambda_f = lambda_i / PENALTY_RATIO;
        self
    }

    pub fn validate(&self) -> Result<(), ConsensusError> {
        let bad = |msg: &str| Err(ConsensusError::InvalidConfig(msg.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.lambda_i.is_finite() && self.lambda_i >= 0.0) {
            return bad("lambda_i must be a non-negative number");
        }
        if !(self.lambda_f.is_finite() && self.lambda_f >= 0.0) {
            return bad("lambda_f must be a non-negative number");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return bad("tolerance must be a non-negative number");
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return bad("init_scale must be a non-negative number");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Accepted gradient steps.
    pub epochs: usize,
    pub converged: bool,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss before the first step and after every accepted step.
    pub loss_trajectory: Vec<f64>,
    pub warm_users: usize,
    pub warm_guidelines: usize,
    pub new_users: usize,
    pub new_guidelines: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub params: ModelParams,
    pub report: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("dataset has no ratings")]
    EmptyDataset,
    #[error(transparent)]
    InvalidConfig(ConsensusError),
    #[error("warm-start parameters are unusable: {0}")]
    InvalidWarmStart(ConsensusError),
    #[error("warm-start embeddings have dimension {found}, configuration asks for {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("no convergence after {} epochs", .0.report.epochs)]
    NonConvergence(Box<Fit>),
}

/// Fits the model by full-batch gradient descent.
///
/// Entities present in `warm` start from their previous values; new ones are
/// drawn uniformly from `[-init_scale, init_scale]` (the global intercept
/// starts at zero). Each entity's step is scaled by `n / count`, the inverse
/// of its share of the observations, so sparsely rated users and guidelines
/// move at the same pace as the global intercept. Descent stops at the first
/// epoch whose step would change the loss by a relative amount below
/// `tolerance`; that step is not applied, so refitting an already converged
/// model returns it unchanged.
pub fn train(data: &RatingsDataset, cfg: &TrainConfig, warm: Option<&ModelParams>) -> Result<Fit, TrainError> {
    cfg.validate().map_err(TrainError::InvalidConfig)?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(w) = warm {
        w.validate().map_err(TrainError::InvalidWarmStart)?;
        if let Some(found) = w.embedding_dim() {
            if found != cfg.k {
                return Err(TrainError::DimensionMismatch { expected: cfg.k, found });
            }
        }
    }

    let k = cfg.k;
    let users = data.users();
    let guidelines = data.guidelines();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |out: &mut [f64]| {
        for v in out {
            *v = if cfg.init_scale > 0.0 {
                rng.random_range(-cfg.init_scale..=cfg.init_scale)
            } else {
                0.0
            };
        }
    };

    let mut current = Dense::zeros(users.len(), guidelines.len(), k);
    let mut report = TrainReport {
        epochs: 0,
        converged: false,
        initial_loss: 0.0,
        final_loss: 0.0,
        loss_trajectory: Vec::new(),
        warm_users: 0,
        warm_guidelines: 0,
        new_users: 0,
        new_guidelines: 0,
    };
    current.mu = warm.map_or(0.0, |w| w.mu);
    for (i, u) in users.iter().enumerate() {
        let emb = &mut current.user_embeddings[i * k..(i + 1) * k];
        match warm.and_then(|w| Some((w.user_intercepts.get(u)?, w.user_embeddings.get(u)?))) {
            Some((iu, fu)) => {
                current.user_intercepts[i] = *iu;
                emb.copy_from_slice(fu);
                report.warm_users += 1;
            }
            None => {
                let mut fresh = vec![0.0; k + 1];
                draw(&mut fresh);
                current.user_intercepts[i] = fresh[0];
                emb.copy_from_slice(&fresh[1..]);
                report.new_users += 1;
            }
        }
    }
    for (i, g) in guidelines.iter().enumerate() {
        let emb = &mut current.guideline_embeddings[i * k..(i + 1) * k];
        match warm.and_then(|w| Some((w.guideline_intercepts.get(g)?, w.guideline_embeddings.get(g)?))) {
            Some((ig, fg)) => {
                current.guideline_intercepts[i] = *ig;
                emb.copy_from_slice(fg);
                report.warm_guidelines += 1;
            }
            None => {
                let mut fresh = vec![0.0; k + 1];
                draw(&mut fresh);
                current.guideline_intercepts[i] = fresh[0];
                emb.copy_from_slice(&fresh[1..]);
                report.new_guidelines += 1;
            }
        }
    }

    let n = data.len() as f64;
    let mut user_counts = vec![0usize; users.len()];
    let mut guideline_counts = vec![0usize; guidelines.len()];
    for &u in data.row_user() {
        user_counts[u] += 1;
    }
    for &g in data.row_guideline() {
        guideline_counts[g] += 1;
    }
    let user_step: Vec<f64> = user_counts.iter().map(|&c| cfg.learning_rate * n / c as f64).collect();
    let guideline_step: Vec<f64> = guideline_counts
        .iter()
        .map(|&c| cfg.learning_rate * n / c as f64)
        .collect();

    let obs = Observations::native(data);
    let mut grad = Dense::zeros(0, 0, k);
    let mut current_loss = objective(&current, &obs, cfg.lambda_i, cfg.lambda_f, Some(&mut grad));
    if !current_loss.is_finite() {
        return Err(TrainError::Diverged { epoch: 0 });
    }
    report.initial_loss = current_loss;
    report.loss_trajectory.push(current_loss);

    let mut candidate = current.clone();
    let mut next_grad = Dense::zeros(0, 0, k);
    for epoch in 1..=cfg.max_epochs {
        candidate.mu = current.mu - cfg.learning_rate * grad.mu;
        for (i, &s) in user_step.iter().enumerate() {
            candidate.user_intercepts[i] = current.user_intercepts[i] - s * grad.user_intercepts[i];
            for j in i * k..(i + 1) * k {
                candidate.user_embeddings[j] = current.user_embeddings[j] - s * grad.user_embeddings[j];
            }
        }
        for (i, &s) in guideline_step.iter().enumerate() {
            candidate.guideline_intercepts[i] = current.guideline_intercepts[i] - s * grad.guideline_intercepts[i];
            for j in i * k..(i + 1) * k {
                candidate.guideline_embeddings[j] =
                    current.guideline_embeddings[j] - s * grad.guideline_embeddings[j];
            }
        }
        let candidate_loss = objective(&candidate, &obs, cfg.lambda_i, cfg.lambda_f, Some(&mut next_grad));
        if !candidate_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        let change = (current_loss - candidate_loss).abs() / current_loss.abs().max(f64::MIN_POSITIVE);
        if change < cfg.tolerance {
            report.converged = true;
            break;
        }
        std::mem::swap(&mut current, &mut candidate);
        std::mem::swap(&mut grad, &mut next_grad);
        current_loss = candidate_loss;
        report.epochs = epoch;
        report.loss_trajectory.push(current_loss);
    }
    report.final_loss = current_loss;

    let fit = Fit {
        params: current.into_params(users, guidelines),
        report,
    };
    if fit.report.converged {
        Ok(fit)
    } else {
        Err(TrainError::NonConvergence(Box::new(fit)))
    }
}
