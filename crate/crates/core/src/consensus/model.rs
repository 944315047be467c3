use std::collections::BTreeMap;

use super::{ConsensusError, ModelParams, RatingsDataset, TrainConfig};
use crate::domain::{GuidelineId, UserId};

/// Partial derivatives of the loss, laid out like the parameters they belong to.
pub type ModelGradient = ModelParams;

/// Parameters packed into flat arrays. Embeddings are row-major, `k` per entity.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    pub k: usize,
    pub mu: f64,
    pub user_intercepts: Vec<f64>,
    pub guideline_intercepts: Vec<f64>,
    pub user_embeddings: Vec<f64>,
    pub guideline_embeddings: Vec<f64>,
}

impl Dense {
    pub fn zeros(users: usize, guidelines: usize, k: usize) -> Self {
        Dense {
            k,
            mu: 0.0,
            user_intercepts: vec![0.0; users],
            guideline_intercepts: vec![0.0; guidelines],
            user_embeddings: vec![0.0; users * k],
            guideline_embeddings: vec![0.0; guidelines * k],
        }
    }

    pub fn user_embedding(&self, u: usize) -> &[f64] {
        &self.user_embeddings[u * self.k..(u + 1) * self.k]
    }

    pub fn guideline_embedding(&self, g: usize) -> &[f64] {
        &self.guideline_embeddings[g * self.k..(g + 1) * self.k]
    }

    pub fn into_params(self, users: &[UserId], guidelines: &[GuidelineId]) -> ModelParams {
        let k = self.k;
        ModelParams {
            mu: self.mu,
            user_intercepts: users.iter().cloned().zip(self.user_intercepts).collect(),
            guideline_intercepts: guidelines
                .iter()
                .cloned()
                .zip(self.guideline_intercepts)
                .collect(),
            user_embeddings: users
                .iter()
                .cloned()
                .zip(self.user_embeddings.chunks(k).map(<[f64]>::to_vec))
                .collect(),
            guideline_embeddings: guidelines
                .iter()
                .cloned()
                .zip(self.guideline_embeddings.chunks(k).map(<[f64]>::to_vec))
                .collect(),
        }
    }
}

/// Rows of a dataset expressed as indices into some `Dense` layout.
pub(crate) struct Observations<'a> {
    pub users: std::borrow::Cow<'a, [usize]>,
    pub guidelines: std::borrow::Cow<'a, [usize]>,
    pub targets: &'a [f64],
}

impl<'a> Observations<'a> {
    /// Rows indexed by the dataset's own user/guideline ordering.
    pub fn native(data: &'a RatingsDataset) -> Self {
        Observations {
            users: data.row_user().into(),
            guidelines: data.row_guideline().into(),
            targets: data.targets(),
        }
    }
}

/// Squared error averaged over observations plus the regularizer; when `grad`
/// is given it receives the full gradient at `params`.
pub(crate) fn objective(
    params: &Dense,
    obs: &Observations<'_>,
    lambda_i: f64,
    lambda_f: f64,
    mut grad: Option<&mut Dense>,
) -> f64 {
    let k = params.k;
    let n = obs.targets.len() as f64;
    if let Some(g) = grad.as_deref_mut() {
        *g = Dense::zeros(params.user_intercepts.len(), params.guideline_intercepts.len(), k);
    }

    let mut sse = 0.0;
    for ((&u, &g), &y) in obs.users.iter().zip(obs.guidelines.iter()).zip(obs.targets) {
        let fu = params.user_embedding(u);
        let fg = params.guideline_embedding(g);
        let dot: f64 = fu.iter().zip(fg).map(|(a, b)| a * b).sum();
        let err = params.mu + params.user_intercepts[u] + params.guideline_intercepts[g] + dot - y;
        sse += err * err;
        if let Some(out) = grad.as_deref_mut() {
            let c = 2.0 * err / n;
            out.mu += c;
            out.user_intercepts[u] += c;
            out.guideline_intercepts[g] += c;
            for j in 0..k {
                out.user_embeddings[u * k + j] += c * fg[j];
                out.guideline_embeddings[g * k + j] += c * fu[j];
            }
        }
    }

    let users = params.user_intercepts.len();
    let guidelines = params.guideline_intercepts.len();
    let per_user = if users > 0 { 1.0 / users as f64 } else { 0.0 };
    let per_guideline = if guidelines > 0 { 1.0 / guidelines as f64 } else { 0.0 };
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let reg = lambda_i
        * (params.mu * params.mu
            + per_user * sq(&params.user_intercepts)
            + per_guideline * sq(&params.guideline_intercepts))
        + lambda_f * (per_user * sq(&params.user_embeddings) + per_guideline * sq(&params.guideline_embeddings));

    if let Some(out) = grad {
        out.mu += 2.0 * lambda_i * params.mu;
        let scale = |dst: &mut [f64], src: &[f64], c: f64| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += c * s;
            }
        };
        scale(&mut out.user_intercepts, &params.user_intercepts, 2.0 * lambda_i * per_user);
        scale(&mut out.guideline_intercepts, &params.guideline_intercepts, 2.0 * lambda_i * per_guideline);
        scale(&mut out.user_embeddings, &params.user_embeddings, 2.0 * lambda_f * per_user);
        scale(&mut out.guideline_embeddings, &params.guideline_embeddings, 2.0 * lambda_f * per_guideline);
    }

    sse / n + reg
}

/// Packs `params` and maps the dataset rows onto the params' entity order.
fn layout<'a>(
    params: &ModelParams,
    data: &'a RatingsDataset,
) -> Result<(Dense, Vec<UserId>, Vec<GuidelineId>, Observations<'a>), ConsensusError> {
    params.validate()?;
    let k = params.embedding_dim().unwrap_or(1);
    let users: Vec<UserId> = params.user_intercepts.keys().cloned().collect();
    let guidelines: Vec<GuidelineId> = params.guideline_intercepts.keys().cloned().collect();
    let mut dense = Dense::zeros(users.len(), guidelines.len(), k);
    dense.mu = params.mu;
    for (i, u) in users.iter().enumerate() {
        dense.user_intercepts[i] = params.user_intercepts[u];
        dense.user_embeddings[i * k..(i + 1) * k].copy_from_slice(&params.user_embeddings[u]);
    }
    for (i, g) in guidelines.iter().enumerate() {
        dense.guideline_intercepts[i] = params.guideline_intercepts[g];
        dense.guideline_embeddings[i * k..(i + 1) * k].copy_from_slice(&params.guideline_embeddings[g]);
    }

    let user_pos = data
        .users()
        .iter()
        .map(|u| {
            users
                .binary_search(u)
                .map_err(|_| ConsensusError::UnknownUser(u.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let guideline_pos = data
        .guidelines()
        .iter()
        .map(|g| {
            guidelines
                .binary_search(g)
                .map_err(|_| ConsensusError::UnknownGuideline(g.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let obs = Observations {
        users: data.row_user().iter().map(|&u| user_pos[u]).collect::<Vec<_>>().into(),
        guidelines: data
            .row_guideline()
            .iter()
            .map(|&g| guideline_pos[g])
            .collect::<Vec<_>>()
            .into(),
        targets: data.targets(),
    };
    Ok((dense, users, guidelines, obs))
}

/// `mu + i_u + i_g + f_u . f_g`.
pub fn predict_rating(params: &ModelParams, user: &UserId, guideline: &GuidelineId) -> Result<f64, ConsensusError> {
    let iu = params
        .user_intercepts
        .get(user)
        .ok_or_else(|| ConsensusError::UnknownUser(user.clone()))?;
    let ig = params
        .guideline_intercepts
        .get(guideline)
        .ok_or_else(|| ConsensusError::UnknownGuideline(guideline.clone()))?;
    let fu = params
        .user_embeddings
        .get(user)
        .ok_or_else(|| ConsensusError::UnknownUser(user.clone()))?;
    let fg = params
        .guideline_embeddings
        .get(guideline)
        .ok_or_else(|| ConsensusError::UnknownGuideline(guideline.clone()))?;
    let dot: f64 = fu.iter().zip(fg).map(|(a, b)| a * b).sum();
    Ok(params.mu + iu + ig + dot)
}

/// Squared-L2 penalty, averaged per entity class:
/// `lambda_i (mu^2 + mean_u i_u^2 + mean_g i_g^2) + lambda_f (mean_u |f_u|^2 + mean_g |f_g|^2)`.
pub fn regularization(params: &ModelParams, cfg: &TrainConfig) -> f64 {
    fn mean_sq<'a>(values: impl ExactSizeIterator<Item = &'a f64>) -> f64 {
        let n = values.len();
        if n == 0 {
            return 0.0;
        }
        values.map(|v| v * v).sum::<f64>() / n as f64
    }
    fn mean_norm_sq<K>(map: &BTreeMap<K, Vec<f64>>) -> f64 {
        if map.is_empty() {
            return 0.0;
        }
        map.values().map(|v| v.iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / map.len() as f64
    }
    cfg.lambda_i
        * (params.mu * params.mu
            + mean_sq(params.user_intercepts.values())
            + mean_sq(params.guideline_intercepts.values()))
        + cfg.lambda_f * (mean_norm_sq(&params.user_embeddings) + mean_norm_sq(&params.guideline_embeddings))
}

pub fn loss(params: &ModelParams, data: &RatingsDataset, cfg: &TrainConfig) -> Result<f64, ConsensusError> {
    if data.is_empty() {
        return Err(ConsensusError::EmptyDataset);
    }
    let (dense, _, _, obs) = layout(params, data)?;
    Ok(objective(&dense, &obs, cfg.lambda_i, cfg.lambda_f, None))
}

pub fn gradient(params: &ModelParams, data: &RatingsDataset, cfg: &TrainConfig) -> Result<ModelGradient, ConsensusError> {
    if data.is_empty() {
        return Err(ConsensusError::EmptyDataset);
    }
    let (dense, users, guidelines, obs) = layout(params, data)?;
    let mut grad = Dense::zeros(0, 0, dense.k);
    objective(&dense, &obs, cfg.lambda_i, cfg.lambda_f, Some(&mut grad));
    Ok(grad.into_params(&users, &guidelines))
}
