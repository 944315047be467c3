//! Bridging-based consensus: a one-axis (by default) matrix factorization of
//! Helpful/Not Helpful ratings, and the selection rules applied to the fitted
//! guideline intercepts.
//!
//! The model predicts a rating as
//!
//! ```text
//! y_hat(u, g) = mu + i_u + i_g + f_u . f_g
//! ```
//!
//! Agreement that lines up with the opinion axis is absorbed by the embedding
//! product, so a guideline's intercept `i_g` only grows when raters on both
//! ends of the axis call it helpful.

mod model;
mod select;
mod train;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{GuidelineId, Rating, TagId, UserId, Verdict};

pub use model::{gradient, loss, predict_rating, regularization, ModelGradient};
pub use select::{
    compute_eta, percentile, select_constitution, tag_score, EtaScope, GuidelineScore, Selection,
    SelectionConfig,
};
pub use train::{train, Fit, TrainConfig, TrainError, TrainReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConsensusError {
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("unknown guideline {0}")]
    UnknownGuideline(GuidelineId),
    #[error("dataset has no ratings")]
    EmptyDataset,
    #[error("duplicate rating by {user} on {guideline}")]
    DuplicateRating { user: UserId, guideline: GuidelineId },
    #[error("embedding of {entity} has length {found}, expected {expected}")]
    DimensionMismatch {
        entity: String,
        expected: usize,
        found: usize,
    },
    #[error("embedding dimension must be at least 1")]
    ZeroDimension,
    #[error("parameter {0} is not finite")]
    NonFinite(String),
    #[error("user or guideline {0} has an intercept but no embedding, or the reverse")]
    MissingEntry(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no rated pairs to measure distances over")]
    NoRatedPairs,
    #[error("eta is zero: every user and guideline embedding coincides")]
    DegenerateEta,
}

/// Fitted model: global intercept, per-entity intercepts and embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub mu: f64,
    pub user_intercepts: BTreeMap<UserId, f64>,
    pub guideline_intercepts: BTreeMap<GuidelineId, f64>,
    pub user_embeddings: BTreeMap<UserId, Vec<f64>>,
    pub guideline_embeddings: BTreeMap<GuidelineId, Vec<f64>>,
}

impl ModelParams {
    pub fn zeros<'a>(
        users: impl IntoIterator<Item = &'a UserId>,
        guidelines: impl IntoIterator<Item = &'a GuidelineId>,
        k: usize,
    ) -> Self {
        let mut params = ModelParams {
            mu: 0.0,
            user_intercepts: BTreeMap::new(),
            guideline_intercepts: BTreeMap::new(),
            user_embeddings: BTreeMap::new(),
            guideline_embeddings: BTreeMap::new(),
        };
        for u in users {
            params.user_intercepts.insert(u.clone(), 0.0);
            params.user_embeddings.insert(u.clone(), vec![0.0; k]);
        }
        for g in guidelines {
            params.guideline_intercepts.insert(g.clone(), 0.0);
            params.guideline_embeddings.insert(g.clone(), vec![0.0; k]);
        }
        params
    }

    /// Shared embedding length, if any entity exists.
    pub fn embedding_dim(&self) -> Option<usize> {
        self.user_embeddings
            .values()
            .chain(self.guideline_embeddings.values())
            .map(Vec::len)
            .next()
    }

    pub fn validate(&self) -> Result<(), ConsensusError> {
        if !self.mu.is_finite() {
            return Err(ConsensusError::NonFinite("mu".into()));
        }
        let k = self.embedding_dim();
        if k == Some(0) {
            return Err(ConsensusError::ZeroDimension);
        }
        fn check<K: Ord + ToString>(
            intercepts: &BTreeMap<K, f64>,
            embeddings: &BTreeMap<K, Vec<f64>>,
            k: Option<usize>,
        ) -> Result<(), ConsensusError> {
            if intercepts.len() != embeddings.len() || !intercepts.keys().eq(embeddings.keys()) {
                let stray = intercepts
                    .keys()
                    .filter(|key| !embeddings.contains_key(*key))
                    .chain(embeddings.keys().filter(|key| !intercepts.contains_key(*key)))
                    .map(ToString::to_string)
                    .next()
                    .unwrap_or_default();
                return Err(ConsensusError::MissingEntry(stray));
            }
            for (key, value) in intercepts {
                if !value.is_finite() {
                    return Err(ConsensusError::NonFinite(key.to_string()));
                }
            }
            for (key, emb) in embeddings {
                if Some(emb.len()) != k {
                    return Err(ConsensusError::DimensionMismatch {
                        entity: key.to_string(),
                        expected: k.unwrap_or(0),
                        found: emb.len(),
                    });
                }
                if emb.iter().any(|v| !v.is_finite()) {
                    return Err(ConsensusError::NonFinite(key.to_string()));
                }
            }
            Ok(())
        }
        check(&self.user_intercepts, &self.user_embeddings, k)?;
        check(&self.guideline_intercepts, &self.guideline_embeddings, k)
    }

    /// The same model with every embedding negated; predictions are unchanged.
    pub fn reflected(&self) -> Self {
        let flip = |v: &Vec<f64>| v.iter().map(|x| -x).collect::<Vec<_>>();
        ModelParams {
            mu: self.mu,
            user_intercepts: self.user_intercepts.clone(),
            guideline_intercepts: self.guideline_intercepts.clone(),
            user_embeddings: self.user_embeddings.iter().map(|(k, v)| (k.clone(), flip(v))).collect(),
            guideline_embeddings: self
                .guideline_embeddings
                .iter()
                .map(|(k, v)| (k.clone(), flip(v)))
                .collect(),
        }
    }
}

/// One observed rating as the model sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRow {
    pub user: UserId,
    pub guideline: GuidelineId,
    pub verdict: Verdict,
    #[serde(default)]
    pub tag: Option<TagId>,
}

impl From<&Rating> for RatingRow {
    fn from(r: &Rating) -> Self {
        RatingRow {
            user: r.user.clone(),
            guideline: r.guideline.clone(),
            verdict: r.verdict,
            tag: r.tag.clone(),
        }
    }
}

/// Observed ratings in canonical (user, guideline) order, with dense indices.
///
/// Sorting on construction makes every computation over the dataset
/// independent of the order ratings were supplied in.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingsDataset {
    rows: Vec<RatingRow>,
    users: Vec<UserId>,
    guidelines: Vec<GuidelineId>,
    row_user: Vec<usize>,
    row_guideline: Vec<usize>,
    targets: Vec<f64>,
}

impl RatingsDataset {
    pub fn new(mut rows: Vec<RatingRow>) -> Result<Self, ConsensusError> {
        rows.sort_by(|a, b| (&a.user, &a.guideline).cmp(&(&b.user, &b.guideline)));
        if let Some(w) = rows
            .windows(2)
            .find(|w| w[0].user == w[1].user && w[0].guideline == w[1].guideline)
        {
            return Err(ConsensusError::DuplicateRating {
                user: w[0].user.clone(),
                guideline: w[0].guideline.clone(),
            });
        }
        let users: Vec<UserId> = rows
            .iter()
            .map(|r| &r.user)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .cloned()
            .collect();
        let guidelines: Vec<GuidelineId> = rows
            .iter()
            .map(|r| &r.guideline)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .cloned()
            .collect();
        let row_user = rows
            .iter()
            .map(|r| users.binary_search(&r.user).expect("user collected above"))
            .collect();
        let row_guideline = rows
            .iter()
            .map(|r| guidelines.binary_search(&r.guideline).expect("guideline collected above"))
            .collect();
        let targets = rows.iter().map(|r| r.verdict.value()).collect();
        Ok(Self {
            rows,
            users,
            guidelines,
            row_user,
            row_guideline,
            targets,
        })
    }

    pub fn from_ratings<'a>(ratings: impl IntoIterator<Item = &'a Rating>) -> Result<Self, ConsensusError> {
        Self::new(ratings.into_iter().map(RatingRow::from).collect())
    }

    pub fn rows(&self) -> &[RatingRow] {
        &self.rows
    }

    /// Number of observed ratings.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct raters, sorted.
    pub fn users(&self) -> &[UserId] {
        &self.users
    }

    /// Distinct rated guidelines, sorted.
    pub fn guidelines(&self) -> &[GuidelineId] {
        &self.guidelines
    }

    pub(crate) fn row_user(&self) -> &[usize] {
        &self.row_user
    }

    pub(crate) fn row_guideline(&self) -> &[usize] {
        &self.row_guideline
    }

    pub(crate) fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn rating_counts(&self) -> BTreeMap<GuidelineId, usize> {
        let mut counts = vec![0usize; self.guidelines.len()];
        for &g in &self.row_guideline {
            counts[g] += 1;
        }
        self.guidelines.iter().cloned().zip(counts).collect()
    }
}
