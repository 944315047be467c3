use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ConsensusError, ModelParams, RatingsDataset};
use crate::domain::{GuidelineId, TagRegistry, UserId};

/// Which user/guideline pairs the distance percentile is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaScope {
    #[default]
    RatedPairs,
    AllPairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub intercept_threshold: f64,
    pub tag_score_threshold: f64,
    pub eta_percentile: f64,
    pub tag_distance_exponent: f64,
    /// Guidelines with fewer ratings are scored but never approved.
    pub min_ratings: usize,
    pub eta_scope: EtaScope,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            intercept_threshold: 0.4,
            tag_score_threshold: 3.0,
            eta_percentile: 40.0,
            tag_distance_exponent: 5.0,
            min_ratings: 5,
            eta_scope: EtaScope::RatedPairs,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), ConsensusError> {
        let bad = |msg: &str| Err(ConsensusError::InvalidConfig(msg.to_string()));
        if !self.intercept_threshold.is_finite() {
            return bad("intercept_threshold must be finite");
        }
        if !(self.tag_score_threshold.is_finite() && self.tag_score_threshold > 0.0) {
            return bad("tag_score_threshold must be positive");
        }
        if !(self.eta_percentile > 0.0 && self.eta_percentile < 100.0) {
            return bad("eta_percentile must lie strictly between 0 and 100");
        }
        if !(self.tag_distance_exponent.is_finite() && self.tag_distance_exponent > 0.0) {
            return bad("tag_distance_exponent must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidelineScore {
    pub guideline: GuidelineId,
    pub intercept: f64,
    pub tag_score: f64,
    pub embedding: Vec<f64>,
    pub approved: bool,
    pub rating_count: usize,
    /// Whether the guideline has reached `min_ratings`.
    pub eligible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// One entry per guideline, highest intercept first.
    pub scores: Vec<GuidelineScore>,
    pub eta: Option<f64>,
    /// Set when eta could not be computed and only the intercept rule applied.
    pub tag_filter_skipped: bool,
}

impl Selection {
    pub fn approved(&self) -> impl Iterator<Item = &GuidelineScore> {
        self.scores.iter().filter(|s| s.approved)
    }

    pub fn approved_ids(&self) -> BTreeSet<GuidelineId> {
        self.approved().map(|s| s.guideline.clone()).collect()
    }
}

/// The `p`-th percentile of `values`, interpolating linearly between the two
/// order statistics around rank `p / 100 * (n - 1)`. `None` for empty input.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo]))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn user_embedding<'a>(params: &'a ModelParams, u: &UserId) -> Result<&'a [f64], ConsensusError> {
    params
        .user_embeddings
        .get(u)
        .map(Vec::as_slice)
        .ok_or_else(|| ConsensusError::UnknownUser(u.clone()))
}

fn guideline_embedding<'a>(params: &'a ModelParams, g: &GuidelineId) -> Result<&'a [f64], ConsensusError> {
    params
        .guideline_embeddings
        .get(g)
        .map(Vec::as_slice)
        .ok_or_else(|| ConsensusError::UnknownGuideline(g.clone()))
}

/// Distance scale for tag scores: a percentile of user-guideline embedding
/// distances.
pub fn compute_eta(params: &ModelParams, data: &RatingsDataset, cfg: &SelectionConfig) -> Result<f64, ConsensusError> {
    cfg.validate()?;
    let distances = match cfg.eta_scope {
        EtaScope::RatedPairs => data
            .rows()
            .iter()
            .map(|r| Ok(distance(user_embedding(params, &r.user)?, guideline_embedding(params, &r.guideline)?)))
            .collect::<Result<Vec<_>, ConsensusError>>()?,
        EtaScope::AllPairs => {
            let mut out = Vec::with_capacity(params.user_embeddings.len() * params.guideline_embeddings.len());
            for fu in params.user_embeddings.values() {
                for fg in params.guideline_embeddings.values() {
                    out.push(distance(fu, fg));
                }
            }
            out
        }
    };
    match percentile(&distances, cfg.eta_percentile) {
        None => Err(ConsensusError::NoRatedPairs),
        Some(eta) if eta <= 0.0 => Err(ConsensusError::DegenerateEta),
        Some(eta) => Ok(eta),
    }
}

fn proximity(d: f64, eta: f64, exponent: f64) -> f64 {
    1.0 / (1.0 + (d / eta).powf(exponent))
}

/// Sum over users who put a quality tag on `g` of `1 / (1 + (d / eta)^p)`,
/// `d` being the user's embedding distance to the guideline.
pub fn tag_score(
    g: &GuidelineId,
    params: &ModelParams,
    data: &RatingsDataset,
    tags: &TagRegistry,
    eta: f64,
    cfg: &SelectionConfig,
) -> Result<f64, ConsensusError> {
    if !(eta > 0.0) {
        return Err(ConsensusError::DegenerateEta);
    }
    let fg = guideline_embedding(params, g)?;
    let mut total = 0.0;
    for r in data.rows().iter().filter(|r| &r.guideline == g) {
        if r.tag.as_ref().is_some_and(|t| tags.is_quality(t)) {
            total += proximity(distance(user_embedding(params, &r.user)?, fg), eta, cfg.tag_distance_exponent);
        }
    }
    Ok(total)
}

/// Scores every guideline in `params` and applies the approval rules:
/// eligible, intercept strictly above the threshold, tag score not above its
/// threshold. If eta is degenerate the tag rule is skipped and flagged.
pub fn select_constitution(
    params: &ModelParams,
    data: &RatingsDataset,
    tags: &TagRegistry,
    cfg: &SelectionConfig,
) -> Result<Selection, ConsensusError> {
    cfg.validate()?;
    params.validate()?;
    let eta = match compute_eta(params, data, cfg) {
        Ok(eta) => Some(eta),
        Err(ConsensusError::DegenerateEta | ConsensusError::NoRatedPairs) => None,
        Err(e) => return Err(e),
    };

    let mut tag_scores: BTreeMap<&GuidelineId, f64> = BTreeMap::new();
    if let Some(eta) = eta {
        for r in data.rows() {
            if r.tag.as_ref().is_some_and(|t| tags.is_quality(t)) {
                let d = distance(user_embedding(params, &r.user)?, guideline_embedding(params, &r.guideline)?);
                *tag_scores.entry(&r.guideline).or_default() += proximity(d, eta, cfg.tag_distance_exponent);
            }
        }
    }
    let counts = data.rating_counts();

    let mut scores: Vec<GuidelineScore> = params
        .guideline_intercepts
        .iter()
        .map(|(g, &intercept)| {
            let tag_score = tag_scores.get(g).copied().unwrap_or(0.0);
            let rating_count = counts.get(g).copied().unwrap_or(0);
            let eligible = rating_count >= cfg.min_ratings;
            GuidelineScore {
                guideline: g.clone(),
                intercept,
                tag_score,
                embedding: params.guideline_embeddings[g].clone(),
                approved: eligible && intercept > cfg.intercept_threshold && tag_score <= cfg.tag_score_threshold,
                rating_count,
                eligible,
            }
        })
        .collect();
    scores.sort_by(|a, b| {
        b.intercept
            .total_cmp(&a.intercept)
            .then_with(|| a.guideline.cmp(&b.guideline))
    });
    Ok(Selection {
        scores,
        eta,
        tag_filter_skipped: eta.is_none(),
    })
}
