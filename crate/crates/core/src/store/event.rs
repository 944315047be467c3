use std::fmt;

use serde::{Deserialize, Serialize};

use super::ConstitutionSnapshot;
use crate::adapters::EmbeddingVector;
use crate::analytics::SurveySubmission;
use crate::consensus::{ModelParams, SelectionConfig, TrainConfig, TrainReport};
use crate::domain::{Guideline, Rating, Timestamp};
use crate::taxonomy::TaxonomyNode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    GuidelineProposed,
    RatingSubmitted,
    RatingRevised,
    SurveySubmitted,
    ModelFitted,
    ConstitutionPublished,
    TaxonomyUpdated,
}

impl EventKind {
    pub const ALL: [EventKind; 7] = [
        EventKind::GuidelineProposed,
        EventKind::RatingSubmitted,
        EventKind::RatingRevised,
        EventKind::SurveySubmitted,
        EventKind::ModelFitted,
        EventKind::ConstitutionPublished,
        EventKind::TaxonomyUpdated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::GuidelineProposed => "guideline-proposed",
            EventKind::RatingSubmitted => "rating-submitted",
            EventKind::RatingRevised => "rating-revised",
            EventKind::SurveySubmitted => "survey-submitted",
            EventKind::ModelFitted => "model-fitted",
            EventKind::ConstitutionPublished => "constitution-published",
            EventKind::TaxonomyUpdated => "taxonomy-updated",
        }
    }

    pub fn parse(raw: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == raw)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidelineProposed {
    pub guideline: Guideline,
    /// Embedding used for later duplicate checks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFitted {
    pub params: ModelParams,
    pub report: TrainReport,
    pub train: TrainConfig,
    pub selection: SelectionConfig,
    /// Last event folded into the training data.
    pub data_seq: u64,
    /// Rating submissions and revisions the training data reflects.
    pub rating_events: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventBody {
    GuidelineProposed(GuidelineProposed),
    RatingSubmitted(Rating),
    RatingRevised(Rating),
    SurveySubmitted(SurveySubmission),
    ModelFitted(Box<ModelFitted>),
    ConstitutionPublished(Box<ConstitutionSnapshot>),
    TaxonomyUpdated(TaxonomyNode),
}

impl EventBody {
    pub fn kind(&self) -> EventKind {
        match self {
            EventBody::GuidelineProposed(_) => EventKind::GuidelineProposed,
            EventBody::RatingSubmitted(_) => EventKind::RatingSubmitted,
            EventBody::RatingRevised(_) => EventKind::RatingRevised,
            EventBody::SurveySubmitted(_) => EventKind::SurveySubmitted,
            EventBody::ModelFitted(_) => EventKind::ModelFitted,
            EventBody::ConstitutionPublished(_) => EventKind::ConstitutionPublished,
            EventBody::TaxonomyUpdated(_) => EventKind::TaxonomyUpdated,
        }
    }

    pub fn payload_json(&self) -> serde_json::Result<String> {
        match self {
            EventBody::GuidelineProposed(p) => serde_json::to_string(p),
            EventBody::RatingSubmitted(r) | EventBody::RatingRevised(r) => serde_json::to_string(r),
            EventBody::SurveySubmitted(s) => serde_json::to_string(s),
            EventBody::ModelFitted(m) => serde_json::to_string(m),
            EventBody::ConstitutionPublished(c) => serde_json::to_string(c),
            EventBody::TaxonomyUpdated(t) => serde_json::to_string(t),
        }
    }

    pub fn from_json(kind: EventKind, payload: &str) -> serde_json::Result<Self> {
        Ok(match kind {
            EventKind::GuidelineProposed => EventBody::GuidelineProposed(serde_json::from_str(payload)?),
            EventKind::RatingSubmitted => EventBody::RatingSubmitted(serde_json::from_str(payload)?),
            EventKind::RatingRevised => EventBody::RatingRevised(serde_json::from_str(payload)?),
            EventKind::SurveySubmitted => EventBody::SurveySubmitted(serde_json::from_str(payload)?),
            EventKind::ModelFitted => EventBody::ModelFitted(serde_json::from_str(payload)?),
            EventKind::ConstitutionPublished => EventBody::ConstitutionPublished(serde_json::from_str(payload)?),
            EventKind::TaxonomyUpdated => EventBody::TaxonomyUpdated(serde_json::from_str(payload)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub seq: u64,
    pub at: Timestamp,
    pub body: EventBody,
}
