use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::event::{Event, EventBody, ModelFitted};
use super::{ConstitutionSnapshot, StoreError};
use crate::adapters::EmbeddingVector;
use crate::analytics::SurveySubmission;
use crate::consensus::{ConsensusError, RatingsDataset};
use crate::domain::{validate_guideline_text, Guideline, GuidelineId, Rating, UserId};
use crate::taxonomy::TaxonomyNode;

/// Everything the log implies, folded event by event.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlatformState {
    pub last_seq: u64,
    pub guidelines: BTreeMap<GuidelineId, Guideline>,
    pub embeddings: BTreeMap<GuidelineId, EmbeddingVector>,
    /// Latest rating per user and guideline.
    pub ratings: BTreeMap<UserId, BTreeMap<GuidelineId, Rating>>,
    /// Rating submissions and revisions seen so far.
    pub rating_events: u64,
    pub surveys: BTreeMap<UserId, SurveySubmission>,
    pub model: Option<ModelFitted>,
    pub constitution: Option<ConstitutionSnapshot>,
    pub taxonomy: Option<TaxonomyNode>,
}

impl PlatformState {
    pub fn rating(&self, user: &UserId, guideline: &GuidelineId) -> Option<&Rating> {
        self.ratings.get(user)?.get(guideline)
    }

    pub fn ratings(&self) -> impl Iterator<Item = &Rating> {
        self.ratings.values().flat_map(|m| m.values())
    }

    pub fn rating_count(&self) -> usize {
        self.ratings.values().map(|m| m.len()).sum()
    }

    /// One row per (user, guideline): the latest verdict.
    pub fn dataset(&self) -> Result<RatingsDataset, ConsensusError> {
        RatingsDataset::from_ratings(self.ratings())
    }

    /// Whether `body` can be applied on top of this state.
    pub fn check(&self, body: &EventBody) -> Result<(), StoreError> {
        let invalid = |msg: String| Err(StoreError::Invalid(msg));
        match body {
            EventBody::GuidelineProposed(p) => {
                let g = &p.guideline;
                if self.guidelines.contains_key(&g.id) {
                    return invalid(format!("guideline {} already exists", g.id));
                }
                let violations = validate_guideline_text(&g.title, &g.body);
                if !violations.is_empty() {
                    let codes: Vec<_> = violations.iter().map(|v| v.code()).collect();
                    return invalid(format!("guideline {} is invalid: {}", g.id, codes.join(", ")));
                }
                if let Some(tree) = &self.taxonomy {
                    if !tree.contains(&g.topic) {
                        return invalid(format!("unknown topic {}", g.topic));
                    }
                }
            }
            EventBody::RatingSubmitted(r) | EventBody::RatingRevised(r) => {
                if !self.guidelines.contains_key(&r.guideline) {
                    return invalid(format!("unknown guideline {}", r.guideline));
                }
                let exists = self.rating(&r.user, &r.guideline).is_some();
                if matches!(body, EventBody::RatingSubmitted(_)) && exists {
                    return invalid(format!("{} already rated {}", r.user, r.guideline));
                }
                if matches!(body, EventBody::RatingRevised(_)) && !exists {
                    return invalid(format!("{} has no rating on {} to revise", r.user, r.guideline));
                }
            }
            EventBody::SurveySubmitted(s) => {
                if s.participant.id != s.response.participant {
                    return invalid("survey response and participant ids differ".into());
                }
                if self.surveys.contains_key(&s.participant.id) {
                    return invalid(format!("{} already answered the survey", s.participant.id));
                }
                s.response.validate().map_err(|e| StoreError::Invalid(e.to_string()))?;
            }
            EventBody::ModelFitted(m) => {
                m.params.validate().map_err(|e| StoreError::Invalid(e.to_string()))?;
            }
            EventBody::ConstitutionPublished(c) => {
                let expected = self.constitution.as_ref().map_or(1, |c| c.version + 1);
                if c.version != expected {
                    return invalid(format!("constitution version {} where {expected} was expected", c.version));
                }
            }
            EventBody::TaxonomyUpdated(tree) => {
                tree.validate().map_err(|e| StoreError::Invalid(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Folds an already checked event into the state.
    pub fn apply(&mut self, event: &Event) {
        self.last_seq = event.seq;
        match &event.body {
            EventBody::GuidelineProposed(p) => {
                if let Some(e) = &p.embedding {
                    self.embeddings.insert(p.guideline.id.clone(), e.clone());
                }
                self.guidelines.insert(p.guideline.id.clone(), p.guideline.clone());
            }
            EventBody::RatingSubmitted(r) | EventBody::RatingRevised(r) => {
                self.rating_events += 1;
                self.ratings
                    .entry(r.user.clone())
                    .or_default()
                    .insert(r.guideline.clone(), r.clone());
            }
            EventBody::SurveySubmitted(s) => {
                self.surveys.insert(s.participant.id.clone(), s.clone());
            }
            EventBody::ModelFitted(m) => self.model = Some((**m).clone()),
            EventBody::ConstitutionPublished(c) => self.constitution = Some((**c).clone()),
            EventBody::TaxonomyUpdated(t) => self.taxonomy = Some(t.clone()),
        }
    }

    /// State after folding `events` in order onto an empty state.
    pub fn replay<'a>(events: impl IntoIterator<Item = &'a Event>) -> Self {
        let mut state = PlatformState::default();
        for e in events {
            state.apply(e);
        }
        state
    }
}
