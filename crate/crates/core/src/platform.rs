//! The platform's operations over the event store: proposing and rating
//! guidelines, chat-testing them, retraining and publishing the constitution,
//! and collecting surveys.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{
    dedup_against, AdapterError, ChatMessage, ChatRequest, DedupError, DedupOutcome, EmbeddingVector, Providers,
};
use crate::analytics::{support_report, AnalyticsError, SupportReport, SurveySubmission};
use crate::config::{ConfigError, ServiceConfig};
use crate::consensus::{
    select_constitution, train, ConsensusError, Fit, ModelParams, RatingsDataset, Selection, SelectionConfig,
    TrainConfig, TrainError, TrainReport,
};
use crate::domain::{
    validate_guideline, Guideline, GuidelineId, Rating, TagId, TagRegistry, TagRuleError, Timestamp, TopicId, UserId,
    Verdict, Violation,
};
use crate::store::{
    config_fingerprint, ConstitutionSnapshot, EventBody, EventKind, GuidelineProposed, ModelFitted, PlatformState,
    Recovery, Store, StoreError,
};
use crate::taxonomy::TaxonomyNode;

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp::now()
    }
}

/// Returns `start`, `start + 1`, ... seconds on successive calls.
#[derive(Debug)]
pub struct StepClock(AtomicI64);

impl StepClock {
    pub fn new(start: i64) -> Self {
        StepClock(AtomicI64::new(start))
    }
}

impl Clock for StepClock {
    fn now(&self) -> Timestamp {
        Timestamp::from_unix(self.0.fetch_add(1, Ordering::SeqCst))
    }
}

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("invalid guideline: {}", codes(.0))]
    InvalidGuideline(Vec<Violation>),
    #[error(transparent)]
    TagRule(#[from] TagRuleError),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Provider(#[from] AdapterError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("there are no ratings to train on")]
    NothingToTrain,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

fn codes(violations: &[Violation]) -> String {
    violations.iter().map(|v| v.code()).collect::<Vec<_>>().join(", ")
}

impl From<DedupError> for PlatformError {
    fn from(e: DedupError) -> Self {
        match e {
            DedupError::Provider(p) => PlatformError::Provider(p),
            other => PlatformError::InvalidRequest(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposeRequest {
    pub topic: TopicId,
    pub title: String,
    pub body: String,
    pub author: UserId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum ProposeOutcome {
    Created { id: GuidelineId, seq: u64 },
    Duplicate { id: GuidelineId, similarity: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRequest {
    pub user: UserId,
    pub verdict: Verdict,
    #[serde(default)]
    pub tag: Option<TagId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateOutcome {
    pub seq: u64,
    pub kind: String,
    /// Whether enough ratings arrived since the last fit to warrant a retrain.
    pub retrain_due: bool,
}

/// Everything a retrain needs, detached from the store so it can run
/// without holding any lock.
#[derive(Debug, Clone)]
pub struct RetrainJob {
    pub dataset: RatingsDataset,
    pub warm: Option<ModelParams>,
    pub data_seq: u64,
    pub rating_events: u64,
    pub train: TrainConfig,
    pub selection: SelectionConfig,
    pub tags: TagRegistry,
}

impl RetrainJob {
    pub fn run(&self) -> Result<(Fit, Selection), PlatformError> {
        let fit = train(&self.dataset, &self.train, self.warm.as_ref())?;
        let selection = select_constitution(&fit.params, &self.dataset, &self.tags, &self.selection)?;
        Ok((fit, selection))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainSummary {
    /// Nothing changed since the last fit, so nothing was retrained.
    pub noop: bool,
    pub version: u64,
    pub approved: usize,
    pub report: Option<TrainReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportSummary {
    pub guidelines_added: usize,
    pub ratings_submitted: usize,
    pub ratings_revised: usize,
    pub ratings_unchanged: usize,
}

pub struct Platform {
    store: Store,
    config: ServiceConfig,
    taxonomy: TaxonomyNode,
    providers: Providers,
    clock: Arc<dyn Clock>,
}

impl Platform {
    /// Opens the configured store and records the configured taxonomy if it
    /// differs from the one in the log.
    pub fn open(
        config: ServiceConfig,
        providers: Providers,
        clock: Arc<dyn Clock>,
    ) -> Result<(Self, Recovery), PlatformError> {
        let (store, recovery) = match &config.storage_root {
            Some(root) => Store::open(root)?,
            None => (
                Store::in_memory(),
                Recovery {
                    events: Vec::new(),
                    truncated_bytes: 0,
                },
            ),
        };
        Ok((Self::from_store(store, config, providers, clock)?, recovery))
    }

    pub fn from_store(
        store: Store,
        config: ServiceConfig,
        providers: Providers,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, PlatformError> {
        config.validate()?;
        let taxonomy = config.taxonomy()?;
        let mut platform = Platform {
            store,
            config,
            taxonomy,
            providers,
            clock,
        };
        if platform.store.state().taxonomy.as_ref() != Some(&platform.taxonomy) {
            platform.append(EventBody::TaxonomyUpdated(platform.taxonomy.clone()))?;
        }
        Ok(platform)
    }

    fn append(&mut self, body: EventBody) -> Result<u64, PlatformError> {
        let seq = self.store.append(body, self.clock.now())?;
        if seq % self.config.snapshot_every == 0 {
            self.store.write_snapshot()?;
        }
        Ok(seq)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn state(&self) -> &PlatformState {
        self.store.state()
    }

    pub fn topics(&self) -> &TaxonomyNode {
        &self.taxonomy
    }

    pub fn tags(&self) -> &TagRegistry {
        &self.config.tags
    }

    /// Guidelines under `topic` (including its subtopics), or all of them.
    pub fn guidelines(&self, topic: Option<&TopicId>) -> Result<Vec<&Guideline>, PlatformError> {
        let all = self.state().guidelines.values();
        let Some(topic) = topic else {
            return Ok(all.collect());
        };
        let node = self
            .taxonomy
            .find(topic)
            .ok_or_else(|| PlatformError::NotFound(format!("topic {topic}")))?;
        Ok(all.filter(|g| node.contains(&g.topic)).collect())
    }

    pub fn guideline(&self, id: &GuidelineId) -> Result<&Guideline, PlatformError> {
        self.state()
            .guidelines
            .get(id)
            .ok_or_else(|| PlatformError::NotFound(format!("guideline {id}")))
    }

    fn next_guideline_id(&self) -> GuidelineId {
        let mut n = self.state().guidelines.len() + 1;
        loop {
            let id = GuidelineId::new(format!("g{n:04}")).expect("generated id");
            if !self.state().guidelines.contains_key(&id) {
                return id;
            }
            n += 1;
        }
    }

    fn embed(&self, guideline: &Guideline) -> Result<EmbeddingVector, PlatformError> {
        Ok(self.providers.embedder.embed(&guideline.as_rule())?)
    }

    /// Validates the guideline, checks it against existing ones by embedding
    /// similarity, and records it if it is new.
    pub fn propose(&mut self, req: ProposeRequest) -> Result<ProposeOutcome, PlatformError> {
        let guideline = Guideline {
            id: self.next_guideline_id(),
            topic: req.topic,
            title: req.title.trim().to_string(),
            body: req.body.trim().to_string(),
            author: req.author,
            created_at: self.clock.now(),
        };
        let violations = validate_guideline(&guideline, &self.taxonomy);
        if !violations.is_empty() {
            return Err(PlatformError::InvalidGuideline(violations));
        }
        let embedding = self.embed(&guideline)?;
        let existing: Vec<(GuidelineId, EmbeddingVector)> = self
            .state()
            .embeddings
            .iter()
            .map(|(id, v)| (id.clone(), v.clone()))
            .collect();
        if let DedupOutcome::DuplicateOf { id, similarity } =
            dedup_against(&embedding, &existing, self.config.dedup_threshold)?
        {
            return Ok(ProposeOutcome::Duplicate { id, similarity });
        }
        let id = guideline.id.clone();
        let seq = self.append(EventBody::GuidelineProposed(GuidelineProposed {
            guideline,
            embedding: Some(embedding),
        }))?;
        Ok(ProposeOutcome::Created { id, seq })
    }

    /// Records a verdict; a second verdict by the same user revises the first.
    pub fn rate(&mut self, guideline: &GuidelineId, req: RateRequest) -> Result<RateOutcome, PlatformError> {
        self.guideline(guideline)?;
        self.config.tags.check(req.verdict, req.tag.as_ref())?;
        let rating = Rating {
            user: req.user,
            guideline: guideline.clone(),
            verdict: req.verdict,
            tag: req.tag,
            created_at: self.clock.now(),
        };
        let body = if self.state().rating(&rating.user, guideline).is_some() {
            EventBody::RatingRevised(rating)
        } else {
            EventBody::RatingSubmitted(rating)
        };
        let kind = body.kind();
        let seq = self.append(body)?;
        Ok(RateOutcome {
            seq,
            kind: kind.as_str().to_string(),
            retrain_due: self.retrain_due(),
        })
    }

    /// Ratings received since the last fit.
    pub fn ratings_since_fit(&self) -> u64 {
        let state = self.state();
        state.rating_events - state.model.as_ref().map_or(0, |m| m.rating_events)
    }

    pub fn retrain_due(&self) -> bool {
        self.config
            .retrain
            .every_n_ratings
            .is_some_and(|n| self.ratings_since_fit() >= n)
    }

    pub fn providers(&self) -> &Providers {
        &self.providers
    }

    /// A chat request with the guideline injected as the active rule.
    pub fn chat_request(&self, guideline: &GuidelineId, messages: Vec<ChatMessage>) -> Result<ChatRequest, PlatformError> {
        let g = self.guideline(guideline)?;
        let request = ChatRequest {
            system_rules: vec![g.as_rule()],
            messages,
        };
        request.validate()?;
        Ok(request)
    }

    /// Runs `messages` against the chat provider with the guideline as the active rule.
    pub fn chat_test(&self, guideline: &GuidelineId, messages: Vec<ChatMessage>) -> Result<String, PlatformError> {
        let request = self.chat_request(guideline, messages)?;
        Ok(self.providers.chat.chat(&request)?)
    }

    /// Snapshot of the data for a retrain, or `None` when nothing changed
    /// since the last published fit.
    pub fn prepare_retrain(&self) -> Result<Option<RetrainJob>, PlatformError> {
        let state = self.state();
        if state.constitution.is_some() && state.model.is_some() && self.ratings_since_fit() == 0 {
            return Ok(None);
        }
        let dataset = state.dataset()?;
        if dataset.is_empty() {
            return Err(PlatformError::NothingToTrain);
        }
        Ok(Some(RetrainJob {
            dataset,
            warm: state.model.as_ref().map(|m| m.params.clone()),
            data_seq: state.last_seq,
            rating_events: state.rating_events,
            train: self.config.train.clone(),
            selection: self.config.selection.clone(),
            tags: self.config.tags.clone(),
        }))
    }

    /// Records the fitted model and publishes the next constitution version.
    pub fn commit_retrain(
        &mut self,
        job: &RetrainJob,
        fit: Fit,
        selection: &Selection,
    ) -> Result<RetrainSummary, PlatformError> {
        let version = self.state().constitution.as_ref().map_or(0, |c| c.version) + 1;
        let snapshot = ConstitutionSnapshot::build(
            version,
            job.data_seq,
            selection,
            &self.state().guidelines,
            &self.taxonomy,
            config_fingerprint(&job.train, &job.selection),
        );
        let approved = snapshot.len();
        let report = fit.report.clone();
        self.append(EventBody::ModelFitted(Box::new(ModelFitted {
            params: fit.params,
            report: fit.report,
            train: job.train.clone(),
            selection: job.selection.clone(),
            data_seq: job.data_seq,
            rating_events: job.rating_events,
        })))?;
        self.append(EventBody::ConstitutionPublished(Box::new(snapshot)))?;
        Ok(RetrainSummary {
            noop: false,
            version,
            approved,
            report: Some(report),
        })
    }

    /// Retrains in place. Non-convergence publishes nothing.
    pub fn retrain(&mut self) -> Result<RetrainSummary, PlatformError> {
        match self.prepare_retrain()? {
            None => Ok(self.noop_summary()),
            Some(job) => {
                let (fit, selection) = job.run()?;
                self.commit_retrain(&job, fit, &selection)
            }
        }
    }

    pub fn noop_summary(&self) -> RetrainSummary {
        let live = self.live_constitution();
        RetrainSummary {
            noop: true,
            version: live.version,
            approved: live.len(),
            report: None,
        }
    }

    /// The latest published constitution, or an empty version 0.
    pub fn live_constitution(&self) -> ConstitutionSnapshot {
        self.state().constitution.clone().unwrap_or_else(|| ConstitutionSnapshot {
            version: 0,
            produced_from_seq: 0,
            config_fingerprint: config_fingerprint(&self.config.train, &self.config.selection),
            eta: None,
            tag_filter_skipped: false,
            sections: Vec::new(),
        })
    }

    pub fn submit_survey(&mut self, submission: SurveySubmission) -> Result<u64, PlatformError> {
        submission
            .response
            .validate()
            .map_err(|e| PlatformError::InvalidRequest(e.to_string()))?;
        if submission.participant.id != submission.response.participant {
            return Err(PlatformError::InvalidRequest(
                "participant id and response participant differ".into(),
            ));
        }
        self.append(EventBody::SurveySubmitted(submission))
    }

    pub fn survey_report(&self) -> Result<SupportReport, PlatformError> {
        let submissions: Vec<SurveySubmission> = self.state().surveys.values().cloned().collect();
        Ok(support_report(&submissions, self.config.group_floor)?)
    }

    /// Adds guidelines not yet known and records ratings, revising any whose
    /// verdict or tag changed. Imported guidelines skip the duplicate check.
    pub fn import(&mut self, guidelines: &[Guideline], ratings: &[Rating]) -> Result<ImportSummary, PlatformError> {
        let mut summary = ImportSummary {
            guidelines_added: 0,
            ratings_submitted: 0,
            ratings_revised: 0,
            ratings_unchanged: 0,
        };
        for g in guidelines {
            if self.state().guidelines.contains_key(&g.id) {
                continue;
            }
            let violations = validate_guideline(g, &self.taxonomy);
            if !violations.is_empty() {
                return Err(PlatformError::InvalidGuideline(violations));
            }
            let embedding = Some(self.embed(g)?);
            self.append(EventBody::GuidelineProposed(GuidelineProposed {
                guideline: g.clone(),
                embedding,
            }))?;
            summary.guidelines_added += 1;
        }
        for r in ratings {
            self.config.tags.check(r.verdict, r.tag.as_ref())?;
            let body = match self.state().rating(&r.user, &r.guideline) {
                Some(prev) if prev.verdict == r.verdict && prev.tag == r.tag => {
                    summary.ratings_unchanged += 1;
                    continue;
                }
                Some(_) => {
                    summary.ratings_revised += 1;
                    EventBody::RatingRevised(r.clone())
                }
                None => {
                    summary.ratings_submitted += 1;
                    EventBody::RatingSubmitted(r.clone())
                }
            };
            self.append(body)?;
        }
        Ok(summary)
    }

    /// Kinds of the events recorded so far, oldest first.
    pub fn event_kinds(&self) -> Vec<EventKind> {
        self.store.events().iter().map(|e| e.body.kind()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::stub::StubChat;
    use crate::adapters::Role;

    fn platform() -> Platform {
        Platform::open(ServiceConfig::default(), Providers::stub(0), Arc::new(StepClock::new(1_700_000_000)))
            .unwrap()
            .0
    }

    fn propose(p: &mut Platform, title: &str, body: &str) -> ProposeOutcome {
        p.propose(ProposeRequest {
            topic: TopicId::new("voting").unwrap(),
            title: title.into(),
            body: body.into(),
            author: UserId::new("alice").unwrap(),
        })
        .unwrap()
    }

    fn rate(p: &mut Platform, g: &GuidelineId, user: &str, verdict: Verdict) -> RateOutcome {
        p.rate(
            g,
            RateRequest {
                user: UserId::new(user).unwrap(),
                verdict,
                tag: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn propose_then_duplicate() {
        let mut p = platform();
        let first = propose(&mut p, "Neutral Voting Information", "Explain how to vote without endorsing anyone.");
        let ProposeOutcome::Created { id, .. } = first else {
            panic!("{first:?}")
        };
        let again = propose(&mut p, "Neutral Voting Information", "Explain how to vote without endorsing anyone.");
        assert!(matches!(again, ProposeOutcome::Duplicate { id: ref dup, .. } if *dup == id));
    }

    #[test]
    fn unknown_topic_is_invalid() {
        let mut p = platform();
        let err = p
            .propose(ProposeRequest {
                topic: TopicId::new("astrology").unwrap(),
                title: "Stars".into(),
                body: "Read the stars.".into(),
                author: UserId::new("alice").unwrap(),
            })
            .unwrap_err();
        assert!(matches!(err, PlatformError::InvalidGuideline(ref v) if v == &[Violation::UnknownTopic]));
    }

    #[test]
    fn second_rating_is_a_revision_and_tags_follow_rules() {
        let mut p = platform();
        let ProposeOutcome::Created { id, .. } = propose(&mut p, "T", "Body text.") else {
            panic!()
        };
        assert_eq!(rate(&mut p, &id, "bob", Verdict::Helpful).kind, "rating-submitted");
        assert_eq!(rate(&mut p, &id, "bob", Verdict::NotHelpful).kind, "rating-revised");
        let err = p
            .rate(
                &id,
                RateRequest {
                    user: UserId::new("bob").unwrap(),
                    verdict: Verdict::Helpful,
                    tag: Some(TagId::new("unclear-wording").unwrap()),
                },
            )
            .unwrap_err();
        assert!(matches!(err, PlatformError::TagRule(TagRuleError::TagNotAllowed(_))));
        assert!(matches!(
            p.rate(&GuidelineId::new("nope").unwrap(), RateRequest {
                user: UserId::new("bob").unwrap(),
                verdict: Verdict::Helpful,
                tag: None
            }),
            Err(PlatformError::NotFound(_))
        ));
    }

    #[test]
    fn chat_test_injects_the_guideline() {
        let mut p = platform();
        let ProposeOutcome::Created { id, .. } = propose(&mut p, "Neutral Voting Information", "Stay neutral.") else {
            panic!()
        };
        let out = p
            .chat_test(&id, vec![ChatMessage { role: Role::User, text: "Who should I vote for?".into() }])
            .unwrap();
        assert!(out.starts_with("[Neutral Voting Information]"));

        let (mut slow, _) = Platform::open(
            ServiceConfig::default(),
            Providers {
                chat: Arc::new(StubChat::timing_out()),
                ..Providers::stub(0)
            },
            Arc::new(StepClock::new(0)),
        )
        .unwrap();
        let ProposeOutcome::Created { id, .. } = propose(&mut slow, "A", "B.") else {
            panic!()
        };
        let err = slow
            .chat_test(&id, vec![ChatMessage { role: Role::User, text: "hi".into() }])
            .unwrap_err();
        assert!(matches!(err, PlatformError::Provider(AdapterError::Timeout { .. })));
    }

    #[test]
    fn retrain_publishes_then_noops() {
        let mut p = platform();
        assert_eq!(p.live_constitution().version, 0);
        assert!(matches!(p.retrain(), Err(PlatformError::NothingToTrain)));
        let ProposeOutcome::Created { id, .. } = propose(&mut p, "T", "Body text.") else {
            panic!()
        };
        for u in 0..6 {
            rate(&mut p, &id, &format!("u{u}"), Verdict::Helpful);
        }
        let first = p.retrain().unwrap();
        assert!(!first.noop);
        assert_eq!(first.version, 1);
        let again = p.retrain().unwrap();
        assert!(again.noop);
        assert_eq!(again.version, 1);
        rate(&mut p, &id, "u9", Verdict::Helpful);
        assert_eq!(p.retrain().unwrap().version, 2);
        assert_eq!(p.live_constitution().version, 2);
    }

    #[test]
    fn retrain_becomes_due_after_n_ratings() {
        let cfg = ServiceConfig {
            retrain: crate::config::RetrainTrigger {
                every_n_ratings: Some(3),
                interval_secs: None,
            },
            ..ServiceConfig::default()
        };
        let (mut p, _) = Platform::open(cfg, Providers::stub(0), Arc::new(StepClock::new(0))).unwrap();
        let ProposeOutcome::Created { id, .. } = propose(&mut p, "T", "Body text.") else {
            panic!()
        };
        assert!(!rate(&mut p, &id, "a", Verdict::Helpful).retrain_due);
        assert!(!rate(&mut p, &id, "b", Verdict::Helpful).retrain_due);
        assert!(rate(&mut p, &id, "c", Verdict::Helpful).retrain_due);
    }
}
