//! Core of the concord deliberation platform.
//!
//! A community proposes textual guidelines under a topic taxonomy and rates
//! each other's proposals as Helpful or Not Helpful. The [`consensus`] module
//! fits a matrix-factorization model over those ratings and keeps only the
//! guidelines whose intercept stays high once the rater's position on the
//! learned opinion axis is accounted for, so approval needs support from
//! across the spectrum rather than a majority.
//!
//! Everything that changes platform state goes through the append-only
//! [`store`], which makes every published constitution reproducible from the
//! log prefix it was produced from.

pub mod adapters;
pub mod analytics;
pub mod config;
pub mod consensus;
pub mod domain;
pub mod fixtures;
pub mod io;
pub mod platform;
pub mod simulator;
pub mod store;
pub mod taxonomy;

pub use consensus::{
    compute_eta, gradient, loss, percentile, predict_rating, regularization, select_constitution,
    tag_score, train, Fit, GuidelineScore, ModelGradient, ModelParams, RatingRow, RatingsDataset,
    Selection, SelectionConfig, TrainConfig, TrainReport,
};
pub use domain::{
    Guideline, GuidelineId, Participant, Rating, SurveyResponse, Tag, TagId, TagRegistry,
    Timestamp, TopicId, UserId, Verdict,
};
pub use taxonomy::TaxonomyNode;
