//! Browser explorer for bridging-based selection: simulate a community, fit
//! the model, then re-run selection under different thresholds without
//! refitting, and plot how the tag-score summand decays with distance.
//!
//! The exported functions take and return JSON strings; the plain Rust
//! functions behind them are what the tests exercise.

use std::cell::RefCell;

use concord_core::consensus::{select_constitution, train, ModelParams, RatingsDataset, SelectionConfig, TrainConfig};
use concord_core::simulator::{evaluate_selection, generate, CommunitySpec, GroundTruth, GuidelineKind};
use concord_core::{GuidelineId, TagRegistry, UserId};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExploreRequest {
    pub community: Option<CommunitySpec>,
    pub train: Option<TrainConfig>,
    pub selection: Option<SelectionConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GuidelinePoint {
    pub id: GuidelineId,
    pub kind: GuidelineKind,
    pub intercept: f64,
    pub position: f64,
    pub tag_score: f64,
    pub approved: bool,
    pub expected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserPoint {
    pub id: UserId,
    pub ideology: f64,
    pub position: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExploreResult {
    pub ratings: usize,
    pub epochs: usize,
    pub converged: bool,
    pub final_loss: f64,
    pub eta: Option<f64>,
    pub tag_filter_skipped: bool,
    pub precision: f64,
    pub recall: f64,
    pub guidelines: Vec<GuidelinePoint>,
    pub users: Vec<UserPoint>,
}

/// A fitted community kept between calls so selection can be re-run cheaply.
#[derive(Debug, Clone)]
pub struct Fitted {
    params: ModelParams,
    data: RatingsDataset,
    truth: GroundTruth,
    epochs: usize,
    converged: bool,
    final_loss: f64,
}

fn first_coordinate(v: Option<&Vec<f64>>) -> f64 {
    v.and_then(|v| v.first()).copied().unwrap_or(0.0)
}

impl Fitted {
    pub fn fit(req: &ExploreRequest) -> Result<Self, String> {
        let spec = req.community.clone().unwrap_or_default();
        let cfg = req.train.clone().unwrap_or_default();
        let community = generate(&spec).map_err(|e| e.to_string())?;
        let fit = match train(&community.dataset, &cfg, None) {
            Ok(fit) => fit,
            Err(concord_core::consensus::TrainError::NonConvergence(fit)) => *fit,
            Err(e) => return Err(e.to_string()),
        };
        Ok(Fitted {
            params: fit.params,
            data: community.dataset,
            truth: community.truth,
            epochs: fit.report.epochs,
            converged: fit.report.converged,
            final_loss: fit.report.final_loss,
        })
    }

    pub fn select(&self, cfg: &SelectionConfig) -> Result<ExploreResult, String> {
        let selection =
            select_constitution(&self.params, &self.data, &TagRegistry::default(), cfg).map_err(|e| e.to_string())?;
        let report = evaluate_selection(&selection.scores, &self.truth).map_err(|e| e.to_string())?;
        let guidelines = selection
            .scores
            .iter()
            .map(|s| GuidelinePoint {
                id: s.guideline.clone(),
                kind: self.truth.guideline_kind[&s.guideline],
                intercept: s.intercept,
                position: s.embedding.first().copied().unwrap_or(0.0),
                tag_score: s.tag_score,
                approved: s.approved,
                expected: self.truth.expected_approved.contains(&s.guideline),
            })
            .collect();
        let users = self
            .data
            .users()
            .iter()
            .map(|u| UserPoint {
                id: u.clone(),
                ideology: self.truth.user_ideology.get(u).copied().unwrap_or(0.0),
                position: first_coordinate(self.params.user_embeddings.get(u)),
            })
            .collect();
        Ok(ExploreResult {
            ratings: self.data.len(),
            epochs: self.epochs,
            converged: self.converged,
            final_loss: self.final_loss,
            eta: selection.eta,
            tag_filter_skipped: selection.tag_filter_skipped,
            precision: report.precision,
            recall: report.recall,
            guidelines,
            users,
        })
    }
}

/// The summand `1 / (1 + (d / eta)^exponent)` sampled at `steps + 1` evenly
/// spaced distances in `[0, max_distance]`.
pub fn tag_summand_curve(eta: f64, exponent: f64, max_distance: f64, steps: usize) -> Result<Vec<(f64, f64)>, String> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err("eta must be positive".into());
    }
    if !(exponent > 0.0 && max_distance > 0.0) || steps == 0 {
        return Err("exponent, max_distance and steps must be positive".into());
    }
    Ok((0..=steps)
        .map(|i| {
            let d = max_distance * i as f64 / steps as f64;
            (d, 1.0 / (1.0 + (d / eta).powf(exponent)))
        })
        .collect())
}

thread_local! {
    static CURRENT: RefCell<Option<Fitted>> = const { RefCell::new(None) };
}

fn to_js<T: Serialize>(value: &T) -> Result<String, JsError> {
    serde_json::to_string(value).map_err(|e| JsError::new(&e.to_string()))
}

fn parse<T: for<'de> Deserialize<'de> + Default>(raw: &str) -> Result<T, JsError> {
    if raw.trim().is_empty() {
        return Ok(T::default());
    }
    serde_json::from_str(raw).map_err(|e| JsError::new(&e.to_string()))
}

/// Simulates and fits a community, keeps it for [`reselect`], and returns the
/// selection under the request's thresholds.
#[wasm_bindgen]
pub fn explore(request_json: &str) -> Result<String, JsError> {
    let req: ExploreRequest = parse(request_json)?;
    let fitted = Fitted::fit(&req).map_err(|e| JsError::new(&e))?;
    let result = fitted
        .select(&req.selection.unwrap_or_default())
        .map_err(|e| JsError::new(&e))?;
    CURRENT.with(|c| *c.borrow_mut() = Some(fitted));
    to_js(&result)
}

/// Re-runs selection on the last fitted community.
#[wasm_bindgen]
pub fn reselect(selection_json: &str) -> Result<String, JsError> {
    let cfg: SelectionConfig = parse(selection_json)?;
    CURRENT.with(|c| {
        let current = c.borrow();
        let fitted = current.as_ref().ok_or_else(|| JsError::new("call explore first"))?;
        to_js(&fitted.select(&cfg).map_err(|e| JsError::new(&e))?)
    })
}

#[wasm_bindgen]
pub fn tag_score_curve(eta: f64, exponent: f64, max_distance: f64, steps: usize) -> Result<String, JsError> {
    to_js(&tag_summand_curve(eta, exponent, max_distance, steps).map_err(|e| JsError::new(&e))?)
}
