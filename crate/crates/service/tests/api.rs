use std::collections::BTreeSet;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use concord_core::adapters::stub::StubChat;
use concord_core::adapters::Providers;
use concord_core::config::{AuthConfig, RetrainTrigger, ServiceConfig};
use concord_core::platform::{Platform, StepClock};
use concord_core::simulator::{generate, CommunitySpec};
use concord_core::store::EventKind;
use concord_core::GuidelineId;
use concord_service::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn config() -> ServiceConfig {
    ServiceConfig {
        retrain: RetrainTrigger {
            every_n_ratings: None,
            interval_secs: None,
        },
        ..ServiceConfig::default()
    }
}

fn state_with(config: ServiceConfig, providers: Providers) -> AppState {
    let (platform, _) = Platform::open(config, providers, Arc::new(StepClock::new(1_700_000_000))).unwrap();
    AppState::new(platform)
}

fn app() -> (AppState, Router) {
    let state = state_with(config(), Providers::stub(0));
    (state.clone(), router(state))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>, token: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

async fn propose(app: &Router, title: &str, body: &str) -> (StatusCode, Value) {
    call(
        app,
        "POST",
        "/guidelines",
        Some(json!({"topic": "voting", "title": title, "body": body, "author": "alice"})),
        None,
    )
    .await
}

async fn created_id(app: &Router, title: &str, body: &str) -> String {
    let (status, v) = propose(app, title, body).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

async fn rate(app: &Router, id: &str, user: &str, verdict: &str, tag: Option<&str>) -> (StatusCode, Value) {
    call(
        app,
        "POST",
        &format!("/guidelines/{id}/ratings"),
        Some(json!({"user": user, "verdict": verdict, "tag": tag})),
        None,
    )
    .await
}

#[tokio::test]
async fn topics_returns_the_bundled_tree() {
    let (_, app) = app();
    let (status, tree) = call(&app, "GET", "/topics", None, None).await;
    assert_eq!(status, StatusCode::OK);
    let names: Vec<&str> = tree["children"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["Elections", "Partisan Language", "Policy", "Sensitive Political Events"]);
    let (status, tags) = call(&app, "GET", "/tags", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(tags.as_array().unwrap().len(), 3);
    let (status, _) = call(&app, "GET", "/no/such/path", None, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[test]
fn empty_taxonomy_file_fails_startup() {
    let dir = tempfile::tempdir().unwrap();
    let tree = dir.path().join("tree.json");
    std::fs::write(&tree, "").unwrap();
    let cfg = ServiceConfig {
        taxonomy_path: Some(tree),
        ..config()
    };
    assert!(Platform::open(cfg, Providers::stub(0), Arc::new(StepClock::new(0))).is_err());
}

#[tokio::test]
async fn proposals_are_created_deduplicated_or_rejected() {
    let (_, app) = app();
    let id = created_id(&app, "Neutral Voting Information", "Explain how to register and vote without endorsing anyone.").await;

    let (status, dup) = propose(&app, "Neutral Voting Information", "Explain how to register and vote without endorsing anyone.").await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(dup["status"], "duplicate");
    assert_eq!(dup["id"], id.as_str());
    assert!((dup["similarity"].as_f64().unwrap() - 1.0).abs() < 1e-9);

    let (status, bad) = call(
        &app,
        "POST",
        "/guidelines",
        Some(json!({"topic": "astrology", "title": "Stars", "body": "Consult the stars.", "author": "alice"})),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(bad["violations"], json!(["unknown-topic"]));

    let (status, _) = call(&app, "POST", "/guidelines", Some(json!({"topic": "voting"})), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, list) = call(&app, "GET", "/guidelines?topic=elections", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(list.as_array().unwrap().len(), 1);
    let (_, list) = call(&app, "GET", "/guidelines?topic=policy", None, None).await;
    assert!(list.as_array().unwrap().is_empty());
    let (status, _) = call(&app, "GET", "/guidelines?topic=astrology", None, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn ratings_are_submitted_then_revised() {
    let (_, app) = app();
    let id = created_id(&app, "Neutral Voting Information", "Stay neutral about candidates.").await;
    let (status, first) = rate(&app, &id, "bob", "helpful", None).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(first["kind"], "rating-submitted");
    let (_, second) = rate(&app, &id, "bob", "not-helpful", Some("unclear-wording")).await;
    assert_eq!(second["kind"], "rating-revised");

    let (status, err) = rate(&app, &id, "carol", "helpful", Some("unclear-wording")).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["error"], "tag-not-allowed");
    let (status, err) = rate(&app, &id, "carol", "not-helpful", Some("made-up")).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["error"], "unknown-tag");
    let (status, _) = rate(&app, "g9999", "carol", "helpful", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn chat_test_uses_the_guideline_and_maps_provider_errors() {
    let (_, app) = app();
    let id = created_id(&app, "Neutral Voting Information", "Stay neutral about candidates.").await;
    let messages = json!([{"role": "user", "text": "Who should I vote for?"}]);
    let (status, reply) = call(&app, "POST", "/chat/test", Some(json!({"guideline_id": id, "messages": messages})), None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(reply["text"].as_str().unwrap().starts_with("[Neutral Voting Information]"));

    let (status, _) = call(&app, "POST", "/chat/test", Some(json!({"guideline_id": "g9999", "messages": messages})), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "POST", "/chat/test", Some(json!({"guideline_id": id, "messages": []})), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let slow = router(state_with(
        config(),
        Providers {
            chat: Arc::new(StubChat::timing_out()),
            ..Providers::stub(0)
        },
    ));
    let id = created_id(&slow, "Neutral Voting Information", "Stay neutral about candidates.").await;
    let req = Request::builder()
        .method("POST")
        .uri("/chat/test")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(json!({"guideline_id": id, "messages": messages}).to_string()))
        .unwrap();
    let res = slow.oneshot(req).await.unwrap();
    assert_eq!(res.status(), StatusCode::GATEWAY_TIMEOUT);
    assert_eq!(res.headers()[header::RETRY_AFTER], "1");
    let body: Value = serde_json::from_slice(&res.into_body().collect().await.unwrap().to_bytes()).unwrap();
    assert_eq!(body["error"], "upstream-timeout");
}

fn import_simulated(state: &AppState, seed: u64) -> BTreeSet<GuidelineId> {
    let community = generate(&CommunitySpec {
        seed,
        ..CommunitySpec::default()
    })
    .unwrap();
    state.platform().import(&community.guidelines, &community.ratings).unwrap();
    community.truth.expected_approved.into_iter().collect()
}

fn published_ids(constitution: &Value) -> BTreeSet<GuidelineId> {
    constitution["sections"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|s| s["entries"].as_array().unwrap())
        .map(|e| GuidelineId::new(e["guideline"]["id"].as_str().unwrap()).unwrap())
        .collect()
}

#[tokio::test]
async fn retrain_publishes_the_expected_constitution_and_is_idempotent() {
    let (state, app) = app();
    let (status, empty) = call(&app, "GET", "/constitution/live", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(empty["version"], 0);
    assert!(empty["sections"].as_array().unwrap().is_empty());
    let (status, err) = call(&app, "POST", "/admin/retrain", None, None).await;
    assert_eq!(status, StatusCode::CONFLICT, "{err}");

    let expected = import_simulated(&state, 42);
    let (status, first) = call(&app, "POST", "/admin/retrain", None, None).await;
    assert_eq!(status, StatusCode::OK, "{first}");
    assert_eq!(first["noop"], false);
    assert_eq!(first["version"], 1);
    assert_eq!(first["report"]["converged"], true);
    assert_eq!(published_ids(&first["constitution"]), expected);

    let (_, live) = call(&app, "GET", "/constitution/live", None, None).await;
    assert_eq!(live, first["constitution"]);
    for entry in live["sections"][0]["entries"].as_array().unwrap() {
        assert!(entry["score"]["intercept"].as_f64().unwrap() > 0.4);
        assert!(entry["score"]["tag_score"].as_f64().is_some());
    }

    let (_, again) = call(&app, "POST", "/admin/retrain", None, None).await;
    assert_eq!(again["noop"], true);
    assert_eq!(again["version"], 1);

    let first_id = expected.iter().next().unwrap().to_string();
    rate(&app, &first_id, "newcomer", "helpful", None).await;
    let (_, third) = call(&app, "POST", "/admin/retrain", None, None).await;
    assert_eq!(third["noop"], false);
    assert_eq!(third["version"], 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_retrains_run_one_at_a_time() {
    let (state, app) = app();
    import_simulated(&state, 7);
    let (a, b) = tokio::join!(
        call(&app, "POST", "/admin/retrain", None, None),
        call(&app, "POST", "/admin/retrain", None, None)
    );
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(b.0, StatusCode::OK);
    let noops: Vec<bool> = [&a.1, &b.1].iter().map(|v| v["noop"].as_bool().unwrap()).collect();
    assert_eq!(noops.iter().filter(|n| **n).count(), 1, "{noops:?}");
    assert_eq!(a.1["version"], 1);
    assert_eq!(b.1["version"], 1);
    let kinds = state.platform().event_kinds();
    assert_eq!(kinds.iter().filter(|k| **k == EventKind::ModelFitted).count(), 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn enough_new_ratings_trigger_a_background_retrain() {
    let cfg = ServiceConfig {
        retrain: RetrainTrigger {
            every_n_ratings: Some(3),
            interval_secs: None,
        },
        ..config()
    };
    let state = state_with(cfg, Providers::stub(0));
    let app = router(state.clone());
    let id = created_id(&app, "Neutral Voting Information", "Stay neutral about candidates.").await;
    for user in ["a", "b"] {
        assert_eq!(rate(&app, &id, user, "helpful", None).await.1["retrain_due"], false);
    }
    assert_eq!(rate(&app, &id, "c", "helpful", None).await.1["retrain_due"], true);
    for _ in 0..200 {
        if state.platform().live_constitution().version == 1 {
            return;
        }
        tokio::time::sleep(std::time::Duration::from_millis(10)).await;
    }
    panic!("background retrain did not publish");
}

fn survey(id: &str, group: &str, yes: bool) -> Value {
    json!({
        "participant": {"id": id, "demographics": {"country": group}},
        "answers": {"q1_support": yes, "q2_enjoyable": 4, "q3_trust": 3, "q4_contribution": 5}
    })
}

#[tokio::test]
async fn survey_support_report() {
    let (_, app) = app();
    let (status, _) = call(&app, "GET", "/analytics/survey", None, None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    for i in 0..10 {
        let (status, _) = call(&app, "POST", "/surveys", Some(survey(&format!("a{i}"), "A", i < 9)), None).await;
        assert_eq!(status, StatusCode::ACCEPTED);
    }
    for i in 0..5 {
        call(&app, "POST", "/surveys", Some(survey(&format!("b{i}"), "B", i < 4)), None).await;
    }
    let (status, report) = call(&app, "GET", "/analytics/survey", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert!((report["raw_support"].as_f64().unwrap() - 13.0 / 15.0).abs() < 1e-12);
    assert!((report["max_min_support"].as_f64().unwrap() - 0.8).abs() < 1e-12);
    assert_eq!(report["likert_means"]["q4_contribution"], 5.0);

    let (status, _) = call(&app, "POST", "/surveys", Some(survey("a0", "A", true)), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let mut bad = survey("z", "A", true);
    bad["answers"]["q3_trust"] = json!(9);
    let (status, _) = call(&app, "POST", "/surveys", Some(bad), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn bearer_tokens_guard_writes() {
    let cfg = ServiceConfig {
        auth: AuthConfig {
            tokens: [("alice-token".to_string(), concord_core::UserId::new("alice").unwrap())].into(),
            admin_token: Some("root-token".into()),
        },
        ..config()
    };
    let app = router(state_with(cfg, Providers::stub(0)));
    let body = json!({"topic": "voting", "title": "T", "body": "Stay neutral.", "author": "alice"});
    let (status, _) = call(&app, "POST", "/guidelines", Some(body.clone()), None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = call(&app, "POST", "/guidelines", Some(body.clone()), Some("wrong")).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, created) = call(&app, "POST", "/guidelines", Some(body), Some("alice-token")).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = created["id"].as_str().unwrap();

    let (status, _) = call(
        &app,
        "POST",
        &format!("/guidelines/{id}/ratings"),
        Some(json!({"user": "mallory", "verdict": "helpful"})),
        Some("alice-token"),
    )
    .await;
    assert_eq!(status, StatusCode::FORBIDDEN);

    let (status, _) = call(&app, "POST", "/admin/retrain", None, Some("alice-token")).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    let (status, _) = call(&app, "POST", "/admin/retrain", None, Some("root-token")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&app, "GET", "/constitution/live", None, None).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn restart_keeps_acknowledged_writes_and_the_constitution() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig {
        storage_root: Some(dir.path().to_path_buf()),
        snapshot_every: 7,
        ..config()
    };
    let state = state_with(cfg.clone(), Providers::stub(0));
    let app = router(state.clone());
    import_simulated(&state, 3);
    let id = created_id(&app, "Neutral Voting Information", "Stay neutral about candidates.").await;
    rate(&app, &id, "u001", "not-helpful", Some("not-actionable")).await;
    let (_, retrained) = call(&app, "POST", "/admin/retrain", None, None).await;
    let (_, before) = call(&app, "GET", "/constitution/live", None, None).await;
    assert_eq!(retrained["constitution"], before);
    let head = state.platform().store().head();
    drop(app);
    drop(state);

    let reopened = state_with(cfg, Providers::stub(0));
    assert_eq!(reopened.platform().store().head(), head);
    let app = router(reopened.clone());
    let (_, after) = call(&app, "GET", "/constitution/live", None, None).await;
    assert_eq!(before, after);
    let (_, again) = call(&app, "POST", "/admin/retrain", None, None).await;
    assert_eq!(again["noop"], true);
    let (status, g) = call(&app, "GET", &format!("/guidelines/{id}"), None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(g["title"], "Neutral Voting Information");
}
