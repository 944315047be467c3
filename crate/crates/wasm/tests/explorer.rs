use concord_core::consensus::SelectionConfig;
use concord_core::simulator::CommunitySpec;
use concord_wasm::{tag_summand_curve, ExploreRequest, Fitted};

fn small() -> ExploreRequest {
    ExploreRequest {
        community: Some(CommunitySpec {
            n_users: 40,
            n_guidelines: 12,
            seed: 4,
            ..CommunitySpec::default()
        }),
        ..ExploreRequest::default()
    }
}

#[test]
fn explore_recovers_the_simulated_bridging_guidelines() {
    let fitted = Fitted::fit(&small()).unwrap();
    let result = fitted.select(&SelectionConfig::default()).unwrap();
    assert!(result.converged);
    assert_eq!(result.guidelines.len(), 12);
    assert_eq!(result.users.len(), 40);
    assert_eq!((result.precision, result.recall), (1.0, 1.0));
    for g in &result.guidelines {
        assert_eq!(g.approved, g.expected, "{}", g.id);
    }
}

#[test]
fn reselecting_with_a_higher_threshold_never_adds_approvals() {
    let fitted = Fitted::fit(&small()).unwrap();
    let approved = |t: f64| {
        let cfg = SelectionConfig {
            intercept_threshold: t,
            ..SelectionConfig::default()
        };
        fitted.select(&cfg).unwrap().guidelines.iter().filter(|g| g.approved).count()
    };
    let counts: Vec<usize> = [0.0, 0.2, 0.4, 0.6, 1.0].into_iter().map(approved).collect();
    assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    assert_eq!(*counts.last().unwrap(), 0);
}

#[test]
fn summand_curve_is_one_at_zero_and_half_at_eta() {
    let curve = tag_summand_curve(0.5, 5.0, 1.0, 4).unwrap();
    assert_eq!(curve.len(), 5);
    assert_eq!(curve[0], (0.0, 1.0));
    assert_eq!(curve[2], (0.5, 0.5));
    assert!(curve.windows(2).all(|w| w[1].1 < w[0].1));
    assert!(tag_summand_curve(0.0, 5.0, 1.0, 4).is_err());
    assert!(tag_summand_curve(0.5, 5.0, 1.0, 0).is_err());
}

#[test]
fn exported_functions_speak_json() {
    let out = concord_wasm::tag_score_curve(1.0, 2.0, 2.0, 2).unwrap_or_else(|_| panic!("curve failed"));
    let points: Vec<(f64, f64)> = serde_json::from_str(&out).unwrap();
    assert_eq!(points, vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.2)]);
}
