use std::collections::BTreeSet;
use std::sync::OnceLock;

use concord_core::adapters::{cosine_similarity, EmbeddingVector};
use concord_core::consensus::{
    loss, percentile, predict_rating, select_constitution, tag_score, train, ModelParams, RatingRow, RatingsDataset,
    SelectionConfig, TrainConfig,
};
use concord_core::simulator::{generate, CommunitySpec};
use concord_core::store::{decode, encode, Event, EventBody};
use concord_core::{GuidelineId, Rating, TagId, TagRegistry, Timestamp, UserId, Verdict};
use proptest::prelude::*;

const TAGS: [Option<&str>; 4] = [None, Some("unclear-wording"), Some("not-actionable"), Some("bad-principle")];

/// A dataset over up to `max_users` x `max_guidelines` with random verdicts
/// and tags, plus matching random parameters of dimension `k`.
fn instance(max_users: usize, max_guidelines: usize) -> impl Strategy<Value = (ModelParams, RatingsDataset)> {
    (1..=max_users, 1..=max_guidelines, 1usize..=3).prop_flat_map(|(nu, ng, k)| {
        let cells = proptest::collection::vec((any::<bool>(), any::<bool>(), 0usize..4), nu * ng);
        let values = proptest::collection::vec(-1.5f64..1.5, 1 + (nu + ng) * (1 + k));
        (Just((nu, ng, k)), cells, values).prop_map(|((nu, ng, k), cells, values)| {
            let mut rows = Vec::new();
            for (i, (present, helpful, tag)) in cells.into_iter().enumerate() {
                let (u, g) = (i / ng, i % ng);
                // Keep every entity rated at least once.
                if !(present || u == g % nu || g == u % ng) {
                    continue;
                }
                let verdict = if helpful { Verdict::Helpful } else { Verdict::NotHelpful };
                let tag = if helpful { None } else { TAGS[tag] };
                rows.push(RatingRow {
                    user: UserId::new(format!("u{u}")).unwrap(),
                    guideline: GuidelineId::new(format!("g{g}")).unwrap(),
                    verdict,
                    tag: tag.map(|t| TagId::new(t).unwrap()),
                });
            }
            let data = RatingsDataset::new(rows).unwrap();
            let mut v = values.into_iter();
            let mut take = |n: usize| (0..n).map(|_| v.next().unwrap()).collect::<Vec<f64>>();
            let params = ModelParams {
                mu: take(1)[0],
                user_intercepts: data.users().iter().map(|u| (u.clone(), take(1)[0])).collect(),
                guideline_intercepts: data.guidelines().iter().map(|g| (g.clone(), take(1)[0])).collect(),
                user_embeddings: data.users().iter().map(|u| (u.clone(), take(k))).collect(),
                guideline_embeddings: data.guidelines().iter().map(|g| (g.clone(), take(k))).collect(),
            };
            (params, data)
        })
    })
}

fn fitted_community() -> &'static (ModelParams, RatingsDataset) {
    static FIT: OnceLock<(ModelParams, RatingsDataset)> = OnceLock::new();
    FIT.get_or_init(|| {
        let community = generate(&CommunitySpec {
            noise: 0.05,
            seed: 8,
            ..CommunitySpec::default()
        })
        .unwrap();
        let fit = train(&community.dataset, &TrainConfig::default(), None).unwrap();
        (fit.params, community.dataset)
    })
}

fn vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-10.0f64..10.0, dim).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reflecting_every_embedding_leaves_loss_and_predictions_unchanged((params, data) in instance(8, 6)) {
        let cfg = TrainConfig { k: params.embedding_dim().unwrap(), ..TrainConfig::default() };
        let mirrored = params.reflected();
        let a = loss(&params, &data, &cfg).unwrap();
        let b = loss(&mirrored, &data, &cfg).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        for r in data.rows() {
            let p = predict_rating(&params, &r.user, &r.guideline).unwrap();
            let q = predict_rating(&mirrored, &r.user, &r.guideline).unwrap();
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn rating_order_does_not_matter((params, data) in instance(8, 6), seed in any::<u64>()) {
        let mut rows = data.rows().to_vec();
        let n = rows.len();
        for i in (1..n).rev() {
            let j = (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) % (i as u64 + 1)) as usize;
            rows.swap(i, j);
        }
        let shuffled = RatingsDataset::new(rows).unwrap();
        prop_assert_eq!(&shuffled, &data);
        let cfg = TrainConfig { k: params.embedding_dim().unwrap(), ..TrainConfig::default() };
        prop_assert_eq!(loss(&params, &shuffled, &cfg).unwrap().to_bits(), loss(&params, &data, &cfg).unwrap().to_bits());
    }

    #[test]
    fn tag_score_is_bounded_by_quality_taggers((params, data) in instance(10, 5), eta in 0.01f64..5.0) {
        let tags = TagRegistry::default();
        let cfg = SelectionConfig::default();
        for g in data.guidelines() {
            let t = tag_score(g, &params, &data, &tags, eta, &cfg).unwrap();
            let taggers = data
                .rows()
                .iter()
                .filter(|r| &r.guideline == g && r.tag.as_ref().is_some_and(|t| tags.is_quality(t)))
                .count();
            prop_assert!(t >= 0.0 && t <= taggers as f64 + 1e-12, "t = {} with {} taggers", t, taggers);
        }
    }

    #[test]
    fn approvals_shrink_as_thresholds_rise(a in -0.5f64..1.5, b in -0.5f64..1.5, ta in 0.0f64..6.0, tb in 0.0f64..6.0) {
        let (params, data) = fitted_community();
        let tags = TagRegistry::default();
        let approved = |intercept_threshold: f64, tag_score_threshold: f64| -> BTreeSet<GuidelineId> {
            let cfg = SelectionConfig { intercept_threshold, tag_score_threshold, ..SelectionConfig::default() };
            select_constitution(params, data, &tags, &cfg).unwrap().approved_ids()
        };
        let (lo, hi) = (a.min(b), a.max(b));
        let (tlo, thi) = (ta.min(tb), ta.max(tb));
        prop_assert!(approved(hi, thi).is_subset(&approved(lo, thi)));
        prop_assert!(approved(lo, tlo).is_subset(&approved(lo, thi)));
    }

    #[test]
    fn cosine_is_symmetric_and_bounded(a in vector(6), b in vector(6), scale in 0.01f64..100.0) {
        let va = EmbeddingVector::new(a.clone()).unwrap();
        let vb = EmbeddingVector::new(b).unwrap();
        let ab = cosine_similarity(&va, &vb).unwrap();
        prop_assert_eq!(ab, cosine_similarity(&vb, &va).unwrap());
        prop_assert!((-1.0..=1.0).contains(&ab));
        let scaled = EmbeddingVector::new(a.iter().map(|x| x * scale).collect()).unwrap();
        prop_assert!((cosine_similarity(&va, &scaled).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn percentile_is_monotone_and_within_range(values in proptest::collection::vec(-100.0f64..100.0, 1..40), p in 0.0f64..100.0, q in 0.0f64..100.0) {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (p, q) = (p.min(q), p.max(q));
        let at_p = percentile(&values, p).unwrap();
        let at_q = percentile(&values, q).unwrap();
        prop_assert!(lo <= at_p && at_p <= at_q && at_q <= hi);
        prop_assert_eq!(percentile(&values, 0.0).unwrap(), lo);
        prop_assert_eq!(percentile(&values, 100.0).unwrap(), hi);
    }

    #[test]
    fn log_records_roundtrip(
        seq in 1u64..1_000_000,
        at in 0i64..4_000_000_000,
        user in "[a-z0-9 _\"\\\\é-]{1,20}",
        guideline in "[a-z0-9]{1,12}",
        helpful in any::<bool>(),
        revised in any::<bool>(),
    ) {
        let rating = Rating {
            user: UserId::new(user).unwrap(),
            guideline: GuidelineId::new(guideline).unwrap(),
            verdict: if helpful { Verdict::Helpful } else { Verdict::NotHelpful },
            tag: (!helpful).then(|| TagId::new("not-actionable").unwrap()),
            created_at: Timestamp::from_unix(at),
        };
        let body = if revised { EventBody::RatingRevised(rating) } else { EventBody::RatingSubmitted(rating) };
        let event = Event { seq, at: Timestamp::from_unix(at), body };
        let line = encode(&event).unwrap();
        prop_assert!(!line.trim_end().contains('\n'));
        prop_assert_eq!(decode(&line).unwrap(), event);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn training_never_increases_the_loss((params, data) in instance(8, 6), seed in 0u64..1000) {
        let cfg = TrainConfig { k: params.embedding_dim().unwrap(), seed, max_epochs: 500, ..TrainConfig::default() };
        let fit = match train(&data, &cfg, None) {
            Ok(fit) => fit,
            Err(concord_core::consensus::TrainError::NonConvergence(fit)) => *fit,
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert!(fit.report.final_loss <= fit.report.initial_loss);
        for w in fit.report.loss_trajectory.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
    }
}
