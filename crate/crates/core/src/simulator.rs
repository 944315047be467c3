//! Synthetic communities with known ground truth.
//!
//! Users sit in opinion clusters on one axis. Bridging guidelines are liked
//! across clusters, divisive ones only by the side they favour, and
//! low-quality ones by nobody (and collect quality tags). Within every
//! (guideline, cluster) group the number of Helpful verdicts is fixed at
//! `ceil(p * raters)` and the helpful raters are drawn at random, so small
//! communities still show the intended split; noise then flips verdicts
//! independently.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{ConsensusError, GuidelineScore, RatingsDataset};
use crate::domain::{Guideline, GuidelineId, Rating, TagId, Timestamp, TopicId, UserId, Verdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommunitySpec {
    pub n_users: usize,
    pub n_guidelines: usize,
    /// Cluster positions on the opinion axis, each in [-1, 1].
    pub cluster_centers: Vec<f64>,
    pub cluster_weights: Vec<f64>,
    pub bridging_fraction: f64,
    pub low_quality_fraction: f64,
    /// Probability that any single verdict is flipped.
    pub noise: f64,
    /// Share of low-quality ratings carrying a quality tag.
    pub quality_tag_rate: f64,
    /// Share of guidelines each user rates.
    pub rating_density: f64,
    pub p_bridging: f64,
    pub p_aligned: f64,
    pub p_opposed: f64,
    /// Guidelines with fewer ratings are not expected to be approved.
    pub min_ratings: usize,
    pub seed: u64,
}

impl Default for CommunitySpec {
    fn default() -> Self {
        CommunitySpec {
            n_users: 100,
            n_guidelines: 40,
            cluster_centers: vec![-1.0, 1.0],
            cluster_weights: vec![0.5, 0.5],
            bridging_fraction: 0.25,
            low_quality_fraction: 0.1,
            noise: 0.0,
            quality_tag_rate: 0.5,
            rating_density: 0.8,
            p_bridging: 0.9,
            p_aligned: 0.9,
            p_opposed: 0.1,
            min_ratings: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidelineKind {
    Bridging,
    DivisiveLeft,
    DivisiveRight,
    LowQuality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub user_ideology: BTreeMap<UserId, f64>,
    pub guideline_kind: BTreeMap<GuidelineId, GuidelineKind>,
    pub expected_approved: BTreeSet<GuidelineId>,
}

#[derive(Debug, Clone)]
pub struct Community {
    pub guidelines: Vec<Guideline>,
    pub ratings: Vec<Rating>,
    pub dataset: RatingsDataset,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulatorError {
    #[error("invalid community spec: {0}")]
    InvalidSpec(String),
    #[error("scored guidelines differ from the ground truth's: {0}")]
    UniverseMismatch(String),
    #[error(transparent)]
    Dataset(#[from] ConsensusError),
}

impl CommunitySpec {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        let bad = |msg: String| Err(SimulatorError::InvalidSpec(msg));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.n_users < 2 {
            return bad("n_users must be at least 2".into());
        }
        if self.n_guidelines < 1 {
            return bad("n_guidelines must be at least 1".into());
        }
        if self.cluster_centers.is_empty() || self.cluster_centers.len() != self.cluster_weights.len() {
            return bad("cluster_centers and cluster_weights must be non-empty and of equal length".into());
        }
        if self.cluster_centers.iter().any(|c| !(-1.0..=1.0).contains(c)) {
            return bad("cluster centers must lie in [-1, 1]".into());
        }
        if self.cluster_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("cluster weights must be non-negative".into());
        }
        let total: f64 = self.cluster_weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("cluster weights sum to {total}, not 1"));
        }
        for (name, value) in [
            ("bridging_fraction", self.bridging_fraction),
            ("low_quality_fraction", self.low_quality_fraction),
            ("noise", self.noise),
            ("quality_tag_rate", self.quality_tag_rate),
            ("p_bridging", self.p_bridging),
            ("p_aligned", self.p_aligned),
            ("p_opposed", self.p_opposed),
        ] {
            if !unit(value) {
                return bad(format!("{name} must lie in [0, 1], got {value}"));
            }
        }
        if self.bridging_fraction + self.low_quality_fraction > 1.0 + 1e-12 {
            return bad("bridging_fraction + low_quality_fraction exceeds 1".into());
        }
        if !(self.rating_density > 0.0 && self.rating_density <= 1.0) {
            return bad("rating_density must lie in (0, 1]".into());
        }
        Ok(())
    }
}

/// Splits `total` across `weights`, handing leftovers to the largest remainders.
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let short = total.saturating_sub(counts.iter().sum());
    for &i in order.iter().cycle().take(short) {
        counts[i] += 1;
    }
    counts
}

fn quota(p: f64, n: usize) -> usize {
    ((p * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

const TOPICS: [&str; 6] = [
    "misinformation",
    "voting",
    "election-results",
    "partisan-language",
    "policy",
    "sensitive-political-events",
];
const QUALITY_TAGS: [&str; 2] = ["unclear-wording", "not-actionable"];

pub fn generate(spec: &CommunitySpec) -> Result<Community, SimulatorError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = |n: usize| n.saturating_sub(1).to_string().len().max(3);
    let (uw, gw) = (width(spec.n_users), width(spec.n_guidelines));

    let mut cluster_of = Vec::with_capacity(spec.n_users);
    for (c, n) in apportion(&spec.cluster_weights, spec.n_users).into_iter().enumerate() {
        cluster_of.extend(std::iter::repeat_n(c, n));
    }
    let users: Vec<UserId> = (0..spec.n_users)
        .map(|i| UserId::new(format!("u{i:0uw$}")).expect("generated id"))
        .collect();

    let n_bridging = (spec.bridging_fraction * spec.n_guidelines as f64).round() as usize;
    let n_low = ((spec.low_quality_fraction * spec.n_guidelines as f64).round() as usize)
        .min(spec.n_guidelines - n_bridging.min(spec.n_guidelines));
    let n_bridging = n_bridging.min(spec.n_guidelines);
    let mut kinds: Vec<GuidelineKind> = Vec::with_capacity(spec.n_guidelines);
    kinds.extend(std::iter::repeat_n(GuidelineKind::Bridging, n_bridging));
    for i in 0..spec.n_guidelines - n_bridging - n_low {
        kinds.push(if i % 2 == 0 { GuidelineKind::DivisiveLeft } else { GuidelineKind::DivisiveRight });
    }
    kinds.extend(std::iter::repeat_n(GuidelineKind::LowQuality, n_low));
    kinds.shuffle(&mut rng);

    let guideline_ids: Vec<GuidelineId> = (0..spec.n_guidelines)
        .map(|i| GuidelineId::new(format!("g{i:0gw$}")).expect("generated id"))
        .collect();
    let author = UserId::new("simulator").expect("static id");
    let guidelines: Vec<Guideline> = guideline_ids
        .iter()
        .zip(&kinds)
        .enumerate()
        .map(|(i, (id, kind))| {
            let (title, body) = match kind {
                GuidelineKind::Bridging => ("Shared ground", "Present verifiable facts from several reputable sources"),
                GuidelineKind::DivisiveLeft => ("Left lean", "Frame answers around the left cluster's priorities"),
                GuidelineKind::DivisiveRight => ("Right lean", "Frame answers around the right cluster's priorities"),
                GuidelineKind::LowQuality => ("Vague", "Be good about things when it matters somehow"),
            };
            Guideline {
                id: id.clone(),
                topic: TopicId::new(TOPICS[i % TOPICS.len()]).expect("static id"),
                title: format!("{title} {id}"),
                body: format!("{body} (synthetic guideline {id})."),
                author: author.clone(),
                created_at: Timestamp::from_unix(1_700_000_000),
            }
        })
        .collect();

    // Who rates what.
    let per_user = ((spec.rating_density * spec.n_guidelines as f64).round() as usize).clamp(1, spec.n_guidelines);
    let mut raters: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); spec.cluster_centers.len()]; spec.n_guidelines];
    let mut order: Vec<usize> = (0..spec.n_guidelines).collect();
    for (u, &c) in cluster_of.iter().enumerate() {
        order.shuffle(&mut rng);
        let mut picked = order[..per_user].to_vec();
        picked.sort_unstable();
        for g in picked {
            raters[g][c].push(u);
        }
    }

    // (user, guideline) -> (verdict, tag)
    let mut cells: BTreeMap<(usize, usize), (Verdict, Option<TagId>)> = BTreeMap::new();
    for (g, kind) in kinds.iter().enumerate() {
        for (c, group) in raters[g].iter().enumerate() {
            let center = spec.cluster_centers[c];
            let p = match kind {
                GuidelineKind::Bridging => spec.p_bridging,
                GuidelineKind::DivisiveLeft if center < 0.0 => spec.p_aligned,
                GuidelineKind::DivisiveRight if center > 0.0 => spec.p_aligned,
                GuidelineKind::DivisiveLeft | GuidelineKind::DivisiveRight => spec.p_opposed,
                GuidelineKind::LowQuality => 0.0,
            };
            let mut shuffled = group.clone();
            shuffled.shuffle(&mut rng);
            let helpful = quota(p, shuffled.len());
            let tagged = if *kind == GuidelineKind::LowQuality {
                quota(spec.quality_tag_rate, shuffled.len())
            } else {
                0
            };
            for (rank, &u) in shuffled.iter().enumerate() {
                let cell = if rank < helpful {
                    (Verdict::Helpful, None)
                } else if rank - helpful < tagged {
                    let tag = QUALITY_TAGS[(u + g) % QUALITY_TAGS.len()];
                    (Verdict::NotHelpful, Some(TagId::new(tag).expect("static id")))
                } else {
                    (Verdict::NotHelpful, None)
                };
                cells.insert((u, g), cell);
            }
        }
    }
    if spec.noise > 0.0 {
        for (verdict, tag) in cells.values_mut() {
            if rng.random_bool(spec.noise) {
                *verdict = match verdict {
                    Verdict::Helpful => Verdict::NotHelpful,
                    Verdict::NotHelpful => Verdict::Helpful,
                };
                *tag = None;
            }
        }
    }

    let ratings: Vec<Rating> = cells
        .into_iter()
        .enumerate()
        .map(|(i, ((u, g), (verdict, tag)))| Rating {
            user: users[u].clone(),
            guideline: guideline_ids[g].clone(),
            verdict,
            tag,
            created_at: Timestamp::from_unix(1_700_000_000 + i as i64),
        })
        .collect();
    let dataset = RatingsDataset::from_ratings(&ratings)?;
    let counts = dataset.rating_counts();

    let truth = GroundTruth {
        user_ideology: users
            .iter()
            .zip(&cluster_of)
            .map(|(u, &c)| (u.clone(), spec.cluster_centers[c]))
            .collect(),
        guideline_kind: guideline_ids.iter().cloned().zip(kinds.iter().copied()).collect(),
        expected_approved: guideline_ids
            .iter()
            .zip(&kinds)
            .filter(|(id, kind)| {
                **kind == GuidelineKind::Bridging && counts.get(*id).copied().unwrap_or(0) >= spec.min_ratings
            })
            .map(|(id, _)| id.clone())
            .collect(),
    };
    Ok(Community {
        guidelines,
        ratings,
        dataset,
        truth,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    /// Share of approvals that were expected; 1.0 when nothing was approved.
    pub precision: f64,
    /// Share of expected approvals that happened; 1.0 when none were expected.
    pub recall: f64,
    pub true_positives: Vec<GuidelineId>,
    pub false_positives: Vec<GuidelineId>,
    pub false_negatives: Vec<GuidelineId>,
}

pub fn evaluate_selection(scores: &[GuidelineScore], truth: &GroundTruth) -> Result<SelectionReport, SimulatorError> {
    let scored: BTreeSet<&GuidelineId> = scores.iter().map(|s| &s.guideline).collect();
    let known: BTreeSet<&GuidelineId> = truth.guideline_kind.keys().collect();
    if scored != known {
        let stray = scored.symmetric_difference(&known).next().map(|g| g.to_string()).unwrap_or_default();
        return Err(SimulatorError::UniverseMismatch(stray));
    }
    let approved: BTreeSet<&GuidelineId> = scores.iter().filter(|s| s.approved).map(|s| &s.guideline).collect();
    let expected: BTreeSet<&GuidelineId> = truth.expected_approved.iter().collect();
    let collect = |set: BTreeSet<&&GuidelineId>| set.into_iter().map(|g| (*g).clone()).collect::<Vec<_>>();
    let true_positives = collect(approved.intersection(&expected).collect());
    let false_positives = collect(approved.difference(&expected).collect());
    let false_negatives = collect(expected.difference(&approved).collect());
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(SelectionReport {
        precision: ratio(true_positives.len(), approved.len()),
        recall: ratio(true_positives.len(), expected.len()),
        true_positives,
        false_positives,
        false_negatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(noise: f64) -> CommunitySpec {
        CommunitySpec {
            n_users: 40,
            n_guidelines: 3,
            bridging_fraction: 1.0 / 3.0,
            low_quality_fraction: 0.0,
            noise,
            ..CommunitySpec::default()
        }
    }

    fn helpful_share(c: &Community, g: &GuidelineId) -> f64 {
        let rows: Vec<_> = c.ratings.iter().filter(|r| &r.guideline == g).collect();
        rows.iter().filter(|r| r.verdict.is_helpful()).count() as f64 / rows.len() as f64
    }

    #[test]
    fn verdict_shares_follow_kinds() {
        let c = generate(&small(0.0)).unwrap();
        for (g, kind) in &c.truth.guideline_kind {
            let share = helpful_share(&c, g);
            match kind {
                GuidelineKind::Bridging => assert!(share >= 0.9, "{share}"),
                _ => assert!((share - 0.5).abs() <= 0.1, "{share}"),
            }
        }
    }

    #[test]
    fn same_seed_same_community() {
        let a = generate(&small(0.05)).unwrap();
        let b = generate(&small(0.05)).unwrap();
        assert_eq!(a.ratings, b.ratings);
        assert_eq!(a.truth, b.truth);
        let c = generate(&CommunitySpec { seed: 1, ..small(0.05) }).unwrap();
        assert_ne!(a.ratings, c.ratings);
    }

    #[test]
    fn all_bridging_expects_everything_rated_enough() {
        let spec = CommunitySpec { bridging_fraction: 1.0, low_quality_fraction: 0.0, ..small(0.0) };
        let c = generate(&spec).unwrap();
        assert_eq!(c.truth.expected_approved.len(), 3);
    }

    #[test]
    fn requested_mix_is_exact() {
        let c = generate(&CommunitySpec::default()).unwrap();
        let count = |k| c.truth.guideline_kind.values().filter(|v| **v == k).count();
        assert_eq!(count(GuidelineKind::Bridging), 10);
        assert_eq!(count(GuidelineKind::LowQuality), 4);
        assert_eq!(count(GuidelineKind::DivisiveLeft) + count(GuidelineKind::DivisiveRight), 26);
        assert_eq!(c.ratings.len(), 100 * 32);
        let tagged = c.ratings.iter().filter(|r| r.tag.is_some()).count();
        assert!(tagged > 0);
        assert!(c.ratings.iter().all(|r| r.tag.is_none() || !r.verdict.is_helpful()));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            CommunitySpec { n_users: 1, ..Default::default() },
            CommunitySpec { n_guidelines: 0, ..Default::default() },
            CommunitySpec { cluster_weights: vec![0.5, 0.6], ..Default::default() },
            CommunitySpec { cluster_centers: vec![-2.0, 1.0], ..Default::default() },
            CommunitySpec { noise: 1.5, ..Default::default() },
            CommunitySpec { rating_density: 0.0, ..Default::default() },
        ];
        for spec in bad {
            assert!(matches!(generate(&spec), Err(SimulatorError::InvalidSpec(_))), "{spec:?}");
        }
    }

    fn score(id: &str, approved: bool) -> GuidelineScore {
        GuidelineScore {
            guideline: GuidelineId::new(id).unwrap(),
            intercept: 0.0,
            tag_score: 0.0,
            embedding: vec![0.0],
            approved,
            rating_count: 10,
            eligible: true,
        }
    }

    fn truth(ids: &[&str], expected: &[&str]) -> GroundTruth {
        GroundTruth {
            user_ideology: BTreeMap::new(),
            guideline_kind: ids
                .iter()
                .map(|i| (GuidelineId::new(*i).unwrap(), GuidelineKind::Bridging))
                .collect(),
            expected_approved: expected.iter().map(|i| GuidelineId::new(*i).unwrap()).collect(),
        }
    }

    #[test]
    fn precision_recall_examples() {
        let t = truth(&["a", "b", "c"], &["a", "b"]);
        let r = evaluate_selection(&[score("a", true), score("b", true), score("c", false)], &t).unwrap();
        assert_eq!((r.precision, r.recall), (1.0, 1.0));

        let r = evaluate_selection(&[score("a", false), score("b", false), score("c", false)], &t).unwrap();
        assert_eq!(r.recall, 0.0);

        let r = evaluate_selection(&[score("a", true), score("b", true), score("c", true)], &t).unwrap();
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.false_positives, vec![GuidelineId::new("c").unwrap()]);

        assert!(matches!(
            evaluate_selection(&[score("a", true)], &t),
            Err(SimulatorError::UniverseMismatch(_))
        ));
    }
}
