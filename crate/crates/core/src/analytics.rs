//! Survey support metrics, including max-min support across demographic groups.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DemographicAttribute, Participant, SurveyResponse};

pub const DEFAULT_GROUP_FLOOR: usize = 5;

/// A survey answer together with the respondent's demographics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveySubmission {
    pub participant: Participant,
    pub response: SurveyResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSupport {
    pub attribute: DemographicAttribute,
    pub category: String,
    pub supporters: usize,
    pub count: usize,
    pub support: f64,
    /// Whether the group met the size floor and counts toward `max_min_support`.
    pub included: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikertMeans {
    pub q2_enjoyable: f64,
    pub q3_trust: f64,
    pub q4_contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportReport {
    pub respondents: usize,
    pub raw_support: f64,
    pub per_group: Vec<GroupSupport>,
    /// Lowest support among groups meeting the floor; `None` if no group does.
    pub max_min_support: Option<f64>,
    pub group_floor: usize,
    pub likert_means: LikertMeans,
}

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("no survey responses")]
    NoResponses,
    #[error(transparent)]
    Invalid(#[from] crate::domain::SurveyError),
}

pub fn support_report(
    submissions: &[SurveySubmission],
    group_floor: usize,
) -> Result<SupportReport, AnalyticsError> {
    if submissions.is_empty() {
        return Err(AnalyticsError::NoResponses);
    }
    for s in submissions {
        s.response.validate()?;
    }
    let n = submissions.len() as f64;
    let supporters = submissions.iter().filter(|s| s.response.q1_support).count();

    let mut groups: BTreeMap<(DemographicAttribute, &str), (usize, usize)> = BTreeMap::new();
    for s in submissions {
        for (attribute, category) in &s.participant.demographics {
            let entry = groups.entry((*attribute, category.as_str())).or_default();
            entry.1 += 1;
            if s.response.q1_support {
                entry.0 += 1;
            }
        }
    }
    let per_group: Vec<GroupSupport> = groups
        .into_iter()
        .map(|((attribute, category), (yes, count))| GroupSupport {
            attribute,
            category: category.to_string(),
            supporters: yes,
            count,
            support: yes as f64 / count as f64,
            included: count >= group_floor,
        })
        .collect();
    let max_min_support = per_group
        .iter()
        .filter(|g| g.included)
        .map(|g| g.support)
        .reduce(f64::min);

    let mean = |f: fn(&SurveyResponse) -> u8| {
        submissions.iter().map(|s| f(&s.response) as f64).sum::<f64>() / n
    };
    Ok(SupportReport {
        respondents: submissions.len(),
        raw_support: supporters as f64 / n,
        per_group,
        max_min_support,
        group_floor,
        likert_means: LikertMeans {
            q2_enjoyable: mean(|r| r.q2_enjoyable),
            q3_trust: mean(|r| r.q3_trust),
            q4_contribution: mean(|r| r.q4_contribution),
        },
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::domain::UserId;

    pub(crate) fn two_group_fixture() -> Vec<SurveySubmission> {
        let mut out = Vec::new();
        for (group, size, yes) in [("A", 10, 9), ("B", 5, 4)] {
            for i in 0..size {
                let id = UserId::new(format!("{group}{i}")).unwrap();
                out.push(SurveySubmission {
                    participant: Participant {
                        id: id.clone(),
                        demographics: [(DemographicAttribute::Country, group.to_string())].into(),
                    },
                    response: SurveyResponse {
                        participant: id,
                        q1_support: i < yes,
                        q2_enjoyable: 4,
                        q3_trust: 3,
                        q4_contribution: 5,
                    },
                });
            }
        }
        out
    }

    #[test]
    fn two_groups_hand_computed() {
        let report = support_report(&two_group_fixture(), DEFAULT_GROUP_FLOOR).unwrap();
        assert!((report.raw_support - 13.0 / 15.0).abs() < 1e-12);
        assert!((report.max_min_support.unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(report.likert_means.q3_trust, 3.0);
    }

    #[test]
    fn unanimous_support() {
        let mut data = two_group_fixture();
        data.iter_mut().for_each(|s| s.response.q1_support = true);
        let report = support_report(&data, DEFAULT_GROUP_FLOOR).unwrap();
        assert_eq!(report.raw_support, 1.0);
        assert_eq!(report.max_min_support, Some(1.0));
    }

    #[test]
    fn groups_under_the_floor_do_not_count() {
        let mut data = two_group_fixture();
        // shrink group B to 4 members, one of them a dissenter
        data.truncate(14);
        data[13].response.q1_support = false;
        let report = support_report(&data, DEFAULT_GROUP_FLOOR).unwrap();
        let b = report.per_group.iter().find(|g| g.category == "B").unwrap();
        assert!(!b.included);
        assert!((report.max_min_support.unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn empty_survey_is_an_error() {
        assert_eq!(support_report(&[], 5), Err(AnalyticsError::NoResponses));
    }

    #[test]
    fn reconstructed_fixture_matches_published_aggregates() {
        let report =
            support_report(&crate::fixtures::reconstructed_survey(), DEFAULT_GROUP_FLOOR).unwrap();
        assert!((report.raw_support - 0.936).abs() <= 0.005);
        assert!(report.max_min_support.unwrap() >= 0.85);
    }
}
