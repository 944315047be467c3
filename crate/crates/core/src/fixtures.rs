//! Bundled data: the political taxonomy, the 30-guideline reference
//! constitution, participant demographic tables, a planted-error
//! classification set, and a reconstructed survey.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::SurveySubmission;
use crate::domain::{DemographicAttribute, Participant, SurveyResponse, TopicId, UserId};
use crate::taxonomy::{parse_dataset, LabelledPrompt, TaxonomyNode};

const POLITICAL_TAXONOMY: &str = include_str!("../fixtures/political_taxonomy.json");
const POLITICAL_KEYWORDS: &str = include_str!("../fixtures/political_keywords.json");
const PLANTED_ERROR_PROMPTS: &str = include_str!("../fixtures/planted_error_prompts.jsonl");
const CONSTITUTION: &str = include_str!("../fixtures/constitution.json");
const DEMOGRAPHICS: &str = include_str!("../fixtures/demographics.json");

/// Respondents in the reconstructed survey.
pub const SURVEY_RESPONDENTS: usize = 149;
/// Respondents answering yes to overall support (140 / 149 = 0.9396).
pub const SURVEY_SUPPORTERS: usize = 140;

pub fn political_taxonomy() -> TaxonomyNode {
    TaxonomyNode::from_json(POLITICAL_TAXONOMY).expect("bundled taxonomy is valid")
}

pub fn political_taxonomy_json() -> &'static str {
    POLITICAL_TAXONOMY
}

/// Keyword table driving the deterministic topic chooser over the bundled tree.
pub fn political_keywords() -> BTreeMap<TopicId, Vec<String>> {
    serde_json::from_str(POLITICAL_KEYWORDS).expect("bundled keyword table is valid")
}

/// Ten labelled prompts of which the keyword chooser gets exactly three wrong.
pub fn planted_error_prompts() -> Vec<LabelledPrompt> {
    parse_dataset(PLANTED_ERROR_PROMPTS).expect("bundled prompts are valid")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstitutionFixtureEntry {
    pub topic: TopicId,
    pub title: String,
    pub body: String,
}

/// The reference constitution's 30 guidelines, in published order.
pub fn constitution_entries() -> Vec<ConstitutionFixtureEntry> {
    serde_json::from_str(CONSTITUTION).expect("bundled constitution is valid")
}

/// Published participant counts per demographic attribute, in table order.
pub fn demographic_tables() -> BTreeMap<DemographicAttribute, Vec<(String, usize)>> {
    serde_json::from_str(DEMOGRAPHICS).expect("bundled demographics are valid")
}

/// Splits `total` across `weights` proportionally, largest remainder first.
fn apportion(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    let mut counts: Vec<usize> = weights.iter().map(|w| w * total / sum).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse((weights[i] * total) % sum));
    let short = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// A survey of 149 respondents rebuilt from published aggregates only: the
/// demographic mix follows the participant tables, 140 respondents support the
/// constitution, and the 9 dissenters are placed so no demographic group of
/// five or more drops below 85% support. Likert answers are placeholders, as no
/// per-question distribution was published.
pub fn reconstructed_survey() -> Vec<SurveySubmission> {
    let tables = demographic_tables();
    let mut participants: Vec<Participant> = (0..SURVEY_RESPONDENTS)
        .map(|i| Participant {
            id: UserId::new(format!("s{:03}", i + 1)).expect("static id"),
            demographics: BTreeMap::new(),
        })
        .collect();

    for (salt, (attribute, rows)) in tables.iter().enumerate() {
        let weights: Vec<usize> = rows.iter().map(|(_, n)| *n).collect();
        let mut column: Vec<&str> = apportion(&weights, SURVEY_RESPONDENTS)
            .into_iter()
            .zip(rows)
            .flat_map(|(n, (category, _))| std::iter::repeat_n(category.as_str(), n))
            .collect();
        column.shuffle(&mut ChaCha8Rng::seed_from_u64(0x5eed + salt as u64));
        for (p, category) in participants.iter_mut().zip(column) {
            p.demographics.insert(*attribute, category.to_string());
        }
    }

    let mut group_sizes: BTreeMap<(DemographicAttribute, &str), usize> = BTreeMap::new();
    for p in &participants {
        for (a, c) in &p.demographics {
            *group_sizes.entry((*a, c.as_str())).or_default() += 1;
        }
    }
    let mut dissent: BTreeMap<(DemographicAttribute, &str), usize> = BTreeMap::new();
    let mut dissenters = BTreeSet::new();
    let mut order: Vec<usize> = (0..participants.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(0xd155));
    for i in order {
        if dissenters.len() == SURVEY_RESPONDENTS - SURVEY_SUPPORTERS {
            break;
        }
        let keeps_floor = participants[i].demographics.iter().all(|(a, c)| {
            let size = group_sizes[&(*a, c.as_str())];
            let no = dissent.get(&(*a, c.as_str())).copied().unwrap_or(0) + 1;
            (size - no) as f64 / size as f64 >= 0.85
        });
        if keeps_floor {
            for (a, c) in &participants[i].demographics {
                *dissent.entry((*a, c.as_str())).or_default() += 1;
            }
            dissenters.insert(i);
        }
    }

    participants
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let support = !dissenters.contains(&i);
            let base: u8 = if support { 4 } else { 2 };
            SurveySubmission {
                participant: p.clone(),
                response: SurveyResponse {
                    participant: p.id.clone(),
                    q1_support: support,
                    q2_enjoyable: base + (i % 2) as u8,
                    q3_trust: base,
                    q4_contribution: base + (i % 3 == 0) as u8,
                },
            }
        })
        .collect()
}
