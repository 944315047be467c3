//! Deterministic in-process providers.

use std::collections::{BTreeMap, BTreeSet};

use super::{AdapterError, Candidate, ChatProvider, ChatRequest, EmbeddingProvider, EmbeddingVector, TopicChooser};
use crate::domain::TopicId;
use crate::fixtures;
use crate::taxonomy::{LabelledPrompt, TaxonomyNode};

/// Echoes the latest user message, prefixed with the bracketed title of the
/// first system rule.
#[derive(Debug, Clone, Default)]
pub struct StubChat {
    timeout: bool,
}

impl StubChat {
    /// A stub whose every call times out.
    pub fn timing_out() -> Self {
        StubChat { timeout: true }
    }
}

fn bracketed_title(rule: &str) -> Option<&str> {
    let rule = rule.trim_start();
    if !rule.starts_with('[') {
        return None;
    }
    rule.find(']').map(|end| &rule[..=end])
}

impl ChatProvider for StubChat {
    fn chat(&self, request: &ChatRequest) -> Result<String, AdapterError> {
        request.validate()?;
        if self.timeout {
            return Err(AdapterError::Timeout { retry_after_secs: Some(1) });
        }
        let prompt = request.last_user_text().unwrap_or_default();
        Ok(match request.system_rules.first().and_then(|r| bracketed_title(r)) {
            Some(title) => format!("{title} {prompt}"),
            None => prompt.to_string(),
        })
    }
}

pub const STUB_DIMENSION: usize = 64;

/// Lowercased alphanumeric runs.
pub(crate) fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= *b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Signed feature hashing of word tokens into 64 buckets.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    seed: u64,
}

impl HashingEmbedder {
    pub fn new(seed: u64) -> Self {
        HashingEmbedder { seed }
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn dimension(&self) -> usize {
        STUB_DIMENSION
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, AdapterError> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(AdapterError::InvalidRequest("cannot embed empty text".into()));
        }
        let mut values = vec![0.0; STUB_DIMENSION];
        let mut add = |token: &str| {
            let h = fnv1a(self.seed, token.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            values[(h % STUB_DIMENSION as u64) as usize] += sign;
        };
        let mut any = false;
        for t in tokens(trimmed) {
            add(&t);
            any = true;
        }
        if !any {
            add(trimmed);
        }
        EmbeddingVector::new(values)
    }
}

/// Picks the candidate whose subtree keywords occur most often in the prompt,
/// the first one on ties, and answers `none` when nothing matches.
#[derive(Debug, Clone)]
pub struct KeywordChooser {
    subtree_keywords: BTreeMap<TopicId, BTreeSet<String>>,
}

impl KeywordChooser {
    pub fn from_tree(tree: &TaxonomyNode, keywords: &BTreeMap<TopicId, Vec<String>>) -> Self {
        fn collect(
            node: &TaxonomyNode,
            keywords: &BTreeMap<TopicId, Vec<String>>,
            out: &mut BTreeMap<TopicId, BTreeSet<String>>,
        ) -> BTreeSet<String> {
            let mut own: BTreeSet<String> = keywords
                .get(&node.id)
                .into_iter()
                .flatten()
                .map(|k| k.to_lowercase())
                .collect();
            for child in &node.children {
                own.extend(collect(child, keywords, out));
            }
            out.insert(node.id.clone(), own.clone());
            own
        }
        let mut subtree_keywords = BTreeMap::new();
        collect(tree, keywords, &mut subtree_keywords);
        KeywordChooser { subtree_keywords }
    }

    /// Chooser over the bundled political taxonomy and keyword table.
    pub fn political() -> Self {
        Self::from_tree(&fixtures::political_taxonomy(), &fixtures::political_keywords())
    }
}

impl TopicChooser for KeywordChooser {
    fn choose(&self, prompt: &str, candidates: &[Candidate<'_>]) -> Result<String, AdapterError> {
        let words: Vec<String> = tokens(prompt).collect();
        let mut best: Option<(&Candidate<'_>, usize)> = None;
        for c in candidates {
            let Some(keys) = self.subtree_keywords.get(c.id) else {
                continue;
            };
            let hits = words.iter().filter(|w| keys.contains(*w)).count();
            if hits > 0 && best.is_none_or(|(_, b)| hits > b) {
                best = Some((c, hits));
            }
        }
        Ok(best.map_or_else(|| "none".to_string(), |(c, _)| c.name.to_string()))
    }
}

/// Answers from the gold labels: the candidate on the path to the prompt's
/// label, or `none` once the label has been reached.
#[derive(Debug, Clone)]
pub struct OracleChooser {
    gold_paths: BTreeMap<String, Vec<TopicId>>,
}

impl OracleChooser {
    pub fn new(tree: &TaxonomyNode, dataset: &[LabelledPrompt]) -> Self {
        let gold_paths = dataset
            .iter()
            .filter_map(|p| Some((p.text.clone(), tree.path_to(&p.label)?)))
            .collect();
        OracleChooser { gold_paths }
    }
}

impl TopicChooser for OracleChooser {
    fn choose(&self, prompt: &str, candidates: &[Candidate<'_>]) -> Result<String, AdapterError> {
        let Some(path) = self.gold_paths.get(prompt) else {
            return Ok("none".into());
        };
        Ok(candidates
            .iter()
            .find(|c| path.contains(c.id))
            .map_or_else(|| "none".to_string(), |c| c.id.to_string()))
    }
}

/// Always declines.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoneChooser;

impl TopicChooser for NoneChooser {
    fn choose(&self, _: &str, _: &[Candidate<'_>]) -> Result<String, AdapterError> {
        Ok("none".into())
    }
}
