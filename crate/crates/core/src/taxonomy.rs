//! Topic taxonomy and the hierarchical prompt-classification harness used to
//! refine it.
//!
//! Classification starts at the root's children and asks a [`TopicChooser`]
//! to pick one child per level, descending until the chooser declines or a
//! leaf is reached. The evaluation report lists every miscategorization so a
//! reviewer can reword or restructure the tree and run it again.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::thread;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{AdapterError, Candidate, TopicChooser};
use crate::domain::TopicId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyNode {
    pub id: TopicId,
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub children: Vec<TaxonomyNode>,
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("duplicate topic id {0}")]
    DuplicateId(TopicId),
    #[error("sibling topics under {parent} share the name {name:?}")]
    DuplicateSiblingName { parent: TopicId, name: String },
    #[error("topic {0} has an empty description")]
    EmptyDescription(TopicId),
    #[error("label {0} is not a topic in the taxonomy")]
    UnknownLabel(TopicId),
    #[error("evaluation dataset is empty")]
    EmptyDataset,
    #[error("classifier failed on {prompt:?}: {source}")]
    ClassifierFailure {
        prompt: String,
        #[source]
        source: AdapterError,
    },
    #[error("classifier returned an invalid choice {answer:?} twice for {prompt:?}")]
    InvalidChoice { prompt: String, answer: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: String, message: String },
}

impl TaxonomyNode {
    pub fn from_json(raw: &str) -> Result<Self, TaxonomyError> {
        let node: TaxonomyNode = serde_json::from_str(raw).map_err(|e| TaxonomyError::Parse {
            path: "<inline>".into(),
            message: e.to_string(),
        })?;
        node.validate()?;
        Ok(node)
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        let raw = fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&raw).map_err(|e| match e {
            TaxonomyError::Parse { message, .. } => TaxonomyError::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    /// Ids unique across the tree, sibling names unique, descriptions non-empty.
    pub fn validate(&self) -> Result<(), TaxonomyError> {
        let mut seen = BTreeSet::new();
        self.validate_into(&mut seen)
    }

    fn validate_into(&self, seen: &mut BTreeSet<TopicId>) -> Result<(), TaxonomyError> {
        if !seen.insert(self.id.clone()) {
            return Err(TaxonomyError::DuplicateId(self.id.clone()));
        }
        if self.description.trim().is_empty() {
            return Err(TaxonomyError::EmptyDescription(self.id.clone()));
        }
        let mut names = BTreeSet::new();
        for child in &self.children {
            if !names.insert(child.name.to_lowercase()) {
                return Err(TaxonomyError::DuplicateSiblingName {
                    parent: self.id.clone(),
                    name: child.name.clone(),
                });
            }
            child.validate_into(seen)?;
        }
        Ok(())
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn find(&self, id: &TopicId) -> Option<&TaxonomyNode> {
        if &self.id == id {
            return Some(self);
        }
        self.children.iter().find_map(|c| c.find(id))
    }

    pub fn contains(&self, id: &TopicId) -> bool {
        self.find(id).is_some()
    }

    /// Ids from this node down to `id`, inclusive at both ends.
    pub fn path_to(&self, id: &TopicId) -> Option<Vec<TopicId>> {
        if &self.id == id {
            return Some(vec![self.id.clone()]);
        }
        self.children.iter().find_map(|c| {
            c.path_to(id).map(|mut tail| {
                tail.insert(0, self.id.clone());
                tail
            })
        })
    }

    /// Pre-order traversal.
    pub fn iter(&self) -> impl Iterator<Item = &TaxonomyNode> {
        let mut stack = vec![self];
        std::iter::from_fn(move || {
            let node = stack.pop()?;
            stack.extend(node.children.iter().rev());
            Some(node)
        })
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Pre-order position of each topic, used to lay out grouped listings.
    pub fn order(&self) -> BTreeMap<TopicId, usize> {
        self.iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), i))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShotMode {
    ZeroShot,
    FewShot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelledPrompt {
    pub text: String,
    pub label: TopicId,
}

/// Outcome of walking one prompt down the tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub prompt: String,
    /// Root-inclusive chain ending at the predicted topic. A prompt the
    /// chooser declines at the first level is predicted as the root itself,
    /// which acts as the "Unclassified" bucket.
    pub predicted_path: Vec<TopicId>,
}

impl Classification {
    pub fn predicted(&self) -> &TopicId {
        self.predicted_path.last().expect("path always holds the root")
    }

    pub fn is_unclassified(&self) -> bool {
        self.predicted_path.len() == 1
    }

    /// The chain without the root, e.g. `[elections, voting]`.
    pub fn topic_path(&self) -> &[TopicId] {
        &self.predicted_path[1..]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub prompt: String,
    pub gold: TopicId,
    pub predicted_path: Vec<TopicId>,
    pub correct: bool,
}

fn parse_choice<'a>(answer: &str, candidates: &'a [Candidate<'a>]) -> Option<Option<&'a TopicId>> {
    let cleaned = answer
        .trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '.' || c == '`')
        .trim();
    if cleaned.eq_ignore_ascii_case("none") {
        return Some(None);
    }
    candidates
        .iter()
        .find(|c| c.name.eq_ignore_ascii_case(cleaned) || c.id.as_str().eq_ignore_ascii_case(cleaned))
        .map(|c| Some(c.id))
}

/// Walks `prompt` down `tree`. In few-shot mode each candidate child is shown
/// with its example prompt when `examples` has one.
pub fn classify(
    prompt: &str,
    tree: &TaxonomyNode,
    chooser: &dyn TopicChooser,
    mode: ShotMode,
    examples: Option<&BTreeMap<TopicId, String>>,
) -> Result<Classification, TaxonomyError> {
    let mut node = tree;
    let mut path = vec![tree.id.clone()];
    while !node.is_leaf() {
        let candidates: Vec<Candidate<'_>> = node
            .children
            .iter()
            .map(|c| Candidate {
                id: &c.id,
                name: &c.name,
                description: &c.description,
                example: match mode {
                    ShotMode::FewShot => examples.and_then(|ex| ex.get(&c.id)).map(String::as_str),
                    ShotMode::ZeroShot => None,
                },
            })
            .collect();

        // One retry on either a backend failure or an unparseable answer.
        let mut attempt = 0;
        let choice = loop {
            attempt += 1;
            match chooser.choose(prompt, &candidates) {
                Ok(answer) => match parse_choice(&answer, &candidates) {
                    Some(choice) => break choice.cloned(),
                    None if attempt < 2 => continue,
                    None => {
                        return Err(TaxonomyError::InvalidChoice {
                            prompt: prompt.to_string(),
                            answer,
                        })
                    }
                },
                Err(_) if attempt < 2 => continue,
                Err(source) => {
                    return Err(TaxonomyError::ClassifierFailure {
                        prompt: prompt.to_string(),
                        source,
                    })
                }
            }
        };

        let Some(chosen) = choice else { break };
        node = node
            .children
            .iter()
            .find(|c| c.id == chosen)
            .expect("parse_choice only returns candidate ids");
        path.push(node.id.clone());
    }
    Ok(Classification {
        prompt: prompt.to_string(),
        predicted_path: path,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Miscategorization {
    pub prompt: String,
    pub gold: TopicId,
    pub predicted: TopicId,
    pub predicted_path: Vec<TopicId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub mode: ShotMode,
    pub evaluated: usize,
    pub correct: usize,
    /// Prompts used as few-shot examples; never counted in `evaluated`.
    pub example_prompts: Vec<LabelledPrompt>,
    pub miscategorizations: Vec<Miscategorization>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub seed: u64,
    /// Upper bound on prompts classified concurrently.
    pub jobs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { seed: 0, jobs: 1 }
    }
}

/// Picks one prompt per labelled topic (seeded) to serve as its few-shot
/// example. Returns the examples and the dataset indices they came from.
pub fn pick_examples(
    dataset: &[LabelledPrompt],
    seed: u64,
) -> (BTreeMap<TopicId, String>, BTreeSet<usize>) {
    let mut by_label: BTreeMap<&TopicId, Vec<usize>> = BTreeMap::new();
    for (i, p) in dataset.iter().enumerate() {
        by_label.entry(&p.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = BTreeMap::new();
    let mut used = BTreeSet::new();
    for (label, indices) in by_label {
        let &pick = indices.choose(&mut rng).expect("group is non-empty");
        examples.insert(label.clone(), dataset[pick].text.clone());
        used.insert(pick);
    }
    (examples, used)
}

/// Exact-node accuracy of `chooser` over `dataset`.
pub fn evaluate(
    tree: &TaxonomyNode,
    dataset: &[LabelledPrompt],
    chooser: &dyn TopicChooser,
    mode: ShotMode,
    options: EvalOptions,
) -> Result<AccuracyReport, TaxonomyError> {
    if dataset.is_empty() {
        return Err(TaxonomyError::EmptyDataset);
    }
    if let Some(bad) = dataset.iter().find(|p| !tree.contains(&p.label)) {
        return Err(TaxonomyError::UnknownLabel(bad.label.clone()));
    }

    let (examples, excluded) = match mode {
        ShotMode::FewShot => pick_examples(dataset, options.seed),
        ShotMode::ZeroShot => (BTreeMap::new(), BTreeSet::new()),
    };
    let to_run: Vec<&LabelledPrompt> = dataset
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded.contains(i))
        .map(|(_, p)| p)
        .collect();
    if to_run.is_empty() {
        return Err(TaxonomyError::EmptyDataset);
    }

    let examples_ref = (mode == ShotMode::FewShot).then_some(&examples);
    let run_one = |p: &LabelledPrompt| -> Result<ClassificationResult, TaxonomyError> {
        let c = classify(&p.text, tree, chooser, mode, examples_ref)?;
        let correct = c.predicted() == &p.label;
        Ok(ClassificationResult {
            prompt: p.text.clone(),
            gold: p.label.clone(),
            predicted_path: c.predicted_path,
            correct,
        })
    };

    let jobs = options.jobs.max(1).min(to_run.len());
    let results: Vec<ClassificationResult> = if jobs == 1 {
        to_run.iter().map(|p| run_one(p)).collect::<Result<_, _>>()?
    } else {
        let chunk = to_run.len().div_ceil(jobs);
        thread::scope(|scope| {
            let handles: Vec<_> = to_run
                .chunks(chunk)
                .map(|part| {
                    let run_one = &run_one;
                    scope.spawn(move || part.iter().map(|p| run_one(p)).collect::<Result<Vec<_>, _>>())
                })
                .collect();
            let mut all = Vec::with_capacity(to_run.len());
            for h in handles {
                all.extend(h.join().expect("classification worker panicked")?);
            }
            Ok::<_, TaxonomyError>(all)
        })?
    };

    let correct = results.iter().filter(|r| r.correct).count();
    let miscategorizations = results
        .iter()
        .filter(|r| !r.correct)
        .map(|r| Miscategorization {
            prompt: r.prompt.clone(),
            gold: r.gold.clone(),
            predicted: r.predicted_path.last().cloned().expect("non-empty path"),
            predicted_path: r.predicted_path.clone(),
        })
        .collect();
    Ok(AccuracyReport {
        accuracy: correct as f64 / results.len() as f64,
        mode,
        evaluated: results.len(),
        correct,
        example_prompts: excluded.iter().map(|&i| dataset[i].clone()).collect(),
        miscategorizations,
    })
}

/// Reads a JSON-lines dataset of `{text, label}` records.
pub fn load_dataset(path: &Path) -> Result<Vec<LabelledPrompt>, TaxonomyError> {
    let raw = fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&raw).map_err(|message| TaxonomyError::Parse {
        path: path.display().to_string(),
        message,
    })
}

pub fn parse_dataset(raw: &str) -> Result<Vec<LabelledPrompt>, String> {
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}
