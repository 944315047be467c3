//! Append-only event log with periodic state snapshots.
//!
//! Log file format: one JSON record per line,
//! `{"seq":N,"kind":"...","at":"...","payload":{...},"crc32":C}`, where the
//! checksum covers the seq, kind, timestamp and payload text. Seqs start at 1
//! and have no gaps.

mod event;
mod log;
mod state;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::consensus::{GuidelineScore, Selection, SelectionConfig, TrainConfig};
use crate::domain::{Guideline, GuidelineId, Timestamp, TopicId};
use crate::taxonomy::TaxonomyNode;

pub use event::{Event, EventBody, EventKind, GuidelineProposed, ModelFitted};
pub use log::{decode, encode, EventLog, Recovery};
pub use state::PlatformState;

pub const LOG_FILE: &str = "events.ndjson";
pub const SNAPSHOT_DIR: &str = "snapshots";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid event: {0}")]
    Invalid(String),
    #[error("log corrupted at seq {seq}: {reason}")]
    Corruption { seq: u64, reason: String },
    #[error("snapshot {path}: {reason}")]
    Snapshot { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstitutionEntry {
    pub guideline: Guideline,
    pub score: GuidelineScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstitutionSection {
    pub topic: TopicId,
    pub topic_name: String,
    pub entries: Vec<ConstitutionEntry>,
}

/// A published constitution: the approved guidelines grouped by topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstitutionSnapshot {
    pub version: u64,
    pub produced_from_seq: u64,
    /// SHA-256 of the training and selection settings.
    pub config_fingerprint: String,
    pub eta: Option<f64>,
    pub tag_filter_skipped: bool,
    pub sections: Vec<ConstitutionSection>,
}

pub fn config_fingerprint(train: &TrainConfig, selection: &SelectionConfig) -> String {
    let text = serde_json::to_string(&(train, selection)).expect("configs serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl ConstitutionSnapshot {
    /// Groups the approved guidelines of `selection` by topic, following the
    /// taxonomy's pre-order; topics missing from the taxonomy come last.
    pub fn build(
        version: u64,
        produced_from_seq: u64,
        selection: &Selection,
        guidelines: &BTreeMap<GuidelineId, Guideline>,
        taxonomy: &TaxonomyNode,
        fingerprint: String,
    ) -> Self {
        let order = taxonomy.order();
        let mut sections: BTreeMap<(usize, TopicId), Vec<ConstitutionEntry>> = BTreeMap::new();
        for score in selection.approved() {
            let Some(guideline) = guidelines.get(&score.guideline) else {
                continue;
            };
            let rank = order.get(&guideline.topic).copied().unwrap_or(usize::MAX);
            sections
                .entry((rank, guideline.topic.clone()))
                .or_default()
                .push(ConstitutionEntry {
                    guideline: guideline.clone(),
                    score: score.clone(),
                });
        }
        ConstitutionSnapshot {
            version,
            produced_from_seq,
            config_fingerprint: fingerprint,
            eta: selection.eta,
            tag_filter_skipped: selection.tag_filter_skipped,
            sections: sections
                .into_iter()
                .map(|((_, topic), entries)| ConstitutionSection {
                    topic_name: taxonomy
                        .find(&topic)
                        .map_or_else(|| topic.to_string(), |n| n.name.clone()),
                    topic,
                    entries,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sections.iter().map(|s| s.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn guideline_ids(&self) -> impl Iterator<Item = &GuidelineId> {
        self.sections.iter().flat_map(|s| s.entries.iter().map(|e| &e.guideline.id))
    }
}

/// The log, its events, and the state they fold to.
#[derive(Debug)]
pub struct Store {
    log: EventLog,
    events: Vec<Event>,
    state: PlatformState,
    root: Option<PathBuf>,
}

impl Store {
    pub fn in_memory() -> Self {
        Store {
            log: EventLog::in_memory(),
            events: Vec::new(),
            state: PlatformState::default(),
            root: None,
        }
    }

    /// Opens the store under `root`, recovering from a torn final record.
    /// The newest snapshot not ahead of the log seeds the state; later events
    /// are folded on top.
    pub fn open(root: impl AsRef<Path>) -> Result<(Self, Recovery), StoreError> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(root.join(SNAPSHOT_DIR))?;
        let (log, recovery) = EventLog::open(root.join(LOG_FILE))?;
        let events = recovery.events.clone();
        let head = events.len() as u64;

        let mut state = PlatformState::default();
        if let Some((seq, path)) = Self::snapshots(&root)?.into_iter().rev().find(|(seq, _)| *seq <= head) {
            let text = std::fs::read_to_string(&path)?;
            state = serde_json::from_str(&text).map_err(|e| StoreError::Snapshot {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            if state.last_seq != seq {
                return Err(StoreError::Snapshot {
                    path,
                    reason: format!("holds seq {} but is named for {seq}", state.last_seq),
                });
            }
        }
        for e in &events[state.last_seq as usize..] {
            state.apply(e);
        }
        Ok((
            Store {
                log,
                events,
                state,
                root: Some(root),
            },
            recovery,
        ))
    }

    fn snapshots(root: &Path) -> Result<Vec<(u64, PathBuf)>, StoreError> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(root.join(SNAPSHOT_DIR))? {
            let path = entry?.path();
            let seq = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("state-"))
                .and_then(|n| n.strip_suffix(".json"))
                .and_then(|n| n.parse::<u64>().ok());
            if let Some(seq) = seq {
                out.push((seq, path));
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn state(&self) -> &PlatformState {
        &self.state
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn head(&self) -> u64 {
        self.events.len() as u64
    }

    /// Validates `body` against the current state, then writes it durably and
    /// applies it. A rejected event leaves the log untouched.
    pub fn append(&mut self, body: EventBody, at: Timestamp) -> Result<u64, StoreError> {
        self.state.check(&body)?;
        let event = Event {
            seq: self.head() + 1,
            at,
            body,
        };
        self.log.write(&event)?;
        self.state.apply(&event);
        self.events.push(event);
        Ok(self.head())
    }

    /// State as of `up_to` (inclusive), or of the whole log.
    pub fn replay(&self, up_to: Option<u64>) -> PlatformState {
        let n = up_to.map_or(self.events.len(), |k| (k as usize).min(self.events.len()));
        PlatformState::replay(&self.events[..n])
    }

    /// Writes the current state to `snapshots/state-<seq>.json`.
    pub fn write_snapshot(&self) -> Result<Option<PathBuf>, StoreError> {
        let Some(root) = &self.root else {
            return Ok(None);
        };
        let path = root.join(SNAPSHOT_DIR).join(format!("state-{:010}.json", self.head()));
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string(&self.state).map_err(|e| StoreError::Snapshot {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, &path)?;
        Ok(Some(path))
    }
}
