use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::value::RawValue;

use super::event::{Event, EventBody, EventKind};
use super::StoreError;
use crate::domain::Timestamp;

/// CRC-32 over the seq, kind, timestamp text and raw payload text.
fn checksum(seq: u64, kind: &str, at: &str, payload: &str) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(seq.to_string().as_bytes());
    h.update(b"\n");
    h.update(kind.as_bytes());
    h.update(b"\n");
    h.update(at.as_bytes());
    h.update(b"\n");
    h.update(payload.as_bytes());
    h.finalize()
}

/// One newline-terminated log record.
pub fn encode(event: &Event) -> Result<String, StoreError> {
    let kind = event.body.kind().as_str();
    let at = event.at.to_string();
    let payload = event.body.payload_json().map_err(|e| StoreError::Invalid(e.to_string()))?;
    let crc = checksum(event.seq, kind, &at, &payload);
    Ok(format!(
        "{{\"seq\":{},\"kind\":\"{kind}\",\"at\":\"{at}\",\"payload\":{payload},\"crc32\":{crc}}}\n",
        event.seq
    ))
}

#[derive(Deserialize)]
struct RawRecord<'a> {
    seq: u64,
    kind: &'a str,
    at: &'a str,
    #[serde(borrow)]
    payload: &'a RawValue,
    crc32: u32,
}

pub fn decode(line: &str) -> Result<Event, String> {
    let raw: RawRecord<'_> = serde_json::from_str(line).map_err(|e| format!("unreadable record: {e}"))?;
    if checksum(raw.seq, raw.kind, raw.at, raw.payload.get()) != raw.crc32 {
        return Err("checksum mismatch".into());
    }
    let kind = EventKind::parse(raw.kind).ok_or_else(|| format!("unknown kind {:?}", raw.kind))?;
    let at = Timestamp::parse(raw.at).map_err(|e| format!("bad timestamp: {e}"))?;
    let body = EventBody::from_json(kind, raw.payload.get()).map_err(|e| format!("bad payload: {e}"))?;
    Ok(Event { seq: raw.seq, at, body })
}

/// Parses a whole log. A trailing fragment without a newline is a torn write
/// and is reported as the byte offset where the intact prefix ends.
fn parse(text: &str) -> Result<(Vec<Event>, usize), StoreError> {
    let mut events = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if !line.ends_with('\n') {
            break;
        }
        let expected = events.len() as u64 + 1;
        let event = decode(line.trim_end()).map_err(|reason| StoreError::Corruption { seq: expected, reason })?;
        if event.seq != expected {
            return Err(StoreError::Corruption {
                seq: expected,
                reason: format!("found seq {} where {expected} was expected", event.seq),
            });
        }
        events.push(event);
        offset += line.len();
    }
    Ok((events, offset))
}

/// Append-only event log, on disk or in memory.
#[derive(Debug)]
pub struct EventLog {
    file: Option<(File, PathBuf)>,
    len: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub events: Vec<Event>,
    /// Bytes of a torn final record that were cut off.
    pub truncated_bytes: u64,
}

impl EventLog {
    pub fn in_memory() -> Self {
        EventLog { file: None, len: 0 }
    }

    /// Opens or creates the log at `path`, verifying every record and
    /// cutting off a torn final record.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Recovery), StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let text = String::from_utf8_lossy(&bytes);
        let (events, intact) = parse(&text)?;
        // A lossy decode can only change bytes after the last newline here,
        // since every complete line parsed as JSON.
        let intact = if intact == text.len() { bytes.len() } else { intact };
        let truncated_bytes = (bytes.len() - intact) as u64;
        if truncated_bytes > 0 {
            file.set_len(intact as u64)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::End(0))?;
        Ok((
            EventLog {
                file: Some((file, path)),
                len: intact as u64,
            },
            Recovery { events, truncated_bytes },
        ))
    }

    /// Reads and verifies a log without modifying it. A torn tail is ignored.
    pub fn read(path: impl AsRef<Path>) -> Result<Vec<Event>, StoreError> {
        let bytes = std::fs::read(path)?;
        Ok(parse(&String::from_utf8_lossy(&bytes))?.0)
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(_, p)| p.as_path())
    }

    /// Writes and syncs one record. On failure the file is cut back to its
    /// previous length.
    pub fn write(&mut self, event: &Event) -> Result<(), StoreError> {
        let line = encode(event)?;
        let Some((file, _)) = self.file.as_mut() else {
            return Ok(());
        };
        let result = file.write_all(line.as_bytes()).and_then(|_| file.sync_data());
        match result {
            Ok(()) => {
                self.len += line.len() as u64;
                Ok(())
            }
            Err(e) => {
                let _ = file.set_len(self.len);
                Err(e.into())
            }
        }
    }
}
