//! File formats: ratings CSV, fitted-model JSON and selection JSON.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{Fit, GuidelineScore, ModelParams, Selection, TrainConfig, TrainReport};
use crate::domain::{GuidelineId, Rating, TagId, Timestamp, UserId, Verdict};

pub const RATINGS_HEADER: [&str; 5] = ["user_id", "guideline_id", "verdict", "tag", "created_at"];

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("ratings line {line}: {message}")]
    Ratings { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    user_id: String,
    guideline_id: String,
    verdict: String,
    tag: String,
    created_at: String,
}

/// Reads `user_id,guideline_id,verdict,tag,created_at` rows; verdict is 0 or 1
/// and the tag may be empty.
pub fn read_ratings_csv(reader: impl Read) -> Result<Vec<Rating>, FormatError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != RATINGS_HEADER {
        return Err(FormatError::Ratings {
            line: 1,
            message: format!("expected header {}, found {}", RATINGS_HEADER.join(","), header.join(",")),
        });
    }
    let mut out = Vec::new();
    for record in rdr.deserialize::<CsvRow>() {
        let line = out.len() as u64 + 2;
        let bad = |message: String| FormatError::Ratings { line, message };
        let row = record.map_err(|e| bad(e.to_string()))?;
        let verdict = match row.verdict.as_str() {
            "1" => Verdict::Helpful,
            "0" => Verdict::NotHelpful,
            other => return Err(bad(format!("verdict must be 0 or 1, got {other:?}"))),
        };
        out.push(Rating {
            user: UserId::new(row.user_id).map_err(|e| bad(format!("user_id: {e}")))?,
            guideline: GuidelineId::new(row.guideline_id).map_err(|e| bad(format!("guideline_id: {e}")))?,
            verdict,
            tag: if row.tag.is_empty() {
                None
            } else {
                Some(TagId::new(row.tag).map_err(|e| bad(format!("tag: {e}")))?)
            },
            created_at: Timestamp::parse(&row.created_at).map_err(|e| bad(format!("created_at: {e}")))?,
        });
    }
    Ok(out)
}

pub fn write_ratings_csv<'a>(writer: impl Write, ratings: impl IntoIterator<Item = &'a Rating>) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RATINGS_HEADER)?;
    for r in ratings {
        w.write_record([
            r.user.as_str(),
            r.guideline.as_str(),
            if r.verdict.is_helpful() { "1" } else { "0" },
            r.tag.as_ref().map_or("", |t| t.as_str()),
            &r.created_at.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fitted model as exported: the parameters plus the settings and report of
/// the run that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(flatten)]
    pub params: ModelParams,
    pub config: TrainConfig,
    pub report: TrainReport,
}

impl ModelFile {
    pub fn new(fit: Fit, config: TrainConfig) -> Self {
        ModelFile {
            params: fit.params,
            config,
            report: fit.report,
        }
    }
}

pub fn write_model(writer: impl Write, model: &ModelFile) -> Result<(), FormatError> {
    serde_json::to_writer_pretty(writer, model)?;
    Ok(())
}

pub fn read_model(reader: impl Read) -> Result<ModelFile, FormatError> {
    let model: ModelFile = serde_json::from_reader(reader)?;
    model.params.validate().map_err(|e| FormatError::Ratings {
        line: 0,
        message: format!("model parameters: {e}"),
    })?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionFile {
    pub eta: Option<f64>,
    pub tag_filter_skipped: bool,
    pub approved: BTreeSet<GuidelineId>,
    pub scores: Vec<GuidelineScore>,
}

impl From<&Selection> for SelectionFile {
    fn from(s: &Selection) -> Self {
        SelectionFile {
            eta: s.eta,
            tag_filter_skipped: s.tag_filter_skipped,
            approved: s.approved_ids(),
            scores: s.scores.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "user_id,guideline_id,verdict,tag,created_at\n\
        u1,g1,1,,2024-05-01T12:00:00Z\n\
        u2,g1,0,unclear-wording,2024-05-01T12:01:00Z\n";

    #[test]
    fn csv_roundtrip() {
        let ratings = read_ratings_csv(SAMPLE.as_bytes()).unwrap();
        assert_eq!(ratings.len(), 2);
        assert_eq!(ratings[0].tag, None);
        assert_eq!(ratings[1].tag.as_ref().unwrap().as_str(), "unclear-wording");
        let mut out = Vec::new();
        write_ratings_csv(&mut out, &ratings).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), SAMPLE);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let bad = "user_id,guideline_id,verdict,tag,created_at\nu1,g1,1,,2024-05-01T12:00:00Z\nu1,g2,yes,,2024-05-01T12:00:00Z\n";
        match read_ratings_csv(bad.as_bytes()) {
            Err(FormatError::Ratings { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(read_ratings_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn model_json_has_flat_parameter_fields() {
        let data = crate::consensus::RatingsDataset::from_ratings(&read_ratings_csv(SAMPLE.as_bytes()).unwrap()).unwrap();
        let cfg = TrainConfig::default();
        let fit = crate::consensus::train(&data, &cfg, None).unwrap();
        let model = ModelFile::new(fit, cfg);
        let mut out = Vec::new();
        write_model(&mut out, &model).unwrap();
        let value: serde_json::Value = serde_json::from_slice(&out).unwrap();
        for key in ["mu", "user_intercepts", "guideline_intercepts", "user_embeddings", "guideline_embeddings", "config", "report"] {
            assert!(value.get(key).is_some(), "{key}");
        }
        assert_eq!(read_model(out.as_slice()).unwrap(), model);
    }
}
