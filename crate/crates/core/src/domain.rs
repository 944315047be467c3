//! Data types shared by every other module.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::taxonomy::TaxonomyNode;

pub const MAX_ID_LEN: usize = 64;
pub const MAX_TITLE_LEN: usize = 120;
pub const MAX_BODY_LEN: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdError {
    #[error("identifier must not be empty")]
    Empty,
    #[error("identifier is {0} characters, limit is {MAX_ID_LEN}")]
    TooLong(usize),
}

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub fn new(raw: impl Into<String>) -> Result<Self, IdError> {
                let raw = raw.into();
                let len = raw.chars().count();
                if raw.trim().is_empty() {
                    Err(IdError::Empty)
                } else if len > MAX_ID_LEN {
                    Err(IdError::TooLong(len))
                } else {
                    Ok(Self(raw))
                }
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl TryFrom<String> for $name {
            type Error = IdError;
            fn try_from(raw: String) -> Result<Self, IdError> {
                Self::new(raw)
            }
        }

        impl From<$name> for String {
            fn from(id: $name) -> String {
                id.0
            }
        }

        impl FromStr for $name {
            type Err = IdError;
            fn from_str(s: &str) -> Result<Self, IdError> {
                Self::new(s)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl AsRef<str> for $name {
            fn as_ref(&self) -> &str {
                &self.0
            }
        }
    };
}

id_type!(
    /// Opaque participant identifier.
    UserId
);
id_type!(GuidelineId);
id_type!(TopicId);
id_type!(TagId);

/// UTC instant with whole-second precision, serialized as `YYYY-MM-DDTHH:MM:SSZ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(DateTime<Utc>);

impl Timestamp {
    pub fn now() -> Self {
        Self::from_unix(Utc::now().timestamp())
    }

    pub fn from_unix(secs: i64) -> Self {
        Self(
            Utc.timestamp_opt(secs, 0)
                .single()
                .unwrap_or(DateTime::<Utc>::UNIX_EPOCH),
        )
    }

    pub fn unix(&self) -> i64 {
        self.0.timestamp()
    }

    pub fn parse(raw: &str) -> Result<Self, chrono::ParseError> {
        let parsed = DateTime::parse_from_rfc3339(raw.trim())?;
        Ok(Self::from_unix(parsed.timestamp()))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.to_rfc3339_opts(SecondsFormat::Secs, true))
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        Timestamp::parse(&raw).map_err(de::Error::custom)
    }
}

/// A rater's judgment. Encoded numerically as Helpful = 1.0, Not Helpful = 0.0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Verdict {
    NotHelpful,
    Helpful,
}

impl Verdict {
    pub fn value(self) -> f64 {
        match self {
            Verdict::Helpful => 1.0,
            Verdict::NotHelpful => 0.0,
        }
    }

    pub fn from_value(value: f64) -> Option<Self> {
        if value == 1.0 {
            Some(Verdict::Helpful)
        } else if value == 0.0 {
            Some(Verdict::NotHelpful)
        } else {
            None
        }
    }

    pub fn is_helpful(self) -> bool {
        self == Verdict::Helpful
    }
}

impl Serialize for Verdict {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.is_helpful() as u8)
    }
}

impl<'de> Deserialize<'de> for Verdict {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct VerdictVisitor;

        impl Visitor<'_> for VerdictVisitor {
            type Value = Verdict;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("0, 1, \"helpful\" or \"not_helpful\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Verdict, E> {
                match v {
                    0 => Ok(Verdict::NotHelpful),
                    1 => Ok(Verdict::Helpful),
                    _ => Err(E::custom(format!("verdict must be 0 or 1, got {v}"))),
                }
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Verdict, E> {
                if v < 0 {
                    return Err(E::custom(format!("verdict must be 0 or 1, got {v}")));
                }
                self.visit_u64(v as u64)
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Verdict, E> {
                Verdict::from_value(v)
                    .ok_or_else(|| E::custom(format!("verdict must be 0 or 1, got {v}")))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Verdict, E> {
                match v.trim().to_ascii_lowercase().as_str() {
                    "1" | "helpful" => Ok(Verdict::Helpful),
                    "0" | "not_helpful" | "not-helpful" | "not helpful" => Ok(Verdict::NotHelpful),
                    other => Err(E::custom(format!("unknown verdict {other:?}"))),
                }
            }
        }

        deserializer.deserialize_any(VerdictVisitor)
    }
}

/// A proposed textual rule attached to a taxonomy topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Guideline {
    pub id: GuidelineId,
    pub topic: TopicId,
    /// Short name, rendered in brackets ahead of the body.
    pub title: String,
    pub body: String,
    pub author: UserId,
    pub created_at: Timestamp,
}

impl Guideline {
    /// The guideline as a single rule line, e.g. `[Neutral Voting Information] Avoid ...`.
    pub fn as_rule(&self) -> String {
        format!("[{}] {}", self.title.trim(), self.body.trim())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Violation {
    EmptyBody,
    EmptyTitle,
    UnknownTopic,
    TitleTooLong,
    BodyTooLong,
}

impl Violation {
    pub fn code(self) -> &'static str {
        match self {
            Violation::EmptyBody => "empty-body",
            Violation::EmptyTitle => "empty-title",
            Violation::UnknownTopic => "unknown-topic",
            Violation::TitleTooLong => "title-too-long",
            Violation::BodyTooLong => "body-too-long",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Checks a guideline's shape and that its topic exists. An empty list means the
/// guideline is acceptable.
pub fn validate_guideline(guideline: &Guideline, taxonomy: &TaxonomyNode) -> Vec<Violation> {
    let mut violations = validate_guideline_text(&guideline.title, &guideline.body);
    if !taxonomy.contains(&guideline.topic) {
        violations.push(Violation::UnknownTopic);
    }
    violations
}

pub(crate) fn validate_guideline_text(title: &str, body: &str) -> Vec<Violation> {
    let mut violations = Vec::new();
    if body.trim().is_empty() {
        violations.push(Violation::EmptyBody);
    }
    if title.trim().is_empty() {
        violations.push(Violation::EmptyTitle);
    }
    if title.chars().count() > MAX_TITLE_LEN {
        violations.push(Violation::TitleTooLong);
    }
    if body.chars().count() > MAX_BODY_LEN {
        violations.push(Violation::BodyTooLong);
    }
    violations
}

/// One user's judgment of one guideline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub user: UserId,
    pub guideline: GuidelineId,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<TagId>,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tag {
    pub id: TagId,
    pub label: String,
    /// Marks a tag that signals a worse guideline rather than disagreement.
    pub quality_flag: bool,
    /// Lets the tag accompany a Helpful verdict too.
    #[serde(default)]
    pub allow_on_helpful: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TagRuleError {
    #[error("unknown tag {0}")]
    UnknownTag(TagId),
    #[error("tag {0} is only allowed on Not Helpful ratings")]
    TagNotAllowed(TagId),
}

impl TagRuleError {
    pub fn code(&self) -> &'static str {
        match self {
            TagRuleError::UnknownTag(_) => "unknown-tag",
            TagRuleError::TagNotAllowed(_) => "tag-not-allowed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("duplicate tag id {0}")]
    DuplicateId(TagId),
    #[error("duplicate tag label {0:?}")]
    DuplicateLabel(String),
}

/// The deployment's set of rating tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Tag>", into = "Vec<Tag>")]
pub struct TagRegistry {
    tags: Vec<Tag>,
}

impl TagRegistry {
    pub fn new(tags: Vec<Tag>) -> Result<Self, RegistryError> {
        let mut ids = BTreeSet::new();
        let mut labels = BTreeSet::new();
        for tag in &tags {
            if !ids.insert(tag.id.clone()) {
                return Err(RegistryError::DuplicateId(tag.id.clone()));
            }
            if !labels.insert(tag.label.to_lowercase()) {
                return Err(RegistryError::DuplicateLabel(tag.label.clone()));
            }
        }
        Ok(Self { tags })
    }

    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }

    pub fn get(&self, id: &TagId) -> Option<&Tag> {
        self.tags.iter().find(|t| &t.id == id)
    }

    pub fn is_quality(&self, id: &TagId) -> bool {
        self.get(id).is_some_and(|t| t.quality_flag)
    }

    /// Whether tag-score filtering has anything to count.
    pub fn enables_filtering(&self) -> bool {
        self.tags.iter().any(|t| t.quality_flag)
    }

    pub fn check(&self, verdict: Verdict, tag: Option<&TagId>) -> Result<(), TagRuleError> {
        let Some(id) = tag else { return Ok(()) };
        let tag = self
            .get(id)
            .ok_or_else(|| TagRuleError::UnknownTag(id.clone()))?;
        if verdict.is_helpful() && !tag.allow_on_helpful {
            return Err(TagRuleError::TagNotAllowed(id.clone()));
        }
        Ok(())
    }
}

impl Default for TagRegistry {
    fn default() -> Self {
        let tag = |id: &str, label: &str, quality_flag| Tag {
            id: TagId::new(id).expect("static tag id"),
            label: label.to_string(),
            quality_flag,
            allow_on_helpful: false,
        };
        Self {
            tags: vec![
                tag("unclear-wording", "Unclear wording", true),
                tag("not-actionable", "Not actionable", true),
                tag("bad-principle", "Bad principle", false),
            ],
        }
    }
}

impl TryFrom<Vec<Tag>> for TagRegistry {
    type Error = RegistryError;
    fn try_from(tags: Vec<Tag>) -> Result<Self, RegistryError> {
        Self::new(tags)
    }
}

impl From<TagRegistry> for Vec<Tag> {
    fn from(registry: TagRegistry) -> Vec<Tag> {
        registry.tags
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemographicAttribute {
    AgeGroup,
    Sex,
    Employment,
    Student,
    Country,
}

impl DemographicAttribute {
    pub const ALL: [DemographicAttribute; 5] = [
        DemographicAttribute::AgeGroup,
        DemographicAttribute::Sex,
        DemographicAttribute::Employment,
        DemographicAttribute::Student,
        DemographicAttribute::Country,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DemographicAttribute::AgeGroup => "age_group",
            DemographicAttribute::Sex => "sex",
            DemographicAttribute::Employment => "employment",
            DemographicAttribute::Student => "student",
            DemographicAttribute::Country => "country",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participant {
    pub id: UserId,
    #[serde(default)]
    pub demographics: BTreeMap<DemographicAttribute, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SurveyError {
    #[error("{question} must be a Likert value in 1..=5, got {value}")]
    LikertOutOfRange { question: &'static str, value: u8 },
}

/// Answers to the post-process survey.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyResponse {
    pub participant: UserId,
    /// "Would you support the constitution overall?"
    pub q1_support: bool,
    pub q2_enjoyable: u8,
    pub q3_trust: u8,
    pub q4_contribution: u8,
}

impl SurveyResponse {
    pub fn validate(&self) -> Result<(), SurveyError> {
        for (question, value) in [
            ("q2_enjoyable", self.q2_enjoyable),
            ("q3_trust", self.q3_trust),
            ("q4_contribution", self.q4_contribution),
        ] {
            if !(1..=5).contains(&value) {
                return Err(SurveyError::LikertOutOfRange { question, value });
            }
        }
        Ok(())
    }
}
