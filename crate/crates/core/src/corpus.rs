//! Corpus data model: languages, candidates, stage verdicts, pipeline
//! records, the accepted-corpus manifest and gold labels.
//!
//! Everything here is a plain value type. The manifest and audit log are
//! JSON documents whose encoding is canonical: records are sorted by
//! `(language, video_id)`, struct fields keep declaration order and maps are
//! ordered, so equal manifests always serialize to identical bytes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::digest::json_digest;

pub const MANIFEST_VERSION: u32 = 1;

/// Absolute tolerance, in hours, when checking stored language totals.
pub const HOURS_TOLERANCE: f64 = 1e-9;

/// `(iso639_3, display name, spoken language)` for the built-in languages.
const BUILTIN_LANGUAGES: [(&str, &str, &str); 8] = [
    ("ase", "American Sign Language", "en-US"),
    ("asf", "Australian Sign Language", "en-AU"),
    ("bfi", "British Sign Language", "en-GB"),
    ("csl", "Chinese Sign Language", "zh-CN"),
    ("fsl", "French Sign Language", "fr-FR"),
    ("gsg", "German Sign Language", "de-DE"),
    ("ise", "Italian Sign Language", "it-IT"),
    ("swl", "Swedish Sign Language", "sv-SE"),
];

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("invalid ISO 639-3 code {0:?}: expected three lowercase ASCII letters")]
    InvalidLanguageCode(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("record {video_id}: {reason}")]
    InvalidRecord { video_id: String, reason: String },
    #[error("manifest: {0}")]
    InvalidManifest(String),
}

impl CorpusError {
    pub(crate) fn from_json(err: serde_json::Error, line_offset: usize) -> Self {
        CorpusError::Parse {
            line: err.line() + line_offset,
            column: err.column(),
            message: err.to_string(),
        }
    }
}

/// A sign language, identified by its ISO 639-3 code.
///
/// Serialized as the bare code. Codes outside the built-in table are
/// accepted and carry the code itself as display name.
#[derive(Clone, Debug)]
pub struct LanguageCode {
    iso639_3: String,
    display_name: String,
    spoken_language: String,
}

impl LanguageCode {
    pub fn from_code(code: &str) -> Result<Self, CorpusError> {
        if code.len() != 3 || !code.bytes().all(|b| b.is_ascii_lowercase()) {
            return Err(CorpusError::InvalidLanguageCode(code.to_string()));
        }
        Ok(Self::builtin(code).unwrap_or_else(|| LanguageCode {
            iso639_3: code.to_string(),
            display_name: code.to_string(),
            spoken_language: "und".to_string(),
        }))
    }

    /// Registers a language outside the built-in table.
    pub fn custom(
        code: &str,
        display_name: impl Into<String>,
        spoken_language: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let mut lang = Self::from_code(code)?;
        lang.display_name = display_name.into();
        lang.spoken_language = spoken_language.into();
        Ok(lang)
    }

    pub fn builtin(code: &str) -> Option<Self> {
        BUILTIN_LANGUAGES
            .iter()
            .find(|(c, _, _)| *c == code)
            .map(|(c, name, spoken)| LanguageCode {
                iso639_3: c.to_string(),
                display_name: name.to_string(),
                spoken_language: spoken.to_string(),
            })
    }

    pub fn builtins() -> Vec<Self> {
        BUILTIN_LANGUAGES
            .iter()
            .filter_map(|(c, _, _)| Self::builtin(c))
            .collect()
    }

    pub fn code(&self) -> &str {
        &self.iso639_3
    }

    pub fn display_name(&self) -> &str {
        &self.display_name
    }

    pub fn spoken_language(&self) -> &str {
        &self.spoken_language
    }
}

impl PartialEq for LanguageCode {
    fn eq(&self, other: &Self) -> bool {
        self.iso639_3 == other.iso639_3
    }
}

impl Eq for LanguageCode {}

impl std::hash::Hash for LanguageCode {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.iso639_3.hash(state);
    }
}

impl PartialOrd for LanguageCode {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for LanguageCode {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.iso639_3.cmp(&other.iso639_3)
    }
}

impl fmt::Display for LanguageCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.iso639_3)
    }
}

impl Serialize for LanguageCode {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.iso639_3)
    }
}

impl<'de> Deserialize<'de> for LanguageCode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let code = String::deserialize(deserializer)?;
        LanguageCode::from_code(&code).map_err(serde::de::Error::custom)
    }
}

/// Where a candidate came from.
///
/// User handles are only ever stored hashed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value")]
pub enum Provenance {
    HashtagQuery(String),
    UserHandle(String),
    ManifestFile(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateVideo {
    pub video_id: String,
    pub source: Provenance,
    pub language: LanguageCode,
    pub duration_s: f64,
    pub media_locator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description_text: Option<String>,
    pub fetched_at: DateTime<Utc>,
}

impl CandidateVideo {
    pub fn check(&self) -> Result<(), String> {
        if self.video_id.is_empty() {
            return Err("video_id is empty".into());
        }
        if !self.duration_s.is_finite() || self.duration_s < 0.0 {
            return Err(format!("duration_s {} is not a nonnegative number", self.duration_s));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Face,
    Activity,
    Text,
    Judge,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Face, Stage::Activity, Stage::Text, Stage::Judge];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Face => "face",
            Stage::Activity => "activity",
            Stage::Text => "text",
            Stage::Judge => "judge",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceVerdict {
    pub face_visible: bool,
    pub people_count: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityVerdict {
    pub is_signing: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TextSource {
    FormalCaption,
    EmbeddedText,
    #[serde(rename = "None")]
    Absent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextExtraction {
    pub text: Option<String>,
    pub source: TextSource,
}

impl TextExtraction {
    pub fn none() -> Self {
        TextExtraction {
            text: None,
            source: TextSource::Absent,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub aligned: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

/// Typed payload of one stage reply.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", content = "outcome")]
pub enum StageOutcome {
    Face(FaceVerdict),
    Activity(ActivityVerdict),
    Text(TextExtraction),
    Judge(JudgeVerdict),
}

impl StageOutcome {
    pub fn stage(&self) -> Stage {
        match self {
            StageOutcome::Face(_) => Stage::Face,
            StageOutcome::Activity(_) => Stage::Activity,
            StageOutcome::Text(_) => Stage::Text,
            StageOutcome::Judge(_) => Stage::Judge,
        }
    }

    /// Whether the stage lets the video continue.
    pub fn is_positive(&self) -> bool {
        match self {
            StageOutcome::Face(v) => v.face_visible,
            StageOutcome::Activity(v) => v.is_signing,
            StageOutcome::Text(v) => v.text.as_deref().is_some_and(|t| !t.trim().is_empty()),
            StageOutcome::Judge(v) => v.aligned,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageVerdict {
    #[serde(flatten)]
    pub outcome: StageOutcome,
    pub model_id: String,
    pub raw_response: String,
    pub latency_ms: u64,
    pub cached: bool,
    /// Model calls spent on this stage, including a reprompt.
    #[serde(default = "one")]
    pub attempts: u32,
}

fn one() -> u32 {
    1
}

impl StageVerdict {
    pub fn stage(&self) -> Stage {
        self.outcome.stage()
    }

    /// Digest over the fields that identify the judgment. Timing and cache
    /// flags are left out so warm and cold runs digest equally.
    pub fn content_digest(&self) -> String {
        json_digest(&(&self.outcome, &self.model_id, &self.raw_response))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecordState {
    Ingested,
    FaceChecked,
    ActivityChecked,
    TextExtracted,
    Judged,
    Accepted,
    Rejected,
}

impl RecordState {
    pub fn is_terminal(self) -> bool {
        matches!(self, RecordState::Accepted | RecordState::Rejected)
    }

    /// The stage whose verdict this state waits for, if any.
    pub fn expected_stage(self) -> Option<Stage> {
        match self {
            RecordState::Ingested => Some(Stage::Face),
            RecordState::FaceChecked => Some(Stage::Activity),
            RecordState::ActivityChecked => Some(Stage::Text),
            RecordState::TextExtracted => Some(Stage::Judge),
            RecordState::Judged | RecordState::Accepted | RecordState::Rejected => None,
        }
    }

    fn positive_verdicts(self) -> Option<usize> {
        match self {
            RecordState::Ingested => Some(0),
            RecordState::FaceChecked => Some(1),
            RecordState::ActivityChecked => Some(2),
            RecordState::TextExtracted => Some(3),
            RecordState::Judged | RecordState::Accepted => Some(4),
            RecordState::Rejected => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RejectionReason {
    FaceNotVisible,
    NotSigning,
    NoText,
    MisalignedText,
    ProcessingError,
}

impl RejectionReason {
    /// The reason a negative verdict of `stage` produces.
    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Face => RejectionReason::FaceNotVisible,
            Stage::Activity => RejectionReason::NotSigning,
            Stage::Text => RejectionReason::NoText,
            Stage::Judge => RejectionReason::MisalignedText,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecord {
    pub candidate: CandidateVideo,
    pub state: RecordState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection_reason: Option<RejectionReason>,
    pub verdicts: Vec<StageVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted_text: Option<String>,
    /// Failure detail for `ProcessingError` rejections.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PipelineRecord {
    pub fn new(candidate: CandidateVideo) -> Self {
        PipelineRecord {
            candidate,
            state: RecordState::Ingested,
            rejection_reason: None,
            verdicts: Vec::new(),
            extracted_text: None,
            error: None,
        }
    }

    pub fn video_id(&self) -> &str {
        &self.candidate.video_id
    }

    pub fn verdict(&self, stage: Stage) -> Option<&StageVerdict> {
        self.verdicts.iter().find(|v| v.stage() == stage)
    }

    /// The text extraction recorded for this video, if the Text stage ran.
    pub fn text_extraction(&self) -> Option<&TextExtraction> {
        self.verdicts.iter().find_map(|v| match &v.outcome {
            StageOutcome::Text(t) => Some(t),
            _ => None,
        })
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("in-memory JSON encoding cannot fail")
    }
}

/// The first invariant a [`PipelineRecord`] breaks.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum RecordViolation {
    #[error("candidate: {0}")]
    Candidate(String),
    #[error("state Rejected requires a rejection reason and vice versa")]
    RejectionReasonMismatch,
    #[error("verdict {index} is for stage {found}, expected {expected}")]
    StageOrder {
        index: usize,
        expected: Stage,
        found: Stage,
    },
    #[error("verdict {index} has an empty model_id")]
    EmptyModelId { index: usize },
    #[error("verdict recorded after the rejecting {stage} verdict")]
    VerdictAfterRejection { stage: Stage },
    #[error("state {state:?} does not match the recorded verdicts")]
    StateMismatch { state: RecordState },
    #[error("rejection reason {reason:?} does not match the recorded verdicts")]
    ReasonMismatch { reason: RejectionReason },
    #[error("accepted record requires nonempty extracted text")]
    MissingText,
    #[error("accepted record requires a positive judge verdict")]
    JudgeNotPositive,
    #[error("extracted text does not match the text verdict")]
    TextMismatch,
}

/// Checks every [`PipelineRecord`] invariant, reporting the first violation.
pub fn validate_record(r: &PipelineRecord) -> Result<(), RecordViolation> {
    r.candidate.check().map_err(RecordViolation::Candidate)?;
    if (r.state == RecordState::Rejected) != r.rejection_reason.is_some() {
        return Err(RecordViolation::RejectionReasonMismatch);
    }

    let mut rejected_at = None;
    for (index, v) in r.verdicts.iter().enumerate() {
        if let Some(stage) = rejected_at {
            return Err(RecordViolation::VerdictAfterRejection { stage });
        }
        let expected = Stage::ALL.get(index).copied().unwrap_or(Stage::Judge);
        if v.stage() != expected || index >= Stage::ALL.len() {
            return Err(RecordViolation::StageOrder {
                index,
                expected,
                found: v.stage(),
            });
        }
        if v.model_id.is_empty() {
            return Err(RecordViolation::EmptyModelId { index });
        }
        if !v.outcome.is_positive() {
            rejected_at = Some(v.stage());
        }
    }

    if r.state == RecordState::Accepted {
        match r.extracted_text.as_deref() {
            Some(t) if !t.trim().is_empty() => {}
            _ => return Err(RecordViolation::MissingText),
        }
        if !r.verdict(Stage::Judge).is_some_and(|v| v.outcome.is_positive()) {
            return Err(RecordViolation::JudgeNotPositive);
        }
    }

    match (r.state, r.rejection_reason) {
        (RecordState::Rejected, Some(reason)) => {
            let consistent = match (reason, rejected_at) {
                (RejectionReason::ProcessingError, None) => true,
                (reason, Some(stage)) => reason == RejectionReason::for_stage(stage),
                _ => false,
            };
            if !consistent {
                return Err(RecordViolation::ReasonMismatch { reason });
            }
        }
        (state, _) => {
            if rejected_at.is_some() || state.positive_verdicts() != Some(r.verdicts.len()) {
                return Err(RecordViolation::StateMismatch { state });
            }
        }
    }

    if let Some(extraction) = r.text_extraction() {
        if extraction.text.is_some() && r.extracted_text != extraction.text {
            return Err(RecordViolation::TextMismatch);
        }
    }
    Ok(())
}

/// Projection of an accepted record as stored in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub video_id: String,
    pub language: LanguageCode,
    pub state: RecordState,
    pub duration_s: f64,
    pub extracted_text: String,
    pub text_source: TextSource,
    pub verdict_digests: Vec<String>,
}

impl ManifestRecord {
    pub fn from_record(r: &PipelineRecord) -> Self {
        ManifestRecord {
            video_id: r.candidate.video_id.clone(),
            language: r.candidate.language.clone(),
            state: r.state,
            duration_s: r.candidate.duration_s,
            extracted_text: r.extracted_text.clone().unwrap_or_default(),
            text_source: r.text_extraction().map(|t| t.source).unwrap_or(TextSource::Absent),
            verdict_digests: r.verdicts.iter().map(StageVerdict::content_digest).collect(),
        }
    }

    fn sort_key(&self) -> (&str, &str) {
        (self.language.code(), &self.video_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageTotals {
    pub video_count: u64,
    pub total_hours: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub records: Vec<ManifestRecord>,
    pub per_language_totals: BTreeMap<String, LanguageTotals>,
    #[serde(rename = "config_digest")]
    pub pipeline_config_digest: String,
    pub created_at: DateTime<Utc>,
}

impl DatasetManifest {
    /// Builds a manifest from the accepted projections, sorting them and
    /// computing the language totals.
    pub fn new(
        mut records: Vec<ManifestRecord>,
        pipeline_config_digest: impl Into<String>,
        created_at: DateTime<Utc>,
    ) -> Self {
        records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        let per_language_totals = compute_totals(&records);
        DatasetManifest {
            version: MANIFEST_VERSION,
            records,
            per_language_totals,
            pipeline_config_digest: pipeline_config_digest.into(),
            created_at,
        }
    }

    /// Manifest over the accepted records among `records`.
    pub fn from_pipeline_records<'a>(
        records: impl IntoIterator<Item = &'a PipelineRecord>,
        pipeline_config_digest: impl Into<String>,
        created_at: DateTime<Utc>,
    ) -> Self {
        let accepted = records
            .into_iter()
            .filter(|r| r.state == RecordState::Accepted)
            .map(ManifestRecord::from_record)
            .collect();
        Self::new(accepted, pipeline_config_digest, created_at)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.version != MANIFEST_VERSION {
            return Err(CorpusError::InvalidManifest(format!(
                "unsupported version {}",
                self.version
            )));
        }
        let mut seen = HashSet::new();
        for rec in &self.records {
            let bad = |reason: String| CorpusError::InvalidRecord {
                video_id: rec.video_id.clone(),
                reason,
            };
            if rec.video_id.is_empty() {
                return Err(bad("video_id is empty".into()));
            }
            if !seen.insert(rec.video_id.as_str()) {
                return Err(bad("duplicate video_id".into()));
            }
            if rec.state != RecordState::Accepted {
                return Err(bad(format!("state {:?} is not Accepted", rec.state)));
            }
            if rec.extracted_text.trim().is_empty() {
                return Err(bad("accepted record has empty extracted_text".into()));
            }
            if !rec.duration_s.is_finite() || rec.duration_s < 0.0 {
                return Err(bad(format!("invalid duration_s {}", rec.duration_s)));
            }
        }

        let expected = compute_totals(&self.records);
        for code in expected.keys().chain(self.per_language_totals.keys()) {
            let stored = self.per_language_totals.get(code);
            let recomputed = expected.get(code);
            let ok = match (stored, recomputed) {
                (Some(s), Some(r)) => {
                    s.video_count == r.video_count && (s.total_hours - r.total_hours).abs() <= HOURS_TOLERANCE
                }
                (Some(s), None) => s.video_count == 0 && s.total_hours.abs() <= HOURS_TOLERANCE,
                _ => false,
            };
            if !ok {
                return Err(CorpusError::InvalidManifest(format!(
                    "per_language_totals[{code}] = {stored:?} but records give {recomputed:?}"
                )));
            }
        }
        Ok(())
    }
}

fn compute_totals(records: &[ManifestRecord]) -> BTreeMap<String, LanguageTotals> {
    let mut seconds: BTreeMap<String, (u64, f64)> = BTreeMap::new();
    for rec in records {
        let entry = seconds.entry(rec.language.code().to_string()).or_default();
        entry.0 += 1;
        entry.1 += rec.duration_s;
    }
    seconds
        .into_iter()
        .map(|(code, (count, secs))| {
            (
                code,
                LanguageTotals {
                    video_count: count,
                    total_hours: secs / 3600.0,
                },
            )
        })
        .collect()
}

/// Parses and validates a manifest document.
pub fn parse_manifest(text: &str) -> Result<DatasetManifest, CorpusError> {
    let manifest: DatasetManifest = serde_json::from_str(text).map_err(|e| CorpusError::from_json(e, 0))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Canonical encoding: records sorted by `(language, video_id)`, pretty
/// printed, trailing newline.
pub fn serialize_manifest(m: &DatasetManifest) -> String {
    let mut canonical = m.clone();
    canonical.records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let mut out = serde_json::to_string_pretty(&canonical).expect("in-memory JSON encoding cannot fail");
    out.push('\n');
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub video_id: String,
    pub is_valid_pair: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_translation: Option<String>,
}

/// Parses line-delimited JSON, skipping blank lines. Line numbers in errors
/// are 1-based.
pub fn parse_json_lines<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, CorpusError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CorpusError::from_json(e, i)))
        .collect()
}

pub fn parse_gold_labels(text: &str) -> Result<Vec<GoldLabel>, CorpusError> {
    let labels: Vec<GoldLabel> = parse_json_lines(text)?;
    if let Some(bad) = labels.iter().find(|g| g.video_id.is_empty()) {
        return Err(CorpusError::InvalidRecord {
            video_id: bad.video_id.clone(),
            reason: "gold label with empty video_id".into(),
        });
    }
    Ok(labels)
}

/// Parses an audit log, validating every record.
pub fn parse_audit(text: &str) -> Result<Vec<PipelineRecord>, CorpusError> {
    let records: Vec<PipelineRecord> = parse_json_lines(text)?;
    for r in &records {
        validate_record(r).map_err(|v| CorpusError::InvalidRecord {
            video_id: r.candidate.video_id.clone(),
            reason: v.to_string(),
        })?;
    }
    Ok(records)
}

pub fn serialize_audit(records: &[PipelineRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    out
}
