//! Evaluation against gold labels, caption agreement scores and dataset
//! statistics.

mod external;
mod text;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    DatasetManifest, GoldLabel, LanguageCode, PipelineRecord, RecordState, RejectionReason, TextExtraction,
};

pub use external::{score_external, ExternalScorer, ScorerConfig};
pub use text::{bleu_corpus, chrf_corpus, tokenize_13a, CorpusScore, Metric, BLEU_SIGNATURE, CHRF_SIGNATURE};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{} gold ids have no prediction: {}", missing.len(), preview(missing))]
    Coverage { missing: Vec<String> },
    #[error("metrics are undefined for an empty confusion matrix")]
    UndefinedMetrics,
    #[error("no scorable pairs: every extraction is missing or empty")]
    EmptyReport,
    #[error("feature unavailable: {0}")]
    FeatureUnavailable(String),
}

fn preview(ids: &[String]) -> String {
    let mut s = ids.iter().take(10).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > 10 {
        s.push_str(", …");
    }
    s
}

/// Positive class: a video accepted as a valid sign-language/text pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub r#fn: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.r#fn + self.tn
    }

    fn add(&mut self, predicted: bool, gold: bool) {
        match (predicted, gold) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.r#fn += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// What to do with gold ids that have no prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoveragePolicy {
    /// Refuse to score.
    #[default]
    Strict,
    /// Count them as predicted rejections.
    MissingAsRejected,
}

pub fn confusion_matrix(
    predictions: &BTreeMap<String, bool>,
    gold: &[GoldLabel],
    policy: CoveragePolicy,
) -> Result<ConfusionMatrix, MetricsError> {
    let mut seen = BTreeSet::new();
    if let Some(dup) = gold.iter().find(|g| !seen.insert(g.video_id.as_str())) {
        return Err(MetricsError::Input(format!(
            "duplicate gold label for {}",
            dup.video_id
        )));
    }
    let missing: Vec<String> = gold
        .iter()
        .filter(|g| !predictions.contains_key(&g.video_id))
        .map(|g| g.video_id.clone())
        .collect();
    if policy == CoveragePolicy::Strict && !missing.is_empty() {
        return Err(MetricsError::Coverage { missing });
    }
    let mut cm = ConfusionMatrix::default();
    for g in gold {
        cm.add(predictions.get(&g.video_id).copied().unwrap_or(false), g.is_valid_pair);
    }
    Ok(cm)
}

/// Accuracy, precision and recall; `None` where the denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<ClassificationReport, MetricsError> {
    if cm.total() == 0 {
        return Err(MetricsError::UndefinedMetrics);
    }
    Ok(ClassificationReport {
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
        precision: ratio(cm.tp, cm.tp + cm.fp),
        recall: ratio(cm.tp, cm.tp + cm.r#fn),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationBlock {
    pub confusion_matrix: ConfusionMatrix,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl ClassificationBlock {
    fn from_matrix(cm: ConfusionMatrix) -> Self {
        let r = classification_metrics(&cm).unwrap_or(ClassificationReport {
            accuracy: None,
            precision: None,
            recall: None,
        });
        ClassificationBlock {
            confusion_matrix: cm,
            accuracy: r.accuracy,
            precision: r.precision,
            recall: r.recall,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub policy: CoveragePolicy,
    /// Score `ProcessingError` records as rejections instead of leaving
    /// them (and their gold labels) out.
    pub include_processing_errors: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub overall: ClassificationBlock,
    pub per_language: BTreeMap<String, ClassificationBlock>,
    pub n_gold: usize,
    pub n_processing_errors_excluded: usize,
    /// Gold ids without a prediction, counted as rejections.
    pub n_missing: usize,
}

/// Accept/reject predictions and languages from terminal audit records.
pub struct AuditPredictions {
    pub accepted: BTreeMap<String, bool>,
    pub language: BTreeMap<String, String>,
    pub processing_errors: BTreeSet<String>,
}

pub fn predictions_from_audit(records: &[PipelineRecord], include_processing_errors: bool) -> AuditPredictions {
    let mut out = AuditPredictions {
        accepted: BTreeMap::new(),
        language: BTreeMap::new(),
        processing_errors: BTreeSet::new(),
    };
    for r in records.iter().filter(|r| r.state.is_terminal()) {
        let id = r.video_id().to_string();
        out.language.insert(id.clone(), r.candidate.language.code().to_string());
        if r.rejection_reason == Some(RejectionReason::ProcessingError) {
            out.processing_errors.insert(id.clone());
            if !include_processing_errors {
                continue;
            }
        }
        out.accepted.insert(id, r.state == RecordState::Accepted);
    }
    out
}

/// Scores audit decisions against gold labels, overall and per language.
pub fn evaluate(
    audit: &[PipelineRecord],
    gold: &[GoldLabel],
    opts: EvalOptions,
) -> Result<EvaluationReport, MetricsError> {
    let preds = predictions_from_audit(audit, opts.include_processing_errors);
    let excluded = |g: &&GoldLabel| !opts.include_processing_errors && preds.processing_errors.contains(&g.video_id);
    let scored: Vec<GoldLabel> = gold.iter().filter(|g| !excluded(g)).cloned().collect();
    let overall = confusion_matrix(&preds.accepted, &scored, opts.policy)?;

    let mut by_lang: BTreeMap<String, Vec<GoldLabel>> = BTreeMap::new();
    for g in &scored {
        if let Some(lang) = preds
            .accepted
            .contains_key(&g.video_id)
            .then(|| &preds.language[&g.video_id])
        {
            by_lang.entry(lang.clone()).or_default().push(g.clone());
        }
    }
    let per_language = by_lang
        .into_iter()
        .map(|(lang, labels)| {
            let cm = confusion_matrix(&preds.accepted, &labels, CoveragePolicy::Strict).expect("all covered");
            (lang, ClassificationBlock::from_matrix(cm))
        })
        .collect();
    Ok(EvaluationReport {
        overall: ClassificationBlock::from_matrix(overall),
        per_language,
        n_gold: gold.len(),
        n_processing_errors_excluded: gold.len() - scored.len(),
        n_missing: scored
            .iter()
            .filter(|g| !preds.accepted.contains_key(&g.video_id))
            .count(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub bleu: CorpusScore,
    pub chrf: CorpusScore,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external: Option<CorpusScore>,
    pub n_scored: usize,
    pub n_excluded: usize,
}

/// BLEU, chrF and optionally an external metric between extracted text and
/// gold translations. Gold ids whose extraction is missing or empty are
/// excluded, not scored as zero. An unreachable external scorer only drops
/// that column.
pub fn agreement_report(
    extractions: &BTreeMap<String, TextExtraction>,
    gold: &BTreeMap<String, String>,
    scorer: Option<&ExternalScorer>,
) -> Result<AgreementReport, MetricsError> {
    if gold.is_empty() {
        return Err(MetricsError::Input("no gold translations".into()));
    }
    let (mut hyps, mut refs) = (Vec::new(), Vec::new());
    for (id, reference) in gold {
        match extractions.get(id).and_then(|e| e.text.as_deref()) {
            Some(text) if !text.trim().is_empty() => {
                hyps.push(text.to_string());
                refs.push(reference.clone());
            }
            _ => {}
        }
    }
    if hyps.is_empty() {
        return Err(MetricsError::EmptyReport);
    }
    let external = match scorer {
        None => None,
        Some(s) => {
            let pairs: Vec<(String, String)> = hyps.iter().cloned().zip(refs.iter().cloned()).collect();
            match s.score(&pairs) {
                Ok(scores) => Some(CorpusScore {
                    metric: Metric::External,
                    value: scores.iter().sum::<f64>() / scores.len() as f64,
                    signature: s.name().to_string(),
                    n: scores.len(),
                }),
                Err(e) => {
                    tracing::warn!(error = %e, "external scorer unavailable; omitting its column");
                    None
                }
            }
        }
    };
    Ok(AgreementReport {
        bleu: bleu_corpus(&hyps, &refs)?,
        chrf: chrf_corpus(&hyps, &refs)?,
        external,
        n_scored: hyps.len(),
        n_excluded: gold.len() - hyps.len(),
    })
}

/// Text extractions per video, grouped by language code.
pub fn extractions_by_language(records: &[PipelineRecord]) -> BTreeMap<String, BTreeMap<String, TextExtraction>> {
    let mut out: BTreeMap<String, BTreeMap<String, TextExtraction>> = BTreeMap::new();
    for r in records {
        let extraction = r.text_extraction().cloned().unwrap_or_else(TextExtraction::none);
        out.entry(r.candidate.language.code().to_string())
            .or_default()
            .insert(r.video_id().to_string(), extraction);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub code: String,
    pub language: String,
    pub videos: u64,
    pub hours: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub rows: Vec<StatsRow>,
    pub total: StatsRow,
}

/// Video counts and hours per language, from the manifest records.
pub fn dataset_stats(manifest: &DatasetManifest) -> DatasetStats {
    let mut acc: BTreeMap<&LanguageCode, (u64, f64)> = BTreeMap::new();
    for r in &manifest.records {
        let e = acc.entry(&r.language).or_default();
        e.0 += 1;
        e.1 += r.duration_s;
    }
    let rows: Vec<StatsRow> = acc
        .into_iter()
        .map(|(lang, (videos, secs))| StatsRow {
            code: lang.code().to_string(),
            language: lang.display_name().to_string(),
            videos,
            hours: secs / 3600.0,
        })
        .collect();
    let total = StatsRow {
        code: String::new(),
        language: "Total".into(),
        videos: rows.iter().map(|r| r.videos).sum(),
        hours: manifest.records.iter().map(|r| r.duration_s).sum::<f64>() / 3600.0,
    };
    DatasetStats { rows, total }
}

/// Hours to at most two decimals, without trailing zeros.
pub fn format_hours(hours: f64) -> String {
    let s = format!("{hours:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

impl DatasetStats {
    pub fn render_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.language.chars().count())
            .max()
            .unwrap_or(0)
            .max("Language".len());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:<4}  {:>7}  {:>8}",
            "Language", "Code", "Videos", "Hours"
        );
        for r in self.rows.iter().chain([&self.total]) {
            let _ = writeln!(
                out,
                "{:<width$}  {:<4}  {:>7}  {:>8}",
                r.language,
                r.code,
                r.videos,
                format_hours(r.hours)
            );
        }
        out
    }
}
