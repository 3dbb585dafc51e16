//! Python bindings: metrics, verdict parsing, manifests and a scripted
//! pipeline run against the in-process mock models.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sign_curator::corpus::{
    parse_audit, parse_gold_labels, parse_manifest, serialize_audit, serialize_manifest, DatasetManifest, LanguageCode,
    Stage,
};
use sign_curator::gateway::{validate_model_separation, EndpointConfig, Gateway, GatewayConfig};
use sign_curator::metrics::{self, CoveragePolicy, EvalOptions};
use sign_curator::pipeline::{Pipeline, PipelineConfig, RunControl};
use sign_curator::stages::{parse_verdict as parse_stage_verdict, TemplateSet};
use sign_curator::testkit::{self, MockBackend, VideoScript};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct CorpusScore {
    metric: String,
    value: f64,
    signature: String,
    n: usize,
}

#[pymethods]
impl CorpusScore {
    fn __repr__(&self) -> String {
        format!("CorpusScore({} = {:.2}, n={})", self.signature, self.value, self.n)
    }
}

impl From<metrics::CorpusScore> for CorpusScore {
    fn from(s: metrics::CorpusScore) -> Self {
        let metric = match s.metric {
            metrics::Metric::Bleu => "BLEU",
            metrics::Metric::Chrf => "chrF",
            metrics::Metric::External => "external",
        };
        CorpusScore {
            metric: metric.into(),
            value: s.value,
            signature: s.signature,
            n: s.n,
        }
    }
}

/// Corpus BLEU (13a tokens, exponential smoothing), 0 to 100.
#[pyfunction]
fn bleu(hypotheses: Vec<String>, references: Vec<String>) -> PyResult<CorpusScore> {
    metrics::bleu_corpus(&hypotheses, &references)
        .map(Into::into)
        .map_err(value_err)
}

/// Corpus chrF (character 6-grams, beta 2, whitespace ignored), 0 to 100.
#[pyfunction]
fn chrf(hypotheses: Vec<String>, references: Vec<String>) -> PyResult<CorpusScore> {
    metrics::chrf_corpus(&hypotheses, &references)
        .map(Into::into)
        .map_err(value_err)
}

#[pyfunction]
fn tokenize_13a(text: &str) -> Vec<String> {
    metrics::tokenize_13a(text)
}

#[pyclass(frozen, get_all, skip_from_py_object)]
#[derive(Clone, Copy)]
struct ConfusionMatrix {
    tp: u64,
    fp: u64,
    r#fn: u64,
    tn: u64,
}

impl ConfusionMatrix {
    fn report(&self) -> Option<metrics::ClassificationReport> {
        let cm = metrics::ConfusionMatrix {
            tp: self.tp,
            fp: self.fp,
            r#fn: self.r#fn,
            tn: self.tn,
        };
        metrics::classification_metrics(&cm).ok()
    }
}

#[pymethods]
impl ConfusionMatrix {
    #[new]
    #[pyo3(signature = (tp, fp, r#fn, tn))]
    fn new(tp: u64, fp: u64, r#fn: u64, tn: u64) -> Self {
        ConfusionMatrix { tp, fp, r#fn, tn }
    }

    #[getter]
    fn total(&self) -> u64 {
        self.tp + self.fp + self.r#fn + self.tn
    }

    /// None when no pairs were scored.
    #[getter]
    fn accuracy(&self) -> Option<f64> {
        self.report().and_then(|r| r.accuracy)
    }

    /// None when nothing was accepted.
    #[getter]
    fn precision(&self) -> Option<f64> {
        self.report().and_then(|r| r.precision)
    }

    /// None when no gold pair is valid.
    #[getter]
    fn recall(&self) -> Option<f64> {
        self.report().and_then(|r| r.recall)
    }

    fn __repr__(&self) -> String {
        format!(
            "ConfusionMatrix(tp={}, fp={}, fn={}, tn={})",
            self.tp, self.fp, self.r#fn, self.tn
        )
    }
}

fn stage_named(name: &str) -> PyResult<Stage> {
    Stage::ALL.into_iter().find(|s| s.name() == name).ok_or_else(|| {
        PyValueError::new_err(format!(
            "unknown stage {name:?}; expected face, activity, text or judge"
        ))
    })
}

/// Parses a raw model reply for `stage` into a dict; raises ValueError on
/// malformed replies.
#[pyfunction]
fn parse_verdict<'py>(py: Python<'py>, raw: &str, stage: &str) -> PyResult<Bound<'py, PyAny>> {
    let outcome = parse_stage_verdict(raw, stage_named(stage)?).map_err(value_err)?;
    to_py(py, &outcome)
}

/// Raises ValueError when the judge would run the curator's own model.
#[pyfunction]
fn check_model_separation(curator_model: &str, judge_model: &str) -> PyResult<()> {
    let cfg = GatewayConfig::new(
        EndpointConfig::new("http://curator.invalid/v1", curator_model),
        EndpointConfig::new("http://judge.invalid/v1", judge_model),
    );
    validate_model_separation(&cfg).map_err(value_err)
}

#[pyclass]
struct Manifest {
    inner: DatasetManifest,
}

#[pymethods]
impl Manifest {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        parse_manifest(text).map(|inner| Manifest { inner }).map_err(value_err)
    }

    fn to_json(&self) -> String {
        serialize_manifest(&self.inner)
    }

    #[getter]
    fn video_count(&self) -> usize {
        self.inner.records.len()
    }

    #[getter]
    fn total_hours(&self) -> f64 {
        metrics::dataset_stats(&self.inner).total.hours
    }

    #[getter]
    fn video_ids(&self) -> Vec<String> {
        self.inner.records.iter().map(|r| r.video_id.clone()).collect()
    }

    /// {language code: (videos, hours)}
    fn per_language(&self) -> BTreeMap<String, (u64, f64)> {
        metrics::dataset_stats(&self.inner)
            .rows
            .into_iter()
            .map(|r| (r.code, (r.videos, r.hours)))
            .collect()
    }

    fn stats_table(&self) -> String {
        metrics::dataset_stats(&self.inner).render_table()
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }
}

/// Accept/reject quality of an audit log against gold labels (both JSON
/// lines), overall and per language.
#[pyfunction]
#[pyo3(signature = (audit, gold, include_processing_errors=false, missing_as_rejected=false))]
fn evaluate<'py>(
    py: Python<'py>,
    audit: &str,
    gold: &str,
    include_processing_errors: bool,
    missing_as_rejected: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let audit = parse_audit(audit).map_err(value_err)?;
    let gold = parse_gold_labels(gold).map_err(value_err)?;
    let opts = EvalOptions {
        policy: if missing_as_rejected {
            CoveragePolicy::MissingAsRejected
        } else {
            CoveragePolicy::Strict
        },
        include_processing_errors,
    };
    let report = metrics::evaluate(&audit, &gold, opts).map_err(value_err)?;
    to_py(py, &report)
}

/// BLEU and chrF of extracted text against gold translations, across all
/// languages in the audit.
#[pyfunction]
fn agreement<'py>(py: Python<'py>, audit: &str, gold: &str) -> PyResult<Bound<'py, PyAny>> {
    let audit = parse_audit(audit).map_err(value_err)?;
    let translations: BTreeMap<String, String> = parse_gold_labels(gold)
        .map_err(value_err)?
        .into_iter()
        .filter_map(|g| g.gold_translation.map(|t| (g.video_id, t)))
        .collect();
    let extractions = metrics::extractions_by_language(&audit)
        .into_values()
        .flatten()
        .collect();
    let report = metrics::agreement_report(&extractions, &translations, None).map_err(value_err)?;
    to_py(py, &report)
}

fn script(kind: &str, text: Option<&str>) -> PyResult<VideoScript> {
    let text = text.unwrap_or("hello");
    Ok(match kind {
        "pass" => VideoScript::pass(text),
        "face_fail" => VideoScript::face_fail(),
        "activity_fail" => VideoScript::activity_fail(),
        "no_text" => VideoScript::no_text(),
        "judge_fail" => VideoScript::judge_fail(text),
        other => return Err(PyValueError::new_err(format!("unknown script {other:?}"))),
    })
}

/// Runs the full pipeline against scripted mock models.
///
/// `videos` holds (video_id, language, duration_s, script, text) tuples where
/// script is one of pass, face_fail, activity_fail, no_text, judge_fail.
/// Returns (manifest_json, audit_jsonl, network_calls). Reusing `cache_dir`
/// replays earlier replies without network calls.
#[pyfunction]
#[pyo3(signature = (videos, workers=1, cache_dir=None))]
fn run_scripted(
    py: Python<'_>,
    videos: Vec<(String, String, f64, String, Option<String>)>,
    workers: usize,
    cache_dir: Option<std::path::PathBuf>,
) -> PyResult<(String, String, u64)> {
    let scripts = videos
        .iter()
        .map(|(id, _, _, kind, text)| Ok((id.as_str(), script(kind, text.as_deref())?)))
        .collect::<PyResult<Vec<_>>>()?;
    for (_, lang, _, _, _) in &videos {
        LanguageCode::from_code(lang).map_err(value_err)?;
    }
    let candidates = videos
        .iter()
        .map(|(id, lang, duration, _, _)| testkit::candidate(id, lang, *duration))
        .collect();
    let backend = MockBackend::new(scripts);
    let mut gw_cfg = backend.gateway_config();
    gw_cfg.cache_dir = cache_dir;
    let templates = TemplateSet::builtin();
    let mut cfg = PipelineConfig::new(gw_cfg.clone(), &templates);
    cfg.workers = workers;

    py.detach(|| {
        let gateway = Gateway::new(&gw_cfg, backend.transport()).map_err(value_err)?;
        let frames = backend.frame_source();
        let pipeline = Pipeline::new(cfg, &gateway, &templates, &frames).map_err(value_err)?;
        let ctl = RunControl {
            created_at: Some(testkit::epoch()),
            ..Default::default()
        };
        let out = pipeline
            .run(candidates, &ctl)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok((
            serialize_manifest(&out.manifest),
            serialize_audit(&out.audit),
            gateway.network_calls(),
        ))
    })
}

#[pymodule]
#[pyo3(name = "sign_curator")]
fn sign_curator_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<CorpusScore>()?;
    m.add_class::<ConfusionMatrix>()?;
    m.add_class::<Manifest>()?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(chrf, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize_13a, m)?)?;
    m.add_function(wrap_pyfunction!(parse_verdict, m)?)?;
    m.add_function(wrap_pyfunction!(check_model_separation, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(agreement, m)?)?;
    m.add_function(wrap_pyfunction!(run_scripted, m)?)?;
    m.add("BLEU_SIGNATURE", metrics::BLEU_SIGNATURE)?;
    m.add("CHRF_SIGNATURE", metrics::CHRF_SIGNATURE)?;
    Ok(())
}
