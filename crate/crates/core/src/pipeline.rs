//! Drives candidates through Face → Activity → Text → Judge, stopping at the
//! first negative verdict.
//!
//! Workers process videos concurrently; the calling thread is the single
//! writer for the audit log and the checkpoint. The audit log gets one line
//! per terminal record as soon as it is known, and the checkpoint is
//! replaced atomically right after, so an interrupted run can be resumed
//! without redoing finished videos.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::corpus::{
    validate_record, CandidateVideo, DatasetManifest, PipelineRecord, RecordState, RejectionReason, Stage,
    StageOutcome, StageVerdict, MANIFEST_VERSION,
};
use crate::digest::json_digest;
use crate::gateway::{validate_model_separation, DecodeParams, Gateway, GatewayConfig, Role};
use crate::ingestion::dedup_candidates;
use crate::stages::{StageRunner, TemplateSet};
use crate::video_prep::{FrameSource, SamplingConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state machine: {0}")]
    StateMachine(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error(
        "checkpoint was written for config {found}, but the current config digests to {expected}; refusing to resume"
    )]
    ConfigMismatch { expected: String, found: String },
    #[error("gateway outage while processing {video_id}: {message} ({completed} videos checkpointed)")]
    Halted {
        video_id: String,
        message: String,
        completed: usize,
    },
    #[error("run cancelled after {completed} of {total} videos")]
    Cancelled { completed: usize, total: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn default_workers() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    /// Digest of the template set in use.
    pub stage_templates: String,
    #[serde(default)]
    pub decode: DecodeParams,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit_path: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn new(gateway: GatewayConfig, templates: &TemplateSet) -> Self {
        PipelineConfig {
            gateway,
            sampling: SamplingConfig::default(),
            stage_templates: templates.digest(),
            decode: DecodeParams::default(),
            workers: default_workers(),
            checkpoint_path: None,
            audit_path: None,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.workers == 0 {
            return Err(PipelineError::Config("workers must be at least 1".into()));
        }
        if !self.sampling.rate_hz.is_finite() || self.sampling.rate_hz <= 0.0 {
            return Err(PipelineError::Config("sampling rate_hz must be positive".into()));
        }
        if self.sampling.max_frames == 0 {
            return Err(PipelineError::Config("sampling max_frames must be at least 1".into()));
        }
        validate_model_separation(&self.gateway).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Digest of every setting that can change a verdict. Worker count,
    /// paths, rate limits, retries and timeouts are left out: they affect
    /// how a run proceeds, not what it decides.
    pub fn digest(&self) -> String {
        let endpoint = |e: &Option<crate::gateway::EndpointConfig>| {
            e.as_ref().map(|e| {
                json!({
                    "model_id": e.model_id,
                    "max_frames_per_request": e.max_frames_per_request,
                })
            })
        };
        json_digest(&json!({
            "version": MANIFEST_VERSION,
            "curator": endpoint(&self.gateway.curator),
            "judge": endpoint(&self.gateway.judge),
            "sampling": self.sampling,
            "stage_templates": self.stage_templates,
            "decode": self.decode,
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// video_id → digest of its terminal record.
    pub completed: BTreeMap<String, String>,
    pub config_digest: String,
    pub written_at: DateTime<Utc>,
}

impl Checkpoint {
    pub fn empty(config_digest: impl Into<String>) -> Self {
        Checkpoint {
            completed: BTreeMap::new(),
            config_digest: config_digest.into(),
            written_at: Utc::now(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let mut text = serde_json::to_string_pretty(self).expect("in-memory JSON encoding cannot fail");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| PipelineError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Applies one stage verdict to a record.
pub fn advance_state(mut record: PipelineRecord, verdict: StageVerdict) -> Result<PipelineRecord, PipelineError> {
    let Some(expected) = record.state.expected_stage() else {
        return Err(PipelineError::StateMachine(format!(
            "{} is already {:?}",
            record.video_id(),
            record.state
        )));
    };
    if verdict.stage() != expected {
        return Err(PipelineError::StateMachine(format!(
            "{} expects a {expected} verdict in state {:?}, got {}",
            record.video_id(),
            record.state,
            verdict.stage()
        )));
    }
    let positive = verdict.outcome.is_positive();
    if let (true, StageOutcome::Text(t)) = (positive, &verdict.outcome) {
        record.extracted_text = t.text.clone();
    }
    record.verdicts.push(verdict);
    if positive {
        record.state = match expected {
            Stage::Face => RecordState::FaceChecked,
            Stage::Activity => RecordState::ActivityChecked,
            Stage::Text => RecordState::TextExtracted,
            Stage::Judge => RecordState::Accepted,
        };
    } else {
        record.state = RecordState::Rejected;
        record.rejection_reason = Some(RejectionReason::for_stage(expected));
    }
    Ok(record)
}

fn processing_error(mut record: PipelineRecord, message: String) -> PipelineRecord {
    tracing::warn!(video_id = record.video_id(), %message, "processing error");
    record.state = RecordState::Rejected;
    record.rejection_reason = Some(RejectionReason::ProcessingError);
    record.error = Some(message);
    record
}

/// Status passed to the progress callback after each terminal record.
pub struct Progress<'r> {
    pub done: usize,
    pub total: usize,
    pub record: &'r PipelineRecord,
}

#[derive(Default)]
pub struct RunControl<'c> {
    /// Checked before each new video starts; in-flight videos finish.
    pub cancel: Option<&'c AtomicBool>,
    pub progress: Option<&'c dyn Fn(&Progress<'_>)>,
    /// Manifest timestamp; now when unset.
    pub created_at: Option<DateTime<Utc>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub manifest: DatasetManifest,
    /// Every terminal record, in input order.
    pub audit: Vec<PipelineRecord>,
}

pub struct Pipeline<'a> {
    cfg: PipelineConfig,
    digest: String,
    gateway: &'a Gateway,
    templates: &'a TemplateSet,
    frames: &'a dyn FrameSource,
}

enum Outcome {
    Done(Box<PipelineRecord>),
    Outage { video_id: String, message: String },
}

impl<'a> Pipeline<'a> {
    pub fn new(
        cfg: PipelineConfig,
        gateway: &'a Gateway,
        templates: &'a TemplateSet,
        frames: &'a dyn FrameSource,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        if templates.digest() != cfg.stage_templates {
            return Err(PipelineError::Config(
                "stage_templates digest does not match the template set in use".into(),
            ));
        }
        for (role, endpoint) in [(Role::Curator, &cfg.gateway.curator), (Role::Judge, &cfg.gateway.judge)] {
            let configured = endpoint.as_ref().map(|e| e.model_id.as_str());
            if configured != Some(gateway.endpoint(role).model_id.as_str()) {
                return Err(PipelineError::Config(format!(
                    "gateway {role} model differs from the pipeline config"
                )));
            }
        }
        let digest = cfg.digest();
        Ok(Pipeline {
            cfg,
            digest,
            gateway,
            templates,
            frames,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn config_digest(&self) -> &str {
        &self.digest
    }

    /// Runs one video to a terminal state. Only a gateway outage is an
    /// error; every other failure becomes a `ProcessingError` rejection.
    fn process(&self, candidate: &CandidateVideo) -> Result<PipelineRecord, PipelineError> {
        let mut record = PipelineRecord::new(candidate.clone());
        if let Err(reason) = candidate.check() {
            return Ok(processing_error(record, format!("invalid candidate: {reason}")));
        }
        let frames = match self.frames.load(candidate, &self.cfg.sampling) {
            Ok(f) => f,
            Err(e) => return Ok(processing_error(record, format!("frames: {e}"))),
        };
        let runner = StageRunner {
            gateway: self.gateway,
            templates: self.templates,
            decode: self.cfg.decode,
        };
        while let Some(stage) = record.state.expected_stage() {
            let text = record.extracted_text.clone();
            match runner.run_stage(stage, &frames, &candidate.language, text.as_deref()) {
                Ok(verdict) => record = advance_state(record, verdict)?,
                Err(e) if e.is_outage() => {
                    return Err(PipelineError::Halted {
                        video_id: candidate.video_id.clone(),
                        message: e.to_string(),
                        completed: 0,
                    })
                }
                Err(e) => return Ok(processing_error(record, format!("{stage}: {e}"))),
            }
        }
        Ok(record)
    }

    /// Processes every candidate from scratch, truncating any previous audit
    /// log and checkpoint.
    pub fn run(&self, candidates: Vec<CandidateVideo>, ctl: &RunControl<'_>) -> Result<PipelineOutput, PipelineError> {
        self.execute(candidates, HashMap::new(), ctl)
    }

    /// Continues an interrupted run. Records listed in the checkpoint are
    /// taken from the audit log instead of being reprocessed.
    pub fn resume(
        &self,
        checkpoint: &Checkpoint,
        candidates: Vec<CandidateVideo>,
        ctl: &RunControl<'_>,
    ) -> Result<PipelineOutput, PipelineError> {
        if checkpoint.config_digest != self.digest {
            return Err(PipelineError::ConfigMismatch {
                expected: self.digest.clone(),
                found: checkpoint.config_digest.clone(),
            });
        }
        let mut kept = HashMap::new();
        if !checkpoint.completed.is_empty() {
            let path = self.cfg.audit_path.as_deref().ok_or_else(|| {
                PipelineError::Config("resuming a nonempty checkpoint needs the audit log path".into())
            })?;
            for record in read_audit_lenient(path)? {
                let id = record.video_id().to_string();
                if checkpoint.completed.get(&id) == Some(&record.digest()) {
                    kept.insert(id, record);
                }
            }
            let missing = checkpoint.completed.len() - kept.len();
            if missing > 0 {
                tracing::warn!(
                    missing,
                    "checkpointed records absent from the audit log; reprocessing them"
                );
            }
        }
        self.execute(candidates, kept, ctl)
    }

    fn execute(
        &self,
        candidates: Vec<CandidateVideo>,
        mut done: HashMap<String, PipelineRecord>,
        ctl: &RunControl<'_>,
    ) -> Result<PipelineOutput, PipelineError> {
        let candidates = dedup_candidates(candidates);
        done.retain(|id, _| candidates.iter().any(|c| &c.video_id == id));
        let total = candidates.len();

        let mut writer = Writer::start(&self.cfg, &self.digest, &candidates, &done)?;
        let pending: Vec<&CandidateVideo> = candidates.iter().filter(|c| !done.contains_key(&c.video_id)).collect();

        let next = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        let cancel = ctl.cancel;
        let cancelled = move || cancel.is_some_and(|c| c.load(Ordering::SeqCst));
        let mut halt = None;
        let mut write_err = None;

        std::thread::scope(|scope| {
            let (tx, rx) = mpsc::channel();
            for _ in 0..self.cfg.workers.min(pending.len()) {
                let tx = tx.clone();
                let (next, stop, pending) = (&next, &stop, &pending);
                scope.spawn(move || loop {
                    if stop.load(Ordering::SeqCst) || cancelled() {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(candidate) = pending.get(i) else { break };
                    let outcome = match self.process(candidate) {
                        Ok(record) => Outcome::Done(Box::new(record)),
                        Err(PipelineError::Halted { video_id, message, .. }) => Outcome::Outage { video_id, message },
                        Err(e) => Outcome::Done(Box::new(processing_error(
                            PipelineRecord::new((*candidate).clone()),
                            e.to_string(),
                        ))),
                    };
                    if tx.send(outcome).is_err() {
                        break;
                    }
                });
            }
            drop(tx);

            for outcome in rx {
                match outcome {
                    Outcome::Done(record) => {
                        if write_err.is_some() {
                            continue;
                        }
                        if let Err(e) = writer.record(&record) {
                            stop.store(true, Ordering::SeqCst);
                            write_err = Some(e);
                            continue;
                        }
                        let id = record.video_id().to_string();
                        done.insert(id.clone(), *record);
                        if let Some(progress) = ctl.progress {
                            progress(&Progress {
                                done: done.len(),
                                total,
                                record: &done[&id],
                            });
                        }
                    }
                    Outcome::Outage { video_id, message } => {
                        stop.store(true, Ordering::SeqCst);
                        halt.get_or_insert((video_id, message));
                    }
                }
            }
        });

        if let Some(e) = write_err {
            return Err(e);
        }
        if let Some((video_id, message)) = halt {
            tracing::error!(%video_id, %message, "halting on gateway outage");
            return Err(PipelineError::Halted {
                video_id,
                message,
                completed: done.len(),
            });
        }
        if done.len() < total {
            return Err(PipelineError::Cancelled {
                completed: done.len(),
                total,
            });
        }

        let audit: Vec<PipelineRecord> = candidates
            .iter()
            .map(|c| done.remove(&c.video_id).expect("every candidate is terminal"))
            .collect();
        for r in &audit {
            validate_record(r).map_err(|v| PipelineError::StateMachine(format!("{}: {v}", r.video_id())))?;
        }
        writer.finish(&audit)?;
        let manifest = DatasetManifest::from_pipeline_records(
            &audit,
            self.digest.clone(),
            ctl.created_at.unwrap_or_else(Utc::now),
        );
        Ok(PipelineOutput { manifest, audit })
    }
}

/// Audit lines that parse and validate; a torn final line from an
/// interrupted write is skipped.
fn read_audit_lenient(path: &Path) -> Result<Vec<PipelineRecord>, PipelineError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        match serde_json::from_str::<PipelineRecord>(line) {
            Ok(r) if validate_record(&r).is_ok() => records.push(r),
            _ => tracing::warn!(path = %path.display(), line = i + 1, "skipping unreadable audit line"),
        }
    }
    Ok(records)
}

/// Single writer for the audit log and checkpoint.
struct Writer {
    audit_path: Option<PathBuf>,
    audit: Option<File>,
    checkpoint_path: Option<PathBuf>,
    checkpoint: Checkpoint,
}

impl Writer {
    /// Rewrites the audit log to hold exactly the carried-over records and
    /// saves a matching checkpoint.
    fn start(
        cfg: &PipelineConfig,
        digest: &str,
        candidates: &[CandidateVideo],
        done: &HashMap<String, PipelineRecord>,
    ) -> Result<Self, PipelineError> {
        let carried: Vec<PipelineRecord> = candidates
            .iter()
            .filter_map(|c| done.get(&c.video_id).cloned())
            .collect();
        let mut checkpoint = Checkpoint::empty(digest);
        checkpoint.completed = carried.iter().map(|r| (r.video_id().to_string(), r.digest())).collect();

        let audit = match &cfg.audit_path {
            Some(path) => {
                write_atomic(path, crate::corpus::serialize_audit(&carried).as_bytes())?;
                Some(OpenOptions::new().append(true).open(path).map_err(io_err(path))?)
            }
            None => None,
        };
        if let Some(path) = &cfg.checkpoint_path {
            checkpoint.save(path)?;
        }
        Ok(Writer {
            audit_path: cfg.audit_path.clone(),
            audit,
            checkpoint_path: cfg.checkpoint_path.clone(),
            checkpoint,
        })
    }

    fn record(&mut self, record: &PipelineRecord) -> Result<(), PipelineError> {
        if let (Some(file), Some(path)) = (self.audit.as_mut(), self.audit_path.as_deref()) {
            let mut line = record.to_json_line();
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(io_err(path))?;
            file.sync_data().map_err(io_err(path))?;
        }
        self.checkpoint
            .completed
            .insert(record.video_id().to_string(), record.digest());
        self.checkpoint.written_at = Utc::now();
        if let Some(path) = &self.checkpoint_path {
            self.checkpoint.save(path)?;
        }
        Ok(())
    }

    /// Replaces the append-order audit log with the input-order one.
    fn finish(self, audit: &[PipelineRecord]) -> Result<(), PipelineError> {
        drop(self.audit);
        if let Some(path) = &self.audit_path {
            write_atomic(path, crate::corpus::serialize_audit(audit).as_bytes())?;
        }
        Ok(())
    }
}
