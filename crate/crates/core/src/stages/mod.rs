//! The four model-driven stages: face visibility, signing activity, text
//! extraction and the alignment judge.
//!
//! Each stage renders its prompt, sends one request through the gateway and
//! parses the reply. An unparseable reply earns exactly one reprompt; a
//! second failure is reported as [`StageError::Unparseable`].

mod parse;
mod templates;

use std::time::Instant;

use thiserror::Error;

use crate::corpus::{LanguageCode, Stage, StageVerdict};
use crate::gateway::{DecodeParams, Gateway, GatewayError, ModelRequest, Role};
use crate::video_prep::FrameSequence;

pub use crate::corpus::{ActivityVerdict, FaceVerdict, JudgeVerdict, TextExtraction, TextSource};
pub use parse::{first_json_object, parse_verdict, ParseError, NO_TEXT_SENTINEL};
pub use templates::{quote_caption, render_prompt, PromptTemplate, TemplateError, TemplateSet, PLACEHOLDERS};

const REPROMPT: &str = "Your previous reply could not be read. Answer again with only the JSON object described above: no code fences, no explanations.";

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("{stage} reply still unparseable after {attempts} attempts: {error}")]
    Unparseable {
        stage: Stage,
        attempts: u32,
        error: ParseError,
        raw: String,
    },
    #[error("precondition failed: {0}")]
    Precondition(String),
}

impl StageError {
    /// Whether the whole run should stop rather than reject this video.
    pub fn is_outage(&self) -> bool {
        matches!(self, StageError::Gateway(GatewayError::Unavailable { .. }))
    }
}

/// The endpoint role serving `stage`.
pub fn role_for(stage: Stage) -> Role {
    match stage {
        Stage::Judge => Role::Judge,
        _ => Role::Curator,
    }
}

/// Shared context for running stages against one gateway.
pub struct StageRunner<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a TemplateSet,
    pub decode: DecodeParams,
}

impl<'a> StageRunner<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a TemplateSet) -> Self {
        StageRunner {
            gateway,
            templates,
            decode: DecodeParams::default(),
        }
    }

    fn run(
        &self,
        stage: Stage,
        frames: &FrameSequence,
        language: &LanguageCode,
        caption: Option<&str>,
    ) -> Result<StageVerdict, StageError> {
        if frames.is_empty() {
            return Err(StageError::Precondition(format!(
                "{stage} stage needs at least one frame"
            )));
        }
        let role = role_for(stage);
        let endpoint = self.gateway.endpoint(role);
        let frames = frames.subsample(endpoint.max_frames_per_request);
        let prompt = render_prompt(self.templates.get(stage, language), language, caption)?;

        let started = Instant::now();
        let mut cached = true;
        let mut attempt = 0;
        let mut prompt_text = prompt.clone();
        loop {
            attempt += 1;
            let resp = self.gateway.cached_complete(&ModelRequest {
                role,
                prompt_text: prompt_text.clone(),
                frames: &frames,
                decode: self.decode,
            })?;
            cached &= resp.from_cache;
            match parse_verdict(&resp.text, stage) {
                Ok(outcome) => {
                    return Ok(StageVerdict {
                        outcome,
                        model_id: endpoint.model_id.clone(),
                        raw_response: resp.text,
                        latency_ms: started.elapsed().as_millis() as u64,
                        cached,
                        attempts: attempt,
                    })
                }
                Err(error) if attempt >= 2 => {
                    return Err(StageError::Unparseable {
                        stage,
                        attempts: attempt,
                        error,
                        raw: resp.text,
                    })
                }
                Err(error) => {
                    tracing::debug!(%stage, %error, "reprompting after unparseable reply");
                    prompt_text = format!("{prompt}\n\n{REPROMPT}");
                }
            }
        }
    }

    pub fn detect_face(&self, frames: &FrameSequence, language: &LanguageCode) -> Result<StageVerdict, StageError> {
        self.run(Stage::Face, frames, language, None)
    }

    pub fn detect_sign_activity(
        &self,
        frames: &FrameSequence,
        language: &LanguageCode,
    ) -> Result<StageVerdict, StageError> {
        self.run(Stage::Activity, frames, language, None)
    }

    pub fn extract_text(&self, frames: &FrameSequence, language: &LanguageCode) -> Result<StageVerdict, StageError> {
        self.run(Stage::Text, frames, language, None)
    }

    /// Asks the judge whether `text` translates the signing. Empty text never
    /// reaches the model.
    pub fn judge_alignment(
        &self,
        frames: &FrameSequence,
        text: &str,
        language: &LanguageCode,
    ) -> Result<StageVerdict, StageError> {
        if text.trim().is_empty() {
            return Err(StageError::Precondition("judge needs nonempty text".into()));
        }
        self.run(Stage::Judge, frames, language, Some(text))
    }

    pub fn run_stage(
        &self,
        stage: Stage,
        frames: &FrameSequence,
        language: &LanguageCode,
        text: Option<&str>,
    ) -> Result<StageVerdict, StageError> {
        match stage {
            Stage::Face => self.detect_face(frames, language),
            Stage::Activity => self.detect_sign_activity(frames, language),
            Stage::Text => self.extract_text(frames, language),
            Stage::Judge => self.judge_alignment(frames, text.unwrap_or_default(), language),
        }
    }
}
