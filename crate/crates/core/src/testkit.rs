//! A deterministic stand-in for the model endpoints and the decoder, for
//! tests and dry runs.
//!
//! Every video gets solid-colour frames that encode its position in the
//! script; the mock endpoint reads that colour back from the first image in
//! a request and answers according to the video's [`VideoScript`].

use std::collections::HashMap;
use std::io::Cursor;
use std::sync::Arc;

use base64::Engine;
use chrono::{DateTime, TimeZone, Utc};
use image::{Rgb, RgbImage};
use serde_json::json;

use crate::corpus::{
    ActivityVerdict, CandidateVideo, FaceVerdict, JudgeVerdict, LanguageCode, PipelineRecord, Provenance, RecordState,
    RejectionReason, Stage, StageOutcome, StageVerdict, TextExtraction, TextSource,
};
use crate::gateway::mock::MockTransport;
use crate::gateway::{EndpointConfig, GatewayConfig, HttpReply};
use crate::video_prep::{plan_frame_samples, FrameSequence, FrameSource, MediaError, SamplingConfig};

pub const CURATOR_URL: &str = "http://curator.mock/v1";
pub const JUDGE_URL: &str = "http://judge.mock/v1";
pub const CURATOR_MODEL: &str = "mock-curator-vl";
pub const JUDGE_MODEL: &str = "mock-judge-vl";

/// How the mock models answer for one video.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoScript {
    pub face_visible: bool,
    pub is_signing: bool,
    pub text: Option<String>,
    pub aligned: bool,
}

impl VideoScript {
    pub fn pass(text: &str) -> Self {
        VideoScript {
            face_visible: true,
            is_signing: true,
            text: Some(text.to_string()),
            aligned: true,
        }
    }

    pub fn face_fail() -> Self {
        VideoScript {
            face_visible: false,
            ..Self::pass("unused")
        }
    }

    pub fn activity_fail() -> Self {
        VideoScript {
            is_signing: false,
            ..Self::pass("unused")
        }
    }

    pub fn no_text() -> Self {
        VideoScript {
            text: None,
            ..Self::pass("unused")
        }
    }

    pub fn judge_fail(text: &str) -> Self {
        VideoScript {
            aligned: false,
            ..Self::pass(text)
        }
    }
}

fn colour(index: usize) -> Rgb<u8> {
    Rgb([(index & 0xff) as u8, ((index >> 8) & 0xff) as u8, 0x5a])
}

fn index_of(px: &Rgb<u8>) -> usize {
    px[0] as usize | (px[1] as usize) << 8
}

/// Scripted endpoints plus a matching frame source.
#[derive(Clone, Debug, Default)]
pub struct MockBackend {
    ids: HashMap<String, usize>,
    scripts: Vec<VideoScript>,
}

impl MockBackend {
    pub fn new<'a>(scripts: impl IntoIterator<Item = (&'a str, VideoScript)>) -> Self {
        let mut backend = MockBackend::default();
        for (id, script) in scripts {
            backend.ids.insert(id.to_string(), backend.scripts.len());
            backend.scripts.push(script);
        }
        backend
    }

    /// Gateway settings pointing at the mock endpoints, with no rate limit
    /// and no backoff.
    pub fn gateway_config(&self) -> GatewayConfig {
        let mut cfg = GatewayConfig::new(
            EndpointConfig::new(CURATOR_URL, CURATOR_MODEL),
            EndpointConfig::new(JUDGE_URL, JUDGE_MODEL),
        );
        cfg.rate_limit_rps = 0.0;
        cfg.backoff_base_ms = 0;
        cfg.max_retries = 1;
        cfg
    }

    pub fn transport(&self) -> Arc<MockTransport> {
        let scripts = self.scripts.clone();
        Arc::new(MockTransport::new(move |url, body| {
            let Some(script) = first_image_index(body).and_then(|i| scripts.get(i)) else {
                return HttpReply::status(400, "unknown video");
            };
            chat_reply(&reply_for(script, url, body))
        }))
    }

    pub fn frame_source(&self) -> ScriptedFrames {
        ScriptedFrames { ids: self.ids.clone() }
    }
}

fn reply_for(script: &VideoScript, url: &str, body: &str) -> String {
    if url.starts_with(JUDGE_URL) {
        return json!({"aligned": script.aligned, "rationale": "scripted"}).to_string();
    }
    if body.contains("face_visible") {
        json!({"face_visible": script.face_visible, "people_count": u32::from(script.face_visible)}).to_string()
    } else if body.contains("is_signing") {
        json!({"is_signing": script.is_signing}).to_string()
    } else {
        match &script.text {
            Some(text) => json!({"text": text, "source": "EmbeddedText"}).to_string(),
            None => "No text found.".to_string(),
        }
    }
}

/// Wraps `text` as an OpenAI-style chat completion body.
pub fn chat_reply(text: &str) -> HttpReply {
    HttpReply::ok(json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string())
}

fn first_image_index(body: &str) -> Option<usize> {
    const PREFIX: &str = "data:image/png;base64,";
    let start = body.find(PREFIX)? + PREFIX.len();
    let len = body[start..].find('"')?;
    let png = base64::engine::general_purpose::STANDARD
        .decode(&body[start..start + len])
        .ok()?;
    let img = image::load(Cursor::new(png), image::ImageFormat::Png).ok()?.to_rgb8();
    Some(index_of(img.get_pixel(0, 0)))
}

/// Frame source for [`MockBackend`]; unknown videos are invalid media.
#[derive(Clone, Debug)]
pub struct ScriptedFrames {
    ids: HashMap<String, usize>,
}

impl FrameSource for ScriptedFrames {
    fn load(&self, candidate: &CandidateVideo, sampling: &SamplingConfig) -> Result<FrameSequence, MediaError> {
        let index = *self
            .ids
            .get(&candidate.video_id)
            .ok_or_else(|| MediaError::Invalid(format!("no media for {}", candidate.video_id)))?;
        let plan = plan_frame_samples(candidate.duration_s, sampling.rate_hz, sampling.max_frames)?;
        let frame = RgbImage::from_pixel(plan.target_width, plan.target_height, colour(index));
        let frames = vec![frame; plan.timestamps_s.len()];
        FrameSequence::new(frames, plan, format!("mock:{index}"))
    }
}

/// Fixed timestamp for fixtures.
pub fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap()
}

pub fn candidate(id: &str, lang: &str, duration_s: f64) -> CandidateVideo {
    CandidateVideo {
        video_id: id.to_string(),
        source: Provenance::ManifestFile("fixture.jsonl".into()),
        language: LanguageCode::from_code(lang).unwrap(),
        duration_s,
        media_locator: format!("/media/{id}.mp4"),
        description_text: None,
        fetched_at: epoch(),
    }
}

pub fn verdict(outcome: StageOutcome) -> StageVerdict {
    let model_id = if outcome.stage() == Stage::Judge {
        JUDGE_MODEL
    } else {
        CURATOR_MODEL
    };
    StageVerdict {
        raw_response: serde_json::to_string(&outcome).unwrap(),
        outcome,
        model_id: model_id.into(),
        latency_ms: 5,
        cached: false,
        attempts: 1,
    }
}

fn outcome(stage: Stage, positive: bool, text: &str) -> StageOutcome {
    match stage {
        Stage::Face => StageOutcome::Face(FaceVerdict {
            face_visible: positive,
            people_count: u32::from(positive),
        }),
        Stage::Activity => StageOutcome::Activity(ActivityVerdict { is_signing: positive }),
        Stage::Text => StageOutcome::Text(if positive {
            TextExtraction {
                text: Some(text.into()),
                source: TextSource::EmbeddedText,
            }
        } else {
            TextExtraction::none()
        }),
        Stage::Judge => StageOutcome::Judge(JudgeVerdict {
            aligned: positive,
            rationale: None,
        }),
    }
}

/// An accepted record with all four positive verdicts.
pub fn accepted(id: &str, lang: &str, duration_s: f64, text: &str) -> PipelineRecord {
    PipelineRecord {
        candidate: candidate(id, lang, duration_s),
        state: RecordState::Accepted,
        rejection_reason: None,
        verdicts: Stage::ALL.iter().map(|&s| verdict(outcome(s, true, text))).collect(),
        extracted_text: Some(text.into()),
        error: None,
    }
}

/// A rejected record whose verdicts are consistent with `reason`.
pub fn rejected(id: &str, lang: &str, reason: RejectionReason) -> PipelineRecord {
    let text = "fixture text";
    let stop = Stage::ALL.iter().position(|&s| RejectionReason::for_stage(s) == reason);
    let verdicts: Vec<StageVerdict> = match stop {
        Some(k) => Stage::ALL[..=k]
            .iter()
            .enumerate()
            .map(|(i, &s)| verdict(outcome(s, i < k, text)))
            .collect(),
        None => Vec::new(),
    };
    let reached_text = stop.is_some_and(|k| k > Stage::ALL.iter().position(|&s| s == Stage::Text).unwrap());
    PipelineRecord {
        candidate: candidate(id, lang, 10.0),
        state: RecordState::Rejected,
        rejection_reason: Some(reason),
        verdicts,
        extracted_text: reached_text.then(|| text.to_string()),
        error: (reason == RejectionReason::ProcessingError).then(|| "fixture failure".to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::validate_record;

    #[test]
    fn colour_round_trips() {
        for i in [0, 1, 255, 256, 4799, 65535] {
            assert_eq!(index_of(&colour(i)), i);
        }
    }

    #[test]
    fn record_builders_satisfy_the_invariants() {
        validate_record(&accepted("a", "ase", 3.0, "hello")).unwrap();
        for reason in [
            RejectionReason::FaceNotVisible,
            RejectionReason::NotSigning,
            RejectionReason::NoText,
            RejectionReason::MisalignedText,
            RejectionReason::ProcessingError,
        ] {
            validate_record(&rejected("r", "gsg", reason)).unwrap_or_else(|e| panic!("{reason:?}: {e}"));
        }
    }
}
