//! Strict parsing of free-text model replies into typed stage outcomes.

use serde_json::{Map, Value};
use thiserror::Error;

use crate::corpus::{ActivityVerdict, FaceVerdict, JudgeVerdict, Stage, StageOutcome, TextExtraction, TextSource};

/// Reply the text extractor gives when a video carries no usable text.
pub const NO_TEXT_SENTINEL: &str = "No text found.";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("no JSON object in {stage} reply")]
    NoObject { stage: Stage },
    #[error("{stage} reply: {message}")]
    Schema { stage: Stage, message: String },
}

/// The first JSON object embedded in `raw`. Code fences and surrounding
/// prose are skipped because scanning starts at each `{` in turn.
pub fn first_json_object(raw: &str) -> Option<Map<String, Value>> {
    raw.match_indices('{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

fn field<'a>(stage: Stage, obj: &'a Map<String, Value>, name: &str) -> Result<&'a Value, ParseError> {
    obj.get(name).ok_or_else(|| ParseError::Schema {
        stage,
        message: format!("missing field {name:?}"),
    })
}

fn boolean(stage: Stage, obj: &Map<String, Value>, name: &str) -> Result<bool, ParseError> {
    match field(stage, obj, name)? {
        Value::Bool(b) => Ok(*b),
        Value::String(s) if s.eq_ignore_ascii_case("true") => Ok(true),
        Value::String(s) if s.eq_ignore_ascii_case("false") => Ok(false),
        other => Err(ParseError::Schema {
            stage,
            message: format!("{name} must be a boolean, got {other}"),
        }),
    }
}

fn opt_string(stage: Stage, obj: &Map<String, Value>, name: &str) -> Result<Option<String>, ParseError> {
    match obj.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => {
            let t = s.trim();
            Ok((!t.is_empty()).then(|| t.to_string()))
        }
        Some(other) => Err(ParseError::Schema {
            stage,
            message: format!("{name} must be a string or null, got {other}"),
        }),
    }
}

fn text_source(raw: &str) -> Option<TextSource> {
    let key: String = raw
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_ascii_lowercase();
    match key.as_str() {
        "formalcaption" | "caption" => Some(TextSource::FormalCaption),
        "embeddedtext" | "embedded" => Some(TextSource::EmbeddedText),
        "none" | "" => Some(TextSource::Absent),
        _ => None,
    }
}

fn is_sentinel(text: &str) -> bool {
    text.trim() == NO_TEXT_SENTINEL
}

fn parse_text(obj: &Map<String, Value>) -> Result<TextExtraction, ParseError> {
    let stage = Stage::Text;
    let source = match obj.get("source") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(text_source(s).ok_or_else(|| ParseError::Schema {
            stage,
            message: format!("unknown source {s:?}"),
        })?),
        Some(other) => {
            return Err(ParseError::Schema {
                stage,
                message: format!("source must be a string, got {other}"),
            })
        }
    };
    let keep = |t: Option<String>| t.filter(|t| !is_sentinel(t));
    let text = keep(opt_string(stage, obj, "text")?);
    let formal = keep(opt_string(stage, obj, "formal_caption")?);
    let embedded = keep(opt_string(stage, obj, "embedded_text")?);

    if !obj.contains_key("text") && formal.is_none() && embedded.is_none() {
        return Err(ParseError::Schema {
            stage,
            message: "missing field \"text\"".into(),
        });
    }

    // A formal caption beats embedded text whenever the reply reports one.
    let extraction = match (formal, text, embedded) {
        (Some(caption), _, _) => TextExtraction {
            text: Some(caption),
            source: TextSource::FormalCaption,
        },
        (None, Some(text), _) => TextExtraction {
            text: Some(text),
            source: match source {
                Some(TextSource::FormalCaption) => TextSource::FormalCaption,
                _ => TextSource::EmbeddedText,
            },
        },
        (None, None, Some(embedded)) => TextExtraction {
            text: Some(embedded),
            source: TextSource::EmbeddedText,
        },
        (None, None, None) => TextExtraction::none(),
    };
    Ok(extraction)
}

/// Parses a raw reply for `stage`.
///
/// For the text stage, a reply without a JSON object that contains
/// [`NO_TEXT_SENTINEL`] means no text was found. A face reply claiming a
/// visible face with zero people is repaired to "not visible".
pub fn parse_verdict(raw: &str, stage: Stage) -> Result<StageOutcome, ParseError> {
    let Some(obj) = first_json_object(raw) else {
        if stage == Stage::Text && raw.contains(NO_TEXT_SENTINEL) {
            return Ok(StageOutcome::Text(TextExtraction::none()));
        }
        return Err(ParseError::NoObject { stage });
    };
    match stage {
        Stage::Face => {
            let face_visible = boolean(stage, &obj, "face_visible")?;
            let people_count = match field(stage, &obj, "people_count")? {
                Value::Number(n) if n.as_u64().is_some() => n.as_u64().unwrap(),
                Value::Number(n) if n.as_f64().is_some_and(|f| f >= 0.0 && f.fract() == 0.0) => {
                    n.as_f64().unwrap() as u64
                }
                other => {
                    return Err(ParseError::Schema {
                        stage,
                        message: format!("people_count must be a nonnegative integer, got {other}"),
                    })
                }
            };
            let people_count = u32::try_from(people_count).unwrap_or(u32::MAX);
            let mut verdict = FaceVerdict {
                face_visible,
                people_count,
            };
            if verdict.people_count == 0 && verdict.face_visible {
                tracing::warn!("face reply reports a visible face but zero people; treating face as not visible");
                verdict.face_visible = false;
            }
            Ok(StageOutcome::Face(verdict))
        }
        Stage::Activity => Ok(StageOutcome::Activity(ActivityVerdict {
            is_signing: boolean(stage, &obj, "is_signing")?,
        })),
        Stage::Text => parse_text(&obj).map(StageOutcome::Text),
        Stage::Judge => Ok(StageOutcome::Judge(JudgeVerdict {
            aligned: boolean(stage, &obj, "aligned")?,
            rationale: opt_string(stage, &obj, "rationale")?,
        })),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn plain_face_reply() {
        assert_eq!(
            parse_verdict(r#"{"face_visible": true, "people_count": 1}"#, Stage::Face).unwrap(),
            StageOutcome::Face(FaceVerdict {
                face_visible: true,
                people_count: 1
            })
        );
    }

    #[test]
    fn fenced_activity_reply() {
        assert_eq!(
            parse_verdict("```json\n{\"is_signing\": false}\n```", Stage::Activity).unwrap(),
            StageOutcome::Activity(ActivityVerdict { is_signing: false })
        );
    }

    #[test]
    fn sentinel_means_no_text() {
        assert_eq!(
            parse_verdict("No text found.", Stage::Text).unwrap(),
            StageOutcome::Text(TextExtraction::none())
        );
        assert_eq!(
            parse_verdict("I looked carefully. No text found.", Stage::Text).unwrap(),
            StageOutcome::Text(TextExtraction::none())
        );
        assert_eq!(
            parse_verdict(r#"{"text": "No text found.", "source": "EmbeddedText"}"#, Stage::Text).unwrap(),
            StageOutcome::Text(TextExtraction::none())
        );
        assert!(parse_verdict("No text found.", Stage::Face).is_err());
    }

    #[test]
    fn embedded_text_reply() {
        assert_eq!(
            parse_verdict(
                r#"{"text":"Today I learned School","source":"EmbeddedText"}"#,
                Stage::Text
            )
            .unwrap(),
            StageOutcome::Text(TextExtraction {
                text: Some("Today I learned School".into()),
                source: TextSource::EmbeddedText
            })
        );
    }

    #[test]
    fn formal_caption_wins() {
        let raw =
            r#"{"text":"SALE 50%","source":"EmbeddedText","formal_caption":"Good morning","embedded_text":"SALE 50%"}"#;
        assert_eq!(
            parse_verdict(raw, Stage::Text).unwrap(),
            StageOutcome::Text(TextExtraction {
                text: Some("Good morning".into()),
                source: TextSource::FormalCaption
            })
        );
    }

    #[test]
    fn null_text_is_none() {
        assert_eq!(
            parse_verdict(r#"{"text": null, "source": "None"}"#, Stage::Text).unwrap(),
            StageOutcome::Text(TextExtraction::none())
        );
        assert_eq!(
            parse_verdict(r#"{"text": "   ", "source": "EmbeddedText"}"#, Stage::Text).unwrap(),
            StageOutcome::Text(TextExtraction::none())
        );
    }

    #[test]
    fn zero_people_visible_face_is_repaired() {
        assert_eq!(
            parse_verdict(r#"{"face_visible": true, "people_count": 0}"#, Stage::Face).unwrap(),
            StageOutcome::Face(FaceVerdict {
                face_visible: false,
                people_count: 0
            })
        );
    }

    #[test]
    fn prose_around_object_and_judge_rationale() {
        let raw = "Sure! Here is my answer:\n{\"aligned\": false, \"rationale\": \"song title\"}\nThanks.";
        assert_eq!(
            parse_verdict(raw, Stage::Judge).unwrap(),
            StageOutcome::Judge(JudgeVerdict {
                aligned: false,
                rationale: Some("song title".into())
            })
        );
    }

    #[test]
    fn schema_violations() {
        assert!(matches!(
            parse_verdict("{\"face_visible\": 1, \"people_count\": 1}", Stage::Face),
            Err(ParseError::Schema { .. })
        ));
        assert!(matches!(
            parse_verdict("{\"face_visible\": true, \"people_count\": -2}", Stage::Face),
            Err(ParseError::Schema { .. })
        ));
        assert!(matches!(
            parse_verdict("{\"signing\": true}", Stage::Activity),
            Err(ParseError::Schema { .. })
        ));
        assert!(matches!(
            parse_verdict("{\"text\": \"a\", \"source\": \"Audio\"}", Stage::Text),
            Err(ParseError::Schema { .. })
        ));
        assert!(matches!(
            parse_verdict("yes", Stage::Judge),
            Err(ParseError::NoObject { .. })
        ));
        assert!(matches!(
            parse_verdict("{not json", Stage::Judge),
            Err(ParseError::NoObject { .. })
        ));
    }

    #[test]
    fn skips_braces_that_do_not_start_an_object() {
        let raw = "{ oops } then {\"is_signing\": true}";
        assert_eq!(
            parse_verdict(raw, Stage::Activity).unwrap(),
            StageOutcome::Activity(ActivityVerdict { is_signing: true })
        );
    }

    proptest! {
        #[test]
        fn parse_never_panics(raw in ".{0,200}", stage_idx in 0usize..4) {
            let _ = parse_verdict(&raw, Stage::ALL[stage_idx]);
        }

        #[test]
        fn parse_never_panics_on_jsonish(raw in r#"[{}\[\]":,a-z0-9 .\-]{0,80}"#, stage_idx in 0usize..4) {
            let _ = parse_verdict(&raw, Stage::ALL[stage_idx]);
        }
    }
}
