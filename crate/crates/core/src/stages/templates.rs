//! Prompt templates: one per stage, optionally overridden per language.
//!
//! A template file is the prompt body followed by a `=== reply format ===`
//! line and the reply-format instruction. The body may use
//! `{language_name}`, `{spoken_language}` and `{caption_context}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{LanguageCode, Stage};
use crate::digest::json_digest;

pub const PLACEHOLDERS: [&str; 3] = ["language_name", "spoken_language", "caption_context"];
const SEPARATOR: &str = "=== reply format ===";
const CAPTION_OPEN: &str = "<caption>";
const CAPTION_CLOSE: &str = "</caption>";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("{stage} template uses unknown placeholder {{{name}}}")]
    UnknownPlaceholder { stage: Stage, name: String },
    #[error("{stage} template needs {{{name}}} but no value was given")]
    Unresolved { stage: Stage, name: String },
    #[error("{stage} template: {message}")]
    Invalid { stage: Stage, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap())
}

fn caption_tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)</?\s*caption\s*>").unwrap())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PromptTemplate {
    pub stage: Stage,
    pub body: String,
    pub output_schema_hint: String,
}

impl PromptTemplate {
    pub fn new(
        stage: Stage,
        body: impl Into<String>,
        output_schema_hint: impl Into<String>,
    ) -> Result<Self, TemplateError> {
        let tpl = PromptTemplate {
            stage,
            body: body.into(),
            output_schema_hint: output_schema_hint.into(),
        };
        for name in tpl.placeholders() {
            if !PLACEHOLDERS.contains(&name.as_str()) {
                return Err(TemplateError::UnknownPlaceholder { stage, name });
            }
        }
        if tpl.output_schema_hint.trim().is_empty() {
            return Err(TemplateError::Invalid {
                stage,
                message: "reply-format instruction is empty".into(),
            });
        }
        if stage == Stage::Judge && !tpl.placeholders().iter().any(|p| p == "caption_context") {
            return Err(TemplateError::Invalid {
                stage,
                message: "judge template must embed {caption_context}".into(),
            });
        }
        Ok(tpl)
    }

    /// Parses the file form: body, separator line, reply-format instruction.
    pub fn parse(stage: Stage, text: &str) -> Result<Self, TemplateError> {
        let (body, hint) = text.split_once(SEPARATOR).ok_or_else(|| TemplateError::Invalid {
            stage,
            message: format!("missing {SEPARATOR:?} line"),
        })?;
        Self::new(stage, body.trim(), hint.trim())
    }

    /// Placeholder names in order of first use.
    pub fn placeholders(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for cap in placeholder_re().captures_iter(&self.body) {
            let name = cap[1].to_string();
            if !names.contains(&name) {
                names.push(name);
            }
        }
        names
    }
}

/// Wraps a caption in delimiters, neutralizing any delimiter look-alikes
/// inside it so the caption cannot close its own block.
pub fn quote_caption(caption: &str) -> String {
    let escaped = caption_tag_re().replace_all(caption, |c: &regex::Captures<'_>| {
        c[0].replace('<', "&lt;").replace('>', "&gt;")
    });
    format!("{CAPTION_OPEN}\n{escaped}\n{CAPTION_CLOSE}")
}

/// Substitutes every placeholder in one pass and appends the reply-format
/// instruction.
pub fn render_prompt(
    tpl: &PromptTemplate,
    language: &LanguageCode,
    caption_context: Option<&str>,
) -> Result<String, TemplateError> {
    let mut missing = None;
    let body = placeholder_re().replace_all(&tpl.body, |c: &regex::Captures<'_>| match &c[1] {
        "language_name" => language.display_name().to_string(),
        "spoken_language" => language.spoken_language().to_string(),
        "caption_context" => match caption_context {
            Some(caption) => quote_caption(caption),
            None => {
                missing.get_or_insert_with(|| "caption_context".to_string());
                String::new()
            }
        },
        other => {
            missing.get_or_insert_with(|| other.to_string());
            String::new()
        }
    });
    if let Some(name) = missing {
        return Err(TemplateError::Unresolved { stage: tpl.stage, name });
    }
    Ok(format!("{}\n\n{}", body.trim_end(), tpl.output_schema_hint))
}

const BUILTIN: [(Stage, &str); 4] = [
    (Stage::Face, include_str!("../../templates/face.txt")),
    (Stage::Activity, include_str!("../../templates/activity.txt")),
    (Stage::Text, include_str!("../../templates/text.txt")),
    (Stage::Judge, include_str!("../../templates/judge.txt")),
];

/// Per-stage defaults plus per-language overrides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSet {
    defaults: BTreeMap<Stage, PromptTemplate>,
    overrides: BTreeMap<(Stage, String), PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let defaults = BUILTIN
            .iter()
            .map(|(stage, text)| {
                (
                    *stage,
                    PromptTemplate::parse(*stage, text).expect("bundled template is valid"),
                )
            })
            .collect();
        TemplateSet {
            defaults,
            overrides: BTreeMap::new(),
        }
    }

    /// Builtins overlaid with `<stage>.txt` (stage default) and
    /// `<stage>.<iso639_3>.txt` (language override) files from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let io = |e: std::io::Error| TemplateError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        };
        let mut set = Self::builtin();
        for entry in fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(stem) = name.strip_suffix(".txt") else {
                continue;
            };
            let (stage_name, lang) = match stem.split_once('.') {
                Some((s, l)) => (s, Some(l)),
                None => (stem, None),
            };
            let Some(stage) = Stage::ALL.into_iter().find(|s| s.name() == stage_name) else {
                continue;
            };
            let text = fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            let tpl = PromptTemplate::parse(stage, &text)?;
            match lang {
                Some(code) => {
                    LanguageCode::from_code(code).map_err(|e| TemplateError::Invalid {
                        stage,
                        message: format!("{name}: {e}"),
                    })?;
                    set.overrides.insert((stage, code.to_string()), tpl);
                }
                None => {
                    set.defaults.insert(stage, tpl);
                }
            }
        }
        Ok(set)
    }

    pub fn insert_override(&mut self, language: &LanguageCode, tpl: PromptTemplate) {
        self.overrides.insert((tpl.stage, language.code().to_string()), tpl);
    }

    /// The active template for `stage` in `language`.
    pub fn get(&self, stage: Stage, language: &LanguageCode) -> &PromptTemplate {
        self.overrides
            .get(&(stage, language.code().to_string()))
            .unwrap_or_else(|| &self.defaults[&stage])
    }

    /// Digest of every template, for the pipeline config digest.
    pub fn digest(&self) -> String {
        let overrides: Vec<_> = self.overrides.iter().collect();
        json_digest(&(self.defaults.values().collect::<Vec<_>>(), overrides))
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}
