//! The config file and its merge with flags and environment.
//!
//! Precedence, lowest first: config file, command-line flags, environment
//! (`SIGN_CURATOR_WORKERS`, `SIGN_CURATOR_CACHE_DIR`). Relative paths in
//! the file are resolved against the file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sign_curator::gateway::{DecodeParams, GatewayConfig};
use sign_curator::metrics::ScorerConfig;
use sign_curator::video_prep::SamplingConfig;

use crate::CliError;

pub const ENV_WORKERS: &str = "SIGN_CURATOR_WORKERS";
pub const ENV_CACHE_DIR: &str = "SIGN_CURATOR_CACHE_DIR";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSection {
    /// Decoder template with `{input}`, `{timestamps_csv}`, `{outdir}`.
    pub command: Option<String>,
    /// Duration probe template with `{input}`.
    pub probe: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub workers: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub audit: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSource {
    pub handle: String,
    pub language: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSection {
    /// Hashtag table; the bundled one when unset.
    pub hashtags: Option<PathBuf>,
    /// Directory of stored crawl results (`hashtag/<tag>.jsonl`,
    /// `user/<handle>.jsonl`).
    pub crawl_root: Option<PathBuf>,
    /// Languages to query; every language in the table when empty.
    #[serde(default)]
    pub languages: Vec<String>,
    #[serde(default)]
    pub users: Vec<UserSource>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub gateway: Option<GatewayConfig>,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub decode: DecodeParams,
    #[serde(default)]
    pub decoder: DecoderSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub ingest: IngestSection,
    pub scorer: Option<ScorerConfig>,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(CliConfig::default());
        };
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let mut cfg: CliConfig =
            toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(gw) = cfg.gateway.as_mut() {
            resolve(base, &mut gw.cache_dir);
        }
        resolve(base, &mut cfg.pipeline.checkpoint);
        resolve(base, &mut cfg.pipeline.audit);
        resolve(base, &mut cfg.pipeline.templates_dir);
        resolve(base, &mut cfg.ingest.hashtags);
        resolve(base, &mut cfg.ingest.crawl_root);
        Ok(cfg)
    }

    /// Applies flag values, then environment overrides.
    pub fn merge(
        mut self,
        workers_flag: Option<usize>,
        env: &dyn Fn(&str) -> Option<String>,
    ) -> Result<Self, CliError> {
        if let Some(w) = workers_flag {
            self.pipeline.workers = Some(w);
        }
        if let Some(w) = env(ENV_WORKERS) {
            let w = w
                .trim()
                .parse()
                .map_err(|_| CliError::Validation(format!("{ENV_WORKERS}={w:?} is not a number")))?;
            self.pipeline.workers = Some(w);
        }
        if let Some(dir) = env(ENV_CACHE_DIR).filter(|d| !d.is_empty()) {
            if let Some(gw) = self.gateway.as_mut() {
                gw.cache_dir = Some(PathBuf::from(dir));
            }
        }
        if self.pipeline.workers == Some(0) {
            return Err(CliError::Validation("workers must be at least 1".into()));
        }
        Ok(self)
    }

    pub fn gateway(&self) -> Result<&GatewayConfig, CliError> {
        self.gateway
            .as_ref()
            .ok_or_else(|| CliError::Validation("config has no [gateway] section".into()))
    }
}
