//! Client for an external learned-metric service.
//!
//! Wire contract: `POST <base>/score` with
//! `{"pairs": [{"hypothesis": …, "reference": …}]}`, answered by
//! `{"scores": [...]}` in the same order.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::MetricsError;
use crate::gateway::Transport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub base_url: String,
    /// Metric name reported alongside the mean score.
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

fn default_name() -> String {
    "external".into()
}

fn default_batch() -> usize {
    64
}

fn default_timeout() -> f64 {
    60.0
}

impl ScorerConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        ScorerConfig {
            base_url: base_url.into(),
            name: default_name(),
            batch_size: default_batch(),
            timeout_s: default_timeout(),
        }
    }
}

pub struct ExternalScorer {
    cfg: ScorerConfig,
    transport: Arc<dyn Transport>,
}

#[derive(Deserialize)]
struct ScoreReply {
    scores: Vec<f64>,
}

impl ExternalScorer {
    pub fn new(cfg: ScorerConfig, transport: Arc<dyn Transport>) -> Self {
        ExternalScorer { cfg, transport }
    }

    pub fn name(&self) -> &str {
        &self.cfg.name
    }

    fn url(&self) -> String {
        format!("{}/score", self.cfg.base_url.trim_end_matches('/'))
    }

    /// One score per pair, in input order. Any transport or protocol
    /// failure means the feature is unavailable.
    pub fn score(&self, pairs: &[(String, String)]) -> Result<Vec<f64>, MetricsError> {
        let unavailable = |msg: String| MetricsError::FeatureUnavailable(format!("{}: {msg}", self.cfg.name));
        let timeout = Duration::from_secs_f64(self.cfg.timeout_s);
        let mut scores = Vec::with_capacity(pairs.len());
        for batch in pairs.chunks(self.cfg.batch_size.max(1)) {
            let body = json!({
                "pairs": batch
                    .iter()
                    .map(|(h, r)| json!({"hypothesis": h, "reference": r}))
                    .collect::<Vec<_>>(),
            })
            .to_string();
            let reply = self
                .transport
                .post_json(&self.url(), None, &body, timeout)
                .map_err(|e| unavailable(e.to_string()))?;
            if !reply.is_success() {
                return Err(unavailable(format!("HTTP {}", reply.status)));
            }
            let parsed: ScoreReply =
                serde_json::from_str(&reply.body).map_err(|e| unavailable(format!("bad reply: {e}")))?;
            if parsed.scores.len() != batch.len() {
                return Err(unavailable(format!(
                    "{} scores for {} pairs",
                    parsed.scores.len(),
                    batch.len()
                )));
            }
            scores.extend(parsed.scores);
        }
        Ok(scores)
    }
}

/// Scores `pairs` with `scorer`.
pub fn score_external(pairs: &[(String, String)], scorer: &ExternalScorer) -> Result<Vec<f64>, MetricsError> {
    scorer.score(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::MockTransport;
    use crate::gateway::HttpReply;

    fn pairs(n: usize) -> Vec<(String, String)> {
        (0..n).map(|i| (format!("h{i}"), format!("r{i}"))).collect()
    }

    #[test]
    fn stub_scores_in_order_across_batches() {
        let t = Arc::new(MockTransport::new(|url, body| {
            assert!(url.ends_with("/score"));
            let v: serde_json::Value = serde_json::from_str(body).unwrap();
            let scores: Vec<f64> = v["pairs"]
                .as_array()
                .unwrap()
                .iter()
                .map(|p| p["hypothesis"].as_str().unwrap()[1..].parse::<f64>().unwrap() / 10.0)
                .collect();
            HttpReply::ok(json!({ "scores": scores }).to_string())
        }));
        let mut cfg = ScorerConfig::new("http://scorer.test/");
        cfg.batch_size = 2;
        let scorer = ExternalScorer::new(cfg, t.clone());
        assert_eq!(score_external(&pairs(5), &scorer).unwrap(), [0.0, 0.1, 0.2, 0.3, 0.4]);
        assert_eq!(t.requests().len(), 3);
    }

    #[test]
    fn constant_stub_and_empty_input() {
        let t = Arc::new(MockTransport::new(|_, body| {
            let n = serde_json::from_str::<serde_json::Value>(body).unwrap()["pairs"]
                .as_array()
                .unwrap()
                .len();
            HttpReply::ok(json!({ "scores": vec![0.5; n] }).to_string())
        }));
        let scorer = ExternalScorer::new(ScorerConfig::new("http://scorer.test"), t.clone());
        assert_eq!(scorer.score(&pairs(3)).unwrap(), [0.5; 3]);
        assert!(scorer.score(&[]).unwrap().is_empty());
        assert_eq!(t.requests().len(), 1);
    }

    #[test]
    fn server_error_is_unavailable() {
        let t = Arc::new(MockTransport::new(|_, _| HttpReply::status(500, "boom")));
        let scorer = ExternalScorer::new(ScorerConfig::new("http://scorer.test"), t);
        assert!(matches!(
            scorer.score(&pairs(1)),
            Err(MetricsError::FeatureUnavailable(_))
        ));
    }
}
