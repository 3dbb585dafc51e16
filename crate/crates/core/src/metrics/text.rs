//! Corpus BLEU and chrF with fixed, signature-described configurations.

use std::collections::HashMap;
use std::hash::Hash;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::MetricsError;

pub const BLEU_SIGNATURE: &str = "BLEU|nrefs:1|case:mixed|eff:no|tok:13a|smooth:exp";
pub const CHRF_SIGNATURE: &str = "chrF|nrefs:1|case:mixed|eff:yes|nc:6|nw:0|space:no";

const BLEU_ORDER: usize = 4;
const CHRF_ORDER: usize = 6;
const CHRF_BETA: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "BLEU")]
    Bleu,
    #[serde(rename = "chrF")]
    Chrf,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    pub metric: Metric,
    pub value: f64,
    pub signature: String,
    pub n: usize,
}

fn rules() -> &'static [(Regex, &'static str); 4] {
    static RULES: OnceLock<[(Regex, &'static str); 4]> = OnceLock::new();
    RULES.get_or_init(|| {
        [
            // symbols: {|}~ [\]^_` space!"#$%& ()*+ :;<=>?@ /
            (Regex::new(r"([\{-\~\[-` -\&\(-\+:-@/])").unwrap(), " $1 "),
            (Regex::new(r"([^0-9])([\.,])").unwrap(), "$1 $2 "),
            (Regex::new(r"([\.,])([^0-9])").unwrap(), " $1 $2"),
            (Regex::new(r"([0-9])(\-)").unwrap(), "$1 $2 "),
        ]
    })
}

/// mteval-v13a tokenization. Case is kept.
pub fn tokenize_13a(text: &str) -> Vec<String> {
    let mut line = text.replace("-\n", "").replace('\n', " ");
    if line.contains('&') {
        line = line
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let mut line = format!(" {line} ");
    for (re, rep) in rules() {
        line = re.replace_all(&line, *rep).into_owned();
    }
    line.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts<T: Eq + Hash + Clone>(items: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && items.len() >= n {
        for w in items.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// (clipped matches, hypothesis total, reference total) for one order.
fn order_stats<T: Eq + Hash + Clone>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches = h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
    (
        matches,
        hyp.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

fn check_lengths(hyps: &[String], refs: &[String]) -> Result<(), MetricsError> {
    if hyps.len() != refs.len() {
        return Err(MetricsError::Input(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(MetricsError::Input("empty corpus".into()));
    }
    Ok(())
}

/// Corpus BLEU over 13a tokens with exponential smoothing.
pub fn bleu_corpus(hyps: &[String], refs: &[String]) -> Result<CorpusScore, MetricsError> {
    check_lengths(hyps, refs)?;
    let mut correct = [0usize; BLEU_ORDER];
    let mut total = [0usize; BLEU_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (tokenize_13a(h), tokenize_13a(r));
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=BLEU_ORDER {
            let (m, t, _) = order_stats(&h, &r, n);
            correct[n - 1] += m;
            total[n - 1] += t;
        }
    }

    let mut precisions = [0.0f64; BLEU_ORDER];
    let mut smooth = 1.0;
    for n in 0..BLEU_ORDER {
        if total[n] == 0 {
            break;
        }
        precisions[n] = if correct[n] == 0 {
            smooth *= 2.0;
            1.0 / (smooth * total[n] as f64)
        } else {
            correct[n] as f64 / total[n] as f64
        };
    }

    let value = if precisions.contains(&0.0) {
        0.0
    } else {
        let bp = if hyp_len < ref_len {
            (1.0 - ref_len as f64 / hyp_len as f64).exp()
        } else {
            1.0
        };
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / BLEU_ORDER as f64;
        100.0 * bp * log_mean.exp()
    };
    Ok(CorpusScore {
        metric: Metric::Bleu,
        value,
        signature: BLEU_SIGNATURE.into(),
        n: hyps.len(),
    })
}

/// Corpus chrF: character 1..6-grams with whitespace removed, β = 2.
///
/// Statistics are summed over the corpus per order. An order takes part in
/// the average when either side has n-grams of that length; it scores 0
/// when only one side does.
pub fn chrf_corpus(hyps: &[String], refs: &[String]) -> Result<CorpusScore, MetricsError> {
    check_lengths(hyps, refs)?;
    let mut stats = [(0usize, 0usize, 0usize); CHRF_ORDER];
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<char> = h.chars().filter(|c| !c.is_whitespace()).collect();
        let r: Vec<char> = r.chars().filter(|c| !c.is_whitespace()).collect();
        for (n, acc) in stats.iter_mut().enumerate() {
            let (m, ht, rt) = order_stats(&h, &r, n + 1);
            acc.0 += m;
            acc.1 += ht;
            acc.2 += rt;
        }
    }
    let beta2 = CHRF_BETA * CHRF_BETA;
    let f_scores: Vec<f64> = stats
        .iter()
        .filter(|(_, ht, rt)| ht + rt > 0)
        .map(|&(m, ht, rt)| {
            if ht == 0 || rt == 0 || m == 0 {
                return 0.0;
            }
            let p = m as f64 / ht as f64;
            let r = m as f64 / rt as f64;
            (1.0 + beta2) * p * r / (beta2 * p + r)
        })
        .collect();
    let value = if f_scores.is_empty() {
        0.0
    } else {
        100.0 * f_scores.iter().sum::<f64>() / f_scores.len() as f64
    };
    Ok(CorpusScore {
        metric: Metric::Chrf,
        value,
        signature: CHRF_SIGNATURE.into(),
        n: hyps.len(),
    })
}
