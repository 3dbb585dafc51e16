use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use chrono::Utc;
use regex::Regex;
use serde::Serialize;
use serde_json::json;

use sign_curator::corpus::{
    parse_audit, parse_gold_labels, parse_json_lines, parse_manifest, serialize_manifest, CandidateVideo,
    DatasetManifest, LanguageCode, PipelineRecord,
};
use sign_curator::gateway::{validate_model_separation, Gateway, HttpTransport};
use sign_curator::ingestion::{
    build_queries, dedup_candidates, ingest_sources, read_crawl_manifest, CrawlSource, FileFetcher, HashtagTable,
    SourceKind,
};
use sign_curator::metrics::{
    agreement_report, dataset_stats, evaluate, extractions_by_language, format_hours, AgreementReport,
    ClassificationBlock, CoveragePolicy, EvalOptions, ExternalScorer, MetricsError,
};
use sign_curator::pipeline::{Checkpoint, Pipeline, PipelineConfig, PipelineError, Progress, RunControl};
use sign_curator::stages::TemplateSet;
use sign_curator::video_prep::{DecoderCommand, DecoderFrameSource};

use crate::config::CliConfig;
use crate::{AgreementArgs, Cli, CliError, Command, EvalArgs, ExportArgs, IngestArgs, RunArgs, StatsArgs};

type Result<T> = std::result::Result<T, CliError>;

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn env(key: &str) -> Option<String> {
    std::env::var(key).ok()
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let file = CliConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest(a) => {
            let cfg = file.merge(a.workers, &env)?;
            ingest(&cfg, &a)
        }
        Command::Run(a) => {
            let cfg = file.merge(a.workers, &env)?;
            run(&cfg, &a, false)
        }
        Command::Resume(a) => {
            let cfg = file.merge(a.workers, &env)?;
            run(&cfg, &a, true)
        }
        Command::Eval(a) => eval(&a),
        Command::Agreement(a) => agreement(&file.merge(None, &env)?, &a),
        Command::Stats(a) => stats(&a),
        Command::Export(a) => export(&a),
        Command::Config(a) => {
            let cfg = file.merge(a.workers, &env)?;
            let text = toml::to_string_pretty(&cfg).map_err(runtime)?;
            print!("{text}");
            Ok(())
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    write(path, &text)
}

fn language(code: &str) -> Result<LanguageCode> {
    LanguageCode::from_code(code).map_err(invalid)
}

fn ingest(cfg: &CliConfig, a: &IngestArgs) -> Result<()> {
    let fetched_at = Utc::now();
    let wanted: Vec<LanguageCode> = if a.language.is_empty() {
        cfg.ingest
            .languages
            .iter()
            .map(|c| language(c))
            .collect::<Result<_>>()?
    } else {
        a.language.iter().map(|c| language(c)).collect::<Result<_>>()?
    };
    let keep = |c: &CandidateVideo| wanted.is_empty() || wanted.contains(&c.language);

    let mut candidates = Vec::new();
    for path in &a.manifest {
        let found = read_crawl_manifest(path, fetched_at).map_err(invalid)?;
        candidates.extend(found.into_iter().filter(|c| keep(c)));
    }

    if let Some(root) = &cfg.ingest.crawl_root {
        let table = match &cfg.ingest.hashtags {
            Some(p) => HashtagTable::load(p).map_err(invalid)?,
            None => HashtagTable::default_table(),
        };
        let languages: Vec<LanguageCode> = if wanted.is_empty() {
            table.languages.keys().map(|c| language(c)).collect::<Result<_>>()?
        } else {
            wanted.clone()
        };
        let mut sources = Vec::new();
        for lang in &languages {
            sources.extend(build_queries(lang, &table).map_err(invalid)?);
        }
        for user in &cfg.ingest.users {
            let lang = language(&user.language)?;
            if wanted.is_empty() || wanted.contains(&lang) {
                sources.push(CrawlSource::new(SourceKind::UserHandle, user.handle.clone(), lang).map_err(invalid)?);
            }
        }
        let fetcher = FileFetcher::new(root);
        let workers = cfg.pipeline.workers.unwrap_or(4);
        candidates.extend(ingest_sources(&sources, &fetcher, workers, fetched_at).map_err(runtime)?);
    } else if a.manifest.is_empty() {
        return Err(invalid("nothing to ingest: pass --manifest or set ingest.crawl_root"));
    }

    let candidates = dedup_candidates(candidates);
    let mut text = String::new();
    for c in &candidates {
        text.push_str(&serde_json::to_string(c).map_err(runtime)?);
        text.push('\n');
    }
    write(&a.out, &text)?;
    eprintln!("{} candidates written to {}", candidates.len(), a.out.display());
    Ok(())
}

fn pipeline_error(e: PipelineError) -> CliError {
    match e {
        PipelineError::Config(_) | PipelineError::ConfigMismatch { .. } | PipelineError::Checkpoint { .. } => {
            invalid(e)
        }
        _ => runtime(e),
    }
}

fn run(cfg: &CliConfig, a: &RunArgs, resume: bool) -> Result<()> {
    let gateway_cfg = cfg.gateway()?;
    validate_model_separation(gateway_cfg).map_err(invalid)?;

    let templates = match &cfg.pipeline.templates_dir {
        Some(dir) => TemplateSet::load_dir(dir).map_err(invalid)?,
        None => TemplateSet::builtin(),
    };
    let out_dir = a
        .out
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut pcfg = PipelineConfig::new(gateway_cfg.clone(), &templates);
    pcfg.sampling = cfg.sampling;
    pcfg.decode = cfg.decode;
    pcfg.workers = cfg.pipeline.workers.unwrap_or(pcfg.workers);
    pcfg.checkpoint_path = Some(
        cfg.pipeline
            .checkpoint
            .clone()
            .unwrap_or_else(|| out_dir.join("checkpoint.json")),
    );
    pcfg.audit_path = Some(
        cfg.pipeline
            .audit
            .clone()
            .unwrap_or_else(|| out_dir.join("audit.jsonl")),
    );
    pcfg.validate().map_err(pipeline_error)?;

    let command = cfg
        .decoder
        .command
        .as_deref()
        .ok_or_else(|| invalid("config [decoder] command is required for run/resume"))?;
    let frames = DecoderFrameSource {
        decoder: DecoderCommand::new(command).map_err(invalid)?,
        probe: cfg
            .decoder
            .probe
            .as_deref()
            .map(DecoderCommand::new)
            .transpose()
            .map_err(invalid)?,
    };

    let mut candidates: Vec<CandidateVideo> = parse_json_lines(&read(&a.manifest)?).map_err(invalid)?;
    if let Some(code) = &a.language {
        let lang = language(code)?;
        candidates.retain(|c| c.language == lang);
    }

    let gateway = Gateway::new(gateway_cfg, Arc::new(HttpTransport::new())).map_err(invalid)?;
    let pipeline = Pipeline::new(pcfg.clone(), &gateway, &templates, &frames).map_err(pipeline_error)?;
    let progress = |p: &Progress<'_>| {
        tracing::info!(done = p.done, total = p.total, video_id = p.record.video_id(), state = ?p.record.state, "terminal");
    };
    let ctl = RunControl {
        progress: Some(&progress),
        ..Default::default()
    };

    let output = if resume {
        let path = pcfg.checkpoint_path.as_deref().expect("set above");
        if !path.exists() {
            return Err(invalid(format!("no checkpoint at {}", path.display())));
        }
        let checkpoint = Checkpoint::load(path).map_err(pipeline_error)?;
        pipeline.resume(&checkpoint, candidates, &ctl)
    } else {
        pipeline.run(candidates, &ctl)
    }
    .map_err(pipeline_error)?;

    write(&a.out, &serialize_manifest(&output.manifest))?;
    let rejected = output.audit.len() - output.manifest.records.len();
    println!(
        "accepted {} of {} candidates ({} rejected); {} model requests",
        output.manifest.records.len(),
        output.audit.len(),
        rejected,
        gateway.network_calls()
    );
    println!("manifest: {}", a.out.display());
    println!("audit: {}", pcfg.audit_path.as_deref().expect("set above").display());
    Ok(())
}

fn load_audit(path: &Path) -> Result<Vec<PipelineRecord>> {
    parse_audit(&read(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "n/a".into())
}

fn print_block(name: &str, b: &ClassificationBlock) {
    let cm = &b.confusion_matrix;
    println!(
        "{name:<8} n={:<5} tp={} fp={} fn={} tn={}  accuracy {}  precision {}  recall {}",
        cm.total(),
        cm.tp,
        cm.fp,
        cm.r#fn,
        cm.tn,
        fmt_metric(b.accuracy),
        fmt_metric(b.precision),
        fmt_metric(b.recall)
    );
}

fn eval(a: &EvalArgs) -> Result<()> {
    let mut audit = load_audit(&a.pred)?;
    let mut gold = parse_gold_labels(&read(&a.gold)?).map_err(invalid)?;
    if let Some(code) = &a.language {
        let lang = language(code)?;
        audit.retain(|r| r.candidate.language == lang);
        let ids: std::collections::HashSet<&str> = audit.iter().map(|r| r.video_id()).collect();
        gold.retain(|g| ids.contains(g.video_id.as_str()));
    }
    let opts = EvalOptions {
        policy: if a.missing_as_rejected {
            CoveragePolicy::MissingAsRejected
        } else {
            CoveragePolicy::Strict
        },
        include_processing_errors: a.include_processing_errors,
    };
    let report = evaluate(&audit, &gold, opts).map_err(|e| match e {
        MetricsError::Coverage { .. } | MetricsError::Input(_) => {
            invalid(format!("{e} (use --missing-as-rejected to count them as rejections)"))
        }
        other => runtime(other),
    })?;
    if report.overall.confusion_matrix.total() == 0 {
        return Err(invalid("no gold labels left to score"));
    }
    for (lang, block) in &report.per_language {
        print_block(lang, block);
    }
    print_block("overall", &report.overall);
    if report.n_processing_errors_excluded > 0 {
        println!(
            "{} gold ids skipped: processing errors",
            report.n_processing_errors_excluded
        );
    }
    if report.n_missing > 0 {
        println!(
            "{} gold ids missing from the audit, counted as rejections",
            report.n_missing
        );
    }
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AgreementDocument {
    per_language: BTreeMap<String, AgreementReport>,
    /// Languages with gold translations but nothing scorable.
    empty: Vec<String>,
}

fn print_agreement(name: &str, r: &AgreementReport) {
    let external = r
        .external
        .as_ref()
        .map(|e| format!("  {} {:.2}", e.signature, e.value))
        .unwrap_or_default();
    println!(
        "{name:<8} BLEU {:.2}  chrF {:.2}{external}  n_scored {}  n_excluded {}",
        r.bleu.value, r.chrf.value, r.n_scored, r.n_excluded
    );
}

fn agreement(cfg: &CliConfig, a: &AgreementArgs) -> Result<()> {
    let audit = load_audit(&a.pred)?;
    let gold = parse_gold_labels(&read(&a.gold)?).map_err(invalid)?;
    let translations: BTreeMap<&str, &str> = gold
        .iter()
        .filter_map(|g| g.gold_translation.as_deref().map(|t| (g.video_id.as_str(), t)))
        .collect();
    if translations.is_empty() {
        return Err(invalid("gold file has no gold_translation entries"));
    }
    let filter = a.language.as_deref().map(language).transpose()?;
    let scorer = cfg
        .scorer
        .clone()
        .map(|s| ExternalScorer::new(s, Arc::new(HttpTransport::new())));

    let mut doc = AgreementDocument {
        per_language: BTreeMap::new(),
        empty: Vec::new(),
    };
    for (lang, extractions) in extractions_by_language(&audit) {
        if filter.as_ref().is_some_and(|f| f.code() != lang) {
            continue;
        }
        let gold_here: BTreeMap<String, String> = extractions
            .keys()
            .filter_map(|id| translations.get(id.as_str()).map(|t| (id.clone(), t.to_string())))
            .collect();
        if gold_here.is_empty() {
            continue;
        }
        match agreement_report(&extractions, &gold_here, scorer.as_ref()) {
            Ok(r) => {
                print_agreement(&lang, &r);
                doc.per_language.insert(lang, r);
            }
            Err(MetricsError::EmptyReport) => {
                println!("{lang:<8} no scorable pairs ({} gold translations)", gold_here.len());
                doc.empty.push(lang);
            }
            Err(e) => return Err(runtime(e)),
        }
    }
    if doc.per_language.is_empty() {
        return Err(invalid("no scorable pairs: no extraction matches a gold translation"));
    }
    if let Some(out) = &a.out {
        write_json(out, &doc)?;
    }
    Ok(())
}

fn load_manifest(path: &Path, lang: Option<&str>) -> Result<DatasetManifest> {
    let m = parse_manifest(&read(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    match lang {
        None => Ok(m),
        Some(code) => {
            let lang = language(code)?;
            let records = m.records.into_iter().filter(|r| r.language == lang).collect();
            Ok(DatasetManifest::new(records, m.pipeline_config_digest, m.created_at))
        }
    }
}

fn stats(a: &StatsArgs) -> Result<()> {
    let m = load_manifest(&a.manifest, a.language.as_deref())?;
    let s = dataset_stats(&m);
    print!("{}", s.render_table());
    if let Some(out) = &a.out {
        write_json(out, &s)?;
    }
    tracing::debug!(total_hours = %format_hours(s.total.hours), "stats");
    Ok(())
}

fn handle_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:[A-Za-z][A-Za-z0-9+.\-]*://|www\.)\S+|@[\p{L}\p{N}_.]+").unwrap())
}

/// Removes user handles and links from released text.
pub fn scrub(text: &str) -> String {
    handle_re()
        .replace_all(text, "")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn export(a: &ExportArgs) -> Result<()> {
    let m = load_manifest(&a.manifest, a.language.as_deref())?;
    let mut text = String::new();
    for r in &m.records {
        let line = json!({
            "video_id": r.video_id,
            "language": r.language.code(),
            "text": scrub(&r.extracted_text),
            "text_source": r.text_source,
        });
        text.push_str(&line.to_string());
        text.push('\n');
    }
    match &a.out {
        Some(path) => write(path, &text),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(runtime),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scrub_drops_handles_and_links() {
        assert_eq!(scrub("Guten Morgen @anna.dgs"), "Guten Morgen");
        assert_eq!(scrub("see https://example.com/v/123 today"), "see today");
        assert_eq!(scrub("mail me at a@b"), "mail me at a");
        assert_eq!(scrub("plain text"), "plain text");
    }
}
