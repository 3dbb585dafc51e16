//! Candidate ingestion: hashtag queries, user crawls and pre-crawled
//! manifests, merged into one deduplicated candidate list.
//!
//! Live platform access sits behind [`CandidateFetcher`]. [`FileFetcher`]
//! is the reference implementation; it replays crawl results stored as
//! crawl-manifest files.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CandidateVideo, LanguageCode, Provenance};
use crate::digest::sha256_hex;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    /// The fetcher failed; callers may retry the source.
    #[error("fetching {source_value}: {message}")]
    Fetch { source_value: String, message: String },
}

impl IngestError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, IngestError::Fetch { .. })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashtagSet {
    #[serde(default)]
    pub english: Vec<String>,
    #[serde(default)]
    pub native: Vec<String>,
}

/// Per-language hashtags, keyed by ISO 639-3 code.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HashtagTable {
    pub languages: BTreeMap<String, HashtagSet>,
}

const DEFAULT_HASHTAGS: &str = include_str!("../config/hashtags.toml");

impl HashtagTable {
    pub fn from_toml(text: &str) -> Result<Self, IngestError> {
        toml::from_str(text).map_err(|e| IngestError::Config(format!("hashtag table: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// The shipped table. It is a starting configuration, not a record of
    /// any particular crawl.
    pub fn default_table() -> Self {
        Self::from_toml(DEFAULT_HASHTAGS).expect("bundled hashtag table parses")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceKind {
    HashtagQuery,
    UserHandle,
    ManifestFile,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrawlSource {
    pub kind: SourceKind,
    pub value: String,
    pub language: LanguageCode,
}

impl CrawlSource {
    pub fn new(kind: SourceKind, value: impl Into<String>, language: LanguageCode) -> Result<Self, IngestError> {
        let value = value.into();
        if value.trim().is_empty() {
            return Err(IngestError::Config("crawl source value is empty".into()));
        }
        Ok(CrawlSource { kind, value, language })
    }

    fn provenance(&self) -> Provenance {
        match self.kind {
            SourceKind::HashtagQuery => Provenance::HashtagQuery(self.value.clone()),
            SourceKind::UserHandle => Provenance::UserHandle(hash_handle(&self.value)),
            SourceKind::ManifestFile => Provenance::ManifestFile(self.value.clone()),
        }
    }
}

/// Stable pseudonym for a user handle. Raw handles never reach disk.
pub fn hash_handle(handle: &str) -> String {
    let normalized = handle.trim().trim_start_matches('@').to_lowercase();
    format!("sha256:{}", sha256_hex(normalized.as_bytes()))
}

/// One hashtag query per distinct hashtag of `language`, English tags first,
/// table order otherwise. Duplicates are dropped case-insensitively.
pub fn build_queries(language: &LanguageCode, table: &HashtagTable) -> Result<Vec<CrawlSource>, IngestError> {
    let set = table
        .languages
        .get(language.code())
        .ok_or_else(|| IngestError::Config(format!("no hashtags configured for {language}")))?;
    if !set.english.iter().any(|h| !h.trim().is_empty()) {
        return Err(IngestError::Config(format!(
            "{language}: at least one English hashtag is required"
        )));
    }
    if !set.native.iter().any(|h| !h.trim().is_empty()) {
        return Err(IngestError::Config(format!(
            "{language}: at least one native-language hashtag is required"
        )));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for tag in set.english.iter().chain(&set.native) {
        let tag = tag.trim().trim_start_matches('#');
        if tag.is_empty() || !seen.insert(tag.to_lowercase()) {
            continue;
        }
        out.push(CrawlSource::new(SourceKind::HashtagQuery, tag, language.clone())?);
    }
    Ok(out)
}

/// One line of a crawl manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrawlEntry {
    pub video_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<LanguageCode>,
    pub media_locator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description_text: Option<String>,
}

/// Source of crawl results for hashtag and user sources.
pub trait CandidateFetcher: Send + Sync {
    fn fetch(&self, source: &CrawlSource) -> Result<Vec<CrawlEntry>, IngestError>;
}

/// Replays crawl results from `<root>/hashtag/<tag>.jsonl` and
/// `<root>/user/<handle>.jsonl`.
#[derive(Clone, Debug)]
pub struct FileFetcher {
    root: PathBuf,
}

impl FileFetcher {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FileFetcher { root: root.into() }
    }
}

impl CandidateFetcher for FileFetcher {
    fn fetch(&self, source: &CrawlSource) -> Result<Vec<CrawlEntry>, IngestError> {
        let dir = match source.kind {
            SourceKind::HashtagQuery => "hashtag",
            SourceKind::UserHandle => "user",
            SourceKind::ManifestFile => {
                return Err(IngestError::Config(
                    "manifest files are read directly, not fetched".into(),
                ))
            }
        };
        let path = self.root.join(dir).join(format!("{}.jsonl", source.value));
        let text = fs::read_to_string(&path).map_err(|e| IngestError::Fetch {
            source_value: source.value.clone(),
            message: format!("{}: {e}", path.display()),
        })?;
        parse_crawl_entries(&text, &path)
    }
}

/// Parses a crawl manifest. Any malformed line fails the whole file.
pub fn parse_crawl_entries(text: &str, path: &Path) -> Result<Vec<CrawlEntry>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| IngestError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let entry: CrawlEntry = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if entry.video_id.is_empty() {
            return Err(bad("video_id is empty".into()));
        }
        if entry.media_locator.is_empty() {
            return Err(bad("media_locator is empty".into()));
        }
        if let Some(d) = entry.duration_s {
            if !d.is_finite() || d < 0.0 {
                return Err(bad(format!("duration_s {d} is not a nonnegative number")));
            }
        }
        out.push(entry);
    }
    Ok(out)
}

fn read_manifest_file(path: &Path) -> Result<Vec<CrawlEntry>, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_crawl_entries(&text, path)
}

/// Candidates for one source, all stamped with its provenance and language.
///
/// For manifest files, a line may name its own language only if it agrees
/// with the source's.
pub fn load_crawl_source(
    source: &CrawlSource,
    fetcher: &dyn CandidateFetcher,
    fetched_at: DateTime<Utc>,
) -> Result<Vec<CandidateVideo>, IngestError> {
    let entries = match source.kind {
        SourceKind::ManifestFile => read_manifest_file(Path::new(&source.value))?,
        _ => fetcher.fetch(source)?,
    };
    let provenance = source.provenance();
    entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            if let Some(lang) = &e.language {
                if lang != &source.language {
                    return Err(IngestError::Parse {
                        path: PathBuf::from(&source.value),
                        line: i + 1,
                        message: format!("language {lang} disagrees with source language {}", source.language),
                    });
                }
            }
            Ok(to_candidate(e, source.language.clone(), provenance.clone(), fetched_at))
        })
        .collect()
}

/// Reads a mixed-language crawl manifest where every line names its language.
pub fn read_crawl_manifest(path: &Path, fetched_at: DateTime<Utc>) -> Result<Vec<CandidateVideo>, IngestError> {
    let provenance = Provenance::ManifestFile(path.display().to_string());
    read_manifest_file(path)?
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let language = e.language.clone().ok_or_else(|| IngestError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "missing language".into(),
            })?;
            Ok(to_candidate(e, language, provenance.clone(), fetched_at))
        })
        .collect()
}

fn to_candidate(
    e: CrawlEntry,
    language: LanguageCode,
    source: Provenance,
    fetched_at: DateTime<Utc>,
) -> CandidateVideo {
    CandidateVideo {
        video_id: e.video_id,
        source,
        language,
        duration_s: e.duration_s.unwrap_or(0.0),
        media_locator: e.media_locator,
        description_text: e.description_text,
        fetched_at,
    }
}

/// Keeps the first candidate seen for each `video_id`, in first-seen order.
pub fn dedup_candidates(candidates: Vec<CandidateVideo>) -> Vec<CandidateVideo> {
    let mut seen = HashSet::new();
    candidates
        .into_iter()
        .filter(|c| seen.insert(c.video_id.clone()))
        .collect()
}

/// Loads every source with up to `workers` concurrent fetches, then merges
/// the results in source order and deduplicates.
pub fn ingest_sources(
    sources: &[CrawlSource],
    fetcher: &dyn CandidateFetcher,
    workers: usize,
    fetched_at: DateTime<Utc>,
) -> Result<Vec<CandidateVideo>, IngestError> {
    let workers = workers.max(1);
    let mut results: Vec<Option<Result<Vec<CandidateVideo>, IngestError>>> = (0..sources.len()).map(|_| None).collect();
    for (chunk_sources, chunk_results) in sources.chunks(workers).zip(results.chunks_mut(workers)) {
        std::thread::scope(|scope| {
            for (source, slot) in chunk_sources.iter().zip(chunk_results.iter_mut()) {
                scope.spawn(move || *slot = Some(load_crawl_source(source, fetcher, fetched_at)));
            }
        });
    }
    let mut merged = Vec::new();
    for r in results {
        merged.extend(r.expect("every source was loaded")?);
    }
    Ok(dedup_candidates(merged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::{candidate, epoch};
    use proptest::prelude::*;
    use std::io::Write;

    fn gsg() -> LanguageCode {
        LanguageCode::from_code("gsg").unwrap()
    }

    fn table(english: &[&str], native: &[&str]) -> HashtagTable {
        let mut t = HashtagTable::default();
        t.languages.insert(
            "gsg".into(),
            HashtagSet {
                english: english.iter().map(|s| s.to_string()).collect(),
                native: native.iter().map(|s| s.to_string()).collect(),
            },
        );
        t
    }

    #[test]
    fn english_and_native_hashtags_become_two_queries() {
        let queries = build_queries(&gsg(), &table(&["Germansignlanguage"], &["Gebärdensprache"])).unwrap();
        let values: Vec<_> = queries.iter().map(|q| q.value.as_str()).collect();
        assert_eq!(values, ["Germansignlanguage", "Gebärdensprache"]);
        assert!(queries
            .iter()
            .all(|q| q.kind == SourceKind::HashtagQuery && q.language == gsg()));
    }

    #[test]
    fn empty_native_list_is_a_config_error() {
        let err = build_queries(&gsg(), &table(&["Germansignlanguage"], &[])).unwrap_err();
        assert!(matches!(err, IngestError::Config(_)));
        let err = build_queries(&LanguageCode::from_code("ase").unwrap(), &table(&["a"], &["b"])).unwrap_err();
        assert!(matches!(err, IngestError::Config(_)));
    }

    #[test]
    fn duplicate_hashtags_collapse_case_insensitively() {
        let queries = build_queries(
            &gsg(),
            &table(&["DGS", "dgs", "Germansignlanguage"], &["Gebärdensprache", "#DGS"]),
        )
        .unwrap();
        let values: Vec<_> = queries.iter().map(|q| q.value.as_str()).collect();
        assert_eq!(values, ["DGS", "Germansignlanguage", "Gebärdensprache"]);
    }

    #[test]
    fn default_table_covers_builtin_languages() {
        let t = HashtagTable::default_table();
        for lang in LanguageCode::builtins() {
            assert!(!build_queries(&lang, &t).unwrap().is_empty(), "{lang}");
        }
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    struct NoFetch;
    impl CandidateFetcher for NoFetch {
        fn fetch(&self, _: &CrawlSource) -> Result<Vec<CrawlEntry>, IngestError> {
            panic!("manifest sources must not hit the fetcher")
        }
    }

    #[test]
    fn manifest_file_with_three_lines() {
        let f = write_lines(&[
            r#"{"video_id":"1","language":"gsg","media_locator":"a.mp4","duration_s":3.5}"#,
            r#"{"video_id":"2","media_locator":"b.mp4"}"#,
            r##"{"video_id":"3","language":"gsg","media_locator":"c.mp4","description_text":"#dgs"}"##,
        ]);
        let src = CrawlSource::new(SourceKind::ManifestFile, f.path().to_str().unwrap(), gsg()).unwrap();
        let got = load_crawl_source(&src, &NoFetch, epoch()).unwrap();
        assert_eq!(got.len(), 3);
        assert!(got
            .iter()
            .all(|c| c.language == gsg() && matches!(c.source, Provenance::ManifestFile(_))));
        assert_eq!(got[0].duration_s, 3.5);
    }

    #[test]
    fn malformed_line_fails_whole_manifest() {
        let f = write_lines(&[
            r#"{"video_id":"1","media_locator":"a.mp4"}"#,
            r#"{"video_id":"2","media_locator": }"#,
            r#"{"video_id":"3","media_locator":"c.mp4"}"#,
        ]);
        let src = CrawlSource::new(SourceKind::ManifestFile, f.path().to_str().unwrap(), gsg()).unwrap();
        match load_crawl_source(&src, &NoFetch, epoch()) {
            Err(IngestError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let src = CrawlSource::new(SourceKind::ManifestFile, "/nonexistent/crawl.jsonl", gsg()).unwrap();
        let err = load_crawl_source(&src, &NoFetch, epoch()).unwrap_err();
        assert!(matches!(err, IngestError::Io { .. }));
        assert!(!err.is_retryable());
    }

    struct Stub;
    impl CandidateFetcher for Stub {
        fn fetch(&self, source: &CrawlSource) -> Result<Vec<CrawlEntry>, IngestError> {
            if source.value == "down" {
                return Err(IngestError::Fetch {
                    source_value: source.value.clone(),
                    message: "503".into(),
                });
            }
            Ok(["111", "222"]
                .iter()
                .map(|id| CrawlEntry {
                    video_id: id.to_string(),
                    language: None,
                    media_locator: format!("https://example.org/{id}"),
                    duration_s: Some(7.0),
                    description_text: None,
                })
                .collect())
        }
    }

    #[test]
    fn hashtag_query_through_stub_fetcher() {
        let src = CrawlSource::new(SourceKind::HashtagQuery, "Gebärdensprache", gsg()).unwrap();
        let got = load_crawl_source(&src, &Stub, epoch()).unwrap();
        assert_eq!(got.len(), 2);
        assert!(got
            .iter()
            .all(|c| c.source == Provenance::HashtagQuery("Gebärdensprache".into())));
        let down = CrawlSource::new(SourceKind::HashtagQuery, "down", gsg()).unwrap();
        assert!(load_crawl_source(&down, &Stub, epoch()).unwrap_err().is_retryable());
    }

    #[test]
    fn user_handles_are_hashed() {
        let src = CrawlSource::new(SourceKind::UserHandle, "@SomeSigner", gsg()).unwrap();
        let got = load_crawl_source(&src, &Stub, epoch()).unwrap();
        let json = serde_json::to_string(&got).unwrap();
        assert!(!json.to_lowercase().contains("somesigner"));
        assert_eq!(got[0].source, Provenance::UserHandle(hash_handle("somesigner")));
    }

    #[test]
    fn dedup_basics() {
        let a = candidate("A", "ase", 1.0);
        let b = candidate("B", "ase", 1.0);
        let ids: Vec<_> = dedup_candidates(vec![a.clone(), b, a])
            .into_iter()
            .map(|c| c.video_id)
            .collect();
        assert_eq!(ids, ["A", "B"]);
        assert!(dedup_candidates(vec![]).is_empty());
    }

    #[test]
    fn dedup_keeps_earliest_provenance() {
        let mut from_tag = candidate("X", "gsg", 1.0);
        from_tag.source = Provenance::HashtagQuery("DGS".into());
        let mut from_user = candidate("X", "gsg", 1.0);
        from_user.source = Provenance::UserHandle(hash_handle("u"));
        let out = dedup_candidates(vec![from_tag.clone(), from_user]);
        assert_eq!(out, vec![from_tag]);
    }

    #[test]
    fn ingest_sources_merges_in_source_order() {
        let sources: Vec<_> = ["a", "b", "c"]
            .iter()
            .map(|t| CrawlSource::new(SourceKind::HashtagQuery, *t, gsg()).unwrap())
            .collect();
        let got = ingest_sources(&sources, &Stub, 2, epoch()).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].source, Provenance::HashtagQuery("a".into()));
    }

    #[test]
    fn file_fetcher_reads_per_query_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("hashtag")).unwrap();
        fs::write(
            dir.path().join("hashtag/DGS.jsonl"),
            "{\"video_id\":\"9\",\"media_locator\":\"x\"}\n",
        )
        .unwrap();
        let fetcher = FileFetcher::new(dir.path());
        let src = CrawlSource::new(SourceKind::HashtagQuery, "DGS", gsg()).unwrap();
        assert_eq!(load_crawl_source(&src, &fetcher, epoch()).unwrap().len(), 1);
        let missing = CrawlSource::new(SourceKind::UserHandle, "nobody", gsg()).unwrap();
        assert!(load_crawl_source(&missing, &fetcher, epoch())
            .unwrap_err()
            .is_retryable());
    }

    proptest! {
        #[test]
        fn dedup_is_idempotent_and_counts_distinct_ids(ids in proptest::collection::vec(0u8..12, 0..40)) {
            let cands: Vec<_> = ids.iter().map(|i| candidate(&i.to_string(), "ase", 1.0)).collect();
            let once = dedup_candidates(cands);
            let distinct: HashSet<_> = ids.iter().collect();
            prop_assert_eq!(once.len(), distinct.len());
            prop_assert_eq!(dedup_candidates(once.clone()), once);
        }
    }
}
