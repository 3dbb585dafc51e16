use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::Duration;

use sign_curator::corpus::{serialize_audit, serialize_manifest, DatasetManifest, ManifestRecord, RejectionReason};
use sign_curator::gateway::Transport;
use sign_curator::testkit::{self, MockBackend, VideoScript};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sign-curator"));
    cmd.env_remove("SIGN_CURATOR_WORKERS")
        .env_remove("SIGN_CURATOR_CACHE_DIR");
    cmd
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let Output { status, stdout, stderr } = cmd.output().unwrap();
    (
        status.code().unwrap_or(-1),
        String::from_utf8_lossy(&stdout).into_owned(),
        String::from_utf8_lossy(&stderr).into_owned(),
    )
}

fn seeded_manifest() -> DatasetManifest {
    let rows = [
        ("ase", 816, 8),
        ("asf", 541, 4),
        ("bfi", 1201, 15),
        ("csl", 218, 2),
        ("fsl", 285, 3),
        ("gsg", 499, 4),
        ("ise", 678, 7),
        ("swl", 562, 6),
    ];
    let mut records = Vec::new();
    for (code, videos, hours) in rows {
        let seconds: u64 = hours * 3600;
        for i in 0..videos {
            // Whole seconds, spread so the language sums exactly.
            let d = seconds / videos + u64::from(i < seconds % videos);
            let r = testkit::accepted(&format!("{code}-{i:04}"), code, d as f64, "hello");
            records.push(ManifestRecord::from_record(&r));
        }
    }
    DatasetManifest::new(records, "digest", testkit::epoch())
}

#[test]
fn stats_reports_the_table_totals() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    std::fs::write(&path, serialize_manifest(&seeded_manifest())).unwrap();
    let json = dir.path().join("stats.json");
    let (code, out, err) = run(bin().args(["stats", "--manifest"]).arg(&path).arg("--out").arg(&json));
    assert_eq!(code, 0, "{err}");
    let last: Vec<&str> = out.lines().last().unwrap().split_whitespace().collect();
    assert_eq!(last, ["Total", "4800", "49"]);
    assert!(out
        .lines()
        .any(|l| l.starts_with("German Sign Language") && l.ends_with(" 4")));
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(stats["total"]["videos"], 4800);
}

fn write_config(dir: &Path, curator_model: &str, judge_model: &str, extra: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        format!(
            "[gateway]\nrate_limit_rps = 0.0\nmax_retries = 1\nbackoff_base_ms = 0\n\
             [gateway.curator]\nbase_url = \"http://127.0.0.1:9/v1\"\nmodel_id = \"{curator_model}\"\n\
             [gateway.judge]\nbase_url = \"http://127.0.0.1:9/v1\"\nmodel_id = \"{judge_model}\"\n{extra}"
        ),
    )
    .unwrap();
    path
}

#[test]
fn run_refuses_a_self_judging_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "same-vl", "same-vl", "[decoder]\ncommand = \"false\"\n");
    let cands = dir.path().join("c.jsonl");
    std::fs::write(&cands, "").unwrap();
    let (code, _, err) = run(bin()
        .arg("--config")
        .arg(&cfg)
        .args(["run", "--manifest"])
        .arg(&cands)
        .arg("--out")
        .arg(dir.path().join("m.json")));
    assert_eq!(code, 1);
    assert!(err.contains("model-separation rule"), "{err}");
    assert!(!dir.path().join("audit.jsonl").exists());
}

#[test]
fn eval_reproduces_the_asl_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut audit = Vec::new();
    let mut gold = String::new();
    let mut push = |n: usize, tag: &str, accept: bool, valid: bool| {
        for i in 0..n {
            let id = format!("{tag}{i}");
            audit.push(if accept {
                testkit::accepted(&id, "ase", 10.0, "hello")
            } else {
                testkit::rejected(&id, "ase", RejectionReason::MisalignedText)
            });
            gold.push_str(&format!("{{\"video_id\":\"{id}\",\"is_valid_pair\":{valid}}}\n"));
        }
    };
    push(75, "tp", true, true);
    push(7, "fp", true, false);
    push(20, "fn", false, true);
    push(50, "tn", false, false);
    let pred = dir.path().join("audit.jsonl");
    let gold_path = dir.path().join("gold.jsonl");
    std::fs::write(&pred, serialize_audit(&audit)).unwrap();
    std::fs::write(&gold_path, gold).unwrap();
    let report = dir.path().join("report.json");
    let (code, out, err) = run(bin()
        .args(["eval", "--pred"])
        .arg(&pred)
        .arg("--gold")
        .arg(&gold_path)
        .arg("--out")
        .arg(&report));
    assert_eq!(code, 0, "{err}");
    let overall = out.lines().find(|l| l.starts_with("overall")).unwrap();
    assert!(
        overall.contains("accuracy 0.82  precision 0.91  recall 0.79"),
        "{overall}"
    );
    assert!(std::fs::read_to_string(report).unwrap().contains("\"tp\": 75"));
}

#[test]
fn eval_fails_on_uncovered_gold_unless_told() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("audit.jsonl");
    let gold = dir.path().join("gold.jsonl");
    std::fs::write(&pred, serialize_audit(&[testkit::accepted("a", "ase", 1.0, "x")])).unwrap();
    std::fs::write(
        &gold,
        "{\"video_id\":\"a\",\"is_valid_pair\":true}\n{\"video_id\":\"b\",\"is_valid_pair\":true}\n",
    )
    .unwrap();
    let (code, _, err) = run(bin().args(["eval", "--pred"]).arg(&pred).arg("--gold").arg(&gold));
    assert_eq!(code, 1, "{err}");
    let (code, out, _) = run(bin()
        .args(["eval", "--missing-as-rejected", "--pred"])
        .arg(&pred)
        .arg("--gold")
        .arg(&gold));
    assert_eq!(code, 0);
    assert!(out.contains("recall 0.50"), "{out}");
}

#[test]
fn export_keeps_only_ids_and_text() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = testkit::accepted("v1", "gsg", 4.0, "Hallo @anna_dgs, mehr auf https://example.com/x");
    r.candidate.description_text = Some("private caption @someone".into());
    let m = DatasetManifest::from_pipeline_records([&r], "d", testkit::epoch());
    let path = dir.path().join("m.json");
    std::fs::write(&path, serialize_manifest(&m)).unwrap();
    let (code, out, err) = run(bin().args(["export", "--manifest"]).arg(&path));
    assert_eq!(code, 0, "{err}");
    let line: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(line["video_id"], "v1");
    assert_eq!(line["language"], "gsg");
    assert!(
        !out.contains('@') && !out.contains("http") && !out.contains("/media/"),
        "{out}"
    );
    assert!(line["text"].as_str().unwrap().starts_with("Hallo"));
}

#[test]
fn config_precedence_is_file_then_flag_then_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a-vl", "b-vl", "[pipeline]\nworkers = 2\n");
    let workers = |out: &str| -> String {
        out.lines()
            .find(|l| l.starts_with("workers"))
            .map(|l| l.split('=').nth(1).unwrap().trim().to_string())
            .unwrap()
    };
    let (code, out, err) = run(bin().arg("--config").arg(&cfg).arg("config"));
    assert_eq!(code, 0, "{err}");
    assert_eq!(workers(&out), "2");
    let (_, out, _) = run(bin().arg("--config").arg(&cfg).args(["config", "--workers", "3"]));
    assert_eq!(workers(&out), "3");
    let (_, out, _) = run(bin()
        .arg("--config")
        .arg(&cfg)
        .args(["config", "--workers", "3"])
        .env("SIGN_CURATOR_WORKERS", "5"));
    assert_eq!(workers(&out), "5");
    let (code, _, _) = run(bin()
        .arg("--config")
        .arg(&cfg)
        .arg("config")
        .env("SIGN_CURATOR_WORKERS", "0"));
    assert_eq!(code, 1);
}

#[test]
fn bad_invocations_exit_one() {
    assert_eq!(run(bin().arg("frobnicate")).0, 1);
    assert_eq!(run(bin().args(["stats", "--manifest", "/nonexistent/m.json"])).0, 1);
    assert_eq!(run(bin().arg("--help")).0, 0);
}

/// Serves the scripted backend over real HTTP: the curator on one port, the
/// judge on another.
fn serve(backend: &MockBackend, upstream: &'static str) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let transport = backend.transport();
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let t = Arc::clone(&transport);
            std::thread::spawn(move || {
                let _ = answer(stream, &*t, upstream);
            });
        }
    });
    format!("http://{addr}/v1")
}

fn answer(stream: TcpStream, transport: &dyn Transport, upstream: &str) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut length = 0;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        if line.trim().is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            length = v.trim().parse().unwrap_or(0);
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body)?;
    let body = String::from_utf8_lossy(&body);
    let url = format!("{upstream}/chat/completions");
    let reply = transport
        .post_json(&url, None, &body, Duration::from_secs(5))
        .expect("mock transport never fails");
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        reply.status,
        reply.body.len(),
        reply.body
    )?;
    stream.flush()
}

const FAKE_DECODER: &str = r#"
import sys, os
src, stamps, out = sys.argv[1], sys.argv[2], sys.argv[3]
index = int(open(src).read().strip())
px = bytes([index & 0xff, (index >> 8) & 0xff, 0x5a])
for i, _ in enumerate(stamps.split(",")):
    with open(os.path.join(out, "frame_%05d.ppm" % i), "wb") as f:
        f.write(b"P6 8 8 255\n" + px * 64)
"#;

fn have_python() -> bool {
    Command::new("python3")
        .arg("--version")
        .output()
        .is_ok_and(|o| o.status.success())
}

#[test]
fn run_then_rerun_over_http_with_a_decoder_process() {
    if !have_python() {
        eprintln!("python3 not found; skipping");
        return;
    }
    let scripts = [
        ("acc-1", VideoScript::pass("Good morning")),
        ("acc-2", VideoScript::pass("See you tomorrow")),
        ("rej-face", VideoScript::face_fail()),
        ("rej-sign", VideoScript::activity_fail()),
        ("rej-text", VideoScript::no_text()),
        ("rej-judge", VideoScript::judge_fail("Unrelated words")),
    ];
    let backend = MockBackend::new(scripts.iter().map(|(id, s)| (*id, s.clone())));
    let curator = serve(&backend, testkit::CURATOR_URL);
    let judge = serve(&backend, testkit::JUDGE_URL);

    let dir = tempfile::tempdir().unwrap();
    let decoder = dir.path().join("decode.py");
    std::fs::write(&decoder, FAKE_DECODER).unwrap();
    let mut crawl = String::new();
    for (i, (id, _)) in scripts.iter().enumerate() {
        let media = dir.path().join(format!("{id}.mp4"));
        std::fs::write(&media, i.to_string()).unwrap();
        crawl.push_str(&format!(
            "{{\"video_id\":\"{id}\",\"language\":\"ase\",\"media_locator\":\"{}\",\"duration_s\":3.0}}\n",
            media.display()
        ));
    }
    let crawl_path = dir.path().join("crawl.jsonl");
    std::fs::write(&crawl_path, crawl).unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(
        &config,
        format!(
            "[gateway]\nrate_limit_rps = 0.0\nmax_retries = 1\nbackoff_base_ms = 0\ncache_dir = \"cache\"\n\
             [gateway.curator]\nbase_url = \"{curator}\"\nmodel_id = \"{}\"\n\
             [gateway.judge]\nbase_url = \"{judge}\"\nmodel_id = \"{}\"\n\
             [decoder]\ncommand = \"python3 {} {{input}} {{timestamps_csv}} {{outdir}}\"\n",
            testkit::CURATOR_MODEL,
            testkit::JUDGE_MODEL,
            decoder.display()
        ),
    )
    .unwrap();

    let cands = dir.path().join("candidates.jsonl");
    let (code, _, err) = run(bin()
        .arg("--config")
        .arg(&config)
        .args(["ingest", "--manifest"])
        .arg(&crawl_path)
        .arg("--out")
        .arg(&cands));
    assert_eq!(code, 0, "{err}");

    let out = dir.path().join("out/manifest.json");
    let run_once = || {
        run(bin()
            .arg("--config")
            .arg(&config)
            .args(["run", "--workers", "3", "--manifest"])
            .arg(&cands)
            .arg("--out")
            .arg(&out))
    };
    let (code, stdout, err) = run_once();
    assert_eq!(code, 0, "{err}");
    assert!(
        stdout.contains("accepted 2 of 6 candidates (4 rejected); 18 model requests"),
        "{stdout}"
    );
    let audit = std::fs::read_to_string(dir.path().join("out/audit.jsonl")).unwrap();
    for reason in ["FaceNotVisible", "NotSigning", "NoText", "MisalignedText"] {
        assert!(audit.contains(reason), "{reason} missing");
    }

    let (code, stdout, err) = run_once();
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("; 0 model requests"), "{stdout}");

    let (code, stdout, err) = run(bin()
        .arg("--config")
        .arg(&config)
        .args(["resume", "--manifest"])
        .arg(&cands)
        .arg("--out")
        .arg(&out));
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("accepted 2 of 6"), "{stdout}");
}

#[test]
fn agreement_skips_videos_without_text() {
    let dir = tempfile::tempdir().unwrap();
    let audit = [
        testkit::accepted("a", "ase", 1.0, "the cat sat on the mat"),
        testkit::accepted("b", "ase", 1.0, "good morning everyone"),
        testkit::rejected("c", "ase", RejectionReason::NoText),
    ];
    let pred = dir.path().join("audit.jsonl");
    let gold = dir.path().join("gold.jsonl");
    std::fs::write(&pred, serialize_audit(&audit)).unwrap();
    std::fs::write(
        &gold,
        "{\"video_id\":\"a\",\"is_valid_pair\":true,\"gold_translation\":\"the cat sat on the mat\"}\n\
         {\"video_id\":\"b\",\"is_valid_pair\":true,\"gold_translation\":\"good morning everyone\"}\n\
         {\"video_id\":\"c\",\"is_valid_pair\":true,\"gold_translation\":\"hello\"}\n",
    )
    .unwrap();
    let (code, out, err) = run(bin().args(["agreement", "--pred"]).arg(&pred).arg("--gold").arg(&gold));
    assert_eq!(code, 0, "{err}");
    assert!(
        out.contains("BLEU 100.00  chrF 100.00  n_scored 2  n_excluded 1"),
        "{out}"
    );
}
