//! Every reply in the mock corpus parses to a verdict or a typed error.

use serde::Deserialize;
use sign_curator::corpus::{parse_json_lines, Stage};
use sign_curator::stages::{parse_verdict, ParseError};

#[derive(Deserialize)]
struct Fixture {
    stage: String,
    raw: String,
    expect: String,
}

#[test]
fn parse_verdict_is_total_over_the_reply_corpus() {
    let fixtures: Vec<Fixture> = parse_json_lines(include_str!("fixtures/mock_replies.jsonl")).unwrap();
    assert!(fixtures.len() >= 30);
    for f in fixtures {
        let stage = Stage::ALL.into_iter().find(|s| s.name() == f.stage).unwrap();
        let result = std::panic::catch_unwind(|| parse_verdict(&f.raw, stage));
        let parsed = result.unwrap_or_else(|_| panic!("parser panicked on {:?}", f.raw));
        match (f.expect.as_str(), parsed) {
            ("ok", Ok(outcome)) => assert_eq!(outcome.stage(), stage),
            ("error", Err(ParseError::NoObject { .. } | ParseError::Schema { .. })) => {}
            (want, got) => panic!("{:?} for {stage}: expected {want}, got {got:?}", f.raw),
        }
    }
}
