use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::thread;

use icebench::model_io::{save_model, TrainMetadata};
use icebench::wire::{connect_external, serve, ConnectOptions};
use icebench_core::scorer::{train_reference, ModelAttribution, ReferenceScorer, Scorer, ScorerError};
use icebench_core::synth::{toy_corpus, SynthConfig};

const BIN: &str = env!("CARGO_BIN_EXE_icebench");

fn trained() -> ReferenceScorer {
    let ds = toy_corpus(&SynthConfig { examples: 60, ..SynthConfig::default() });
    train_reference(&ds, 10, 0.5, 0).unwrap().scorer
}

fn model_file(dir: &Path) -> (PathBuf, ReferenceScorer) {
    let scorer = trained();
    let path = dir.join("model.json");
    let meta = TrainMetadata {
        accuracy: 1.0,
        final_loss: 0.0,
        epochs: 10,
        lr: 0.5,
        seed: 0,
        corpus_sha256: String::new(),
        examples: 60,
    };
    save_model(&scorer, meta, &path).unwrap();
    (path, scorer)
}

fn opts(classes: Option<usize>) -> ConnectOptions {
    ConnectOptions {
        handshake_timeout_ms: 5_000,
        expected_classes: classes,
        ..ConnectOptions::default()
    }
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn fake_bridge(hello: &str) -> String {
    format!("read line; echo '{hello}'; sleep 2")
}

#[test]
fn subprocess_bridge_matches_in_process_scores() {
    let dir = tempfile::tempdir().unwrap();
    let (path, local) = model_file(dir.path());
    let cmd = format!("{BIN} serve-ref --model {}", path.display());
    let remote = connect_external(&cmd, &opts(Some(2))).unwrap();
    assert_eq!(remote.info().class_names, ["negative", "positive"]);
    assert!(remote.info().supports_gradient);
    assert!(!remote.info().supports_attention);
    let batch: Vec<Vec<String>> = (0..70)
        .map(|i| toks(if i % 3 == 0 { "a witty superb film" } else { "dull plot" }))
        .collect();
    let got = remote.score_batch(&batch).unwrap();
    let want = local.score_batch(&batch).unwrap();
    assert_eq!(got, want);
    assert_eq!(remote.baseline().unwrap(), local.baseline().unwrap());
    assert_eq!(remote.score(&[]).unwrap(), local.score(&[]).unwrap());
    let g = remote.attribute(ModelAttribution::Gradient, &toks("a witty film")).unwrap();
    assert_eq!(g, local.attribute(ModelAttribution::Gradient, &toks("a witty film")).unwrap());
    assert!(matches!(
        remote.attribute(ModelAttribution::Attention, &toks("x")),
        Err(ScorerError::Capability(_))
    ));
}

#[test]
fn concurrent_callers_get_their_own_responses() {
    let dir = tempfile::tempdir().unwrap();
    let (path, local) = model_file(dir.path());
    let cmd = format!("{BIN} serve-ref --model {}", path.display());
    let remote = Arc::new(connect_external(&cmd, &opts(None)).unwrap());
    let local = Arc::new(local);
    let handles: Vec<_> = (0..8)
        .map(|t| {
            let remote = Arc::clone(&remote);
            let local = Arc::clone(&local);
            thread::spawn(move || {
                for i in 0..20 {
                    let x = toks(&format!("film {} witty dull {i}", "awful ".repeat(t)));
                    assert_eq!(remote.score(&x).unwrap(), local.score(&x).unwrap());
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
}

#[test]
fn tcp_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (path, local) = model_file(dir.path());
    let mut child = Command::new(BIN)
        .args(["serve-ref", "--model"])
        .arg(&path)
        .args(["--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_string();
    let remote = connect_external(&format!("tcp://{addr}"), &opts(Some(2))).unwrap();
    let x = toks("superb vivid scenes");
    assert_eq!(remote.score(&x).unwrap(), local.score(&x).unwrap());
    drop(remote);
    child.kill().unwrap();
    child.wait().unwrap();
}

#[test]
fn class_count_mismatch() {
    let hello = r#"{"type":"hello","protocol":"icebench-scorer-v1","classes":["a","b","c"],"probabilistic":true,"attention":false,"gradient":false}"#;
    let err = connect_external(&fake_bridge(hello), &opts(Some(2))).unwrap_err();
    assert_eq!(err, ScorerError::ClassMismatch { expected: 2, got: 3 });
}

#[test]
fn two_class_hello_without_expectation() {
    let hello = r#"{"type":"hello","protocol":"icebench-scorer-v1","classes":["neg","pos"],"probabilistic":true,"attention":true,"gradient":false}"#;
    let s = connect_external(&fake_bridge(hello), &opts(Some(2))).unwrap();
    assert_eq!(s.info().class_count(), 2);
    assert!(s.info().supports_attention);
}

#[test]
fn malformed_hello_carries_the_line() {
    let err = connect_external("read line; echo 'garbage here'; sleep 2", &opts(None)).unwrap_err();
    match err {
        ScorerError::Protocol { message, transcript } => {
            assert!(message.contains("garbage here"), "{message}");
            assert!(transcript.iter().any(|l| l.contains("garbage here")));
        }
        e => panic!("unexpected {e:?}"),
    }
}

#[test]
fn version_mismatch() {
    let hello = r#"{"type":"hello","protocol":"icebench-scorer-v0","classes":["a","b"],"probabilistic":true,"attention":false,"gradient":false}"#;
    let err = connect_external(&fake_bridge(hello), &opts(None)).unwrap_err();
    assert_eq!(err, ScorerError::VersionMismatch("icebench-scorer-v0".into()));
}

#[test]
fn handshake_timeout() {
    let o = ConnectOptions {
        handshake_timeout_ms: 200,
        ..ConnectOptions::default()
    };
    let err = connect_external("sleep 5", &o).unwrap_err();
    assert_eq!(err, ScorerError::Timeout(200));
}

#[test]
fn bridge_exiting_early_is_a_protocol_error() {
    let err = connect_external("true", &opts(None)).unwrap_err();
    assert!(matches!(err, ScorerError::Protocol { .. } | ScorerError::Io(_)), "{err:?}");
}

#[test]
fn unreachable_tcp() {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    let err = connect_external(&format!("tcp://{addr}"), &opts(None)).unwrap_err();
    assert!(matches!(err, ScorerError::Unreachable(_)));
}

#[test]
fn bad_score_shapes_are_rejected() {
    let hello = r#"{"type":"hello","protocol":"icebench-scorer-v1","classes":["a","b"],"probabilistic":true,"attention":false,"gradient":false}"#;
    let wrong_len = format!(
        "read l; echo '{hello}'; read l; echo '{}'; sleep 2",
        r#"{"type":"score","id":1,"scores":[[0.5,0.5,0.0]]}"#
    );
    let s = connect_external(&wrong_len, &opts(None)).unwrap();
    assert!(matches!(s.score(&toks("x")), Err(ScorerError::Protocol { .. })));
    let wrong_id = format!(
        "read l; echo '{hello}'; read l; echo '{}'; sleep 2",
        r#"{"type":"score","id":99,"scores":[[0.5,0.5]]}"#
    );
    let s = connect_external(&wrong_id, &opts(None)).unwrap();
    assert!(matches!(s.score(&toks("x")), Err(ScorerError::Protocol { .. })));
    let remote_err = format!(
        "read l; echo '{hello}'; read l; echo '{}'; sleep 2",
        r#"{"type":"error","id":1,"message":"out of memory"}"#
    );
    let s = connect_external(&remote_err, &opts(None)).unwrap();
    assert_eq!(s.score(&toks("x")), Err(ScorerError::Remote("out of memory".into())));
}

fn exchange(lines: &[&str]) -> Vec<serde_json::Value> {
    let scorer = trained();
    let input = lines.join("\n");
    let mut out = Vec::new();
    serve(&scorer, input.as_bytes(), &mut out).unwrap();
    String::from_utf8(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn server_answers_unknown_and_malformed_messages_in_band() {
    let replies = exchange(&[
        r#"{"type":"ping","id":4}"#,
        "not json",
        r#"{"type":"score","id":5}"#,
        r#"{"type":"hello"}"#,
        r#"{"type":"score","id":6,"batch":[[],["witty"]]}"#,
        r#"{"type":"attribute","id":7,"method":"attention","batch":[["a"]]}"#,
        r#"{"type":"shutdown"}"#,
        r#"{"type":"hello"}"#,
    ]);
    assert_eq!(replies.len(), 6, "nothing is answered after shutdown");
    assert_eq!(replies[0]["type"], "error");
    assert_eq!(replies[0]["id"], 4);
    assert!(replies[0]["message"].as_str().unwrap().contains("ping"));
    assert_eq!(replies[1]["type"], "error");
    assert!(replies[1]["id"].is_null());
    assert_eq!(replies[2]["type"], "error");
    assert_eq!(replies[2]["id"], 5);
    assert_eq!(replies[3]["protocol"], "icebench-scorer-v1");
    assert_eq!(replies[4]["id"], 6);
    assert_eq!(replies[4]["scores"].as_array().unwrap().len(), 2);
    assert_eq!(replies[5]["type"], "error");
    assert_eq!(replies[5]["id"], 7);
}

#[test]
fn attribute_reply_has_one_score_per_token() {
    let replies = exchange(&[r#"{"type":"attribute","id":1,"method":"gradient","batch":[["a","witty","film"],["dull"]]}"#]);
    let scores = replies[0]["scores"].as_array().unwrap();
    assert_eq!(scores[0].as_array().unwrap().len(), 3);
    assert_eq!(scores[1].as_array().unwrap().len(), 1);
}
