use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use draftrl::config::TrainingConfig;
use draftrl::env::{generate_suite, ChainSpec, OperandRange, Op, Query};
use draftrl::orchestrator::{train, Trainer};
use draftrl::policy::StrategyHint;
use draftrl_backend::{llm_generate, BackendConfig, BackendError, HttpGenerator};

/// Serves every request with `reply(request_body)`; records bodies.
struct Mock {
    url: String,
    hits: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<String>>>,
}

fn mock(reply: impl Fn(&str) -> (u16, String) + Send + Sync + 'static) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let (h, b) = (hits.clone(), bodies.clone());
    let reply = Arc::new(reply);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let (h, b, reply) = (h.clone(), b.clone(), reply.clone());
            thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    if let Some(v) = l.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let body = String::from_utf8(body).unwrap();
                h.fetch_add(1, Ordering::SeqCst);
                let (status, payload) = reply(&body);
                b.lock().unwrap().push(body);
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
                let _ = stream.write_all(resp.as_bytes());
            });
        }
    });
    Mock { url, hits, bodies }
}

fn completion(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn cfg(url: &str, retries: u32) -> BackendConfig {
    BackendConfig { max_retries: retries, timeout: Duration::from_secs(5), ..BackendConfig::new(url, "mock") }
}

fn query() -> Query {
    Query::from_spec(1, ChainSpec { start: 2, ops: vec![(Op::Add, 3), (Op::Mul, 4)] }).unwrap()
}

#[test]
fn canned_valid_draft_round_trips() {
    let m = mock(|_| (200, completion("step: add 3 gives 5\nstep: mul 4 gives 20\n#### 20")));
    let d = llm_generate(&cfg(&m.url, 0), 1, &query(), &[], &StrategyHint::for_slot(2), 0.5).unwrap();
    assert_eq!(d.body.steps.len(), 2);
    assert_eq!(d.body.steps[1].text(), "mul 4 gives 20");
    assert_eq!(d.body.answer, "20");
    assert_eq!((d.agent_id, d.draft_index), (1, 2));
    let sent: serde_json::Value = serde_json::from_str(&m.bodies.lock().unwrap()[0]).unwrap();
    assert_eq!(sent["model"], "mock");
    assert_eq!(sent["temperature"], 0.5);
    assert!(sent["messages"][1]["content"].as_str().unwrap().contains("start 2; add 3; mul 4; ?"));
}

#[test]
fn six_word_steps_rejected_after_retries() {
    let m = mock(|_| (200, completion("step: add three to two to get\n#### 5")));
    let err = llm_generate(&cfg(&m.url, 2), 0, &query(), &[], &StrategyHint::for_slot(0), 0.5).unwrap_err();
    match err {
        BackendError::FormatRejected { text, .. } => assert!(text.contains("add three to two to get")),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(m.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn non_2xx_is_unavailable() {
    let m = mock(|_| (503, "{}".into()));
    let err = llm_generate(&cfg(&m.url, 1), 0, &query(), &[], &StrategyHint::for_slot(0), 0.5).unwrap_err();
    assert!(matches!(err, BackendError::BackendUnavailable(_)), "{err:?}");
    assert_eq!(m.hits.load(Ordering::SeqCst), 2);
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}/v1");
    let err = llm_generate(&cfg(&url, 0), 0, &query(), &[], &StrategyHint::for_slot(0), 0.5).unwrap_err();
    assert!(matches!(err, BackendError::BackendUnavailable(_)));
}

#[test]
fn retry_recovers_from_one_bad_reply() {
    let calls = AtomicUsize::new(0);
    let m = mock(move |_| {
        if calls.fetch_add(1, Ordering::SeqCst) == 0 {
            (200, completion("no wire format here"))
        } else {
            (200, completion("step: add 3 gives 5\nstep: mul 4 gives 20\n#### 20"))
        }
    });
    assert!(llm_generate(&cfg(&m.url, 1), 0, &query(), &[], &StrategyHint::for_slot(0), 0.5).is_ok());
}

#[test]
fn pipeline_runs_without_updates_on_the_backend() {
    // Answers every prompt correctly by recomputing it from the prompt text.
    let m = mock(|body| {
        let req: serde_json::Value = serde_json::from_str(body).unwrap();
        let user = req["messages"][1]["content"].as_str().unwrap();
        let prompt = user.lines().next().unwrap().trim_start_matches("Problem: ");
        let mut parts = prompt.split("; ");
        let mut v: i64 = parts.next().unwrap().trim_start_matches("start ").parse().unwrap();
        let mut text = String::new();
        for p in parts.filter(|p| *p != "?") {
            let (op, x) = p.split_once(' ').unwrap();
            let op: Op = op.parse().unwrap();
            let x: i64 = x.parse().unwrap();
            v = op.apply(v, x).unwrap();
            text += &format!("step: {op} {x} gives {v}\n");
        }
        text += &format!("#### {v}");
        (200, completion(&text))
    });
    let config = TrainingConfig { batch_size: 2, iterations: 2, validation_every: 1, drafts_per_query: 2, workers: 2, ..Default::default() };
    let suite = generate_suite(5, 6, 3, OperandRange::default()).unwrap();
    let trainer = Trainer::new(config).unwrap().with_generator(Arc::new(HttpGenerator::new(cfg(&m.url, 0))));
    let before = trainer.agents[0].policy.clone();
    let out = train(trainer, &suite, &suite[..2], None).unwrap();
    assert_eq!(out.trainer.agents[0].policy, before);
    assert_eq!(out.history.len(), 2);
    assert!(out.history.iter().all(|h| h.components.task == 1.0));
    assert_eq!(out.validations[1].reward, 1.0);
}
