mod common;

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use reqwest::StatusCode;
use serde_json::{json, Value};
use topklm_cli::api::{self, GenerateRequest};
use topklm_cli::{server, Registry};

struct Server {
    base: String,
    _root: tempfile::TempDir,
    run: std::path::PathBuf,
}

async fn start(name: &str) -> Server {
    let (root, run) = common::fresh_root(name);
    let reg = Arc::new(Registry::new(root.path()));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, server::router(reg)).await.unwrap();
    });
    Server {
        base: format!("http://{addr}"),
        _root: root,
        run,
    }
}

async fn get(s: &Server, path: &str) -> (StatusCode, Value) {
    let r = reqwest::get(format!("{}{path}", s.base)).await.unwrap();
    let status = r.status();
    (status, r.json().await.unwrap())
}

async fn post(s: &Server, path: &str, body: &Value) -> (StatusCode, Value) {
    let r = reqwest::Client::new()
        .post(format!("{}{path}", s.base))
        .json(body)
        .send()
        .await
        .unwrap();
    let status = r.status();
    (status, r.json().await.unwrap())
}

async fn analyze_all(s: &Server, run: &str) {
    let (status, body) = post(s, "/api/analyze", &json!({ "run": run })).await;
    assert!(status == StatusCode::ACCEPTED || status == StatusCode::OK, "{body}");
    let steps: Vec<u64> = body["jobs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|j| j["ckpt"].as_u64().unwrap())
        .collect();
    for step in steps {
        for _ in 0..600 {
            let (_, st) = get(s, &format!("/api/analyze/status?run={run}&ckpt={step}")).await;
            match st["state"].as_str().unwrap() {
                "done" => break,
                "failed" => panic!("analysis failed: {st}"),
                _ => tokio::time::sleep(Duration::from_millis(20)).await,
            }
        }
    }
}

fn assert_error(body: &Value, code: &str) {
    assert_eq!(body["schema_version"], 1, "{body}");
    assert_eq!(body["error"]["code"], code, "{body}");
}

#[tokio::test]
async fn runs_and_checkpoints() {
    let s = start("tiny").await;
    let (status, body) = get(&s, "/api/runs").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["schema_version"], 1);
    assert_eq!(body["runs"][0]["name"], "tiny");
    assert_eq!(body["runs"][0]["steps"], json!([0, 10, 20, 30]));

    let (status, body) = get(&s, "/api/runs/tiny/checkpoints").await;
    assert_eq!(status, StatusCode::OK);
    let ck = body["checkpoints"].as_array().unwrap();
    assert_eq!(ck.len(), 4);
    assert_eq!(ck[0]["alpha"], 1.0);
    assert_eq!(ck[3]["analyzed"], false);

    let (status, body) = get(&s, "/api/runs/nope/checkpoints").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&body, "unknown_run");

    let (status, body) = get(&s, "/api/nothing-here").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&body, "not_found");
}

#[tokio::test]
async fn analysis_gates_entropy_endpoints() {
    let s = start("tiny").await;
    for path in [
        "/api/neurons?run=tiny&sort=h_sem&limit=10",
        "/api/entropy/summary?run=tiny",
        "/api/neurons/0/1/top-tokens?run=tiny",
        "/api/trace?run=tiny&dim=0&char=e",
    ] {
        let (status, body) = get(&s, path).await;
        assert_eq!(status, StatusCode::CONFLICT, "{path}");
        assert_error(&body, "analysis_missing");
        assert!(body["error"]["hint"].as_str().unwrap().contains("/api/analyze"));
    }
    let (status, body) = get(&s, "/api/entropy/summary?run=tiny&ckpt=7").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&body, "unknown_checkpoint");

    let (status, body) = post(&s, "/api/analyze", &json!({ "run": "tiny", "ckpt": 30 })).await;
    assert!(status == StatusCode::ACCEPTED || status == StatusCode::OK);
    assert_eq!(body["schema_version"], 1);
    analyze_all(&s, "tiny").await;

    let (status, body) = get(&s, "/api/neurons?run=tiny&sort=h_sem&limit=10").await;
    assert_eq!(status, StatusCode::OK);
    let rows = body["neurons"].as_array().unwrap();
    assert!(rows.len() <= 10 && !rows.is_empty());
    let keys: Vec<Option<f64>> = rows.iter().map(|r| r["h_sem"].as_f64()).collect();
    let defined: Vec<f64> = keys.iter().map_while(|k| *k).collect();
    assert!(defined.windows(2).all(|w| w[0] <= w[1]), "{keys:?}");
    assert!(keys[defined.len()..].iter().all(Option::is_none));

    let (_, body) = get(&s, "/api/neurons?run=tiny&layer=1&sort=h_token").await;
    let rows = body["neurons"].as_array().unwrap();
    assert_eq!(rows.len(), 16);
    assert!(rows.iter().all(|r| r["layer"] == 1));

    let (status, body) = get(&s, "/api/neurons/1/3/top-tokens?run=tiny&limit=5").await;
    assert_eq!(status, StatusCode::OK);
    let vals: Vec<f64> = body["tokens"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["value"].as_f64().unwrap())
        .collect();
    assert!(vals.len() <= 5 && vals.windows(2).all(|w| w[0] >= w[1]));

    let (status, body) = get(&s, "/api/entropy/summary?run=tiny").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["layers"].as_array().unwrap().len(), 3);
    assert_eq!(body["ckpt"], 30);

    let (status, body) = get(&s, "/api/trace?run=tiny&dim=2&char=e").await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["steps"], json!([0, 10, 20, 30]));
    assert_eq!(body["values"].as_array().unwrap().len(), 4);
    assert_eq!(body["values"][0].as_array().unwrap().len(), 3);

    let (status, body) = get(&s, "/api/trace?run=tiny&dim=2&token=255").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&body, "bad_request");
    let (status, _) = get(&s, "/api/trace?run=tiny&dim=x&token=1").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn cache_writes_are_atomic_and_checkpoints_untouched() {
    let s = start("tiny").await;
    let before = snapshot(&s.run);
    analyze_all(&s, "tiny").await;
    assert_eq!(before, snapshot(&s.run));
    let steps = std::fs::read_dir(s.run.join("analysis")).unwrap().count();
    assert_eq!(steps, 4);
    for e in walk(&s.run.join("analysis")) {
        let name = e.file_name().unwrap().to_string_lossy().to_string();
        assert!(!name.starts_with(".tmp"), "leftover {name}");
    }
    let (status, body) = post(&s, "/api/analyze", &json!({ "run": "tiny", "ckpt": 30 })).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["jobs"][0]["state"], "done");
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        }
        out.push(p);
    }
    out
}

/// Bytes of everything in the run outside the analysis cache.
fn snapshot(run: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(run)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.display().to_string(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[tokio::test]
async fn generate_contract_and_errors() {
    let s = start("tiny").await;
    let req = json!({ "run": "tiny", "prompt": "Once upon a time,", "seed": 4,
                      "params": { "max_tokens": 20 } });
    let (status, body) = post(&s, "/api/generate", &req).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["schema_version"], 1);
    assert_eq!(body["ckpt"], 30);
    assert_eq!(body["tokens"].as_array().unwrap().len(), 17 + 20);
    assert_eq!(body["logprobs"].as_array().unwrap().len(), 20);
    assert!(body["text"].as_str().unwrap().starts_with("Once upon a time,"));

    // same request through the shared operation
    let reg = Registry::new(s.run.parent().unwrap());
    let direct = api::generate(&reg, &serde_json::from_value::<GenerateRequest>(req.clone()).unwrap()).unwrap();
    assert_eq!(body["text"], direct.text);
    assert_eq!(body["tokens"], json!(direct.tokens));

    let steered = json!({ "run": "tiny", "prompt": "Once", "seed": 4,
        "steering": [{ "layer": 0, "neuron": 3, "delta": 0.0 }], "params": { "max_tokens": 20 } });
    let plain = json!({ "run": "tiny", "prompt": "Once", "seed": 4, "params": { "max_tokens": 20 } });
    assert_eq!(post(&s, "/api/generate", &steered).await.1["tokens"], post(&s, "/api/generate", &plain).await.1["tokens"]);

    let cases = [
        (json!({ "run": "tiny" }), StatusCode::BAD_REQUEST, "malformed_request"),
        (json!({ "run": "tiny", "prompt": "a", "bogus": 1 }), StatusCode::BAD_REQUEST, "malformed_request"),
        (json!({ "run": "ghost", "prompt": "a" }), StatusCode::NOT_FOUND, "unknown_run"),
        (json!({ "run": "tiny", "ckpt": 11, "prompt": "a" }), StatusCode::NOT_FOUND, "unknown_checkpoint"),
        (json!({ "run": "tiny", "prompt": "" }), StatusCode::BAD_REQUEST, "bad_request"),
        (json!({ "run": "tiny", "prompt": "a", "steering": [{ "layer": 9, "neuron": 0, "delta": 1.0 }] }),
            StatusCode::BAD_REQUEST, "bad_request"),
        (json!({ "run": "tiny", "prompt": "a", "steering": [{ "layer": 2, "neuron": 0, "delta": 1.0, "site": "pre_topk" }] }),
            StatusCode::BAD_REQUEST, "bad_request"),
        (json!({ "run": "tiny", "prompt": "a", "params": { "temperature": 0.0 } }), StatusCode::BAD_REQUEST, "bad_request"),
    ];
    for (body, want, code) in cases {
        let (status, got) = post(&s, "/api/generate", &body).await;
        assert_eq!(status, want, "{body} -> {got}");
        assert_error(&got, code);
    }
    let raw = reqwest::Client::new()
        .post(format!("{}/api/generate", s.base))
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(raw.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn sixteen_concurrent_generations_do_not_cross_talk() {
    let s = start("tiny").await;
    let reg = Registry::new(s.run.parent().unwrap());
    let reqs: Vec<Value> = (0..16)
        .map(|i| {
            json!({ "run": "tiny", "prompt": "Once upon a time,", "seed": 100 + i,
                    "steering": if i % 2 == 0 { json!([{ "layer": 1, "neuron": i % 16, "delta": 5.0 }]) } else { json!([]) },
                    "params": { "max_tokens": 48 } })
        })
        .collect();
    let expected: Vec<Vec<usize>> = reqs
        .iter()
        .map(|r| {
            api::generate(&reg, &serde_json::from_value(r.clone()).unwrap())
                .unwrap()
                .tokens
        })
        .collect();
    let client = reqwest::Client::new();
    let handles: Vec<_> = reqs
        .into_iter()
        .map(|r| {
            let client = client.clone();
            let url = format!("{}/api/generate", s.base);
            tokio::spawn(async move {
                let resp = client.post(url).json(&r).send().await.unwrap();
                assert_eq!(resp.status(), StatusCode::OK);
                resp.json::<Value>().await.unwrap()
            })
        })
        .collect();
    let mut texts = std::collections::HashSet::new();
    for (i, h) in handles.into_iter().enumerate() {
        let body = h.await.unwrap();
        let tokens: Vec<usize> = serde_json::from_value(body["tokens"].clone()).unwrap();
        assert_eq!(tokens, expected[i], "request {i}");
        assert_eq!(body["seed"], 100 + i as u64);
        texts.insert(body["text"].as_str().unwrap().to_string());
    }
    assert!(texts.len() > 1);
}
