mod common;

use std::net::SocketAddr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde_json::{json, Value};
use tuneconv_cli::infer::{run_inference, sha256_hex, DEFAULT_MAX_PIXELS};
use tuneconv_cli::service::{bind, AppState, InferResponse, ServiceConfig};
use tuneconv_core::train::Checkpoint;

async fn start(cfg: ServiceConfig) -> (String, Checkpoint, Vec<u8>) {
    let raw = std::fs::read(common::golden_ckpt()).unwrap();
    let state = AppState::from_bytes(&raw, cfg).unwrap();
    let (addr, server) = bind(state, SocketAddr::from(([127, 0, 0, 1], 0))).await.unwrap();
    tokio::spawn(server);
    (format!("http://{addr}"), Checkpoint::from_bytes(&raw).unwrap(), raw)
}

async fn post(base: &str, body: impl Into<reqwest::Body>) -> (u16, Value) {
    let r = reqwest::Client::new()
        .post(format!("{base}/infer"))
        .header("content-type", "application/json")
        .body(body)
        .send()
        .await
        .unwrap();
    (r.status().as_u16(), r.json().await.unwrap())
}

fn body(png: &[u8], omega: &[f64]) -> String {
    json!({ "image": B64.encode(png), "omega": omega }).to_string()
}

#[tokio::test]
async fn healthz_and_model() {
    let (base, ckpt, raw) = start(ServiceConfig::default()).await;
    let r = reqwest::get(format!("{base}/healthz")).await.unwrap();
    assert_eq!(r.status().as_u16(), 200);
    let m: Value = reqwest::get(format!("{base}/model")).await.unwrap().json().await.unwrap();
    assert_eq!(m["p"], ckpt.model.p());
    assert_eq!(m["objective_ids"], json!(["rec", "noise"]));
    assert_eq!(m["objective_labels"], json!(["fidelity", "noise preservation"]));
    assert_eq!(m["lambda"], json!([1.0, 0.5]));
    assert_eq!(m["constraints"]["max_pixels"], DEFAULT_MAX_PIXELS);
    assert_eq!(m["constraints"]["omega_length"], 2);
    assert_eq!(m["checkpoint_sha256"], sha256_hex(&raw));
    assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

#[tokio::test]
async fn infer_matches_direct_call_and_clamps() {
    let (base, ckpt, _) = start(ServiceConfig::default()).await;
    let png = common::noisy_png(20, 24, 3);
    let (status, v) = post(&base, body(&png, &[1.0, 0.0])).await;
    assert_eq!(status, 200);
    let r: InferResponse = serde_json::from_value(v).unwrap();
    let direct = run_inference(&ckpt, &png, &[1.0, 0.0], DEFAULT_MAX_PIXELS).unwrap();
    assert_eq!(B64.decode(&r.image).unwrap(), direct.png);
    assert_eq!(r.clamped_omega, vec![1.0, 0.0]);
    assert!(r.latency_ms >= 0.0);

    let (status, v) = post(&base, body(&png, &[1.7, -0.2])).await;
    assert_eq!(status, 200);
    let r: InferResponse = serde_json::from_value(v).unwrap();
    assert_eq!(r.clamped_omega, vec![1.0, 0.0]);
    assert_eq!(B64.decode(&r.image).unwrap(), direct.png);
}

#[tokio::test]
async fn error_statuses() {
    let (base, _, _) = start(ServiceConfig {
        max_pixels: 100,
        ..ServiceConfig::default()
    })
    .await;
    let small = common::noisy_png(8, 8, 1);
    let big = common::noisy_png(11, 10, 1);

    let (s, v) = post(&base, "{not json").await;
    assert_eq!(s, 400);
    assert_eq!(v["error"], "malformed_body");
    assert!(v["reason"].as_str().unwrap().len() > 0);

    let (s, v) = post(&base, json!({ "image": B64.encode(&small) }).to_string()).await;
    assert_eq!((s, v["error"].as_str().unwrap()), (400, "malformed_body"));

    let (s, v) = post(&base, json!({ "image": "@@@", "omega": [1, 0] }).to_string()).await;
    assert_eq!((s, v["error"].as_str().unwrap()), (400, "bad_base64"));

    let (s, v) = post(&base, body(b"definitely not a png", &[1.0, 0.0])).await;
    assert_eq!((s, v["error"].as_str().unwrap()), (400, "bad_image"));

    let (s, v) = post(&base, body(&small, &[1.0, 0.0, 0.0])).await;
    assert_eq!((s, v["error"].as_str().unwrap()), (422, "omega_length"));
    assert!(v["reason"].as_str().unwrap().contains("p = 2"));

    let (s, v) = post(&base, body(&big, &[1.0, 0.0])).await;
    assert_eq!((s, v["error"].as_str().unwrap()), (413, "image_too_large"));

    let (s, _) = post(&base, body(&small, &[0.5, 0.5])).await;
    assert_eq!(s, 200);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_do_not_cross_talk() {
    let (base, ckpt, _) = start(ServiceConfig {
        workers: 4,
        ..ServiceConfig::default()
    })
    .await;
    let png = common::noisy_png(48, 48, 9);
    let omegas = [[1.0, 0.0], [0.0, 1.0]];
    let expected: Vec<Vec<u8>> = omegas
        .iter()
        .map(|w| run_inference(&ckpt, &png, w, DEFAULT_MAX_PIXELS).unwrap().png)
        .collect();
    assert_ne!(expected[0], expected[1], "the two extremes must be distinguishable");

    for _ in 0..3 {
        let reqs = (0..8).map(|i| {
            let (base, b) = (base.clone(), body(&png, &omegas[i % 2]));
            tokio::spawn(async move { (i, post(&base, b).await) })
        });
        for h in reqs.collect::<Vec<_>>() {
            let (i, (status, v)) = h.await.unwrap();
            assert_eq!(status, 200);
            let r: InferResponse = serde_json::from_value(v).unwrap();
            assert_eq!(r.clamped_omega, omegas[i % 2]);
            assert_eq!(B64.decode(&r.image).unwrap(), expected[i % 2], "request {i} got another request's output");
        }
    }
}
