#![allow(dead_code)]

use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, HeaderMap, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;
use vizarel_core::ingest::write_session;
use vizarel_core::{Episode, Experience, Session, SessionMeta};

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body)
            .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }

    pub fn error_code(&self) -> String {
        self.json()["error"]["code"].as_str().unwrap_or_default().to_string()
    }
}

pub async fn send(app: &Router, method: Method, uri: &str, content_type: Option<&str>, body: Vec<u8>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(ct) = content_type {
        req = req.header(header::CONTENT_TYPE, ct);
    }
    let resp = app.clone().oneshot(req.body(Body::from(body)).unwrap()).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, body }
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    send(app, Method::GET, uri, None, Vec::new()).await
}

pub async fn post_json(app: &Router, uri: &str, body: Value) -> Reply {
    send(app, Method::POST, uri, Some("application/json"), serde_json::to_vec(&body).unwrap()).await
}

pub async fn upload(app: &Router, log: &[u8]) -> Reply {
    send(app, Method::POST, "/api/v1/sessions", Some("application/x-ndjson"), log.to_vec()).await
}

/// Polls until the session leaves `loading`.
pub async fn wait_loaded(app: &Router, id: &str) -> Value {
    for _ in 0..2000 {
        let h = get(app, &format!("/api/v1/sessions/{id}")).await.json();
        if h["status"] != "loading" {
            return h;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    panic!("session {id} never finished loading");
}

/// Polls until the embedding job is ready or failed.
pub async fn wait_embedding(app: &Router, id: &str) -> Value {
    for _ in 0..20000 {
        let v = get(app, &format!("/api/v1/sessions/{id}/embedding")).await.json();
        if v["status"] == "ready" || v["status"] == "failed" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    panic!("embedding for {id} never finished");
}

pub async fn ready_session(app: &Router, log: &[u8]) -> String {
    let r = upload(app, log).await;
    let id = r.json()["session_id"].as_str().unwrap().to_string();
    assert_eq!(wait_loaded(app, &id).await["status"], "ready");
    id
}

pub struct Fixture {
    pub episodes: usize,
    pub steps: usize,
    pub values: bool,
    pub renders: bool,
    pub seed: u64,
}

impl Default for Fixture {
    fn default() -> Self {
        Self {
            episodes: 3,
            steps: 10,
            values: true,
            renders: false,
            seed: 1,
        }
    }
}

/// Minimal valid PNG stand-in; the server does not decode images.
pub const FAKE_PNG: &[u8] = b"\x89PNG\r\n\x1a\nfixture";

impl Fixture {
    pub fn session(&self) -> Session {
        let meta = SessionMeta {
            env_name: "fixture".into(),
            obs_dim: 2,
            action_dim: 1,
            discount: 0.9,
            obs_labels: Some(vec!["x".into(), "y".into()]),
            action_labels: None,
            reward_component_labels: None,
        };
        let episodes = (0..self.episodes)
            .map(|e| {
                let steps = (0..self.steps)
                    .map(|t| {
                        let phase = (self.seed as f64) * 0.37 + e as f64 * 1.3 + t as f64 * 0.21;
                        let obs = vec![phase.sin(), phase.cos() * (1.0 + e as f64)];
                        let next = phase + 0.21;
                        Experience {
                            episode_index: e,
                            t,
                            obs,
                            action: vec![(phase * 3.0).sin()],
                            reward: (phase * 0.7).cos(),
                            reward_components: None,
                            next_obs: vec![next.sin(), next.cos() * (1.0 + e as f64)],
                            done: t + 1 == self.steps,
                            value: self.values.then_some(phase.sin() * 0.5),
                            next_value: (self.values && t + 1 < self.steps).then_some(next.sin() * 0.5),
                            render: self.renders.then(|| format!("r/{e}_{t}.png")),
                        }
                    })
                    .collect();
                Episode { index: e, steps }
            })
            .collect();
        Session::new(meta, episodes)
    }

    pub fn log(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_session(&self.session(), &mut out).unwrap();
        out
    }

    /// Writes the log plus render files into `dir`, returning the log path.
    pub fn write_to(&self, dir: &Path) -> std::path::PathBuf {
        let path = dir.join("fixture.jsonl");
        std::fs::write(&path, self.log()).unwrap();
        if self.renders {
            std::fs::create_dir_all(dir.join("r")).unwrap();
            for e in 0..self.episodes {
                for t in 0..self.steps {
                    std::fs::write(dir.join(format!("r/{e}_{t}.png")), FAKE_PNG).unwrap();
                }
            }
        }
        path
    }
}
