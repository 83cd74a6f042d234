//! Mock toxicity scoring service used by the toxicity scenarios.
//!
//! `GET /score?text=...` answers `{"toxicity_score": s}` with
//! `s = 1 - 0.5^k`, where `k` counts words from a small lexicon.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::thread::JoinHandle;

use axum::extract::Query;
use axum::routing::get;
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::sync::oneshot;

pub const LEXICON: [&str; 5] = ["idiot", "stupid", "hate", "trash", "dumb"];

pub fn toxicity(text: &str) -> f64 {
    let k = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| LEXICON.contains(&w.to_lowercase().as_str()))
        .count();
    1.0 - 0.5f64.powi(k as i32)
}

async fn score(Query(q): Query<HashMap<String, String>>) -> Json<Value> {
    let text = q.get("text").map(String::as_str).unwrap_or_default();
    Json(json!({"toxicity_score": toxicity(text)}))
}

pub fn router() -> Router {
    Router::new().route("/score", get(score))
}

/// The scorer on an ephemeral local port, on its own thread. Stops on drop.
pub struct MockScorer {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockScorer {
    pub fn start() -> std::io::Result<MockScorer> {
        let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (stop, stopped) = oneshot::channel::<()>();
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let Ok(listener) = tokio::net::TcpListener::from_std(listener) else {
                    return;
                };
                let _ = axum::serve(listener, router())
                    .with_graceful_shutdown(async {
                        let _ = stopped.await;
                    })
                    .await;
            });
        });
        Ok(MockScorer { addr, stop: Some(stop), thread: Some(thread) })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}/", self.addr)
    }
}

impl Drop for MockScorer {
    fn drop(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
