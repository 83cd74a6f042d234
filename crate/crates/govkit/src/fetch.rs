//! `http_fetch` over real HTTP.

use std::collections::BTreeMap;
use std::io::Read;
use std::time::Duration;

use govkit_core::engine::{Fetcher, MAX_FETCH_BYTES};
use govkit_core::{ErrorCode, GovError};
use serde_json::Value as Json;

pub struct HttpFetcher {
    client: reqwest::blocking::Client,
    /// URL prefix substitutions applied before the request, e.g. mapping a
    /// well-known service name onto a local port.
    rewrites: Vec<(String, String)>,
}

fn fetch_err(msg: impl Into<String>) -> GovError {
    GovError::new(ErrorCode::RuntimeError, msg)
}

impl HttpFetcher {
    pub fn new(timeout: Duration) -> HttpFetcher {
        let client = reqwest::blocking::Client::builder().timeout(timeout).build().expect("HTTP client builds");
        HttpFetcher { client, rewrites: Vec::new() }
    }

    pub fn rewrite(mut self, from: impl Into<String>, to: impl Into<String>) -> HttpFetcher {
        self.rewrites.push((from.into(), to.into()));
        self
    }

    fn resolve(&self, url: &str) -> String {
        for (from, to) in &self.rewrites {
            if let Some(rest) = url.strip_prefix(from.as_str()) {
                return format!("{to}{rest}");
            }
        }
        url.to_string()
    }
}

impl Fetcher for HttpFetcher {
    fn fetch(&mut self, url: &str, query: &BTreeMap<String, String>) -> Result<Json, GovError> {
        let target = self.resolve(url);
        let resp = self
            .client
            .get(&target)
            .query(&query.iter().collect::<Vec<_>>())
            .send()
            .map_err(|e| fetch_err(format!("fetch {url} failed: {e}")))?;
        if !resp.status().is_success() {
            return Err(fetch_err(format!("fetch {url} answered {}", resp.status())));
        }
        let mut body = Vec::new();
        resp.take((MAX_FETCH_BYTES + 1) as u64)
            .read_to_end(&mut body)
            .map_err(|e| fetch_err(format!("fetch {url}: {e}")))?;
        if body.len() > MAX_FETCH_BYTES {
            return Err(fetch_err(format!("fetch {url}: response exceeds {MAX_FETCH_BYTES} bytes")));
        }
        serde_json::from_slice(&body).map_err(|e| fetch_err(format!("fetch {url}: not JSON: {e}")))
    }
}
