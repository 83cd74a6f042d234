//! Generic webhook adapter. A bridge process relays platform events to us
//! as signed JSON envelopes and receives execute/revert/notify calls back.
//!
//! Both directions carry `X-Signature: sha256=<hex HMAC-SHA256 of the body>`.

use std::time::Duration;

use govkit_core::engine::Command;
use govkit_core::ids::MessageRef;
use govkit_core::model::Action;
use govkit_core::platform::{
    chat_action_types, default_templates, render_notification, AdapterDescriptor, Notification, Platform,
    SignalMapping,
};
use govkit_core::{ErrorCode, GovError};
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};
use sha2::Sha256;

pub const SIGNATURE_HEADER: &str = "x-signature";
/// Envelope type for a reaction or reply on a governance message.
pub const SIGNAL_TYPE: &str = "vote_signal";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebhookConfig {
    pub platform: String,
    pub secret: String,
    /// Egress root: actions go to `{base_url}/actions/{type}/{execute|revert}`,
    /// notifications to `{base_url}/notify`.
    pub base_url: String,
    #[serde(default = "default_attempts")]
    pub attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_attempts() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    200
}

pub fn descriptor(cfg: &WebhookConfig) -> AdapterDescriptor {
    let base = cfg.base_url.trim_end_matches('/').to_string();
    AdapterDescriptor {
        platform: cfg.platform.clone(),
        action_types: chat_action_types(|name, op| format!("{base}/actions/{name}/{op}")),
        templates: default_templates(),
        signals: SignalMapping::default(),
    }
}

pub fn sign(secret: &str, body: &[u8]) -> String {
    let mut mac = Hmac::<Sha256>::new_from_slice(secret.as_bytes()).expect("HMAC takes any key length");
    mac.update(body);
    format!("sha256={}", hex::encode(mac.finalize().into_bytes()))
}

/// Constant-time check of an `X-Signature` header value.
pub fn verify(secret: &str, body: &[u8], header: &str) -> bool {
    let Some(hex_sig) = header.trim().strip_prefix("sha256=") else {
        return false;
    };
    let Ok(sig) = hex::decode(hex_sig) else {
        return false;
    };
    let mut mac = Hmac::<Sha256>::new_from_slice(secret.as_bytes()).expect("HMAC takes any key length");
    mac.update(body);
    mac.verify_slice(&sig).is_ok()
}

/// Inbound event from a bridge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub event_id: String,
    #[serde(rename = "type")]
    pub event_type: String,
    pub actor_handle: String,
    #[serde(default)]
    pub payload: Map<String, Json>,
    #[serde(default)]
    pub ts: Option<String>,
}

impl Envelope {
    pub fn into_command(self) -> Result<Command, GovError> {
        if self.event_type == SIGNAL_TYPE {
            let field = |k: &str| {
                self.payload.get(k).and_then(Json::as_str).map(str::to_string).ok_or_else(|| {
                    GovError::new(ErrorCode::InvalidInput, format!("{SIGNAL_TYPE} needs a string `{k}`"))
                })
            };
            return Ok(Command::Signal {
                message: MessageRef::from(field("message")?),
                handle: self.actor_handle.clone(),
                signal: field("signal")?,
            });
        }
        Ok(Command::PlatformEvent {
            event_id: Some(self.event_id),
            actor_handle: self.actor_handle,
            action_type: self.event_type,
            payload: self.payload,
        })
    }
}

pub struct WebhookPlatform {
    cfg: WebhookConfig,
    descriptor: AdapterDescriptor,
    client: reqwest::blocking::Client,
}

impl WebhookPlatform {
    pub fn new(cfg: WebhookConfig) -> WebhookPlatform {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(10))
            .build()
            .expect("HTTP client builds");
        WebhookPlatform { descriptor: descriptor(&cfg), cfg, client }
    }

    /// POSTs a signed body, retrying non-2xx answers and transport errors
    /// with exponential backoff.
    fn post(&self, url: &str, body: &Json) -> Result<Json, GovError> {
        let bytes = serde_json::to_vec(body).expect("bodies serialize");
        let sig = sign(&self.cfg.secret, &bytes);
        let mut last = String::new();
        for attempt in 0..self.cfg.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms << (attempt - 1)));
            }
            let res = self
                .client
                .post(url)
                .header("content-type", "application/json")
                .header(SIGNATURE_HEADER, &sig)
                .body(bytes.clone())
                .send();
            match res {
                Ok(r) if r.status().is_success() => {
                    let text = r.text().unwrap_or_default();
                    return Ok(serde_json::from_str(&text).unwrap_or(Json::Null));
                }
                Ok(r) => last = format!("status {}", r.status()),
                Err(e) => last = e.to_string(),
            }
        }
        Err(GovError::new(
            ErrorCode::ExecutionFailed,
            format!("POST {url} failed after {} attempts: {last}", self.cfg.attempts.max(1)),
        ))
    }

    fn binding(&self, action: &Action, revert: bool) -> Result<String, GovError> {
        let t = self.descriptor.action_type(&action.action_type).ok_or_else(|| {
            GovError::new(ErrorCode::UnknownActionType, format!("no binding for `{}`", action.action_type))
        })?;
        Ok(if revert { t.revert.clone() } else { t.execute.clone() })
    }

    fn action_body(action: &Action) -> Json {
        json!({
            "action": action.id,
            "action_type": action.action_type,
            "initiator": action.initiator,
            "payload": action.payload,
        })
    }
}

impl Platform for WebhookPlatform {
    fn descriptor(&self) -> &AdapterDescriptor {
        &self.descriptor
    }

    /// The bridge reported the event after it happened; nothing to do here.
    fn user_event(&mut self, _action: &Action) -> Result<(), GovError> {
        Ok(())
    }

    fn execute(&mut self, action: &Action) -> Result<(), GovError> {
        let url = self.binding(action, false)?;
        self.post(&url, &Self::action_body(action)).map(|_| ())
    }

    fn revert(&mut self, action: &Action) -> Result<(), GovError> {
        let url = self.binding(action, true)?;
        self.post(&url, &Self::action_body(action)).map(|_| ())
    }

    fn deliver(&mut self, n: &Notification) -> Result<MessageRef, GovError> {
        let url = format!("{}/notify", self.cfg.base_url.trim_end_matches('/'));
        let body = json!({
            "action": n.action,
            "recipients": n.handles,
            "text": render_notification(&self.descriptor.templates, n),
            "vote_kind": n.vote_kind,
            "options": n.options,
        });
        let answer = self.post(&url, &body)?;
        answer
            .get("message")
            .and_then(Json::as_str)
            .map(MessageRef::from)
            .ok_or_else(|| GovError::new(ErrorCode::ExecutionFailed, "notify answer lacks a `message` id"))
    }

    /// Platform state lives on the far side of the bridge.
    fn state(&self) -> Json {
        json!({"platform": self.cfg.platform})
    }

    fn restore(&mut self, _state: &Json) -> Result<(), GovError> {
        Ok(())
    }

    fn deterministic(&self) -> bool {
        false
    }
}
