//! Service layer around the governance engine: durable event log and
//! snapshots, the webhook adapter, the scenario runner, the HTTP API and
//! the operator CLI.

pub mod api;
pub mod fetch;
pub mod node;
pub mod scorer;
pub mod store;
pub mod webhook;
pub mod scenario;
pub mod lint;
pub mod datadir;
