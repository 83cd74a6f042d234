//! Core of a community governance engine: the domain model, the policy
//! language, the constitution catalog, the platform contract with an
//! in-memory sandbox platform, and the evaluation pipeline.
//!
//! Everything here is `no_std` (with `alloc`) and free of IO. The `govkit`
//! crate adds persistence, the HTTP service and the command line.

#![no_std]

extern crate alloc;

pub mod bootstrap;
pub mod catalog;
pub mod dsl;
pub mod engine;
pub mod error;
pub mod ids;
pub mod model;
pub mod platform;
pub mod time;

pub use error::{ErrorCode, FieldError, GovError, Result};
