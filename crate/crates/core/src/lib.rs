//! Core of the peer-grading workflow engine.

pub mod allocation;
pub mod archive;
pub mod authz;
pub mod clock;
pub mod domain;
pub mod engine;
pub mod error;
pub mod grading;
pub mod moderation;
pub mod policy;
pub mod pool;
pub mod rubric;
pub mod sim;
pub mod state;
pub mod store;
pub mod views;
pub mod workflow;

pub use error::{Error, Result};
