//! Retrieval-guided multi-agent runtime.
//!
//! A query is analyzed, similar collaboration patterns are retrieved from an
//! SOP repository, a query-specific operating procedure is instantiated by a
//! language model, and the resulting team is executed under a watcher that
//! can guide or replace faulty agents. In training mode, outcomes are
//! distilled back into the repository and an experience pool.

pub mod domain;
pub mod gateway;
pub mod repository;
pub mod engine;
pub mod prompts;
pub mod watcher;
pub mod instantiation;
pub mod config;
pub mod pipeline;
pub mod reflection;
pub mod replay;
pub mod scenarios;
