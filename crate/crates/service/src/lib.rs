//! Operator surface for codified decision trees: the `cdt` command line and
//! an HTTP service backed by a file store of tree revisions and jobs.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod jobs;
pub mod store;
