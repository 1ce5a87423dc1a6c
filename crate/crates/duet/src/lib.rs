//! File formats, HTTP backends, run orchestration and reporting around
//! `duet-core`.

pub mod config;
pub mod http;
pub mod imageio;
pub mod report;
pub mod runner;
pub mod script;
