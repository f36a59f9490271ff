//! Files, HTTP and the command line around `agp-core`.

pub mod cli;
pub mod config;
pub mod formats;
pub mod http;
pub mod parallel;
pub mod run_dir;
