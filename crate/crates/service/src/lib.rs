//! HTTP service and command-line front end for the trap detector.

pub mod api;
pub mod cli;
pub mod config;
pub mod feed;
pub mod pipeline;
