//! Command-line and HTTP front ends for the head model.

pub mod api;
pub mod server;
