//! Command-line tools and the HTTP generation service.

pub mod api;
pub mod commands;
pub mod service;
pub mod sweep;
