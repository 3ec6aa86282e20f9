//! Command-line tools and HTTP inference service for pomnet.

pub mod commands;
pub mod inference;
pub mod server;
