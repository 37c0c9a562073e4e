//! CLI drivers and the interactive session server.

pub mod cli;
pub mod protocol;
pub mod server;
pub mod session;
