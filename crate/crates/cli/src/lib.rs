//! The `ebr` command-line tool and its HTTP search service.

pub mod commands;
pub mod server;
