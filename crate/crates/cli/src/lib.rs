//! Client library behind the `aibomgen` command: configuration, a blocking
//! HTTP client for the gateway, and local (offline) verification.

pub mod client;
pub mod config;
pub mod offline;

pub use client::{Client, ClientError};
pub use config::Config;

/// Exit statuses of the `aibomgen` binary.
pub mod exit {
    /// Success, or every verification check passed.
    pub const OK: i32 = 0;
    /// A verification ran and found a problem.
    pub const VERIFICATION_FAILED: i32 = 1;
    /// Bad usage, unreadable input, transport or server error.
    pub const ERROR: i32 = 2;
}
