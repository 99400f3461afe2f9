//! Run configuration shared by the `spkguard` binary and its tests.

pub mod config;
