//! Pipeline driver and HTTP service around the `nucleisam` library.

pub mod commands;
pub mod config;
pub mod service;
