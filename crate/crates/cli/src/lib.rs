//! Command-line front end and HTTP service for the voxgan toolkit: latent code
//! files, a content-addressed volume store, PNG slice rendering and the JSON
//! API used by programmatic clients and the explorer UI.

pub mod cli;
pub mod codes;
pub mod commands;
pub mod service;
pub mod store;

pub use cli::Cli;
