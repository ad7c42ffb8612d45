//! Curate group-chat logs into coreference-decision SFT data.
//!
//! Raw logs are parsed and merged ([`corpus`]), scored through chat endpoints
//! ([`gateway`]), labeled in versioned rounds ([`annotation`]), checked by
//! evaluating a series of model sizes ([`evalharness`], [`calibration`]) and
//! finally exported as alpaca records ([`exporter`]). [`project`] ties the
//! pieces to a directory on disk; [`service`] exposes it over HTTP.

pub mod annotation;
pub mod calibration;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evalharness;
pub mod exporter;
pub mod fixtures;
pub mod gateway;
pub mod mock;
pub mod options;
pub mod project;
pub mod prompt;
pub mod service;

pub use error::{Error, ErrorCode, Result};
