//! File formats, configuration, parallel experiment dispatch and the
//! command-line front end for [`uscale_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod report;
pub mod runner;
pub mod tokens;

pub use error::{Error, Result};
