//! Command-line front end for the `sparsefed-core` simulator: configuration
//! files, dataset loaders, run artifacts and the subcommands behind the
//! `sparsefed` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod exec;
pub mod io;
pub mod output;
pub mod record;
