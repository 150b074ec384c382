//! Command implementations behind the `lesionkit` binary. Each command
//! returns a [`RunReport`]; the binary only parses flags and writes files.

pub mod commands;
pub mod io;
pub mod report;

pub use report::{Assertion, Relation, RunReport};
