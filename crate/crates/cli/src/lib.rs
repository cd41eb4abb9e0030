//! File formats, checkpoints and the command-line front end for the
//! `dcmt-core` estimation library.

pub mod checkpoint;
pub mod cli;
pub mod formats;
pub mod output;
pub mod run;
