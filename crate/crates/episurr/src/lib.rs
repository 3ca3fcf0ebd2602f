//! File formats, data preparation and the command-line front end for the
//! surrogate library.

pub mod checkpoint;
pub mod cli;
pub mod csvio;
pub mod data;
pub mod json;
pub mod manifest;
