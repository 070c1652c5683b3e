//! Library side of the `vizarel` command: demo generation, export and the
//! serve entry point.

pub mod demo;
pub mod export;
pub mod serve;
