//! Command-line front end: experiment configs, subcommands, SVG output and the
//! scripted toy reproductions.

pub mod commands;
pub mod config;
pub mod repro;
pub mod svg;
