//! Library half of the dstab command-line tool: run-configuration
//! parsing and the static SVG charts. The binary in `main.rs` is a thin
//! argument layer over these modules and `dstab_core`.

pub mod config;
pub mod svg;
