//! File formats, run configuration and the command-line front end.

pub mod cli;
pub mod npy;
pub mod pgm;

pub use cli::{cli_main, Cli, Command};
pub use npy::{read_npy, read_npy_raw, write_npy, NpyArray};
pub use pgm::{read_pgm, write_pgm};
