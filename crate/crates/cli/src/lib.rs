//! Pipeline orchestration and the environment server for the slate-rl
//! toolkit. See the `slate-rl` binary for the command-line surface.

pub mod config;
pub mod io;
pub mod server;
pub mod tasks;
