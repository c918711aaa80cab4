//! Files, configuration and the command-line front end for `stbn-core`.
//!
//! On-disk formats (all little-endian):
//!
//! * `STBNVID1` video container: 8-byte magic, four `i32` (`T, H, W, C`),
//!   then `T*H*W*C` `f32` values in `T, H, W, C` order. Lossless.
//! * PNG frame directories: 8-bit grayscale or RGB, read in lexicographic
//!   file-name order. Saving quantises `round(255 * clamp(v, 0, 1))`.
//! * `STBNFLO1` flow file: magic, two `i32` (`H, W`), then `H*W*2` `f32`
//!   values `(dx, dy)` per pixel, row-major.
//! * `STBNCKP1` checkpoint: see [`checkpoint`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod external;
pub mod flowfile;
pub mod io;
pub mod plot;
pub mod report;

pub use error::{Error, Result};
