//! Digital-twin channel laboratory.
//!
//! The crate generates box-world urban scenes, ray-traces OFDM channel
//! responses through them, builds time-series and pilot/environment fusion
//! corpora, trains small transformer predictors with its own reverse-mode
//! autodiff engine, and closes the loop by driving beam selection and power
//! allocation from predicted channels.
//!
//! Runnable walkthroughs of each capability live in `examples/`.

pub mod scene;
pub mod raytrace;
pub mod records;
pub mod dataset;
pub mod neural;
pub mod experiments;
pub mod dtcloop;
pub mod cli;
