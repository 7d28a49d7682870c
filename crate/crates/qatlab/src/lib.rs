//! Desk-scale laboratory for training tiny byte-level transformers with
//! integer weight grids, warmup–stable–decay schedules, factorial sweep
//! execution, and the statistics that turn sweep records into tables.

pub mod error;
pub mod numerics;
pub mod quant;
pub mod report;
pub mod grid;
pub mod model;
pub mod optim;
pub mod schedule;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
