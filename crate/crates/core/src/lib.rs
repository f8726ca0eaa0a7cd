// `!(x > 0.0)` checks are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod bench;
pub mod counters;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod matcher;
pub mod matrix;
pub mod neighborhood;
pub mod rng;
pub mod spatial;
pub mod training;
pub mod weights;

pub use error::{Error, Result};
