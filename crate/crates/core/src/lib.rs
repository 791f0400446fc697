// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod depth;
pub mod experiment;
pub mod gradcheck;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod numerics;
pub mod objectives;
pub mod params;
pub mod simulator;
pub mod stin;
pub mod trainer;
