#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod jdan;
pub mod nfn;
pub mod numeric;
pub mod par;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, Result};
