#![allow(
    clippy::unnecessary_cast,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop
)]

pub mod cli;
pub mod curriculum;
pub mod digest;
pub mod error;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod preprocess;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
