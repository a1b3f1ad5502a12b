// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod format;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod reward;
pub mod rllf;
pub mod sft;
pub mod teacher;
pub mod toy;
pub mod verifier;

pub use error::{Error, Result};
