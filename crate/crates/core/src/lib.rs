#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod classic;
pub mod error;
pub mod fe;
pub mod imputation;
pub(crate) mod linalg;
pub mod panel;
pub mod par;
pub mod period;
pub mod sdid;
pub mod simlab;

pub use error::{Error, Result};
pub use period::{Frequency, PeriodId};
