// `!(a < b)` is how NaN-rejecting checks are spelled here.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod descriptor;
pub mod error;
pub mod ih;
pub mod index;
pub mod ingest;
pub mod lsh;
pub mod model;
pub mod query;
pub mod rtree;
pub mod store;

pub use error::{Error, Result};
pub use index::{build_index, BuildConfig, Index, PointSource};
