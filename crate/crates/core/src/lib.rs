//! AND/OR interactions of black-box value functions on the subset lattice,
//! their sparse decomposition, and layer-wise tracking through linear probes.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod decomposition;
pub mod error;
pub mod interaction;
pub mod json;
pub mod lattice;
pub mod metrics;
pub mod probe;
pub mod value;
