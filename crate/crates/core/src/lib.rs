//! Low-rank SVD-structured adapters, training-free merging and a small training harness.
//!
//! ```
//! use medlego::adapter::{random_adapter, Slot, TargetId};
//! use medlego::merge::{merge_target, MergeConfig};
//!
//! let t = TargetId::new(0, Slot::Q);
//! let a = random_adapter(t, 16, 16, 4, 1).unwrap();
//! let b = random_adapter(t, 16, 16, 4, 2).unwrap();
//! let (merged, record) = merge_target(&[a, b], &MergeConfig::default()).unwrap();
//! assert_eq!(merged.rank(), record.kept_rank);
//! ```

pub mod adapter;
pub mod bench;
pub mod error;
pub mod exec;
pub mod io;
pub mod linalg;
pub mod merge;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
