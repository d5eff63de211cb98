//! txnet-core: a small, deterministic NCHW tensor engine with reverse-mode
//! differentiation, plus the TransXNet building blocks (D-Mixer with IDConv,
//! OSRA, and STE; MS-FFN; DPE; the T/S/B model builders) and analysis tools
//! for parameter/FLOPs accounting and effective-receptive-field maps.
//!
//! The engine is CPU-only, row-major, and copy-on-slice. Forward results are
//! bit-identical across runs and thread counts: every output element has a
//! fixed reduction order, and intra-op parallelism only partitions disjoint
//! output slabs.

pub mod analysis;
pub mod error;
pub mod mixer;
pub mod net;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod scalar;
pub mod shape;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use shape::Shape;
pub use tape::{backward, Tape};
pub use tensor::Tensor;
