//! Neural building blocks: convolutions, pooling, normalization, linear
//! projections, activations, and the multi-head attention primitive. Every
//! op has a forward path and a recorded backward rule.

mod act;
mod attention;
mod conv;
mod linear;
mod norm;
pub(crate) mod pool;

pub use act::{gelu, softmax};
pub use attention::{attention_probs, multi_head_attention};
pub use conv::{conv2d, depthwise_conv_per_sample, Conv2dParams};
pub use linear::linear;
pub use norm::{batch_norm_inference, NormParams};
pub use pool::{adaptive_avg_pool, global_avg_pool};
