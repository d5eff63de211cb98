//! Model assembly: MS-FFN, DPE, block composition, patch embeddings, stage
//! stacking, the classification head, and the tiny/small/base builders.

mod config;
mod ffn;
mod model;
mod params;

pub use config::{
    embed_out_extent, reduced_extent, MixerMode, ModelConfig, StageConfig, DEFAULT_FFN_SCALES,
};
pub use ffn::{dpe_forward, msffn_forward, MsFfnParams};
pub use model::{
    build_model, block_forward, BlockParams, BranchSel, BuildOptions, EmbedParams, MixerKind,
    Model, StageParams, Tap, IDCONV_REDUCTION, STE_REDUCTION,
};
pub use params::{Init, ParamEntry, ParamSource, ParamStore, SeededSource};
