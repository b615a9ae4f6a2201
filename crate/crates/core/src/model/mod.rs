//! The 3D fully-convolutional network and its affinity branch.

mod blocks;
mod network;
mod params;

pub use blocks::{
    BnLayer, ChannelAttention, ConvLayer, ConvUnit, Ctx, DownBlock, DsrUnit, StatUpdate, UpBlock, SPATIAL_KERNEL,
    SPECTRAL_KERNEL,
};
pub use network::{
    AffinityBranch, DsrLedgerEntry, Fcspn, ForwardOutput, ModelConfig, ShapePlan, MIN_SPATIAL, STAGES, STEM_KERNEL,
};
pub use params::{ModelParams, ParamEntry, ParamKind, ParamLayout, ParamSpec};
