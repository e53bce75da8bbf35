//! Layers, parameters and the forward context.

pub mod attention;
pub mod ctx;
pub mod layers;
pub mod mlp;
pub mod params;
pub mod tokens;

pub use attention::{Attention, AttentionConfig, AttentionVariant, T2T_QKV_DIM};
pub use ctx::{Ctx, Mode};
pub use layers::{BatchNorm, Conv2d, LayerNorm, Linear};
pub use mlp::Mlp;
pub use params::{Init, ParamId, ParamKind, ParamSpec, ParamStore};
pub use tokens::{
    img2seq, patch_count, patch_embed, seq2img, sinusoid_table, soft_split, ClassAndPosition, SoftSplit, TokenTensor,
};
