//! Composite building blocks.

pub mod attention;
pub mod ffn;
pub mod fusion;
pub mod htb;
pub mod layers;
pub mod lfe;

pub use attention::{AttnSpec, AttnVariant, ChannelSelfAttention, Fusion, SpatialSelfAttention};
pub use ffn::{Ffn, FfnSpec, FfnVariant};
pub use fusion::{Acm, FusionLayer, Sk};
pub use htb::{Htb, HtbSpec, HtbTrace};
pub use layers::{Conv, LayerNorm, Se};
pub use lfe::{Lfe, LfeSpec};
