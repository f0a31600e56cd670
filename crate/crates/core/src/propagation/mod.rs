//! Teacher and student video object segmentation networks.

pub mod checkpoint;
pub mod memory;
pub mod network;
pub mod params;
pub mod spec;

pub use checkpoint::Checkpoint;
pub use memory::Memory;
pub use network::{
    block_forward, decode, embed_ids, encode, segment_sequence, BlockOutput, Encoded, FrameOutput, Network, Propagator,
    Segmentation, Stage,
};
pub use params::{Bound, ParamStore};
pub use spec::{AttentionKind, NetworkSpec};
