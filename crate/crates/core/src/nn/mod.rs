//! Dense-array numerics with reverse-mode gradient support.

pub mod array;
pub mod checkpoint;
pub mod layers;
pub mod params;
pub mod tape;

pub use array::{Elem, NdArray};
pub use layers::{cross_attention, ffn, multi_head_self_attention, Attention, Ffn, LayerNorm, Linear};
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use tape::{NnError, Tape, TensorId};
