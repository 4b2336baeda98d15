//! Minimal reverse-mode differentiable compute layer: rank-2 tensors on a
//! flat tape, linear layers, layer normalization, masked multi-head
//! attention, MLPs, embedding tables, sinusoidal timestep embeddings and a
//! decoupled-weight-decay optimizer.
//!
//! Forward/backward passes over one tape are single-threaded and
//! deterministic. Independent evaluations may run concurrently against a
//! shared read-only [`ParamStore`]; updates require exclusive access.

mod layers;
mod params;
mod tape;

pub use layers::{timestep_embedding, Embedding, LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use params::{checkpoint_bytes, load_checkpoint, randn, save_checkpoint, Init, ParamStore};
pub use tape::{Array, AttentionMask, Ctx, NnError, Tape, TensorId};
