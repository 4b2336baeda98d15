//! Cascaded four-stage diffusion for indoor furniture layout synthesis.
//!
//! The library decomposes layout generation into four conditional denoising
//! stages (furniture types, sizes + feature embeddings, relation latents,
//! box layout), built on top of exact oriented-bounding-box geometry, a
//! sparse functional relation graph, and a bidirectional relation VAE.
//!
//! Entry points:
//! - [`geometry`] — OBB distances, overlaps and footprint predicates
//! - [`scene`] — scene data model, JSON I/O, rasterization, augmentation
//! - [`relations`] — pairwise relation extraction (direction, distance,
//!   alignment, symmetry, architecture distances)
//! - [`sparse`] — functional zones, graph sparsification, relation entropy
//! - [`nn`] — minimal reverse-mode autodiff core (tensors, attention, AdamW)
//! - [`diffusion`] — noise schedules, the four stage denoisers, the relation
//!   VAE and the co-training objective
//! - [`pipeline`] — generation, rearrangement, completion, graph-conditioned
//!   generation and editing
//! - [`metrics`] / [`render`] — layout quality metrics and top-down rendering
//! - [`synth`] — deterministic synthetic scene corpora for training and tests

pub mod config;
pub mod diffusion;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod relations;
pub mod render;
pub mod scene;
pub mod sparse;
pub mod synth;

pub use geometry::{GeometryError, Obb, Segment2D};
pub use relations::{RelationCategory, RelationEdge, RelationGraph};
pub use scene::{ElementClass, Scene, SceneElement, SceneError, Vocabulary};
