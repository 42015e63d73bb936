//! Class-incremental learning over frozen vision-language embeddings with
//! expandable per-task projections and self-attention cross-modal fusion.

pub mod checkpoint;
pub mod dataset;
pub mod eval;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;
