//! Minimal numeric core: parameter store, reverse-mode tape, Adam.

pub mod optim;
pub mod params;
pub mod tape;

pub use optim::{Adam, AdamConfig};
pub use params::{clip_global_norm, GradStore, ParamId, ParamSet, TensorSpec};
pub use tape::{GruIds, Tape, Val};
