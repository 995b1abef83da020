//! Desk-scale goal-conditioned shopping agent: a miniature web-shop
//! environment, a small sequence policy with language-modeling and value
//! heads, behavioral cloning, PPO fine-tuning, and the Score / Success-Rate
//! evaluation harness.

pub mod actions;
pub mod bc;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod ppo;
pub mod rollout;
pub mod scalar;
pub mod text;
pub mod wire;

pub use error::ShopError;
pub use scalar::Scalar;

/// Production scalar type; tests instantiate the same code with `f64` where
/// they need finite-difference headroom.
pub type Real = f32;
