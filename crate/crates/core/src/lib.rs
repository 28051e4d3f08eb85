//! Property-controllable generation on mini-dSprites.
//!
//! A VAE-style generator `g(z, w)` with a property encoder `w = m(y)` is
//! trained to honor requested properties `y` that a known oracle `f` can
//! measure on its outputs. Training alternates labeled steps with steps on
//! its own generations (see [`trainer`]), and a variance penalty keeps the
//! free latent `z` from steering the properties.

pub mod config;
pub mod error;
pub mod eval;
pub mod formats;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Architecture, BaseGeneratorKind, ModelParams};
pub use synth::{ImageSample, PropertyVector, RangeSpec, Resolution, TargetMode};
pub use tensor::{Tape, Tensor, Var};
pub use trainer::{Ablation, ReplayDataset, TrainConfig};
