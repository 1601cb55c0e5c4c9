//! Audio-visual active-speaker training rig built around a hierarchical
//! gated fusion decoder, with its own reverse-mode differentiation core,
//! baseline decoders, losses with masking and stop-gradient semantics, a
//! synthetic episode generator, and a training/ablation CLI.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod gradcheck;
pub mod heads;
pub mod higate;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod synthdata;
pub mod tape;
pub mod train;
pub mod tensor;
