//! Emulation of secure VNF image delivery over an SDN-switched optical
//! network in which one QKD sender is time-shared among several receivers.

pub mod clock;
pub mod crypto;
pub mod link_model;
pub mod network;
pub mod orchestrator;
pub mod scalar;
pub mod scenario;
pub mod scheduler;
pub mod session;
pub mod testbed;
pub mod topology;
pub mod trace;
pub mod wire;

pub use link_model::{ChannelModel, InitCurve, LinkModel};
pub use scalar::Scalar;

/// Link model evaluated in double precision, as used by the emulator.
pub type ChannelModelF64 = ChannelModel<f64>;
/// Link model evaluated in single precision.
pub type ChannelModelF32 = ChannelModel<f32>;
