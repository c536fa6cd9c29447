//! Convolutional blocks, invertible coupling and optimization.

pub mod adam;
pub mod block;
pub mod conv;
pub mod invertible;
pub mod meter;
pub mod params;

pub use adam::{Adam, AdamConfig};
pub use block::{conv_block_backward, conv_block_forward, ConvBlockParams};
pub use conv::{Conv3d, Shape3};
pub use invertible::{invertible_backward, CouplingLayer, CouplingState, Half};
pub use meter::MemoryMeter;
pub use params::{load_checkpoint, save_checkpoint, Gains, GradientTape, NetworkParams};
