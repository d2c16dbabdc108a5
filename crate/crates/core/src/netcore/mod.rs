//! Minimal tensor math with hand-written reverse-mode rules, the shared
//! per-channel ConvNet, RoI pooling and the classifier head.

pub mod checkpoint;
pub mod layers;
pub mod network;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use layers::Mode;
pub use network::{ForwardOutput, Grads, NetConfig, NetInput, Network, ParamSet, Tape, TABLE_WIDTHS};
pub use tensor::{Real, Tensor};
