//! Desk-scale decoder-only transformer with a feature projector and LoRA
//! adapters: forward pass, hand-written backward pass, greedy generation
//! and checkpoint I/O.

mod backward;
pub mod checkpoint;
mod config;
mod forward;
mod generate;
mod params;
pub mod tensor;

pub use backward::{grad_norm, loss, loss_and_grad, loss_and_grad_with_labels, token_nll, LossGrad};
pub use config::{LoraConfig, LoraTarget, ModelConfig, TrainableScope};
pub use forward::{forward, forward_last, softmax_rows, ModelInput, Position};
pub use generate::{generate, Generation};
pub use params::{LayerParams, Linear, Lora, ModelParams, TensorRole};
pub use tensor::Tensor;
