//! Gradient-checked LSTM substrate: cell, language model, Adam, checkpoints.

mod adam;
pub mod cell;
mod checkpoint;
mod lstm;

pub use adam::{adam_update, clip_grad_norm, AdamState};
pub use checkpoint::{LstmCheckpoint, LSTM_CHECKPOINT_FORMAT};
pub use lstm::{
    backward, continue_sampling, lstm_step, output_distribution, prefix_state, sample_sequence,
    sample_with, sequence_nll, softmax, GenState, Gradients, LstmDims, LstmParams, TokenWeights,
};
