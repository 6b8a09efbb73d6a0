//! Joint training of a toy transformer and its prediction path.
//!
//! The objective is `L = L_model + λ·L_mse`, where `L_mse` measures how far
//! each head's approximate scores are from the exact ones. Attention is
//! computed densely with additive masks during training; the sparse kernels
//! in [`crate::sparse`] are the inference path.

pub mod autodiff;
pub mod model;
pub mod task;
pub mod train;

pub use autodiff::{Tape, Var};
pub use model::{
    mse_loss, AttentionMode, ForwardOptions, ForwardPass, HeadRecord, MaskPolicy, ModelConfig, Param,
    ParamGroup, ToyModel,
};
pub use task::{
    bag_of_words_baseline, brute_force_reader, make_toy_task, sample_sequence, Sample, TokenKind,
    ToyDataset, ToyTaskSpec,
};
pub use train::{
    batch_gradients, eval_dataset, evaluate, train, Adam, BatchGradients, EvalMetrics, EvalOptions,
    LossBreakdown, MseReduction, ScheduleKind, StepRecord, TrainConfig, TrainOutcome,
};

#[cfg(test)]
mod tests;
