//! Temporal batch sampling, AdamW, the one-cycle schedule, the pre-training
//! loop, reconstruction evaluation and attention dumps.

mod eval;
mod optim;
mod sampler;
mod trainer;

pub use eval::{
    dump_attention, eval_recon, prev_index, sign_test, write_attention_csv, AttnFilter, AttnRow, EvalReport, FrameEval, Gap,
    PrevSource, SignTest,
};
pub use optim::{adamw_step, one_cycle_lr, AdamW, OneCycle};
pub use sampler::{temporal_indices, temporal_sample, TemporalBatchRule};
pub use trainer::{MetricsLog, StepRecord, Trainer};
