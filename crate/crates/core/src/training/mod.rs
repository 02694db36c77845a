//! Pre-training, fine-tuning and the optimizer they share.

pub mod finetune;
pub mod optim;
pub mod pretrain;

pub use finetune::{
    datasets_from_records, finetune, label_scores, predict_label, predict_sequence, prepare_model, prompt_snapshot,
    round_robin_schedule, unify_finetune_data, FinetuneConfig, FinetuneExample, FinetuneStep, TaskDataset, TaskFormat, TaskSpec, UnifiedTasks,
};
pub use optim::{AdamW, OptimizerConfig};
pub use pretrain::{build_batch, check_gradients, corpus_dispatch, multitask_loss, pretrain, PretrainBatch, PretrainConfig, StepMetrics};
