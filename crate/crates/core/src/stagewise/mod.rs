//! Stage-wise residual reconstruction: Stage Control gating, predictors,
//! the accumulation pipeline and the predictor training loops.

pub mod control;
pub mod density;
pub mod finetune;
pub mod pipeline;
pub mod pod;
pub mod predictor;

pub use control::{compute_stage_mask, compute_stage_mask_for, StageControlConfig, StageMask};
pub use pipeline::{run_pipeline, PipelineConfig, StagePipelineState, StageRecord};
pub use predictor::{predict_increment, HeuristicPredictor, Predictor, TinyLinear};
pub use pod::{distill_loss, pod_train, theta_distance, DistillWeights, EvalRecord, PodConfig, PodLogRecord, PodTrainer, Supervision, WeightAdam};
pub use finetune::{finetune_pass, finetune_train, prefix_losses, quantized_loss, FinetuneConfig, FinetuneLogRecord, FinetuneTrainer, QuantAware};
pub use density::{density_map, density_profile};
