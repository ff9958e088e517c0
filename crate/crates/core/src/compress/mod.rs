//! Post-training compression: FFN-width pruning, distillation targets,
//! LoRA adapters, grouped LUT palettization and accuracy recovery.

mod distill;
mod int8;
mod lora;
mod palettize;
mod plan;
mod prune;
mod recovery;

pub use distill::{distill_loss, distill_step, distill_target, dense_distill_targets};
pub use int8::Int8Tensor;
pub use lora::{LoraAdapter, LORA_RANKS};
pub use palettize::{default_group_axis, kmeans_1d, palettize, GroupAxis, KMeans, LutPrecision, PalettizeOptions, PalettizedTensor};
pub use plan::{effective_bpw, plan_mixed, quantize, BpwReport, QuantPlan, TensorQuantError};
pub use prune::{learn_mask, prune, soft_top_k, MaskTrainConfig, MaskTrainer, PruneMask};
pub use recovery::{train_recovery_adapter, RecoveryConfig, RecoveryTrainer};
