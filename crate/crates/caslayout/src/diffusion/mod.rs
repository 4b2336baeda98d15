//! Denoising diffusion machinery: the noise schedule, the four cascaded
//! stage denoisers with their losses and ancestral sampler, the
//! bidirectional relation VAE, and the joint co-training objective.

pub mod schedule;
pub mod stage;
pub mod train;
pub mod vae;

pub use schedule::{q_sample, reverse_step, NoiseSchedule, ScheduleError};
pub use stage::{ddpm_sample, normalize_rotation, stage_losses, StageConfig, StageError, StageModel, StageTruth};
pub use train::{
    cotrain, cotrain_item, cotrain_step, stage_item, stage_truth, train_stage, train_vae, vae_item, CotrainItem,
    CotrainStats, OptimConfig, StageItem, TrainError, VaeItem,
};
pub use vae::{
    candidate_set, decode_predictions, kl_divergence, reconstruction_accuracy, vae_loss, Candidate, GraphView,
    VaeAttentionMode, VaeConfig, VaeEncodeOut, VaeError, VaeModel, KL_WEIGHT,
};
