//! Loss, metrics, optimizer, data and the training loop.

pub mod data;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use data::{augment, procedural_image, AugmentSpec, Degradation, Sample, SynthDataset};
pub use metrics::{mean_psnr, psnr, psnr_loss, ssim, PSNR_CAP};
pub use optim::{Adam, LrSchedule};
pub use trainer::{log_line, TrainConfig, Trainer, TRAIN_KEYS};
