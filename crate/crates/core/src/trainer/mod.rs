//! Mean-teacher training: configuration, losses, optimizer and loop.

pub mod config;
pub mod losses;
pub mod optim;
pub mod train;

pub use config::{parse_key_values, TrainConfig};
pub use losses::{consistency_loss, ema_update, form_triplets, pair_loss};
pub use optim::Adam;
pub use train::{
    net_config_for, run, score_images, scored_samples, split_by_customer, subsample, train_loop, validate,
    write_loss_log, write_validation_log, Batch, LossBreakdown, TrainOutcome, Trainer, ValidationRecord,
};
