//! Desk-scale training: CIFAR ingestion, AdamW, cosine schedule, EMA and the
//! deterministic loop.

pub mod data;
mod optim;
mod trainer;

pub use data::{load_cifar, load_cifar10, synthetic_records, CifarRecord, Dataset, RecordFormat, CHANNELS, SIDE};
pub use optim::{adamw_step, cosine_lr, ema_update, AdamW, AdamWConfig};
pub use trainer::{count_top_k, evaluate, render_metrics, train, train_step, Accuracy, EpochMetrics, Outputs, TrainConfig, TrainSummary};
