//! Masked-autoencoder pre-training and segmentation of digital elevation
//! models: ViT backbone, MAE objective, UperNet and UNet heads, training
//! loops, DEM data handling and IoU evaluation.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradsuite;
pub mod mae;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod persist;
pub mod rng;
pub mod seg;
pub mod train;
pub mod vit;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use mae::{mae_decode, random_mask, reconstruction_loss, MaeModel, MaskPlan};
pub use metrics::{evaluate, sample_curve, Confusion, SegReport};
pub use optim::{compute_class_weights, poly_lr, weighted_cross_entropy, AdamW, TrainPlan};
pub use seg::{HeadKind, Segmenter};
pub use train::{finetune_loop, pretrain_loop, FinetuneOutcome, PretrainPlan, TraceEntry};
pub use vit::VitEncoder;
