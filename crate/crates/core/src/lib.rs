//! Gaze-guided spiking transformer.
//!
//! A small dense-tensor engine with tape-based reverse-mode gradients, leaky
//! integrate-and-fire neurons with surrogate gradients, convolutional and
//! spike-attention blocks, eye-gaze guidance (input enhancement and
//! attention alignment), a MAC/AC energy profiler, and a synthetic
//! shortcut-learning benchmark with its training harness.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod energy;
pub mod error;
pub mod gaze;
pub mod gradcheck;
pub mod kernels;
pub mod lif;
mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pgm;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use blocks::{ConvSnnBlock, RepConv, SpikeAttentionBlock};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{AblationConfig, OutputConfig, TrainConfig};
pub use data::{generate_dataset, load_dataset, save_dataset, Dataset, DatasetConfig, SyntheticSample};
pub use energy::{
    count_flops, count_sops, estimate_energy, profile_model, EnergyConstants, EnergyReport, LayerCost, LayerKind,
    LayerShape,
};
pub use error::{Error, Result};
pub use gaze::{
    alignment_loss, apply_gaze_mask, gaze_token_attention, heatmap_from_fixations, total_loss, Fixation, GazeMask,
    GazeRecord, GazeTokenAttention,
};
pub use kernels::{batch_norm, conv2d, matmul, ConvMode, ConvSpec, RunningStats};
pub use lif::{lif_sequence, lif_step, surrogate_grad, LifParams, LifState, SpikeMode, SpikeTrain};
pub use metrics::{accuracy, f1_score, roc_auc, ssim};
pub use model::{EgSpikeFormer, FiringStats, ForwardOptions, ModelConfig};
pub use optim::Sgd;
pub use params::{Bindings, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use train::{
    evaluate, run_ablation, train_model, AblationCell, AblationReport, Evaluation, MetricsRow, TrainOutcome,
};
