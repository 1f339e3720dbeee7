//! Synthetic data, training and evaluation.

pub mod data;
pub mod train;

pub use data::{
    generate, read_dataset, read_manifest, read_split, write_dataset, Dataset, Split,
    SyntheticTaskSpec, Utterance,
};
pub use train::{evaluate, train, Adam, EvalReport, MetricsRecord, TrainConfig, TrainOutcome};

use crate::encoder::{ConvBlockKind, EncoderConfig};
use crate::multiconv::FusionKind;

/// Small encoder used for the convergence runs: d=64, two layers, four
/// heads, `d_inter = 384`, kernels {3, 7, 11, 15}.
pub fn toy_encoder_config(conv_block: ConvBlockKind, fusion: FusionKind) -> EncoderConfig {
    let mut cfg = EncoderConfig::new(2, 64, 4);
    cfg.d_inter = 384;
    cfg.kernels = vec![3, 7, 11, 15];
    cfg.conv_block = conv_block;
    cfg.fusion = fusion;
    cfg
}
