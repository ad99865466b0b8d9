//! The squeeze-and-excitation encoder-decoder region proposal network.

mod network;
mod params;

pub use network::{
    ablation_variant, anchor_predictions, probabilities, Ablation, AnchorPrediction, Network, NetworkConfig,
    SeResidualBlock,
};
pub use params::{Binder, ParamId, ParamStore, StatsId};
