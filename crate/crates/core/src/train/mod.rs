//! Run configuration, optimizer, training loop, checkpoints and detection.

mod checkpoint;
mod dataset;
mod detect;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::boxes::AssignConfig;
use crate::data::CropConfig;
use crate::error::{Error, Result};
use crate::losses::{ClsNormalization, FocalParams, LossConfig};
use crate::nn::{Ablation, NetworkConfig};
use crate::tensor::Tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use dataset::{make_phantoms, Dataset, Manifest};
pub use detect::{detect, detect_patch};
pub use trainer::{write_loss_log, LogRow, Trainer};

const NO_FOCAL_NEG_POS_RATIO: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 0.01, momentum: 0.9, weight_decay: 1e-4 }
    }
}

/// SGD with heavy-ball momentum: `v ← μv + g + λw`, `w ← w − η v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &[&Tensor]) -> Self {
        Sgd { config, velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect() }
    }

    /// Updates every parameter that received a gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>]) {
        let SgdConfig { lr, momentum, weight_decay } = self.config;
        for ((w, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            let (w, v) = (w.data_mut(), v.data_mut());
            for ((w, &g), v) in w.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *v = momentum * *v + g + weight_decay * *w;
                *w -= lr * *v;
            }
        }
    }
}

/// Everything needed to train and run the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub optimizer: SgdConfig,
    pub batch_size: usize,
    pub train_patch: usize,
    pub eval_patch: usize,
    pub overlap: usize,
    /// Anchor cube sides, voxels.
    pub anchor_sizes: Vec<f64>,
    pub assign: AssignConfig,
    pub nms_thresh: f64,
    /// Anchors below this probability are never emitted.
    pub cutoff: f64,
    pub top_k: usize,
    /// Probability of centering a training crop on a nodule.
    pub nodule_crop_prob: f64,
    pub augment: bool,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    /// Periodic checkpoint interval in steps (0 = final only).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            optimizer: SgdConfig::default(),
            batch_size: 40,
            train_patch: 128,
            eval_patch: 208,
            overlap: 32,
            anchor_sizes: vec![5.0, 10.0, 20.0],
            assign: AssignConfig::default(),
            nms_thresh: 0.1,
            cutoff: 0.1,
            top_k: 100,
            nodule_crop_prob: 0.7,
            augment: true,
            epochs: 100,
            max_steps: None,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// CPU-sized variant: tiny network, batch 4, patches 48 (train) / 96 (eval).
    /// The classification term is normalized by the positive count: with a
    /// few thousand anchors per patch, a mean over all anchors leaves too
    /// little signal on the positives for short runs.
    pub fn desk_scale() -> Self {
        RunConfig {
            network: NetworkConfig::tiny(),
            loss: LossConfig { cls_normalization: ClsNormalization::PerPositive, ..Default::default() },
            batch_size: 4,
            train_patch: 48,
            eval_patch: 96,
            ..Default::default()
        }
    }

    /// Applies an ablation. `NoSe` drops the squeeze-and-excitation gates,
    /// `NoFocal` switches to plain cross-entropy with negatives capped at
    /// 3 per positive, `BaselineRpn` does both.
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        if !ablation.uses_se() {
            self.network.use_se = false;
        }
        if !ablation.uses_focal() {
            self.loss.focal = FocalParams::cross_entropy();
            self.loss.neg_pos_ratio = Some(NO_FOCAL_NEG_POS_RATIO);
        }
        self
    }

    /// The ablation this configuration corresponds to.
    pub fn ablation(&self) -> Ablation {
        match (self.network.use_se, self.loss.focal.gamma != 0.0) {
            (true, true) => Ablation::Full,
            (false, true) => Ablation::NoSe,
            (true, false) => Ablation::NoFocal,
            (false, false) => Ablation::BaselineRpn,
        }
    }

    pub fn crop(&self) -> CropConfig {
        CropConfig { patch: self.train_patch, nodule_prob: self.nodule_crop_prob }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.focal.validate()?;
        let stride = self.network.deepest_stride();
        for (name, p) in [("train_patch", self.train_patch), ("eval_patch", self.eval_patch)] {
            if p == 0 || p % stride != 0 {
                return Err(Error::Config(format!("{name} {p} must be a positive multiple of {stride}")));
            }
        }
        if self.overlap >= self.eval_patch {
            return Err(Error::Config("overlap must be below eval_patch".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.anchor_sizes.len() != self.network.num_anchors || self.anchor_sizes.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!(
                "{} anchor sizes for {} anchors per cell",
                self.anchor_sizes.len(),
                self.network.num_anchors
            )));
        }
        if !(0.0..=1.0).contains(&self.nodule_crop_prob) || !(0.0..1.0).contains(&self.cutoff) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.momentum >= 0.0 && o.momentum < 1.0 && o.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_round_trip() {
        let c = RunConfig::desk_scale().with_ablation(Ablation::NoSe);
        let text = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.ablation(), Ablation::NoSe);
        let partial: RunConfig = serde_json::from_str(r#"{"batch_size": 2}"#).unwrap();
        assert_eq!(partial, RunConfig { batch_size: 2, ..Default::default() });
        assert!(serde_json::from_str::<RunConfig>(r#"{"batchsize": 2}"#).is_err());
    }

    #[test]
    fn ablations_touch_one_dimension() {
        let base = RunConfig::default();
        let no_se = base.clone().with_ablation(Ablation::NoSe);
        assert_eq!(RunConfig { network: base.network.clone(), ..no_se.clone() }, base);
        assert!(!no_se.network.use_se);
        let no_focal = base.clone().with_ablation(Ablation::NoFocal);
        assert_eq!(no_focal.loss.focal.gamma, 0.0);
        assert_eq!(RunConfig { loss: base.loss, ..no_focal }, base);
        assert_eq!(base.clone().with_ablation(Ablation::BaselineRpn).ablation(), Ablation::BaselineRpn);
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut w = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let mut opt = Sgd::new(SgdConfig { lr: 0.1, momentum: 0.5, weight_decay: 0.0 }, &[&w]);
        let g = Some(Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
        opt.step(&mut [&mut w], std::slice::from_ref(&g));
        assert_eq!(w.data(), &[0.9, -2.1]);
        opt.step(&mut [&mut w], &[g]);
        // v = 0.5·1 + 1 = 1.5
        assert!((w.data()[0] - 0.75).abs() < 1e-15);
    }
}
