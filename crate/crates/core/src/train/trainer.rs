use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, Dataset, RunConfig, Sgd};
use crate::boxes::{assign_labels, encode_box, generate_anchors, Anchor, AnchorLabel, Box3};
use crate::data::{augment, csv_io, extract_train_patch, NoduleAnnotation, PatchSample};
use crate::error::{Error, Result};
use crate::losses::{detection_loss, AnchorTarget};
use crate::nn::{Binder, Network};
use crate::rng::derive_seed;
use crate::tensor::tape::NormMode;
use crate::tensor::{Tape, Tensor};

// stream tags for derive_seed
const INIT: u64 = 0;
const EPOCH: u64 = 1;
const SAMPLE: u64 = 2;
const LOSS: u64 = 3;

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub l_cls: f64,
    pub l_reg: f64,
    pub total: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub fn write_loss_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Labels and regression targets for every anchor of one patch, in anchor order.
pub fn anchor_targets(anchors: &[Anchor], annotations: &[NoduleAnnotation], cfg: &RunConfig) -> Result<Vec<AnchorTarget>> {
    let gts: Vec<Box3> = annotations.iter().map(|a| Box3::new(a.x, a.y, a.z, a.diameter / 2.0)).collect();
    let labels = assign_labels(anchors, &gts, &cfg.assign)?;
    anchors
        .iter()
        .zip(labels)
        .map(|(a, label)| {
            let deltas = match label {
                AnchorLabel::Positive(g) => encode_box(&gts[g], &a.bbox)?,
                _ => [0.0; 4],
            };
            Ok(AnchorTarget { label, deltas })
        })
        .collect()
}

/// Owns the network, the optimizer state and the step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub network: Network,
    pub optimizer: Sgd,
    step: usize,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let network = Network::new(&config.network, derive_seed(config.seed, &[INIT]))?;
        let optimizer = Sgd::new(config.optimizer, &network.params().iter().map(|(_, t)| t).collect::<Vec<_>>());
        Ok(Trainer { config, network, optimizer, step: 0 })
    }

    /// Resumes from a checkpoint; training continues exactly where it stopped.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let network = ckpt.network()?;
        let mut optimizer = Sgd::new(ckpt.config.optimizer, &network.params().iter().map(|(_, t)| t).collect::<Vec<_>>());
        if !ckpt.momentum.is_empty() {
            if ckpt.momentum.len() != optimizer.velocity.len() {
                return Err(Error::Config("checkpoint momentum does not match the network".into()));
            }
            let names = network.params().iter().map(|(n, _)| n);
            for ((v, name), (m_name, m)) in optimizer.velocity.iter_mut().zip(names).zip(&ckpt.momentum) {
                if name != m_name || v.shape() != m.shape() {
                    return Err(Error::Config(format!("checkpoint momentum {m_name} does not match {name}")));
                }
                *v = m.clone();
            }
        }
        Ok(Trainer { config: ckpt.config.clone(), network, optimizer, step: ckpt.step })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self, n_samples: usize) -> usize {
        self.config.max_steps.unwrap_or(self.config.epochs * self.steps_per_epoch(n_samples))
    }

    /// Training patches of `step`: each epoch visits volumes in a fresh
    /// permutation; every sample draws from its own `(seed, step, slot)` stream.
    pub fn sample_batch(&self, data: &Dataset, step: usize) -> Vec<PatchSample> {
        let n = data.len();
        let spe = self.steps_per_epoch(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[EPOCH, (step / spe) as u64])));
        let crop = self.config.crop();
        let bs = self.config.batch_size;
        crate::par::map_range(bs, |j| {
            let idx = order[((step % spe) * bs + j) % n];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[SAMPLE, step as u64, j as u64]));
            let s = extract_train_patch(&data.volumes[idx], &data.annotations[idx], &mut rng, &crop);
            if self.config.augment {
                augment(&s, &mut rng)
            } else {
                s
            }
        })
    }

    /// Anchors of a training patch, `[z, y, x, slot]` order.
    pub fn anchors(&self, size: [usize; 3]) -> Vec<Anchor> {
        let s = self.config.network.output_stride;
        generate_anchors([size[2] / s, size[1] / s, size[0] / s], s, &self.config.anchor_sizes)
    }

    /// One optimizer update on `batch`; advances the step counter.
    pub fn train_step(&mut self, batch: &[PatchSample]) -> Result<LogRow> {
        let step = self.step;
        let diverged = |detail: String| Error::Divergence { step: step as u64, detail };
        let input = Tensor::stack(&batch.iter().map(PatchSample::to_tensor).collect::<Vec<_>>())?;
        let anchors = self.anchors(batch[0].size);
        let mut targets = Vec::with_capacity(anchors.len() * batch.len());
        for s in batch {
            targets.extend(anchor_targets(&anchors, &s.annotations, &self.config)?);
        }
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape, self.network.params(), NormMode::Train, self.network.norm_settings(), true);
        let result = (|| {
            let x = b.tape.leaf(input, false);
            let head = self.network.forward_raw(&mut b, x)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[LOSS, step as u64]));
            let (loss, breakdown) = detection_loss(b.tape, head, &targets, &self.config.loss, &mut rng)?;
            b.tape.backward(loss)?;
            Ok(breakdown)
        })();
        let breakdown = result.map_err(|e: Error| match e {
            Error::NonFinite { op } => diverged(format!("non-finite value in {op}")),
            other => other,
        })?;
        if !breakdown.total.is_finite() {
            return Err(diverged(format!("loss {}", breakdown.total)));
        }
        let (grads, stats) = b.finish();
        self.network.params_mut().set_stats(stats);
        let mut params: Vec<&mut Tensor> = self.network.params_mut().values_mut().collect();
        self.optimizer.step(&mut params, &grads);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(diverged("non-finite parameter after update".into()));
        }
        self.step += 1;
        Ok(LogRow {
            step,
            l_cls: breakdown.l_cls,
            l_reg: breakdown.l_reg,
            total: breakdown.total,
            n_pos: breakdown.n_pos,
            n_neg: breakdown.n_neg,
        })
    }

    /// Trains up to the configured step count. `on_step` sees every row and
    /// the trainer after the update (for logging and periodic checkpoints).
    pub fn train(&mut self, data: &Dataset, mut on_step: impl FnMut(&LogRow, &Trainer) -> Result<()>) -> Result<Vec<LogRow>> {
        let total = self.total_steps(data.len());
        let mut rows = Vec::with_capacity(total.saturating_sub(self.step));
        while self.step < total {
            let batch = self.sample_batch(data, self.step);
            let row = self.train_step(&batch)?;
            on_step(&row, self)?;
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            params: self.network.params().named_tensors(),
            momentum: self
                .network
                .params()
                .iter()
                .zip(&self.optimizer.velocity)
                .map(|((n, _), v)| (n.to_string(), v.clone()))
                .collect(),
        }
    }
}
