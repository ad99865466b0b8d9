use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Binder, ParamId, ParamStore, StatsId};
use crate::error::{Error, Result};
use crate::losses::VALUES_PER_ANCHOR;
use crate::tensor::tape::{sigmoid, NormMode, NormSettings};
use crate::tensor::{Tape, Tensor, Var};

/// Architecture hyper-parameters.
///
/// Encoder stage `k` runs at stride `2^(k+1)` (a stem convolution and a
/// max-pool precede stage 0; later stages open with a stride-2 block). Every
/// decoder entry but the last upsamples by two and merges the encoder
/// features of matching stride; the last entry is the width of the 1×1×1
/// feature layer feeding the output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub decoder_channels: Vec<usize>,
    pub num_anchors: usize,
    pub output_stride: usize,
    pub use_se: bool,
    pub se_reduction: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Initial bias of every classification logit.
    pub cls_bias_init: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 1,
            encoder_channels: vec![24, 32, 64, 64],
            blocks_per_stage: 2,
            decoder_channels: vec![64, 64, 128],
            num_anchors: 3,
            output_stride: 4,
            use_se: true,
            se_reduction: 16,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            cls_bias_init: -4.6,
        }
    }
}

impl NetworkConfig {
    /// Small plan for CPU training.
    pub fn tiny() -> Self {
        NetworkConfig {
            encoder_channels: vec![8, 16, 16],
            blocks_per_stage: 1,
            decoder_channels: vec![16, 32],
            ..Default::default()
        }
    }

    /// Smallest plan, used by gradient checks.
    pub fn micro() -> Self {
        NetworkConfig {
            encoder_channels: vec![4, 8, 8],
            blocks_per_stage: 1,
            decoder_channels: vec![8, 8],
            ..Default::default()
        }
    }

    /// Stride of the deepest encoder stage.
    pub fn deepest_stride(&self) -> usize {
        1 << self.encoder_channels.len()
    }

    pub fn head_channels(&self) -> usize {
        self.num_anchors * VALUES_PER_ANCHOR
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.encoder_channels.is_empty() || self.decoder_channels.is_empty() {
            return bad("encoder and decoder need at least one entry".into());
        }
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return bad("channel widths must be positive".into());
        }
        if self.blocks_per_stage == 0 || self.num_anchors == 0 || self.in_channels == 0 || self.se_reduction == 0 {
            return bad("block count, anchor count, input channels and SE reduction must be positive".into());
        }
        let ups = self.decoder_channels.len() - 1;
        if ups >= self.encoder_channels.len() {
            return bad(format!("{ups} upsampling steps need more than {} encoder stages", self.encoder_channels.len()));
        }
        let out_stride = self.deepest_stride() >> ups;
        if out_stride != self.output_stride {
            return bad(format!(
                "encoder depth {} with {ups} upsampling steps gives stride {out_stride}, not {}",
                self.encoder_channels.len(),
                self.output_stride
            ));
        }
        if !(self.bn_eps > 0.0 && (0.0..=1.0).contains(&self.bn_momentum)) {
            return bad("batch-norm eps must be positive and momentum in [0, 1]".into());
        }
        Ok(())
    }

    /// Output shape for an input of spatial extent `dims`.
    pub fn output_shape(&self, n: usize, dims: [usize; 3]) -> Result<[usize; 5]> {
        let s = self.deepest_stride();
        if n == 0 || dims.iter().any(|&d| d == 0 || d % s != 0) {
            return Err(Error::shape(format!(
                "input extents {dims:?} must be positive multiples of {s} (batch {n})"
            )));
        }
        let o = self.output_stride;
        Ok([n, self.head_channels(), dims[0] / o, dims[1] / o, dims[2] / o])
    }

    /// Hidden width of the excitation layers.
    pub fn se_hidden(&self, channels: usize) -> usize {
        (channels / self.se_reduction).max(1)
    }
}

/// Network variants of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoSe,
    NoFocal,
    BaselineRpn,
}

impl Ablation {
    pub fn uses_se(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoFocal)
    }

    pub fn uses_focal(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoSe)
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_se" => Ok(Ablation::NoSe),
            "no_focal" => Ok(Ablation::NoFocal),
            "baseline" | "baseline_rpn" => Ok(Ablation::BaselineRpn),
            other => Err(Error::Invalid(format!("unknown ablation {other:?}"))),
        }
    }
}

/// Network configuration of an ablation variant. The focal switch lives in
/// the loss configuration.
pub fn ablation_variant(config: &NetworkConfig, ablation: Ablation) -> NetworkConfig {
    NetworkConfig { use_se: ablation.uses_se(), ..config.clone() }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    stats: StatsId,
}

#[derive(Debug, Clone)]
struct SeParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct ResBlock {
    stride: usize,
    conv1: ParamId,
    bn1: Norm,
    conv2: ParamId,
    bn2: Norm,
    se: Option<SeParams>,
    shortcut: Option<(ParamId, Norm)>,
}

#[derive(Debug, Clone)]
struct UpStage {
    deconv: ParamId,
    bn: Norm,
    block: ResBlock,
}

struct Builder<'a> {
    store: ParamStore,
    rng: ChaCha8Rng,
    cfg: &'a NetworkConfig,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> ParamId {
        let std = (2.0 / (cin * k * k * k) as f64).sqrt();
        let w = Tensor::randn(&[cout, cin, k, k, k], std, &mut self.rng);
        self.store.add(format!("{name}.w"), w)
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::ones(&[c])),
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            stats: self.store.add_stats(name, c),
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> ResBlock {
        let conv1 = self.conv(&format!("{name}.conv1"), cout, cin, 3);
        let bn1 = self.norm(&format!("{name}.bn1"), cout);
        let conv2 = self.conv(&format!("{name}.conv2"), cout, cout, 3);
        let bn2 = self.norm(&format!("{name}.bn2"), cout);
        let se = self.cfg.use_se.then(|| {
            let r = self.cfg.se_hidden(cout);
            let w1 = Tensor::randn(&[r, cout], (2.0 / cout as f64).sqrt(), &mut self.rng);
            let w2 = Tensor::randn(&[cout, r], (1.0 / r as f64).sqrt(), &mut self.rng);
            SeParams {
                w1: self.store.add(format!("{name}.se.w1"), w1),
                b1: self.store.add(format!("{name}.se.b1"), Tensor::zeros(&[r])),
                w2: self.store.add(format!("{name}.se.w2"), w2),
                b2: self.store.add(format!("{name}.se.b2"), Tensor::zeros(&[cout])),
            }
        });
        let shortcut = (stride != 1 || cin != cout).then(|| {
            let w = self.conv(&format!("{name}.shortcut.conv"), cout, cin, 1);
            (w, self.norm(&format!("{name}.shortcut.bn"), cout))
        });
        ResBlock { stride, conv1, bn1, conv2, bn2, se, shortcut }
    }
}

/// The encoder-decoder region proposal network.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    store: ParamStore,
    stem: (ParamId, Norm),
    stages: Vec<Vec<ResBlock>>,
    ups: Vec<UpStage>,
    head_feature: (ParamId, ParamId),
    head_out: (ParamId, ParamId),
}

/// Squeeze and excitation: `sigmoid(w2·relu(w1·mean(U) + b1) + b2)` per channel.
fn excitation(b: &mut Binder, u: Var, se: &SeParams) -> Result<Var> {
    let z = b.tape.global_avg_pool(u)?;
    let (w1, b1, w2, b2) = (b.param(se.w1), b.param(se.b1), b.param(se.w2), b.param(se.b2));
    let h = b.tape.dense(z, w1, Some(b1))?;
    let h = b.tape.relu(h)?;
    let s = b.tape.dense(h, w2, Some(b2))?;
    b.tape.sigmoid(s)
}

fn block_forward(b: &mut Binder, x: Var, blk: &ResBlock) -> Result<Var> {
    let w1 = b.param(blk.conv1);
    let h = b.tape.conv3d(x, w1, None, blk.stride, 1)?;
    let h = b.batch_norm(h, blk.bn1.gamma, blk.bn1.beta, blk.bn1.stats)?;
    let h = b.tape.relu(h)?;
    let w2 = b.param(blk.conv2);
    let u = b.tape.conv3d(h, w2, None, 1, 1)?;
    let mut u = b.batch_norm(u, blk.bn2.gamma, blk.bn2.beta, blk.bn2.stats)?;
    if let Some(se) = &blk.se {
        let s = excitation(b, u, se)?;
        u = b.tape.scale_channels(u, s)?;
    }
    let short = match &blk.shortcut {
        Some((w, bn)) => {
            let w = b.param(*w);
            let s = b.tape.conv3d(x, w, None, blk.stride, 0)?;
            b.batch_norm(s, bn.gamma, bn.beta, bn.stats)?
        }
        None => x,
    };
    let y = b.tape.add(u, short)?;
    b.tape.relu(y)
}

impl Network {
    /// Builds a network with He-initialized weights drawn from `seed`.
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut bld = Builder { store: ParamStore::default(), rng: ChaCha8Rng::seed_from_u64(seed), cfg: config };
        let enc = &config.encoder_channels;
        let stem = (bld.conv("stem.conv", enc[0], config.in_channels, 3), bld.norm("stem.bn", enc[0]));
        let mut stages = Vec::new();
        for (k, &c) in enc.iter().enumerate() {
            let cin = if k == 0 { enc[0] } else { enc[k - 1] };
            let blocks = (0..config.blocks_per_stage)
                .map(|i| {
                    let (ci, stride) = if i == 0 { (cin, if k == 0 { 1 } else { 2 }) } else { (c, 1) };
                    bld.block(&format!("encoder.stage{k}.block{i}"), ci, c, stride)
                })
                .collect();
            stages.push(blocks);
        }
        let dec = &config.decoder_channels;
        let mut ups = Vec::new();
        let mut cur = *enc.last().unwrap();
        for (j, &d) in dec[..dec.len() - 1].iter().enumerate() {
            let skip = enc[enc.len() - 2 - j];
            let name = format!("decoder.up{j}");
            let std = (2.0 / (cur * 8) as f64).sqrt();
            let w = Tensor::randn(&[cur, d, 2, 2, 2], std, &mut bld.rng);
            let deconv = bld.store.add(format!("{name}.deconv.w"), w);
            let bn = bld.norm(&format!("{name}.bn"), d);
            let block = bld.block(&format!("{name}.block"), d + skip, d, 1);
            ups.push(UpStage { deconv, bn, block });
            cur = d;
        }
        let feat = *dec.last().unwrap();
        let head_feature = (bld.conv("head.feature", feat, cur, 1), bld.store.add("head.feature.b", Tensor::zeros(&[feat])));
        let a = config.num_anchors;
        let out_w = Tensor::randn(&[a * VALUES_PER_ANCHOR, feat, 1, 1, 1], 0.01, &mut bld.rng);
        let out_b = Tensor::from_fn(&[a * VALUES_PER_ANCHOR], |c| {
            if c % VALUES_PER_ANCHOR == 0 {
                config.cls_bias_init
            } else {
                0.0
            }
        });
        let head_out = (bld.store.add("head.out.w", out_w), bld.store.add("head.out.b", out_b));
        Ok(Network { config: config.clone(), store: bld.store, stem, stages, ups, head_feature, head_out })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn norm_settings(&self) -> NormSettings {
        NormSettings { eps: self.config.bn_eps, momentum: self.config.bn_momentum }
    }

    /// Records the forward pass on `b.tape` and returns the raw head output
    /// `[N, A·5, D/S, H/S, W/S]`: classification logits and regression deltas.
    pub fn forward_raw(&self, b: &mut Binder, x: Var) -> Result<Var> {
        let s = b.tape.value(x).shape().to_vec();
        if s.len() != 5 || s[1] != self.config.in_channels {
            return Err(Error::shape(format!(
                "network input must be [N, {}, D, H, W], got {s:?}",
                self.config.in_channels
            )));
        }
        self.config.output_shape(s[0], [s[2], s[3], s[4]])?;
        let w = b.param(self.stem.0);
        let h = b.tape.conv3d(x, w, None, 1, 1)?;
        let h = b.batch_norm(h, self.stem.1.gamma, self.stem.1.beta, self.stem.1.stats)?;
        let h = b.tape.relu(h)?;
        let mut h = b.tape.max_pool3d(h, 2, 2)?;
        let mut skips = Vec::new();
        for stage in &self.stages {
            for blk in stage {
                h = block_forward(b, h, blk)?;
            }
            skips.push(h);
        }
        for (j, up) in self.ups.iter().enumerate() {
            let w = b.param(up.deconv);
            let u = b.tape.conv3d_transpose(h, w, None, 2, 0)?;
            let u = b.batch_norm(u, up.bn.gamma, up.bn.beta, up.bn.stats)?;
            let u = b.tape.relu(u)?;
            let skip = skips[skips.len() - 2 - j];
            let cat = b.tape.concat_channels(&[u, skip])?;
            h = block_forward(b, cat, &up.block)?;
        }
        let (w, bias) = (b.param(self.head_feature.0), b.param(self.head_feature.1));
        let f = b.tape.conv3d(h, w, Some(bias), 1, 0)?;
        let f = b.tape.relu(f)?;
        let (w, bias) = (b.param(self.head_out.0), b.param(self.head_out.1));
        b.tape.conv3d(f, w, Some(bias), 1, 0)
    }

    /// Inference: head output with sigmoid applied to the classification channels.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let raw = self.forward_logits(input)?;
        Ok(probabilities(raw))
    }

    /// Inference without the classification sigmoid.
    pub fn forward_logits(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape, &self.store, NormMode::Eval, self.norm_settings(), false);
        let x = b.tape.leaf(input.clone(), false);
        let y = self.forward_raw(&mut b, x)?;
        drop(b);
        Ok(tape.value(y).clone())
    }

    /// Training-mode forward that also advances the running statistics.
    pub fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape, &self.store, NormMode::Train, self.norm_settings(), false);
        let x = b.tape.leaf(input.clone(), false);
        let y = self.forward_raw(&mut b, x)?;
        let stats = b.into_stats();
        self.store.set_stats(stats);
        Ok(tape.value(y).clone())
    }
}

/// A single squeeze-and-excitation residual block with its own parameters.
#[derive(Debug, Clone)]
pub struct SeResidualBlock {
    store: ParamStore,
    block: ResBlock,
    norm: NormSettings,
}

impl SeResidualBlock {
    /// Block prefix in parameter names is `block`.
    pub fn new(cin: usize, cout: usize, stride: usize, use_se: bool, seed: u64) -> Self {
        let cfg = NetworkConfig { use_se, ..NetworkConfig::default() };
        let mut bld = Builder { store: ParamStore::default(), rng: ChaCha8Rng::seed_from_u64(seed), cfg: &cfg };
        let block = bld.block("block", cin, cout, stride);
        SeResidualBlock { store: bld.store, block, norm: NormSettings { eps: cfg.bn_eps, momentum: cfg.bn_momentum } }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn forward_raw(&self, b: &mut Binder, x: Var) -> Result<Var> {
        let c = b.tape.value(x).shape().get(1).copied();
        let cin = self.store.get(self.block.conv1).shape()[1];
        if c != Some(cin) {
            return Err(Error::shape(format!("block expects {cin} input channels, got {c:?}")));
        }
        block_forward(b, x, &self.block)
    }

    /// Applies the block with batch statistics (train-mode normalization).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape, &self.store, NormMode::Train, self.norm, false);
        let xv = b.tape.leaf(x.clone(), false);
        let y = self.forward_raw(&mut b, xv)?;
        drop(b);
        Ok(tape.value(y).clone())
    }

    /// Excitation values `[N, C]` the block applies to `x`; `None` without SE.
    pub fn gates(&self, x: &Tensor) -> Result<Option<Tensor>> {
        let Some(se) = &self.block.se else { return Ok(None) };
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape, &self.store, NormMode::Train, self.norm, false);
        let xv = b.tape.leaf(x.clone(), false);
        let w1 = b.param(self.block.conv1);
        let h = b.tape.conv3d(xv, w1, None, self.block.stride, 1)?;
        let h = b.batch_norm(h, self.block.bn1.gamma, self.block.bn1.beta, self.block.bn1.stats)?;
        let h = b.tape.relu(h)?;
        let w2 = b.param(self.block.conv2);
        let u = b.tape.conv3d(h, w2, None, 1, 1)?;
        let u = b.batch_norm(u, self.block.bn2.gamma, self.block.bn2.beta, self.block.bn2.stats)?;
        let s = excitation(&mut b, u, se)?;
        drop(b);
        Ok(Some(tape.value(s).clone()))
    }
}

/// Applies the sigmoid to every classification channel of a head output.
pub fn probabilities(mut raw: Tensor) -> Tensor {
    let s = raw.shape().to_vec();
    let cells: usize = s[2..].iter().product();
    for (i, chunk) in raw.data_mut().chunks_mut(cells).enumerate() {
        if (i % s[1]).is_multiple_of(VALUES_PER_ANCHOR) {
            chunk.iter_mut().for_each(|v| *v = sigmoid(*v));
        }
    }
    raw
}

/// One anchor's decoded head output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorPrediction {
    pub cell: [usize; 3],
    pub slot: usize,
    pub p: f64,
    pub deltas: [f64; 4],
}

/// Anchor predictions of sample `n` with `p ≥ cutoff`, in anchor order.
pub fn anchor_predictions(probs: &Tensor, n: usize, cutoff: f64) -> Vec<AnchorPrediction> {
    let s = probs.shape();
    let (c, g) = (s[1], [s[2], s[3], s[4]]);
    let cells = g[0] * g[1] * g[2];
    let a = c / VALUES_PER_ANCHOR;
    let d = &probs.data()[n * c * cells..(n + 1) * c * cells];
    let mut out = Vec::new();
    for cell in 0..cells {
        for slot in 0..a {
            let base = slot * VALUES_PER_ANCHOR;
            let p = d[base * cells + cell];
            if p < cutoff {
                continue;
            }
            let deltas = [1, 2, 3, 4].map(|k| d[(base + k) * cells + cell]);
            let cz = cell / (g[1] * g[2]);
            let cy = (cell / g[2]) % g[1];
            let cx = cell % g[2];
            out.push(AnchorPrediction { cell: [cz, cy, cx], slot, p, deltas });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_and_tiny_plans_are_consistent() {
        NetworkConfig::default().validate().unwrap();
        NetworkConfig::tiny().validate().unwrap();
        NetworkConfig::micro().validate().unwrap();
        let bad = NetworkConfig { output_stride: 8, ..NetworkConfig::tiny() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn output_shape_arithmetic() {
        let d = NetworkConfig::default();
        assert_eq!(d.output_shape(1, [128; 3]).unwrap(), [1, 15, 32, 32, 32]);
        assert_eq!(NetworkConfig::tiny().output_shape(2, [32; 3]).unwrap(), [2, 15, 8, 8, 8]);
        assert!(NetworkConfig::tiny().output_shape(1, [36, 32, 32]).is_err());
    }

    #[test]
    fn se_hidden_width() {
        let c = NetworkConfig::default();
        assert_eq!(c.se_hidden(32), 2);
        assert_eq!(c.se_hidden(8), 1);
        assert_eq!(c.se_hidden(128), 8);
    }

    #[test]
    fn ablation_parsing_and_flags() {
        assert_eq!("no_se".parse::<Ablation>().unwrap(), Ablation::NoSe);
        assert!("bogus".parse::<Ablation>().is_err());
        assert!(!ablation_variant(&NetworkConfig::tiny(), Ablation::BaselineRpn).use_se);
        assert!(ablation_variant(&NetworkConfig::tiny(), Ablation::NoFocal).use_se);
    }

    #[test]
    fn probability_channels_only() {
        let raw = Tensor::zeros(&[1, 10, 1, 1, 2]);
        let p = probabilities(raw);
        for c in 0..10 {
            let v = p.data()[c * 2];
            assert_eq!(v, if c % 5 == 0 { 0.5 } else { 0.0 });
        }
    }
}
