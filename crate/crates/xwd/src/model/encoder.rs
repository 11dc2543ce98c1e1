//! Residual 3D encoder with squeeze-and-excitation channel gates, global
//! average pooling to a fixed-length feature vector, and a single-logit
//! linear head.
//!
//! The network is built from an initial stem (conv + batch norm + ReLU,
//! downsampling H and W) followed by stages of residual blocks. The first
//! block of every stage downsamples all three spatial axes by 2 and a 1×1×1
//! projection matches the identity path when shape or width changes. Global
//! average pooling over the final stage yields the feature vector, whose
//! length equals the final stage's channel count.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm3d, BnCache, Conv3d, SeCache, SqueezeExcite};
use super::tensor::{add_inplace, relu, relu_backward_inplace, sigmoid, PTensor, Tensor};
use crate::windowing::NormStats;
use crate::{Result, XwdError};

/// Architectural hyperparameters of one encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Feature vector length; must equal the final stage's channel count.
    pub feature_dim: usize,
    /// Channel count per residual stage.
    pub stage_channels: Vec<usize>,
    /// Residual blocks per stage (same length as `stage_channels`).
    pub blocks_per_stage: Vec<usize>,
    /// Single-channel input extent as (T, H, W).
    pub input_shape: (usize, usize, usize),
    /// Squeeze-excitation bottleneck ratio; must divide every stage width.
    pub se_reduction: usize,
}

impl EncoderConfig {
    /// Desk-scale preset: four stages ending at 64 channels.
    pub fn tiny() -> Self {
        EncoderConfig {
            feature_dim: 64,
            stage_channels: vec![8, 16, 32, 64],
            blocks_per_stage: vec![1, 1, 1, 1],
            input_shape: (8, 64, 64),
            se_reduction: 4,
        }
    }

    /// Smallest useful network (< 10k parameters) for finite-difference
    /// gradient verification.
    pub fn grad_check() -> Self {
        EncoderConfig {
            feature_dim: 8,
            stage_channels: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            input_shape: (2, 6, 6),
            se_reduction: 4,
        }
    }

    /// Full-scale preset mirroring the 50-layer reference architecture.
    /// Provided for configuration completeness; not desk-runnable.
    pub fn full_scale() -> Self {
        EncoderConfig {
            feature_dim: 2048,
            stage_channels: vec![256, 512, 1024, 2048],
            blocks_per_stage: vec![3, 4, 6, 3],
            input_shape: (32, 224, 224),
            se_reduction: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| Err(XwdError::InvalidEncoderConfig(reason.to_string()));
        if self.stage_channels.is_empty() {
            return fail("stage_channels must be non-empty");
        }
        if self.blocks_per_stage.len() != self.stage_channels.len() {
            return fail("blocks_per_stage must have one entry per stage");
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.blocks_per_stage.iter().any(|&b| b == 0) {
            return fail("stage widths and block counts must be positive");
        }
        if self.feature_dim != *self.stage_channels.last().unwrap() {
            return fail("feature_dim must equal the final stage's channel count");
        }
        if self.se_reduction == 0 || self.stage_channels.iter().any(|&c| c % self.se_reduction != 0) {
            return fail("se_reduction must divide every stage's channel count");
        }
        if self.input_shape.0 == 0 || self.input_shape.1 == 0 || self.input_shape.2 == 0 {
            return fail("input extents must be positive");
        }
        Ok(())
    }

    pub fn n_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Names accepted as Grad-CAM target layers, in depth order.
    pub fn stage_names(&self) -> Vec<String> {
        (1..=self.n_stages()).map(|i| format!("stage{i}")).collect()
    }
}

/// How an encoder's parameters were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    /// Freshly initialized, never trained.
    Initialized,
    /// Trained with the classification loss alone.
    Supervised,
    /// Trained with the combined classification + feature-alignment loss.
    Distilled { teacher_window: String },
}

/// One residual block: conv→bn→relu→conv→bn→SE, plus identity (optionally
/// projected), then ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv3d,
    pub bn1: BatchNorm3d,
    pub conv2: Conv3d,
    pub bn2: BatchNorm3d,
    pub se: SqueezeExcite,
    pub down: Option<(Conv3d, BatchNorm3d)>,
}

/// Intermediate activations one block's backward pass needs.
pub struct BlockCache {
    x: Tensor,
    r1: Tensor,
    b2: Tensor,
    bn1: BnCache,
    bn2: BnCache,
    se: SeCache,
    down_bn: Option<BnCache>,
    /// Block output (post-ReLU); also the stage activation Grad-CAM reads.
    pub y: Tensor,
}

impl ResidualBlock {
    fn new(in_c: usize, out_c: usize, stride: (usize, usize, usize), reduction: usize) -> Self {
        let needs_projection = stride != (1, 1, 1) || in_c != out_c;
        ResidualBlock {
            conv1: Conv3d::new(in_c, out_c, 3, stride, || 0.0),
            bn1: BatchNorm3d::new(out_c),
            conv2: Conv3d::new(out_c, out_c, 3, (1, 1, 1), || 0.0),
            bn2: BatchNorm3d::new(out_c),
            se: SqueezeExcite::new(out_c, reduction, || 0.0),
            down: needs_projection
                .then(|| (Conv3d::new(in_c, out_c, 1, stride, || 0.0), BatchNorm3d::new(out_c))),
        }
    }

    fn forward_train(&mut self, x: &Tensor, update_running: bool) -> (Tensor, BlockCache) {
        let c1 = self.conv1.forward(x);
        let (b1, bn1) = self.bn1.forward_train(&c1, update_running);
        let r1 = relu(&b1);
        let c2 = self.conv2.forward(&r1);
        let (b2, bn2) = self.bn2.forward_train(&c2, update_running);
        let (mut s, se) = self.se.forward(&b2);
        let down_bn = match &mut self.down {
            Some((conv, bn)) => {
                let dc = conv.forward(x);
                let (db, cache) = bn.forward_train(&dc, update_running);
                add_inplace(&mut s, &db);
                Some(cache)
            }
            None => {
                add_inplace(&mut s, x);
                None
            }
        };
        let y = relu(&s);
        let cache = BlockCache {
            x: x.clone(),
            r1,
            b2,
            bn1,
            bn2,
            se,
            down_bn,
            y: y.clone(),
        };
        (y, cache)
    }

    fn forward_eval(&self, x: &Tensor) -> (Tensor, BlockCache) {
        let c1 = self.conv1.forward(x);
        let (b1, bn1) = self.bn1.forward_eval(&c1);
        let r1 = relu(&b1);
        let c2 = self.conv2.forward(&r1);
        let (b2, bn2) = self.bn2.forward_eval(&c2);
        let (mut s, se) = self.se.forward(&b2);
        let down_bn = match &self.down {
            Some((conv, bn)) => {
                let dc = conv.forward(x);
                let (db, cache) = bn.forward_eval(&dc);
                add_inplace(&mut s, &db);
                Some(cache)
            }
            None => {
                add_inplace(&mut s, x);
                None
            }
        };
        let y = relu(&s);
        let cache = BlockCache {
            x: x.clone(),
            r1,
            b2,
            bn1,
            bn2,
            se,
            down_bn,
            y: y.clone(),
        };
        (y, cache)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, cache: &BlockCache, gy: &Tensor) -> Tensor {
        let mut g = gy.clone();
        relu_backward_inplace(&cache.y, &mut g);

        // Identity / projection path.
        let gx_identity = match (&mut self.down, &cache.down_bn) {
            (Some((conv, bn)), Some(down_bn)) => {
                let g_db = bn.backward(down_bn, &g);
                conv.backward(&cache.x, &g_db)
            }
            _ => g.clone(),
        };

        // Main path.
        let g_b2 = self.se.backward(&cache.b2, &cache.se, &g);
        let g_c2 = self.bn2.backward(&cache.bn2, &g_b2);
        let mut g_r1 = self.conv2.backward(&cache.r1, &g_c2);
        relu_backward_inplace(&cache.r1, &mut g_r1);
        let g_c1 = self.bn1.backward(&cache.bn1, &g_r1);
        let mut gx = self.conv1.backward(&cache.x, &g_c1);

        add_inplace(&mut gx, &gx_identity);
        gx
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a PTensor)) {
        f(format!("{prefix}.conv1.w"), &self.conv1.w);
        f(format!("{prefix}.conv1.b"), &self.conv1.b);
        f(format!("{prefix}.bn1.gamma"), &self.bn1.gamma);
        f(format!("{prefix}.bn1.beta"), &self.bn1.beta);
        f(format!("{prefix}.conv2.w"), &self.conv2.w);
        f(format!("{prefix}.conv2.b"), &self.conv2.b);
        f(format!("{prefix}.bn2.gamma"), &self.bn2.gamma);
        f(format!("{prefix}.bn2.beta"), &self.bn2.beta);
        f(format!("{prefix}.se.w1"), &self.se.w1);
        f(format!("{prefix}.se.b1"), &self.se.b1);
        f(format!("{prefix}.se.w2"), &self.se.w2);
        f(format!("{prefix}.se.b2"), &self.se.b2);
        if let Some((conv, bn)) = &self.down {
            f(format!("{prefix}.down.conv.w"), &conv.w);
            f(format!("{prefix}.down.conv.b"), &conv.b);
            f(format!("{prefix}.down.bn.gamma"), &bn.gamma);
            f(format!("{prefix}.down.bn.beta"), &bn.beta);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut PTensor)) {
        f(format!("{prefix}.conv1.w"), &mut self.conv1.w);
        f(format!("{prefix}.conv1.b"), &mut self.conv1.b);
        f(format!("{prefix}.bn1.gamma"), &mut self.bn1.gamma);
        f(format!("{prefix}.bn1.beta"), &mut self.bn1.beta);
        f(format!("{prefix}.conv2.w"), &mut self.conv2.w);
        f(format!("{prefix}.conv2.b"), &mut self.conv2.b);
        f(format!("{prefix}.bn2.gamma"), &mut self.bn2.gamma);
        f(format!("{prefix}.bn2.beta"), &mut self.bn2.beta);
        f(format!("{prefix}.se.w1"), &mut self.se.w1);
        f(format!("{prefix}.se.b1"), &mut self.se.b1);
        f(format!("{prefix}.se.w2"), &mut self.se.w2);
        f(format!("{prefix}.se.b2"), &mut self.se.b2);
        if let Some((conv, bn)) = &mut self.down {
            f(format!("{prefix}.down.conv.w"), &mut conv.w);
            f(format!("{prefix}.down.conv.b"), &mut conv.b);
            f(format!("{prefix}.down.bn.gamma"), &mut bn.gamma);
            f(format!("{prefix}.down.bn.beta"), &mut bn.beta);
        }
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Vec<f64>)) {
        f(format!("{prefix}.bn1.running_mean"), &self.bn1.running_mean);
        f(format!("{prefix}.bn1.running_var"), &self.bn1.running_var);
        f(format!("{prefix}.bn2.running_mean"), &self.bn2.running_mean);
        f(format!("{prefix}.bn2.running_var"), &self.bn2.running_var);
        if let Some((_, bn)) = &self.down {
            f(format!("{prefix}.down.bn.running_mean"), &bn.running_mean);
            f(format!("{prefix}.down.bn.running_var"), &bn.running_var);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Vec<f64>)) {
        f(format!("{prefix}.bn1.running_mean"), &mut self.bn1.running_mean);
        f(format!("{prefix}.bn1.running_var"), &mut self.bn1.running_var);
        f(format!("{prefix}.bn2.running_mean"), &mut self.bn2.running_mean);
        f(format!("{prefix}.bn2.running_var"), &mut self.bn2.running_var);
        if let Some((_, bn)) = &mut self.down {
            f(format!("{prefix}.down.bn.running_mean"), &mut bn.running_mean);
            f(format!("{prefix}.down.bn.running_var"), &mut bn.running_var);
        }
    }
}

/// Stem + residual stages + global average pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub stem_conv: Conv3d,
    pub stem_bn: BatchNorm3d,
    pub blocks: Vec<ResidualBlock>,
    /// Exclusive end index into `blocks` for each stage.
    stage_ends: Vec<usize>,
}

/// Everything the encoder backward pass needs from a forward pass.
pub struct EncoderCache {
    x: Tensor,
    stem_bn: BnCache,
    stem_r: Tensor,
    pub blocks: Vec<BlockCache>,
}

impl EncoderCache {
    /// Activation tensor of a stage (output of its last block).
    pub fn stage_activation(&self, encoder: &Encoder, stage: usize) -> &Tensor {
        &self.blocks[encoder.stage_ends[stage] - 1].y
    }
}

impl Encoder {
    fn new(config: &EncoderConfig) -> Self {
        let c0 = config.stage_channels[0];
        let mut blocks = Vec::new();
        let mut stage_ends = Vec::new();
        let mut in_c = c0;
        for (&out_c, &n_blocks) in config.stage_channels.iter().zip(&config.blocks_per_stage) {
            for b in 0..n_blocks {
                let stride = if b == 0 { (2, 2, 2) } else { (1, 1, 1) };
                blocks.push(ResidualBlock::new(in_c, out_c, stride, config.se_reduction));
                in_c = out_c;
            }
            stage_ends.push(blocks.len());
        }
        Encoder {
            stem_conv: Conv3d::new(1, c0, 3, (1, 2, 2), || 0.0),
            stem_bn: BatchNorm3d::new(c0),
            blocks,
            stage_ends,
        }
    }

    /// Flattened block index range of one stage.
    pub fn stage_block_range(&self, stage: usize) -> std::ops::Range<usize> {
        let start = if stage == 0 { 0 } else { self.stage_ends[stage - 1] };
        start..self.stage_ends[stage]
    }

    pub fn forward_train(
        &mut self,
        x: &Tensor,
        update_running: bool,
    ) -> (Array2<f64>, EncoderCache) {
        let c = self.stem_conv.forward(x);
        let (b, stem_bn) = self.stem_bn.forward_train(&c, update_running);
        let stem_r = relu(&b);
        let mut cur = stem_r.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (next, cache) = block.forward_train(&cur, update_running);
            blocks.push(cache);
            cur = next;
        }
        let feats = global_average_pool(&cur);
        (
            feats,
            EncoderCache {
                x: x.clone(),
                stem_bn,
                stem_r,
                blocks,
            },
        )
    }

    pub fn forward_eval(&self, x: &Tensor) -> (Array2<f64>, EncoderCache) {
        let c = self.stem_conv.forward(x);
        let (b, stem_bn) = self.stem_bn.forward_eval(&c);
        let stem_r = relu(&b);
        let mut cur = stem_r.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward_eval(&cur);
            blocks.push(cache);
            cur = next;
        }
        let feats = global_average_pool(&cur);
        (
            feats,
            EncoderCache {
                x: x.clone(),
                stem_bn,
                stem_r,
                blocks,
            },
        )
    }

    /// Full backward from a feature-vector gradient; accumulates parameter
    /// gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &EncoderCache, g_feats: &Array2<f64>) -> Tensor {
        let g = self.backward_blocks_from_features(cache, g_feats, 0);
        // Stem: ReLU, then batch norm, then conv.
        let mut g = g;
        relu_backward_inplace(&cache.stem_r, &mut g);
        let g_c = self.stem_bn.backward(&cache.stem_bn, &g);
        self.stem_conv.backward(&cache.x, &g_c)
    }

    /// Backward stopping at a stage boundary: returns the gradient with
    /// respect to `stage`'s output activation (blocks deeper than `stage`
    /// still accumulate parameter gradients).
    pub fn backward_to_stage(
        &mut self,
        cache: &EncoderCache,
        g_feats: &Array2<f64>,
        stage: usize,
    ) -> Tensor {
        self.backward_blocks_from_features(cache, g_feats, self.stage_ends[stage])
    }

    /// Evaluation-mode forward from a stage's output activation through the
    /// remaining blocks and pooling. Lets verification code recompute the
    /// network tail from a perturbed mid-network activation.
    pub fn forward_eval_from_stage(&self, activation: &Tensor, stage: usize) -> Array2<f64> {
        let mut cur = activation.clone();
        for block in &self.blocks[self.stage_ends[stage]..] {
            let (next, _) = block.forward_eval(&cur);
            cur = next;
        }
        global_average_pool(&cur)
    }

    /// Walks blocks in reverse from the pooled features down to (and
    /// excluding) flattened block index `stop`; returns the gradient flowing
    /// into block index `stop` (or into the stem when `stop` is 0).
    fn backward_blocks_from_features(
        &mut self,
        cache: &EncoderCache,
        g_feats: &Array2<f64>,
        stop: usize,
    ) -> Tensor {
        let last = cache.blocks.last().expect("encoder has at least one block");
        let mut g = global_average_pool_backward(g_feats, last.y.shape);
        for i in (stop..self.blocks.len()).rev() {
            g = self.blocks[i].backward(&cache.blocks[i], &g);
        }
        g
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a PTensor)) {
        f("stem.conv.w".into(), &self.stem_conv.w);
        f("stem.conv.b".into(), &self.stem_conv.b);
        f("stem.bn.gamma".into(), &self.stem_bn.gamma);
        f("stem.bn.beta".into(), &self.stem_bn.beta);
        let mut stage = 0;
        for (i, block) in self.blocks.iter().enumerate() {
            while i >= self.stage_ends[stage] {
                stage += 1;
            }
            let offset = i - if stage == 0 { 0 } else { self.stage_ends[stage - 1] };
            block.visit(&format!("stage{}.block{}", stage + 1, offset + 1), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut PTensor)) {
        f("stem.conv.w".into(), &mut self.stem_conv.w);
        f("stem.conv.b".into(), &mut self.stem_conv.b);
        f("stem.bn.gamma".into(), &mut self.stem_bn.gamma);
        f("stem.bn.beta".into(), &mut self.stem_bn.beta);
        let stage_ends = self.stage_ends.clone();
        let mut stage = 0;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            while i >= stage_ends[stage] {
                stage += 1;
            }
            let offset = i - if stage == 0 { 0 } else { stage_ends[stage - 1] };
            block.visit_mut(&format!("stage{}.block{}", stage + 1, offset + 1), f);
        }
    }

    pub fn visit_buffers<'a>(&'a self, f: &mut impl FnMut(String, &'a Vec<f64>)) {
        f("stem.bn.running_mean".into(), &self.stem_bn.running_mean);
        f("stem.bn.running_var".into(), &self.stem_bn.running_var);
        let mut stage = 0;
        for (i, block) in self.blocks.iter().enumerate() {
            while i >= self.stage_ends[stage] {
                stage += 1;
            }
            let offset = i - if stage == 0 { 0 } else { self.stage_ends[stage - 1] };
            block.visit_buffers(&format!("stage{}.block{}", stage + 1, offset + 1), f);
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut impl FnMut(String, &mut Vec<f64>)) {
        f("stem.bn.running_mean".into(), &mut self.stem_bn.running_mean);
        f("stem.bn.running_var".into(), &mut self.stem_bn.running_var);
        let stage_ends = self.stage_ends.clone();
        let mut stage = 0;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            while i >= stage_ends[stage] {
                stage += 1;
            }
            let offset = i - if stage == 0 { 0 } else { stage_ends[stage - 1] };
            block.visit_buffers_mut(&format!("stage{}.block{}", stage + 1, offset + 1), f);
        }
    }
}

/// Mean over (T, H, W) per (sample, channel): `[N, C, T, H, W] → N×C`.
pub fn global_average_pool(x: &Tensor) -> Array2<f64> {
    let [n_b, c_n, ..] = x.shape;
    let per_c = x.spatial();
    let mut out = Array2::zeros((n_b, c_n));
    for n in 0..n_b {
        for c in 0..c_n {
            let base = x.offset(n, c, 0, 0);
            let sum: f64 = x.data[base..base + per_c].iter().sum();
            out[(n, c)] = sum / per_c as f64;
        }
    }
    out
}

/// Spreads a pooled-feature gradient uniformly back over the spatial extent.
pub fn global_average_pool_backward(g: &Array2<f64>, shape: [usize; 5]) -> Tensor {
    let mut out = Tensor::zeros(shape);
    let per_c = out.spatial();
    let (n_b, c_n) = g.dim();
    for n in 0..n_b {
        for c in 0..c_n {
            let v = g[(n, c)] / per_c as f64;
            let base = out.offset(n, c, 0, 0);
            out.data[base..base + per_c].fill(v);
        }
    }
    out
}

/// Single-logit linear head: z = ⟨w, h⟩ + b.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub w: PTensor,
    pub b: PTensor,
}

impl Head {
    fn new(feature_dim: usize) -> Self {
        Head {
            w: PTensor::zeros(vec![feature_dim]),
            b: PTensor::zeros(vec![1]),
        }
    }

    pub fn forward(&self, feats: &Array2<f64>) -> Vec<f64> {
        let (n_b, d) = feats.dim();
        debug_assert_eq!(d, self.w.len());
        (0..n_b)
            .map(|n| {
                let mut z = self.b.val[0];
                for j in 0..d {
                    z += self.w.val[j] * feats[(n, j)];
                }
                z
            })
            .collect()
    }

    /// Accumulates head gradients and returns the feature gradient.
    pub fn backward(&mut self, feats: &Array2<f64>, gz: &[f64]) -> Array2<f64> {
        let (n_b, d) = feats.dim();
        let mut g_feats = Array2::zeros((n_b, d));
        for n in 0..n_b {
            let g = gz[n];
            self.b.grad[0] += g;
            for j in 0..d {
                self.w.grad[j] += g * feats[(n, j)];
                g_feats[(n, j)] = g * self.w.val[j];
            }
        }
        g_feats
    }
}

/// A window-specific encoder + head with its training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    pub window_name: String,
    pub trainable: bool,
    pub provenance: Provenance,
    /// Normalization statistics of this encoder's window, fixed at
    /// preprocessing time and carried with the checkpoint.
    pub norm_stats: Option<NormStats>,
    pub encoder: Encoder,
    pub head: Head,
}

/// Builds an encoder + head with deterministic, seeded initialization.
///
/// Weights draw from a fan-in-scaled normal distribution in a fixed
/// construction order (stem, then each block's conv1/conv2/SE/projection,
/// then the head); biases start at zero and batch norms at identity.
pub fn build_encoder(config: &EncoderConfig, window_name: &str, seed: u64) -> Result<EncoderState> {
    config.validate()?;
    let mut encoder = Encoder::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    he_fill(&mut encoder.stem_conv.w, 27, &mut rng); // fan-in: 1 channel × 3³
    for block in &mut encoder.blocks {
        let c_in1 = block.conv1.w.shape[1];
        he_fill(&mut block.conv1.w, c_in1 * 27, &mut rng);
        let c_in2 = block.conv2.w.shape[1];
        he_fill(&mut block.conv2.w, c_in2 * 27, &mut rng);
        let c = block.se.w1.shape[1];
        let hidden = block.se.w1.shape[0];
        he_fill(&mut block.se.w1, c, &mut rng);
        he_fill(&mut block.se.w2, hidden, &mut rng);
        if let Some((conv, _)) = &mut block.down {
            let c_in = conv.w.shape[1];
            he_fill(&mut conv.w, c_in, &mut rng);
        }
    }

    let mut head = Head::new(config.feature_dim);
    let head_std = 1.0 / (config.feature_dim as f64).sqrt();
    for v in head.w.val.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = head_std * z;
    }

    Ok(EncoderState {
        config: config.clone(),
        window_name: window_name.to_string(),
        trainable: true,
        provenance: Provenance::Initialized,
        norm_stats: None,
        encoder,
        head,
    })
}

fn he_fill(p: &mut PTensor, fan_in: usize, rng: &mut ChaCha8Rng) {
    let std = (2.0 / fan_in as f64).sqrt();
    for v in p.val.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = std * z;
    }
}

impl EncoderState {
    /// Checks a batch tensor against the configured input shape.
    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (t, h, w) = self.config.input_shape;
        if x.shape[1] != 1 || x.shape[2] != t || x.shape[3] != h || x.shape[4] != w {
            return Err(XwdError::ShapeMismatch {
                context: "encoder input",
                expected: format!("(_, 1, {t}, {h}, {w})"),
                actual: format!("{:?}", x.shape),
            });
        }
        Ok(())
    }

    /// Evaluation-mode features for a single volume.
    pub fn forward_features(&self, volume: &Array3<f32>) -> Result<Vec<f64>> {
        let x = batch_from_volumes(std::slice::from_ref(volume));
        self.check_input(&x)?;
        let (feats, _) = self.encoder.forward_eval(&x);
        Ok(feats.row(0).to_vec())
    }

    /// Head logit for one feature vector.
    pub fn forward_logit(&self, h: &[f64]) -> Result<f64> {
        if h.len() != self.config.feature_dim {
            return Err(XwdError::DimensionMismatch(format!(
                "head expects {} features, got {}",
                self.config.feature_dim,
                h.len()
            )));
        }
        let mut z = self.head.b.val[0];
        for (wj, hj) in self.head.w.val.iter().zip(h) {
            z += wj * hj;
        }
        Ok(z)
    }

    /// Evaluation-mode probability for a single volume.
    pub fn predict_probability(&self, volume: &Array3<f32>) -> Result<f64> {
        let h = self.forward_features(volume)?;
        Ok(sigmoid(self.forward_logit(&h)?))
    }

    /// Evaluation-mode (features, logits) for a batch tensor.
    pub fn forward_eval_batch(&self, x: &Tensor) -> Result<(Array2<f64>, Vec<f64>)> {
        self.check_input(x)?;
        let (feats, _) = self.encoder.forward_eval(x);
        let logits = self.head.forward(&feats);
        Ok((feats, logits))
    }

    /// Errors unless the state is trainable.
    pub fn require_trainable(&self) -> Result<()> {
        if self.trainable {
            Ok(())
        } else {
            Err(XwdError::Frozen(self.window_name.clone()))
        }
    }

    /// Marks the state frozen; no operation may change parameters afterward.
    pub fn freeze(&mut self) {
        self.trainable = false;
    }

    /// Total parameter count (encoder + head).
    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.encoder.visit(&mut |_, p| n += p.len());
        n + self.head.w.len() + self.head.b.len()
    }

    /// Zeroes every parameter gradient.
    pub fn zero_grads(&mut self) {
        self.encoder.visit_mut(&mut |_, p| p.zero_grad());
        self.head.w.zero_grad();
        self.head.b.zero_grad();
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(String, &'a PTensor)) {
        self.encoder.visit(f);
        f("head.w".into(), &self.head.w);
        f("head.b".into(), &self.head.b);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut PTensor)) {
        self.encoder.visit_mut(f);
        f("head.w".into(), &mut self.head.w);
        f("head.b".into(), &mut self.head.b);
    }

    pub fn visit_buffers<'a>(&'a self, f: &mut impl FnMut(String, &'a Vec<f64>)) {
        self.encoder.visit_buffers(f);
    }

    pub fn visit_buffers_mut(&mut self, f: &mut impl FnMut(String, &mut Vec<f64>)) {
        self.encoder.visit_buffers_mut(f);
    }
}

/// Stacks single-channel volumes into a `[N, 1, T, H, W]` batch tensor.
pub fn batch_from_volumes(volumes: &[Array3<f32>]) -> Tensor {
    assert!(!volumes.is_empty());
    let (t, h, w) = volumes[0].dim();
    let mut out = Tensor::zeros([volumes.len(), 1, t, h, w]);
    for (n, v) in volumes.iter().enumerate() {
        debug_assert_eq!(v.dim(), (t, h, w));
        let base = out.offset(n, 0, 0, 0);
        let dst = &mut out.data[base..base + t * h * w];
        for (d, &s) in dst.iter_mut().zip(v.iter()) {
            *d = s as f64;
        }
    }
    out
}
