//! Decomposed model: each layer is a shared domain-feature extractor (DFE)
//! convolution expanded by a cheap personalized domain-shift eraser (DSE)
//! convolution, each followed by its own batch norm. With expansion G=1 the
//! DSE branch vanishes and a block degenerates to conv + BN + ReLU.

use crate::error::{FdseError, Result};
use crate::tape::{Tape, ValueId};
use crate::tensor::{Real, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;

/// How a forward pass treats parameters and batch-norm statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch-stat normalization, running stats updated, all params trainable.
    Train,
    /// Running-stat normalization, nothing trainable, nothing updated.
    Eval,
    /// Batch-stat normalization and running-stat updates but no trainable
    /// params; used to re-estimate statistics on unlabeled data.
    StatCollect,
    /// Label-free adaptation: only DSE weights and BN_DSE affine train.
    /// BN_DSE keeps updating its running stats; BN_DFE normalizes with its
    /// frozen stats while still exposing batch statistics for the
    /// consistency loss.
    AdaptDse,
}

#[derive(Debug, Clone)]
pub struct BatchNorm<F> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
}

impl<F: Real> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(vec![channels]),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::ones(vec![channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// One step of the running-stat recursion: r <- momentum*r + (1-momentum)*batch.
    pub fn update_running(&mut self, batch_mean: &[F], batch_var: &[F], momentum: F) {
        let one_m = F::one() - momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(batch_mean) {
            *r = momentum * *r + one_m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(batch_var) {
            *r = momentum * *r + one_m * b;
        }
    }
}

/// Batch statistics of a BN_DFE input for one block, captured during a
/// forward pass. `prev_*` are the running stats before this batch's update,
/// i.e. the history term of the running-stat recursion.
pub struct DfeBatchStats {
    pub block: usize,
    pub mean: ValueId,
    pub var: ValueId,
    pub prev_mean: Vec<f64>,
    pub prev_var: Vec<f64>,
    pub channels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DseBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Expansion factor G: the DFE conv produces ceil(T/G) channels, the
    /// cheap DSE conv the remaining T - ceil(T/G).
    pub expansion: usize,
    /// Kernel size of the cheap per-channel DSE conv (odd, stride 1,
    /// same-size padding).
    pub cheap_kernel: usize,
    /// Optional (window, stride) max pool applied after the block.
    #[serde(default)]
    pub maxpool: Option<(usize, usize)>,
}

impl DseBlockSpec {
    /// Channels produced by the shared DFE conv: ceil(T/G).
    pub fn dfe_channels(&self) -> usize {
        self.out_channels.div_ceil(self.expansion)
    }

    /// Channels produced by the cheap DSE conv.
    pub fn dse_channels(&self) -> usize {
        self.out_channels - self.dfe_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(FdseError::EmptyLayer);
        }
        if self.expansion == 0 || self.expansion > self.out_channels {
            return Err(FdseError::InvalidExpansion {
                expansion: self.expansion,
                out_channels: self.out_channels,
            });
        }
        if self.kernel == 0 || self.stride == 0 {
            return Err(FdseError::Architecture(format!(
                "kernel {} / stride {} must be positive",
                self.kernel, self.stride
            )));
        }
        if self.cheap_kernel % 2 == 0 {
            return Err(FdseError::Architecture(format!(
                "cheap kernel {} must be odd to keep spatial size",
                self.cheap_kernel
            )));
        }
        if let Some((k, s)) = self.maxpool {
            if k == 0 || s == 0 {
                return Err(FdseError::Architecture("maxpool window/stride must be positive".into()));
            }
        }
        Ok(())
    }

    /// Source DFE channel for each cheap output: channel j spawns outputs
    /// j*(G-1) .. (j+1)*(G-1), truncated when G does not divide T.
    pub fn source_map(&self) -> Vec<usize> {
        let extra = self.dse_channels();
        (0..extra).map(|o| o / (self.expansion - 1).max(1)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    /// Input (channels, height, width).
    pub input: (usize, usize, usize),
    pub blocks: Vec<DseBlockSpec>,
    /// Adaptive average-pool output grid before the linear head. Ignored
    /// when `blocks` is empty (the raw input is flattened instead).
    pub head_pool: (usize, usize),
    pub num_classes: usize,
}

impl ModelArch {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(FdseError::Config(format!("num_classes {} < 2", self.num_classes)));
        }
        let (c, mut h, mut w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(FdseError::Config("input shape has a zero dimension".into()));
        }
        let mut prev = c;
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate()?;
            if b.in_channels != prev {
                return Err(FdseError::Architecture(format!(
                    "block {}: in_channels {} does not match previous output {}",
                    i, b.in_channels, prev
                )));
            }
            if h + 2 * b.padding < b.kernel || w + 2 * b.padding < b.kernel {
                return Err(FdseError::Architecture(format!(
                    "block {}: kernel {} larger than padded input {}x{}",
                    i,
                    b.kernel,
                    h + 2 * b.padding,
                    w + 2 * b.padding
                )));
            }
            h = (h + 2 * b.padding - b.kernel) / b.stride + 1;
            w = (w + 2 * b.padding - b.kernel) / b.stride + 1;
            if let Some((k, s)) = b.maxpool {
                if h < k || w < k {
                    return Err(FdseError::Architecture(format!(
                        "block {}: pool window {} larger than feature map {}x{}",
                        i, k, h, w
                    )));
                }
                h = (h - k) / s + 1;
                w = (w - k) / s + 1;
            }
            prev = b.out_channels;
        }
        if !self.blocks.is_empty() {
            let (ph, pw) = self.head_pool;
            if ph == 0 || pw == 0 || h < ph || w < pw {
                return Err(FdseError::Architecture(format!(
                    "head pool {}x{} incompatible with final feature map {}x{}",
                    ph, pw, h, w
                )));
            }
        }
        Ok(())
    }

    /// Feature dimension entering the linear head.
    pub fn head_in(&self) -> usize {
        let (c, h, w) = self.input;
        match self.blocks.last() {
            None => c * h * w,
            Some(last) => last.out_channels * self.head_pool.0 * self.head_pool.1,
        }
    }

    /// Same architecture with every expansion set to 1: the plain
    /// (undecomposed) CNN the baselines train.
    pub fn undecomposed(&self) -> ModelArch {
        let mut a = self.clone();
        for b in &mut a.blocks {
            b.expansion = 1;
        }
        a
    }

    /// Default desk-scale two-block architecture for 16x16 single-channel
    /// inputs and 8 classes.
    pub fn desk_default() -> ModelArch {
        ModelArch {
            input: (1, 16, 16),
            blocks: vec![
                DseBlockSpec {
                    in_channels: 1,
                    out_channels: 12,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    expansion: 2,
                    cheap_kernel: 3,
                    maxpool: Some((3, 2)),
                },
                DseBlockSpec {
                    in_channels: 12,
                    out_channels: 24,
                    kernel: 5,
                    stride: 2,
                    padding: 2,
                    expansion: 2,
                    cheap_kernel: 3,
                    maxpool: None,
                },
            ],
            head_pool: (2, 2),
            num_classes: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DseBlock<F> {
    pub spec: DseBlockSpec,
    /// [dfe_channels, S, k, k], no bias (BN follows).
    pub dfe_weight: Tensor<F>,
    /// Present only when the block actually expands (G > 1 leaves extra channels).
    pub bn_dse: Option<BatchNorm<F>>,
    /// [dse_channels, 1, dw, dw] depthwise over gathered source channels.
    pub dse_weight: Option<Tensor<F>>,
    pub bn_dfe: BatchNorm<F>,
}

#[derive(Debug, Clone)]
pub struct DecomposedModel<F> {
    pub arch: ModelArch,
    pub blocks: Vec<DseBlock<F>>,
    pub head_weight: Tensor<F>,
    pub head_bias: Tensor<F>,
    pub bn_momentum: F,
}

/// Output of a forward pass: logits plus everything the trainer needs to
/// assemble losses and apply gradients.
pub struct ModelForward {
    pub logits: ValueId,
    /// Trainable parameter leaves in deterministic order.
    pub leaves: Vec<(String, ValueId)>,
    /// BN_DFE input batch statistics per block (empty in Eval mode).
    pub dfe_stats: Vec<DfeBatchStats>,
}

impl<F: Real> DecomposedModel<F> {
    /// Build with Kaiming-uniform conv/linear weights (bound sqrt(6/fan_in)),
    /// zero linear bias, identity BN. Weights are sampled in f64 and cast so
    /// a given seed yields the same values at f32 and f64.
    pub fn build(arch: ModelArch, bn_momentum: f64, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let mut blocks = Vec::with_capacity(arch.blocks.len());
        for spec in &arch.blocks {
            let t_dfe = spec.dfe_channels();
            let extra = spec.dse_channels();
            let fan_in = spec.in_channels * spec.kernel * spec.kernel;
            let dfe_weight = sample_uniform(
                vec![t_dfe, spec.in_channels, spec.kernel, spec.kernel],
                (6.0 / fan_in as f64).sqrt(),
                rng,
            );
            let (bn_dse, dse_weight) = if extra > 0 {
                let dw_fan = spec.cheap_kernel * spec.cheap_kernel;
                let w = sample_uniform(
                    vec![extra, 1, spec.cheap_kernel, spec.cheap_kernel],
                    (6.0 / dw_fan as f64).sqrt(),
                    rng,
                );
                (Some(BatchNorm::new(t_dfe)), Some(w))
            } else {
                (None, None)
            };
            blocks.push(DseBlock {
                spec: spec.clone(),
                dfe_weight,
                bn_dse,
                dse_weight,
                bn_dfe: BatchNorm::new(spec.out_channels),
            });
        }
        let head_in = arch.head_in();
        let head_weight =
            sample_uniform(vec![arch.num_classes, head_in], (6.0 / head_in as f64).sqrt(), rng);
        let head_bias = Tensor::zeros(vec![arch.num_classes]);
        Ok(DecomposedModel {
            arch,
            blocks,
            head_weight,
            head_bias,
            bn_momentum: F::from_f64(bn_momentum),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    /// Forward pass over a [B,C,H,W] batch. In Train/StatCollect/AdaptDse
    /// modes this mutates running statistics.
    pub fn forward(
        &mut self,
        tape: &mut Tape<F>,
        x: &Tensor<F>,
        mode: ForwardMode,
    ) -> Result<ModelForward> {
        let (c, h, w) = self.arch.input;
        let batch = if x.shape().len() == 4 { x.shape()[0] } else { 0 };
        if x.shape() != [batch, c, h, w] || batch == 0 {
            return Err(FdseError::Dimension(format!(
                "input {:?}, expected [B,{},{},{}]",
                x.shape(),
                c,
                h,
                w
            )));
        }
        let stats_mode = matches!(mode, ForwardMode::Train | ForwardMode::StatCollect | ForwardMode::AdaptDse);
        if stats_mode && batch < 2 {
            return Err(FdseError::DegenerateBatch(batch));
        }

        let mut leaves = Vec::new();
        let mut dfe_stats = Vec::new();
        let mut cur = tape.constant(x.clone());
        let momentum = self.bn_momentum;
        let eps = F::from_f64(BN_EPS);

        for (i, block) in self.blocks.iter_mut().enumerate() {
            let spec = block.spec.clone();
            let extra = spec.dse_channels();

            let train_shared = mode == ForwardMode::Train;
            let train_personal = matches!(mode, ForwardMode::Train | ForwardMode::AdaptDse);

            let dfe_w = param(tape, &mut leaves, format!("block{i}.dfe.weight"), &block.dfe_weight, train_shared);
            let mut hidden = tape.conv2d(cur, dfe_w, None, spec.stride, spec.padding, 1)?;

            if extra > 0 {
                let bn = block.bn_dse.as_mut().unwrap();
                let gamma = param(tape, &mut leaves, format!("block{i}.bn_dse.gamma"), &bn.gamma, train_personal);
                let beta = param(tape, &mut leaves, format!("block{i}.bn_dse.beta"), &bn.beta, train_personal);
                let normed = if stats_mode {
                    let bm = tape.channel_mean(hidden)?;
                    let bv = tape.channel_var(hidden)?;
                    bn.update_running(
                        &tape.value(bm).data().to_vec(),
                        &tape.value(bv).data().to_vec(),
                        momentum,
                    );
                    tape.batchnorm_apply(hidden, bm, bv, gamma, beta, eps)?
                } else {
                    let rm = tape.constant(bn.running_mean.clone());
                    let rv = tape.constant(bn.running_var.clone());
                    tape.batchnorm_apply(hidden, rm, rv, gamma, beta, eps)?
                };
                hidden = tape.relu(normed)?;

                let dse_w = param(
                    tape,
                    &mut leaves,
                    format!("block{i}.dse.weight"),
                    block.dse_weight.as_ref().unwrap(),
                    train_personal,
                );
                let gathered = tape.gather_channels(hidden, spec.source_map())?;
                let cheap = tape.conv2d(
                    gathered,
                    dse_w,
                    None,
                    1,
                    spec.cheap_kernel / 2,
                    extra,
                )?;
                cur = tape.concat_channels(hidden, cheap)?;
            } else {
                cur = hidden;
            }

            // BN_DFE: in AdaptDse mode it normalizes with frozen running
            // stats but still reports batch statistics for the consistency
            // loss; in Train/StatCollect it behaves as normal train-mode BN.
            let bn = &mut block.bn_dfe;
            let gamma = param(tape, &mut leaves, format!("block{i}.bn_dfe.gamma"), &bn.gamma, train_shared);
            let beta = param(tape, &mut leaves, format!("block{i}.bn_dfe.beta"), &bn.beta, train_shared);
            let normed = match mode {
                ForwardMode::Train | ForwardMode::StatCollect => {
                    let bm = tape.channel_mean(cur)?;
                    let bv = tape.channel_var(cur)?;
                    dfe_stats.push(DfeBatchStats {
                        block: i,
                        mean: bm,
                        var: bv,
                        prev_mean: bn.running_mean.data().iter().map(|v| v.into_f64()).collect(),
                        prev_var: bn.running_var.data().iter().map(|v| v.into_f64()).collect(),
                        channels: bn.channels(),
                    });
                    bn.update_running(
                        &tape.value(bm).data().to_vec(),
                        &tape.value(bv).data().to_vec(),
                        momentum,
                    );
                    tape.batchnorm_apply(cur, bm, bv, gamma, beta, eps)?
                }
                ForwardMode::AdaptDse => {
                    let bm = tape.channel_mean(cur)?;
                    let bv = tape.channel_var(cur)?;
                    dfe_stats.push(DfeBatchStats {
                        block: i,
                        mean: bm,
                        var: bv,
                        prev_mean: bn.running_mean.data().iter().map(|v| v.into_f64()).collect(),
                        prev_var: bn.running_var.data().iter().map(|v| v.into_f64()).collect(),
                        channels: bn.channels(),
                    });
                    let rm = tape.constant(bn.running_mean.clone());
                    let rv = tape.constant(bn.running_var.clone());
                    tape.batchnorm_apply(cur, rm, rv, gamma, beta, eps)?
                }
                ForwardMode::Eval => {
                    let rm = tape.constant(bn.running_mean.clone());
                    let rv = tape.constant(bn.running_var.clone());
                    tape.batchnorm_apply(cur, rm, rv, gamma, beta, eps)?
                }
            };
            cur = tape.relu(normed)?;
            if let Some((k, s)) = spec.maxpool {
                cur = tape.maxpool2d(cur, k, s)?;
            }
        }

        let flat = if self.blocks.is_empty() {
            tape.reshape(cur, vec![batch, self.arch.head_in()])?
        } else {
            let (ph, pw) = self.arch.head_pool;
            let pooled = tape.adaptive_avgpool2d(cur, ph, pw)?;
            tape.reshape(pooled, vec![batch, self.arch.head_in()])?
        };
        let train_shared = mode == ForwardMode::Train;
        let hw = param(tape, &mut leaves, "head.weight".to_string(), &self.head_weight, train_shared);
        let hb = param(tape, &mut leaves, "head.bias".to_string(), &self.head_bias, train_shared);
        let logits = tape.linear(flat, hw, hb)?;
        Ok(ModelForward { logits, leaves, dfe_stats })
    }

    /// All tensors by name in deterministic order: per block dfe.weight,
    /// bn_dse.{gamma,beta,running_mean,running_var}, dse.weight,
    /// bn_dfe.{gamma,beta,running_mean,running_var}, then head.{weight,bias}.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.dfe.weight"), &b.dfe_weight));
            if let Some(bn) = &b.bn_dse {
                out.push((format!("block{i}.bn_dse.gamma"), &bn.gamma));
                out.push((format!("block{i}.bn_dse.beta"), &bn.beta));
                out.push((format!("block{i}.bn_dse.running_mean"), &bn.running_mean));
                out.push((format!("block{i}.bn_dse.running_var"), &bn.running_var));
            }
            if let Some(w) = &b.dse_weight {
                out.push((format!("block{i}.dse.weight"), w));
            }
            out.push((format!("block{i}.bn_dfe.gamma"), &b.bn_dfe.gamma));
            out.push((format!("block{i}.bn_dfe.beta"), &b.bn_dfe.beta));
            out.push((format!("block{i}.bn_dfe.running_mean"), &b.bn_dfe.running_mean));
            out.push((format!("block{i}.bn_dfe.running_var"), &b.bn_dfe.running_var));
        }
        out.push(("head.weight".to_string(), &self.head_weight));
        out.push(("head.bias".to_string(), &self.head_bias));
        out
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        if name == "head.weight" {
            return Some(&mut self.head_weight);
        }
        if name == "head.bias" {
            return Some(&mut self.head_bias);
        }
        let rest = name.strip_prefix("block")?;
        let dot = rest.find('.')?;
        let idx: usize = rest[..dot].parse().ok()?;
        let field = &rest[dot + 1..];
        let b = self.blocks.get_mut(idx)?;
        match field {
            "dfe.weight" => Some(&mut b.dfe_weight),
            "dse.weight" => b.dse_weight.as_mut(),
            "bn_dse.gamma" => b.bn_dse.as_mut().map(|bn| &mut bn.gamma),
            "bn_dse.beta" => b.bn_dse.as_mut().map(|bn| &mut bn.beta),
            "bn_dse.running_mean" => b.bn_dse.as_mut().map(|bn| &mut bn.running_mean),
            "bn_dse.running_var" => b.bn_dse.as_mut().map(|bn| &mut bn.running_var),
            "bn_dfe.gamma" => Some(&mut b.bn_dfe.gamma),
            "bn_dfe.beta" => Some(&mut b.bn_dfe.beta),
            "bn_dfe.running_mean" => Some(&mut b.bn_dfe.running_mean),
            "bn_dfe.running_var" => Some(&mut b.bn_dfe.running_var),
            _ => None,
        }
    }

    pub fn get_tensor(&self, name: &str) -> Result<&Tensor<F>> {
        self.named_tensors()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| FdseError::Alignment(format!("model has no tensor named '{}'", name)))
    }

    pub fn set_tensor(&mut self, name: &str, value: &Tensor<F>) -> Result<()> {
        let t = self
            .tensor_mut(name)
            .ok_or_else(|| FdseError::Alignment(format!("model has no tensor named '{}'", name)))?;
        if t.shape() != value.shape() {
            return Err(FdseError::Alignment(format!(
                "tensor '{}': shape {:?} incompatible with {:?}",
                name,
                value.shape(),
                t.shape()
            )));
        }
        *t = value.clone();
        Ok(())
    }

    pub fn export(&self) -> Vec<(String, Tensor<F>)> {
        self.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    /// Apply one SGD step from name-keyed gradients, with global-norm
    /// clipping computed in f64 over all provided gradients.
    pub fn sgd_step(&mut self, grads: &[(String, Tensor<F>)], lr: f64, clip_norm: f64) -> Result<()> {
        let mut sq = 0.0f64;
        for (_, g) in grads {
            sq += g.sq_norm_f64();
        }
        let norm = sq.sqrt();
        let scale = if clip_norm > 0.0 && norm > clip_norm { clip_norm / norm } else { 1.0 };
        let step = F::from_f64(lr * scale);
        for (name, g) in grads {
            let t = self.tensor_mut(name).ok_or_else(|| {
                FdseError::Alignment(format!("gradient for unknown tensor '{}'", name))
            })?;
            if t.shape() != g.shape() {
                return Err(FdseError::Alignment(format!(
                    "gradient for '{}' has shape {:?}, tensor is {:?}",
                    name,
                    g.shape(),
                    t.shape()
                )));
            }
            for (p, &gv) in t.data_mut().iter_mut().zip(g.data()) {
                *p = *p - step * gv;
            }
        }
        Ok(())
    }

    pub fn count_params(&self) -> ParamCounts {
        let mut blocks = Vec::new();
        for b in &self.blocks {
            blocks.push(BlockParamCounts {
                dfe_conv: b.dfe_weight.numel(),
                bn_dse_affine: b.bn_dse.as_ref().map(|bn| 2 * bn.channels()).unwrap_or(0),
                dse_conv: b.dse_weight.as_ref().map(|w| w.numel()).unwrap_or(0),
                bn_dfe_affine: 2 * b.bn_dfe.channels(),
            });
        }
        let head = self.head_weight.numel() + self.head_bias.numel();
        let shared_total =
            blocks.iter().map(|b| b.dfe_conv + b.bn_dfe_affine).sum::<usize>() + head;
        let personalized_total = blocks.iter().map(|b| b.dse_conv + b.bn_dse_affine).sum::<usize>();
        ParamCounts { blocks, head, shared_total, personalized_total }
    }
}

/// Register a tensor on the tape as leaf or constant and note trainable ones.
fn param<F: Real>(
    tape: &mut Tape<F>,
    leaves: &mut Vec<(String, ValueId)>,
    name: String,
    t: &Tensor<F>,
    trainable: bool,
) -> ValueId {
    if trainable {
        let id = tape.leaf(t.clone());
        leaves.push((name, id));
        id
    } else {
        tape.constant(t.clone())
    }
}

fn sample_uniform<F: Real>(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Tensor<F> {
    Tensor::from_fn(shape, |_| {
        let r: f64 = rng.gen();
        F::from_f64((2.0 * r - 1.0) * bound)
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockParamCounts {
    pub dfe_conv: usize,
    pub bn_dse_affine: usize,
    pub dse_conv: usize,
    pub bn_dfe_affine: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCounts {
    pub blocks: Vec<BlockParamCounts>,
    pub head: usize,
    pub shared_total: usize,
    pub personalized_total: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.shared_total + self.personalized_total
    }
}

/// Which named tensors play which federated role for the FDSE method.
#[derive(Debug, Clone)]
pub struct ParamPartition {
    /// Trainable, consensus-aggregated: DFE convs, BN_DFE affine, head.
    pub shared: Vec<String>,
    /// Trainable, attention-aggregated: DSE convs, BN_DSE affine.
    pub personalized: Vec<String>,
    /// Running stats averaged across clients (BN_DFE).
    pub averaged_stats: Vec<String>,
    /// Running stats kept per client (BN_DSE).
    pub local_stats: Vec<String>,
}

impl ParamPartition {
    pub fn from_names(names: &[String]) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for n in names {
            if !seen.insert(n.clone()) {
                return Err(FdseError::Architecture(format!("duplicate parameter name '{}'", n)));
            }
        }
        let mut p = ParamPartition {
            shared: Vec::new(),
            personalized: Vec::new(),
            averaged_stats: Vec::new(),
            local_stats: Vec::new(),
        };
        for n in names {
            if n.contains(".bn_dse.running_") {
                p.local_stats.push(n.clone());
            } else if n.contains(".bn_dfe.running_") {
                p.averaged_stats.push(n.clone());
            } else if n.contains(".dse.") || n.contains(".bn_dse.") {
                p.personalized.push(n.clone());
            } else {
                p.shared.push(n.clone());
            }
        }
        Ok(p)
    }

    pub fn for_model<F: Real>(model: &DecomposedModel<F>) -> Result<Self> {
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        Self::from_names(&names)
    }
}
