//! Network assembly: optional band attention block followed by the
//! multi-branch convolutional classifier.
//!
//! ```text
//! input [b, 1, C, W]
//!   └─ (OESCN only) attention block per sample, M' = fusion + S
//!   ├─ conv k₁×k₁ → ELU → BN ┐
//!   ├─ conv k₂×k₂ → ELU → BN ├─ depth concat → avg pool 2×2
//!   └─ conv k₃×k₃ → ELU → BN ┘
//!   → conv 3×3 → ELU → BN → avg pool 2×2 → flatten
//!   → FC → dropout → FC → dropout → FC → logits
//! ```
//!
//! W is K (band combination) for OESCN and OESCN_a1 and P (raw PSD bins)
//! for OESCN_a2.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_block, attention_block_backward, default_scale, AttentionParams, AttentionTrace};
use crate::bandgen::{band_counts, BandGenConfig, BandLayout};
use crate::error::{invalid_arg, Result};
use crate::nn::{
    avg_pool2d, avg_pool2d_backward, batch_norm, batch_norm_backward, conv2d, conv2d_backward, dropout,
    dropout_backward, elu, elu_backward, softmax_rows, BatchNorm, BatchStats, BnCache, Checkpoint, Dense, Grid, Mode,
    Padding,
};
use crate::rng::seeded;
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "OESCN")]
    Oescn,
    /// Attention removed; the classifier sees S.
    #[serde(rename = "OESCN_a1")]
    OescnA1,
    /// Attention and band generator removed; the classifier sees the PSD.
    #[serde(rename = "OESCN_a2")]
    OescnA2,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Oescn, Variant::OescnA1, Variant::OescnA2];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Oescn => "OESCN",
            Variant::OescnA1 => "OESCN_a1",
            Variant::OescnA2 => "OESCN_a2",
        }
    }

    pub fn uses_bands(self) -> bool {
        self != Variant::OescnA2
    }

    pub fn uses_attention(self) -> bool {
        self == Variant::Oescn
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "oescn" => Ok(Variant::Oescn),
            "oescn_a1" | "a1" => Ok(Variant::OescnA1),
            "oescn_a2" | "a2" => Ok(Variant::OescnA2),
            _ => Err(invalid_arg!("unknown variant {s:?} (expected oescn, oescn_a1, oescn_a2)")),
        }
    }
}

/// How an even branch kernel is realised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvenKernel {
    /// Grow to the next odd size and pad symmetrically.
    Enlarge,
    /// Keep the size; the extra padding row/column goes bottom/right.
    Asymmetric,
}

/// How the configured dropout value is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutReading {
    DropRate,
    KeepProbability,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_classes: usize,
    pub channels: usize,
    /// Number of PSD bins P.
    pub psd_bins: usize,
    pub bands: BandGenConfig,
    pub branch_kernels: Vec<usize>,
    pub even_kernels: EvenKernel,
    pub branch_filters: usize,
    pub trunk_kernel: usize,
    pub trunk_filters: usize,
    pub pool: usize,
    /// Widths of the fully connected layers; the last equals `n_classes`.
    pub fc_sizes: Vec<usize>,
    pub dropout: f64,
    pub dropout_reading: DropoutReading,
    /// Softmax temperature of the attention heads; `None` means √C.
    pub attention_scale: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Oescn,
            n_classes: 13,
            channels: 30,
            psd_bins: 70,
            bands: BandGenConfig::default(),
            branch_kernels: vec![3, 8, 15],
            even_kernels: EvenKernel::Enlarge,
            branch_filters: 8,
            trunk_kernel: 3,
            trunk_filters: 16,
            pool: 2,
            fc_sizes: vec![512, 128, 13],
            dropout: 0.25,
            dropout_reading: DropoutReading::DropRate,
            attention_scale: None,
        }
    }
}

/// Per-sample shape after each stage, `[depth, height, width]` or `[n]`.
pub type ShapeChain = Vec<(String, Vec<usize>)>;

impl ModelConfig {
    pub fn new(variant: Variant, channels: usize, n_classes: usize) -> Self {
        ModelConfig {
            variant,
            channels,
            n_classes,
            fc_sizes: vec![512, 128, n_classes],
            ..Default::default()
        }
    }

    pub fn layout(&self) -> Result<BandLayout> {
        band_counts(self.psd_bins, &self.bands)
    }

    pub fn input_width(&self) -> Result<usize> {
        if self.variant.uses_bands() {
            Ok(self.layout()?.total_k)
        } else {
            Ok(self.psd_bins)
        }
    }

    pub fn drop_probability(&self) -> f64 {
        match self.dropout_reading {
            DropoutReading::DropRate => self.dropout,
            DropoutReading::KeepProbability => 1.0 - self.dropout,
        }
    }

    pub fn scale(&self) -> f64 {
        self.attention_scale.unwrap_or_else(|| default_scale(self.channels))
    }

    /// Realised kernel size and padding of one branch.
    pub fn branch_geometry(&self, n: usize) -> (usize, Padding) {
        let k = match self.even_kernels {
            EvenKernel::Enlarge if n.is_multiple_of(2) => n + 1,
            _ => n,
        };
        (k, Padding::same(k, k))
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.n_classes < 2 {
            return Err(invalid_arg!(
                "need at least one channel and two classes (got {} / {})",
                self.channels,
                self.n_classes
            ));
        }
        if self.fc_sizes.last() != Some(&self.n_classes) || self.fc_sizes.contains(&0) {
            return Err(invalid_arg!(
                "fc sizes {:?} must be positive and end with n_classes = {}",
                self.fc_sizes,
                self.n_classes
            ));
        }
        if self.branch_kernels.is_empty() || self.branch_kernels.contains(&0) || self.trunk_kernel == 0 {
            return Err(invalid_arg!("kernel sizes must be positive"));
        }
        if self.trunk_kernel.is_multiple_of(2) {
            return Err(invalid_arg!("trunk kernel must be odd, got {}", self.trunk_kernel));
        }
        if self.branch_filters == 0 || self.trunk_filters == 0 || self.pool == 0 {
            return Err(invalid_arg!("filter counts and pool size must be positive"));
        }
        let p = self.drop_probability();
        if !(0.0..1.0).contains(&p) {
            return Err(invalid_arg!("dropout probability {p} outside [0, 1)"));
        }
        if let Some(s) = self.attention_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid_arg!("attention scale must be positive, got {s}"));
            }
        }
        self.shape_chain().map(|_| ())
    }

    pub fn shape_chain(&self) -> Result<ShapeChain> {
        let (h, w) = (self.channels, self.input_width()?);
        let mut chain: ShapeChain = vec![("input".into(), vec![1, h, w])];
        for (j, &n) in self.branch_kernels.iter().enumerate() {
            let (k, pad) = self.branch_geometry(n);
            let (oh, ow) = pad.output_extent(h, w, k, k)?;
            chain.push((format!("branch{j}"), vec![self.branch_filters, oh, ow]));
        }
        let depth = self.branch_filters * self.branch_kernels.len();
        chain.push(("concat".into(), vec![depth, h, w]));
        let pooled = |h: usize, w: usize, what: &str| -> Result<(usize, usize)> {
            if h < self.pool || w < self.pool {
                return Err(invalid_arg!("{what}: {h}x{w} input too small for {0}x{0} pooling", self.pool));
            }
            Ok((h / self.pool, w / self.pool))
        };
        let (h1, w1) = pooled(h, w, "pool1")?;
        chain.push(("pool1".into(), vec![depth, h1, w1]));
        let tk = self.trunk_kernel;
        Padding::same(tk, tk).output_extent(h1, w1, tk, tk)?;
        chain.push(("trunk".into(), vec![self.trunk_filters, h1, w1]));
        let (h2, w2) = pooled(h1, w1, "pool2")?;
        chain.push(("pool2".into(), vec![self.trunk_filters, h2, w2]));
        chain.push(("flatten".into(), vec![self.trunk_filters * h2 * w2]));
        for (i, &n) in self.fc_sizes.iter().enumerate() {
            chain.push((format!("fc{i}"), vec![n]));
        }
        Ok(chain)
    }

    fn flatten_width(&self) -> Result<usize> {
        let chain = self.shape_chain()?;
        Ok(chain.iter().find(|(n, _)| n == "flatten").unwrap().1[0])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub kernels: Grid,
    pub bias: Grid,
    pub padding: Padding,
    pub bn: BatchNorm,
}

impl ConvBlock {
    fn init<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, padding: Padding, rng: &mut R) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        ConvBlock {
            kernels: Grid::uniform(&[cout, cin, k, k], bound, rng),
            bias: Grid::uniform(&[cout], bound, rng),
            padding,
            bn: BatchNorm::new(cout),
        }
    }

    fn zeros_like(&self) -> Self {
        ConvBlock {
            kernels: Grid::zeros(self.kernels.shape()),
            bias: Grid::zeros(self.bias.shape()),
            padding: self.padding,
            bn: BatchNorm {
                gamma: Grid::zeros(self.bn.gamma.shape()),
                beta: Grid::zeros(self.bn.beta.shape()),
                running_mean: Grid::zeros(self.bn.running_mean.shape()),
                running_var: Grid::zeros(self.bn.running_var.shape()),
            },
        }
    }

    fn filters(&self) -> usize {
        self.kernels.shape()[0]
    }
}

/// All parameters of one network. Gradients use the same type so that
/// [`ModelParams::trainable`] lines up between the two.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub attention: Option<AttentionParams>,
    pub branches: Vec<ConvBlock>,
    pub trunk: ConvBlock,
    pub dense: Vec<Dense>,
}

const ATTENTION_STREAM: u64 = 1;
const CLASSIFIER_STREAM: u64 = 2;

impl ModelParams {
    /// Seeded initialisation. Attention and classifier weights come from
    /// separate streams, so variants of equal input width built from the
    /// same seed share their classifier weights.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let attention = if cfg.variant.uses_attention() {
            let mut rng = seeded(seed, &[ATTENTION_STREAM]);
            Some(AttentionParams::init(&cfg.layout()?, &mut rng))
        } else {
            None
        };
        let mut rng = seeded(seed, &[CLASSIFIER_STREAM]);
        let branches = cfg
            .branch_kernels
            .iter()
            .map(|&n| {
                let (k, pad) = cfg.branch_geometry(n);
                ConvBlock::init(1, cfg.branch_filters, k, pad, &mut rng)
            })
            .collect();
        let depth = cfg.branch_filters * cfg.branch_kernels.len();
        let tk = cfg.trunk_kernel;
        let trunk = ConvBlock::init(depth, cfg.trunk_filters, tk, Padding::same(tk, tk), &mut rng);
        let mut n_in = cfg.flatten_width()?;
        let mut dense = Vec::with_capacity(cfg.fc_sizes.len());
        for &n_out in &cfg.fc_sizes {
            let bound = 1.0 / (n_in as f64).sqrt();
            dense.push(Dense {
                weight: Grid::uniform(&[n_in, n_out], bound, &mut rng),
                bias: Grid::uniform(&[n_out], bound, &mut rng),
            });
            n_in = n_out;
        }
        Ok(ModelParams {
            attention,
            branches,
            trunk,
            dense,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            attention: self.attention.as_ref().map(|a| {
                let mut z = a.clone();
                z.grids_mut().into_iter().for_each(|g| g.fill(0.0));
                z
            }),
            branches: self.branches.iter().map(ConvBlock::zeros_like).collect(),
            trunk: self.trunk.zeros_like(),
            dense: self
                .dense
                .iter()
                .map(|d| Dense {
                    weight: Grid::zeros(d.weight.shape()),
                    bias: Grid::zeros(d.bias.shape()),
                })
                .collect(),
        }
    }

    fn blocks(&self) -> impl Iterator<Item = (String, &ConvBlock)> {
        self.branches
            .iter()
            .enumerate()
            .map(|(j, b)| (format!("branch{j}"), b))
            .chain(std::iter::once(("trunk".to_string(), &self.trunk)))
    }

    /// Trainable grids with their names, in a fixed order.
    pub fn trainable(&self) -> Vec<(String, &Grid)> {
        let mut out = Vec::new();
        if let Some(a) = &self.attention {
            out.extend(a.grid_names().into_iter().zip(a.grids()));
        }
        for (name, b) in self.blocks() {
            out.push((format!("{name}.kernels"), &b.kernels));
            out.push((format!("{name}.bias"), &b.bias));
            out.push((format!("{name}.bn.gamma"), &b.bn.gamma));
            out.push((format!("{name}.bn.beta"), &b.bn.beta));
        }
        for (i, d) in self.dense.iter().enumerate() {
            out.push((format!("fc{i}.weight"), &d.weight));
            out.push((format!("fc{i}.bias"), &d.bias));
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Grid> {
        let mut out = Vec::new();
        if let Some(a) = &mut self.attention {
            out.extend(a.grids_mut());
        }
        for b in self.branches.iter_mut().chain(std::iter::once(&mut self.trunk)) {
            out.push(&mut b.kernels);
            out.push(&mut b.bias);
            out.push(&mut b.bn.gamma);
            out.push(&mut b.bn.beta);
        }
        for d in &mut self.dense {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    /// Batch-norm running statistics.
    pub fn buffers(&self) -> Vec<(String, &Grid)> {
        self.blocks()
            .flat_map(|(name, b)| {
                [
                    (format!("{name}.bn.running_mean"), &b.bn.running_mean),
                    (format!("{name}.bn.running_var"), &b.bn.running_var),
                ]
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|(_, g)| g.len()).sum()
    }

    pub fn named_grids(&self) -> Vec<(String, Grid)> {
        self.trainable()
            .into_iter()
            .chain(self.buffers())
            .map(|(n, g)| (n, g.clone()))
            .collect()
    }

    /// Rebuilds parameters for `cfg` from the grids of a checkpoint.
    pub fn from_checkpoint(cfg: &ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let mut params = Self::init(cfg, 0)?;
        let names: Vec<String> = params.trainable().into_iter().map(|(n, _)| n).collect();
        for (slot, name) in params.trainable_mut().into_iter().zip(&names) {
            *slot = fetch(ck, name, slot.shape())?;
        }
        let blocks = params.branches.iter_mut().chain(std::iter::once(&mut params.trunk));
        for (i, block) in blocks.enumerate() {
            let prefix = if i < cfg.branch_kernels.len() { format!("branch{i}") } else { "trunk".into() };
            let bn = &mut block.bn;
            bn.running_mean = fetch(ck, &format!("{prefix}.bn.running_mean"), bn.running_mean.shape())?;
            bn.running_var = fetch(ck, &format!("{prefix}.bn.running_var"), bn.running_var.shape())?;
        }
        Ok(params)
    }
}

fn fetch(ck: &Checkpoint, name: &str, shape: &[usize]) -> Result<Grid> {
    let g = ck
        .grid(name)
        .ok_or_else(|| Error::InvalidData(format!("checkpoint is missing grid {name:?}")))?;
    if g.shape() != shape {
        return Err(Error::InvalidData(format!(
            "checkpoint grid {name:?} has shape {:?}, model expects {:?}",
            g.shape(),
            shape
        )));
    }
    Ok(g.clone())
}

fn concat_depth(parts: &[Grid]) -> Grid {
    let [b, _, h, w] = parts[0].dims4();
    let depth: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Grid::zeros(&[b, depth, h, w]);
    let plane = h * w;
    let o = out.as_mut_slice();
    for bi in 0..b {
        let mut d0 = 0;
        for p in parts {
            let d = p.shape()[1];
            let src = &p.as_slice()[bi * d * plane..(bi + 1) * d * plane];
            o[(bi * depth + d0) * plane..(bi * depth + d0 + d) * plane].copy_from_slice(src);
            d0 += d;
        }
    }
    out
}

fn split_depth(g: &Grid, depths: &[usize]) -> Vec<Grid> {
    let [b, depth, h, w] = g.dims4();
    let plane = h * w;
    let mut d0 = 0;
    depths
        .iter()
        .map(|&d| {
            let mut out = Vec::with_capacity(b * d * plane);
            for bi in 0..b {
                out.extend_from_slice(&g.as_slice()[(bi * depth + d0) * plane..(bi * depth + d0 + d) * plane]);
            }
            d0 += d;
            Grid::from_vec(&[b, d, h, w], out).unwrap()
        })
        .collect()
}

struct BlockTrace {
    input: Grid,
    pre_act: Grid,
    bn: BnCache,
}

struct Trace {
    attention: Vec<AttentionTrace>,
    branches: Vec<BlockTrace>,
    concat_shape: Vec<usize>,
    trunk: BlockTrace,
    trunk_out_shape: Vec<usize>,
    pooled_shape: Vec<usize>,
    dense_inputs: Vec<Grid>,
    masks: Vec<Option<Grid>>,
}

struct ForwardOut {
    logits: Grid,
    trace: Trace,
    stats: Vec<BatchStats>,
}

fn block_forward(block: &ConvBlock, x: Grid, mode: Mode) -> Result<(Grid, BlockTrace, Option<BatchStats>)> {
    let pre_act = conv2d(&x, &block.kernels, &block.bias, block.padding)?;
    let (y, bn, stats) = batch_norm(&elu(&pre_act), &block.bn, mode)?;
    Ok((y, BlockTrace { input: x, pre_act, bn }, stats))
}

struct BlockGrads {
    input: Option<Grid>,
    kernels: Grid,
    bias: Grid,
    gamma: Grid,
    beta: Grid,
}

fn block_backward(block: &ConvBlock, t: &BlockTrace, g: &Grid, input_grad: bool) -> Result<BlockGrads> {
    let bn = batch_norm_backward(&t.bn, &block.bn, g)?;
    let d_pre = elu_backward(&t.pre_act, &bn.input);
    let conv = conv2d_backward(&t.input, &block.kernels, block.padding, &d_pre, input_grad)?;
    Ok(BlockGrads {
        input: conv.input,
        kernels: conv.kernels,
        bias: conv.bias,
        gamma: bn.gamma,
        beta: bn.beta,
    })
}

fn store_block_grads(dst: &mut ConvBlock, g: BlockGrads) {
    dst.kernels = g.kernels;
    dst.bias = g.bias;
    dst.bn.gamma = g.gamma;
    dst.bn.beta = g.beta;
}

fn forward_impl<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    params: &ModelParams,
    input: &Grid,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardOut> {
    let width = cfg.input_width()?;
    if input.shape().len() != 4 || input.shape()[1] != 1 || input.shape()[2] != cfg.channels || input.shape()[3] != width {
        return Err(invalid_arg!(
            "{} expects input [batch, 1, {}, {width}], got {:?}",
            cfg.variant,
            cfg.channels,
            input.shape()
        ));
    }
    let batch = input.shape()[0];
    let (x, attention) = match &params.attention {
        Some(ap) => {
            let layout = cfg.layout()?;
            let plane = cfg.channels * width;
            let mut data = Vec::with_capacity(batch * plane);
            let mut traces = Vec::with_capacity(batch);
            for bi in 0..batch {
                let s = Grid::from_vec(&[cfg.channels, width], input.outer(bi).to_vec())?;
                let (m, t) = attention_block(&s, &layout, ap, cfg.scale())?;
                data.extend_from_slice(m.as_slice());
                traces.push(t);
            }
            (Grid::from_vec(input.shape(), data)?, traces)
        }
        None => (input.clone(), Vec::new()),
    };

    let mut stats = Vec::new();
    let mut outs = Vec::with_capacity(params.branches.len());
    let mut branch_traces = Vec::with_capacity(params.branches.len());
    for block in &params.branches {
        let (y, t, s) = block_forward(block, x.clone(), mode)?;
        outs.push(y);
        branch_traces.push(t);
        stats.extend(s);
    }
    let cat = concat_depth(&outs);
    drop(outs);
    let pool = (cfg.pool, cfg.pool);
    let p1 = avg_pool2d(&cat, pool, pool)?;
    let (yt, trunk, s) = block_forward(&params.trunk, p1, mode)?;
    stats.extend(s);
    let p2 = avg_pool2d(&yt, pool, pool)?;
    let pooled_shape = p2.shape().to_vec();
    let flat_width = p2.len() / batch;
    let mut h = p2.reshape(&[batch, flat_width])?;

    let p_drop = cfg.drop_probability();
    let n_dense = params.dense.len();
    let mut dense_inputs = Vec::with_capacity(n_dense);
    let mut masks = Vec::with_capacity(n_dense.saturating_sub(1));
    for (i, layer) in params.dense.iter().enumerate() {
        let a = layer.forward(&h)?;
        dense_inputs.push(h);
        h = if i + 1 < n_dense {
            let (out, mask) = dropout(&a, p_drop, mode, rng)?;
            masks.push(mask);
            out
        } else {
            a
        };
    }
    if !h.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(ForwardOut {
        logits: h,
        trace: Trace {
            attention,
            branches: branch_traces,
            concat_shape: cat.shape().to_vec(),
            trunk_out_shape: yt.shape().to_vec(),
            trunk,
            pooled_shape,
            dense_inputs,
            masks,
        },
        stats,
    })
}

fn backward_impl(cfg: &ModelConfig, params: &ModelParams, trace: &Trace, dlogits: &Grid) -> Result<ModelParams> {
    let mut grads = params.zeros_like();
    let mut d = dlogits.clone();
    for i in (0..params.dense.len()).rev() {
        let g = params.dense[i].backward(&trace.dense_inputs[i], &d)?;
        grads.dense[i].weight = g.weight;
        grads.dense[i].bias = g.bias;
        d = g.input;
        if i > 0 {
            d = dropout_backward(trace.masks[i - 1].as_ref(), &d);
        }
    }
    let pool = (cfg.pool, cfg.pool);
    let d = d.reshape(&trace.pooled_shape)?;
    let d = avg_pool2d_backward(&trace.trunk_out_shape, &d, pool, pool)?;
    let g = block_backward(&params.trunk, &trace.trunk, &d, true)?;
    let d = avg_pool2d_backward(&trace.concat_shape, g.input.as_ref().unwrap(), pool, pool)?;
    store_block_grads(&mut grads.trunk, g);

    let depths: Vec<usize> = params.branches.iter().map(ConvBlock::filters).collect();
    let want_input = params.attention.is_some();
    let mut dx: Option<Grid> = None;
    for (j, dj) in split_depth(&d, &depths).into_iter().enumerate() {
        let mut g = block_backward(&params.branches[j], &trace.branches[j], &dj, want_input)?;
        if let Some(gi) = g.input.take() {
            match dx.as_mut() {
                Some(acc) => acc.add_assign(&gi),
                None => dx = Some(gi),
            }
        }
        store_block_grads(&mut grads.branches[j], g);
    }

    if let (Some(ap), Some(dx)) = (&params.attention, dx) {
        let layout = cfg.layout()?;
        let dims = [cfg.channels, cfg.input_width()?];
        let ga = grads.attention.as_mut().unwrap();
        for (bi, t) in trace.attention.iter().enumerate() {
            let dm = Grid::from_vec(&dims, dx.outer(bi).to_vec())?;
            let gs = attention_block_backward(t, &layout, ap, cfg.scale(), &dm)?;
            for (acc, g) in ga.grids_mut().into_iter().zip(gs.grids()) {
                acc.add_assign(g);
            }
        }
    }
    Ok(grads)
}

/// A configured network with its parameters and the trace of the last
/// recorded forward pass.
pub struct Network {
    config: ModelConfig,
    pub params: ModelParams,
    trace: Option<Trace>,
}

/// Seeded parameters for `cfg`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    ModelParams::init(cfg, seed)
}

impl Network {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        if params.attention.is_some() != config.variant.uses_attention() {
            return Err(invalid_arg!("parameters do not match variant {}", config.variant));
        }
        if let Some(a) = &params.attention {
            a.validate(&config.layout()?)?;
        }
        Ok(Network {
            config,
            params,
            trace: None,
        })
    }

    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Self::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Forward pass returning logits `[batch, n_classes]` and recording the
    /// trace for [`Network::backward`]. In train mode, batch-norm running
    /// statistics are advanced.
    pub fn forward<R: Rng + ?Sized>(&mut self, input: &Grid, mode: Mode, rng: &mut R) -> Result<Grid> {
        let out = forward_impl(&self.config, &self.params, input, mode, rng)?;
        let blocks = self.params.branches.iter_mut().chain(std::iter::once(&mut self.params.trunk));
        for (block, s) in blocks.zip(&out.stats) {
            block.bn.update_running(s);
        }
        self.trace = Some(out.trace);
        Ok(out.logits)
    }

    /// Gradients of every trainable parameter given `dL/dlogits`. Consumes
    /// the trace of the preceding forward pass.
    pub fn backward(&mut self, dlogits: &Grid) -> Result<ModelParams> {
        let trace = self
            .trace
            .take()
            .ok_or_else(|| Error::InvalidState("backward called without a recorded forward pass".into()))?;
        backward_impl(&self.config, &self.params, &trace, dlogits)
    }

    /// ELU inputs of every conv block in the last recorded forward pass,
    /// branches first. Empty when no trace is held.
    pub fn activation_inputs(&self) -> Vec<&Grid> {
        self.trace.as_ref().map_or_else(Vec::new, |t| {
            t.branches.iter().chain(std::iter::once(&t.trunk)).map(|b| &b.pre_act).collect()
        })
    }

    /// Class probabilities in eval mode. Pure: no trace, no buffer updates.
    pub fn predict(&self, input: &Grid) -> Result<Grid> {
        let mut unused = seeded(0, &[]);
        let out = forward_impl(&self.config, &self.params, input, Mode::Eval, &mut unused)?;
        Ok(softmax_rows(&out.logits))
    }

    pub fn logits_eval(&self, input: &Grid) -> Result<Grid> {
        let mut unused = seeded(0, &[]);
        Ok(forward_impl(&self.config, &self.params, input, Mode::Eval, &mut unused)?.logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{assert_grad_close, numeric_grad};
    use crate::nn::{softmax_cross_entropy, softmax_cross_entropy_backward};

    fn mini(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            n_classes: 3,
            channels: 6,
            psd_bins: 9,
            bands: BandGenConfig { window_lengths: vec![2, 3], increment: 1 },
            branch_kernels: vec![3],
            branch_filters: 2,
            trunk_filters: 2,
            fc_sizes: vec![16, 8, 3],
            ..Default::default()
        }
    }

    #[test]
    fn default_shape_chain() {
        let cfg = ModelConfig::new(Variant::Oescn, 30, 13);
        let chain = cfg.shape_chain().unwrap();
        let get = |n: &str| chain.iter().find(|(k, _)| k == n).unwrap().1.clone();
        assert_eq!(get("input"), vec![1, 30, 299]);
        for b in ["branch0", "branch1", "branch2"] {
            assert_eq!(get(b), vec![8, 30, 299]);
        }
        assert_eq!(get("concat"), vec![24, 30, 299]);
        assert_eq!(get("pool1"), vec![24, 15, 149]);
        assert_eq!(get("trunk"), vec![16, 15, 149]);
        assert_eq!(get("pool2"), vec![16, 7, 74]);
        assert_eq!(get("flatten"), vec![8288]);
        assert_eq!(get("fc0"), vec![512]);
        assert_eq!(get("fc1"), vec![128]);
        assert_eq!(get("fc2"), vec![13]);
        assert_eq!(cfg.branch_geometry(8).0, 9);
        let literal = ModelConfig { even_kernels: EvenKernel::Asymmetric, ..cfg };
        assert_eq!(literal.branch_geometry(8), (8, Padding::same(8, 8)));
        assert_eq!(literal.shape_chain().unwrap()[2].1, vec![8, 30, 299]);
    }

    #[test]
    fn variant_parameter_counts() {
        let count = |v| ModelParams::init(&ModelConfig::new(v, 8, 4), 3).unwrap().parameter_count();
        let (full, a1, a2) = (count(Variant::Oescn), count(Variant::OescnA1), count(Variant::OescnA2));
        assert!(a1 < full);
        assert_ne!(a1, a2);
        let layout = ModelConfig::new(Variant::Oescn, 8, 4).layout().unwrap();
        assert_eq!(full - a1, AttentionParams::zeros(&layout).parameter_count());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = mini(Variant::Oescn);
        cfg.fc_sizes = vec![16, 4];
        assert!(cfg.validate().is_err());
        let mut cfg = mini(Variant::OescnA1);
        cfg.channels = 2;
        assert!(ModelParams::init(&cfg, 0).is_err());
        let mut cfg = mini(Variant::OescnA1);
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        cfg.dropout_reading = DropoutReading::KeepProbability;
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.drop_probability(), 0.0);
        assert!("OESCN_a2".parse::<Variant>().is_ok());
        assert!("oescn-a3".parse::<Variant>().is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = mini(Variant::Oescn);
        assert_eq!(ModelParams::init(&cfg, 11).unwrap(), ModelParams::init(&cfg, 11).unwrap());
        assert_ne!(ModelParams::init(&cfg, 11).unwrap(), ModelParams::init(&cfg, 12).unwrap());
    }

    #[test]
    fn forward_shape_and_probabilities() {
        let cfg = ModelConfig::new(Variant::Oescn, 30, 13);
        let net = Network::build(cfg, 1).unwrap();
        let mut rng = seeded(2, &[]);
        let x = Grid::uniform(&[2, 1, 30, 299], 1.0, &mut rng);
        let p = net.predict(&x).unwrap();
        assert_eq!(p.shape(), &[2, 13]);
        for r in 0..2 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(p.row(r).iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert_eq!(net.predict(&x).unwrap(), p);
        assert!(net.predict(&Grid::zeros(&[2, 1, 30, 70])).is_err());
    }

    #[test]
    fn backward_requires_forward() {
        let mut net = Network::build(mini(Variant::OescnA1), 0).unwrap();
        assert!(matches!(net.backward(&Grid::zeros(&[2, 3])), Err(Error::InvalidState(_))));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut net = Network::build(mini(Variant::Oescn), 0).unwrap();
        let mut rng = seeded(1, &[]);
        let x = Grid::uniform(&[3, 1, 6, 13], 1.0, &mut rng);
        net.forward(&x, Mode::Train, &mut rng).unwrap();
        let g = net.backward(&Grid::zeros(&[3, 3])).unwrap();
        assert!(g.trainable().iter().all(|(_, g)| g.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zeroed_attention_matches_a1() {
        let full_cfg = mini(Variant::Oescn);
        let mut full = ModelParams::init(&full_cfg, 5).unwrap();
        let a1 = Network::build(mini(Variant::OescnA1), 5).unwrap();
        for g in full.attention.as_mut().unwrap().grids_mut() {
            g.fill(0.0);
        }
        assert_eq!(full.branches, a1.params.branches);
        let full = Network::new(full_cfg, full).unwrap();
        for seed in 0..10 {
            let mut rng = seeded(seed, &[77]);
            let x = Grid::uniform(&[4, 1, 6, 13], 2.0, &mut rng);
            assert_eq!(full.predict(&x).unwrap(), a1.predict(&x).unwrap());
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for variant in Variant::ALL {
            let cfg = mini(variant);
            let width = cfg.input_width().unwrap();
            let mut checked = 0;
            let mut seed = 0;
            while checked < 20 {
                seed += 1;
                let mut rng = seeded(seed, &[31]);
                let mut net = Network::build(cfg.clone(), seed).unwrap();
                if let Some(a) = net.params.attention.as_mut() {
                    a.fusion = Grid::uniform(&[3], 1.0, &mut rng);
                }
                let x = Grid::uniform(&[3, 1, 6, width], 1.0, &mut rng);
                let targets = [0, 2, 1];
                let loss_of = |params: &ModelParams| {
                    let mut r = seeded(seed, &[99]);
                    let out = forward_impl(&cfg, params, &x, Mode::Train, &mut r).unwrap();
                    softmax_cross_entropy(&out.logits, &targets).unwrap().0
                };
                if let Some(ap) = &net.params.attention {
                    let layout = cfg.layout().unwrap();
                    let near_kink = (0..3).any(|b| {
                        let s = Grid::from_vec(&[6, width], x.outer(b).to_vec()).unwrap();
                        let (_, t) = attention_block(&s, &layout, ap, cfg.scale()).unwrap();
                        let o = t.outputs();
                        o.h_glo.as_slice().iter().zip(o.h_loc.as_slice()).any(|(a, b)| (a - b).abs() < 1e-3)
                    });
                    if near_kink {
                        continue;
                    }
                }
                checked += 1;
                let mut r = seeded(seed, &[99]);
                let logits = net.forward(&x, Mode::Train, &mut r).unwrap();
                let (_, probs) = softmax_cross_entropy(&logits, &targets).unwrap();
                let grads = net.backward(&softmax_cross_entropy_backward(&probs, &targets)).unwrap();
                let base = net.params.clone();
                let names: Vec<String> = base.trainable().into_iter().map(|(n, _)| n).collect();
                for (idx, name) in names.iter().enumerate() {
                    let numeric = numeric_grad(base.trainable()[idx].1, |g| {
                        let mut p = base.clone();
                        *p.trainable_mut()[idx] = g.clone();
                        loss_of(&p)
                    });
                    assert_grad_close(grads.trainable()[idx].1, &numeric, &format!("{variant} {name}"));
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = mini(Variant::Oescn);
        let mut net = Network::build(cfg.clone(), 4).unwrap();
        let mut rng = seeded(1, &[]);
        net.forward(&Grid::uniform(&[3, 1, 6, 13], 1.0, &mut rng), Mode::Train, &mut rng).unwrap();
        let ck = Checkpoint { manifest: "{}".into(), grids: net.params.named_grids(), adam: None };
        let back = ModelParams::from_checkpoint(&cfg, &Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, net.params);
        let mut missing = ck.clone();
        missing.grids.pop();
        assert!(ModelParams::from_checkpoint(&cfg, &missing).is_err());
    }
}
