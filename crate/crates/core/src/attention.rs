//! Frequency band attention.
//!
//! One global head attends over all K band columns of S; N local heads each
//! attend within one equal-width block. A head maps `x (C × D)` to
//! `V · softmax(QᵀK / scale)` with `Q = x·Wq`, `K = x·Wk`, `V = x·Wv` and
//! the softmax normalising columns, so each output column is a convex
//! combination of the columns of V. The global and concatenated local
//! outputs are stacked, max- and mean-pooled across the stack, mixed by a
//! 1×1 convolution and added back onto S.

use rand::Rng;

use crate::bandgen::{BandCombination, BandLayout};
use crate::error::{invalid_arg, Result};
use crate::nn::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::nn::Grid;
use crate::Error;

/// Query/key/value projections of one head, each `D × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Qkv {
    pub query: Grid,
    pub key: Grid,
    pub value: Grid,
}

impl Qkv {
    pub fn zeros(d: usize) -> Self {
        Qkv {
            query: Grid::zeros(&[d, d]),
            key: Grid::zeros(&[d, d]),
            value: Grid::zeros(&[d, d]),
        }
    }

    /// Uniform in `±1/√d`.
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Qkv {
            query: Grid::uniform(&[d, d], bound, rng),
            key: Grid::uniform(&[d, d], bound, rng),
            value: Grid::uniform(&[d, d], bound, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.rows()
    }

    fn check(&self, d: usize, what: &str) -> Result<()> {
        for (name, g) in [("query", &self.query), ("key", &self.key), ("value", &self.value)] {
            if g.shape() != [d, d] {
                return Err(invalid_arg!(
                    "{what} {name} projection is {:?}, expected [{d}, {d}]",
                    g.shape()
                ));
            }
        }
        Ok(())
    }
}

/// Index of each entry of [`AttentionParams::fusion`].
pub const FUSION_W_MAX: usize = 0;
pub const FUSION_W_AVG: usize = 1;
pub const FUSION_BIAS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub global: Qkv,
    pub local: Vec<Qkv>,
    /// `[w_max, w_avg, bias]` of the 1×1 head fusion convolution.
    pub fusion: Grid,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(layout: &BandLayout, rng: &mut R) -> Self {
        let global = Qkv::init(layout.total_k, rng);
        let local = layout.counts.iter().map(|&b| Qkv::init(b, rng)).collect();
        AttentionParams {
            global,
            local,
            fusion: Grid::from_vec(&[3], vec![0.5, 0.5, 0.0]).unwrap(),
        }
    }

    pub fn zeros(layout: &BandLayout) -> Self {
        AttentionParams {
            global: Qkv::zeros(layout.total_k),
            local: layout.counts.iter().map(|&b| Qkv::zeros(b)).collect(),
            fusion: Grid::zeros(&[3]),
        }
    }

    pub fn validate(&self, layout: &BandLayout) -> Result<()> {
        self.global.check(layout.total_k, "global head")?;
        if self.local.len() != layout.scales() {
            return Err(invalid_arg!(
                "{} local heads for {} scales",
                self.local.len(),
                layout.scales()
            ));
        }
        for (i, (qkv, &b)) in self.local.iter().zip(&layout.counts).enumerate() {
            qkv.check(b, &format!("local head {i}"))?;
        }
        if self.fusion.len() != 3 {
            return Err(invalid_arg!("fusion weights need 3 entries"));
        }
        Ok(())
    }

    /// Every projection matrix followed by the fusion weights.
    pub fn grids(&self) -> Vec<&Grid> {
        let mut out = Vec::with_capacity(3 * (1 + self.local.len()) + 1);
        for h in std::iter::once(&self.global).chain(&self.local) {
            out.extend([&h.query, &h.key, &h.value]);
        }
        out.push(&self.fusion);
        out
    }

    pub fn grids_mut(&mut self) -> Vec<&mut Grid> {
        let mut out = Vec::with_capacity(3 * (1 + self.local.len()) + 1);
        for h in std::iter::once(&mut self.global).chain(self.local.iter_mut()) {
            out.extend([&mut h.query, &mut h.key, &mut h.value]);
        }
        out.push(&mut self.fusion);
        out
    }

    /// Names matching [`AttentionParams::grids`].
    pub fn grid_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, _) in std::iter::once(&self.global).chain(&self.local).enumerate() {
            let head = if i == 0 { "global".to_string() } else { format!("local{}", i - 1) };
            for p in ["query", "key", "value"] {
                out.push(format!("attention.{head}.{p}"));
            }
        }
        out.push("attention.fusion".into());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.grids().iter().map(|g| g.len()).sum()
    }
}

pub fn default_scale(channels: usize) -> f64 {
    (channels as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub h_glo: Grid,
    pub h_loc: Grid,
    /// `K × K` softmax weights of the global head.
    pub global_weights: Grid,
    /// `B_i × B_i` softmax weights of each local head.
    pub local_weights: Vec<Grid>,
}

/// Intermediates of one head kept for the backward pass.
#[derive(Clone, Debug)]
pub struct HeadTrace {
    x: Grid,
    q: Grid,
    k: Grid,
    v: Grid,
    a: Grid,
}

fn project(x: &Grid, w: &Grid) -> Grid {
    let (c, d) = (x.rows(), x.cols());
    let mut out = Grid::zeros(&[c, d]);
    gemm_nn(x.as_slice(), w.as_slice(), out.as_mut_slice(), c, d, d);
    out
}

/// Softmax of each column of a square matrix, in place.
fn softmax_columns(l: &mut Grid) {
    let n = l.rows();
    let m = l.cols();
    let v = l.as_mut_slice();
    let mut max = vec![f64::NEG_INFINITY; m];
    for i in 0..n {
        for (mx, &x) in max.iter_mut().zip(&v[i * m..(i + 1) * m]) {
            *mx = mx.max(x);
        }
    }
    let mut z = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let e = (v[i * m + j] - max[j]).exp();
            v[i * m + j] = e;
            z[j] += e;
        }
    }
    for i in 0..n {
        for (x, zj) in v[i * m..(i + 1) * m].iter_mut().zip(&z) {
            *x /= zj;
        }
    }
}

fn head_forward(x: &Grid, qkv: &Qkv, scale: f64) -> Result<(Grid, HeadTrace)> {
    let (c, d) = (x.rows(), x.cols());
    let q = project(x, &qkv.query);
    let k = project(x, &qkv.key);
    let v = project(x, &qkv.value);
    let mut a = Grid::zeros(&[d, d]);
    gemm_tn(q.as_slice(), k.as_slice(), a.as_mut_slice(), d, c, d);
    let inv = 1.0 / scale;
    a.as_mut_slice().iter_mut().for_each(|x| *x *= inv);
    if !a.is_finite() {
        return Err(Error::Numeric("non-finite attention logits".into()));
    }
    softmax_columns(&mut a);
    let mut h = Grid::zeros(&[c, d]);
    gemm_nn(v.as_slice(), a.as_slice(), h.as_mut_slice(), c, d, d);
    if !h.is_finite() {
        return Err(Error::Numeric("non-finite attention output".into()));
    }
    Ok((
        h,
        HeadTrace {
            x: x.clone(),
            q,
            k,
            v,
            a,
        },
    ))
}

/// Parameter gradients of one head given `dL/dh`.
fn head_backward(t: &HeadTrace, scale: f64, dh: &Grid) -> Qkv {
    let (c, d) = (t.x.rows(), t.x.cols());
    let mut dv = Grid::zeros(&[c, d]);
    gemm_nt(dh.as_slice(), t.a.as_slice(), dv.as_mut_slice(), c, d, d);
    let mut da = Grid::zeros(&[d, d]);
    gemm_tn(t.v.as_slice(), dh.as_slice(), da.as_mut_slice(), d, c, d);
    // column softmax backward: dL = a ⊙ (dA − 1·(Σ_i a ⊙ dA))
    let a = t.a.as_slice();
    let mut col = vec![0.0; d];
    for i in 0..d {
        for j in 0..d {
            col[j] += a[i * d + j] * da.as_slice()[i * d + j];
        }
    }
    let inv = 1.0 / scale;
    let mut dl = da;
    for i in 0..d {
        for j in 0..d {
            let idx = i * d + j;
            dl.as_mut_slice()[idx] = a[idx] * (dl.as_slice()[idx] - col[j]) * inv;
        }
    }
    let mut dq = Grid::zeros(&[c, d]);
    gemm_nt(t.k.as_slice(), dl.as_slice(), dq.as_mut_slice(), c, d, d);
    let mut dk = Grid::zeros(&[c, d]);
    gemm_nn(t.q.as_slice(), dl.as_slice(), dk.as_mut_slice(), c, d, d);
    let weight_grad = |dproj: &Grid| {
        let mut g = Grid::zeros(&[d, d]);
        gemm_tn(t.x.as_slice(), dproj.as_slice(), g.as_mut_slice(), d, c, d);
        g
    };
    Qkv {
        query: weight_grad(&dq),
        key: weight_grad(&dk),
        value: weight_grad(&dv),
    }
}

/// `h = V · softmax_col(QᵀK / scale)`; returns `h (C × D)` and the
/// attention weights `a (D × D)`.
pub fn self_attention(x: &Grid, qkv: &Qkv, scale: f64) -> Result<(Grid, Grid)> {
    if x.shape().len() != 2 {
        return Err(invalid_arg!("attention input must be a matrix, got {:?}", x.shape()));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(invalid_arg!("attention scale must be positive, got {scale}"));
    }
    qkv.check(x.cols(), "head")?;
    let (h, t) = head_forward(x, qkv, scale)?;
    Ok((h, t.a))
}

/// Blocks of S with equal slice width, in layout order.
pub fn split_local(s: &BandCombination) -> Vec<Grid> {
    (0..s.layout.scales())
        .map(|i| {
            let r = s.layout.block(i);
            s.s.col_block(r.start, r.end)
        })
        .collect()
}

/// Forward trace of the whole block.
pub struct AttentionTrace {
    global: HeadTrace,
    local: Vec<HeadTrace>,
    h_glo: Grid,
    h_loc: Grid,
}

impl AttentionTrace {
    pub fn outputs(&self) -> HeadOutputs {
        HeadOutputs {
            h_glo: self.h_glo.clone(),
            h_loc: self.h_loc.clone(),
            global_weights: self.global.a.clone(),
            local_weights: self.local.iter().map(|t| t.a.clone()).collect(),
        }
    }
}

fn heads_forward(s: &Grid, layout: &BandLayout, params: &AttentionParams, scale: f64) -> Result<AttentionTrace> {
    if s.shape().len() != 2 || s.cols() != layout.total_k {
        return Err(invalid_arg!(
            "band combination shape {:?} does not match K = {}",
            s.shape(),
            layout.total_k
        ));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(invalid_arg!("attention scale must be positive, got {scale}"));
    }
    params.validate(layout)?;
    let (h_glo, global) = head_forward(s, &params.global, scale)?;
    let mut h_loc = Grid::zeros(s.shape());
    let mut local = Vec::with_capacity(layout.scales());
    for (i, qkv) in params.local.iter().enumerate() {
        let r = layout.block(i);
        let (h, t) = head_forward(&s.col_block(r.start, r.end), qkv, scale)?;
        h_loc.set_col_block(r.start, &h);
        local.push(t);
    }
    Ok(AttentionTrace {
        global,
        local,
        h_glo,
        h_loc,
    })
}

/// Runs the global head on all of S and local head `i` on block `i`.
pub fn band_attention(s: &BandCombination, params: &AttentionParams, scale: f64) -> Result<HeadOutputs> {
    Ok(heads_forward(&s.s, &s.layout, params, scale)?.outputs())
}

/// `m = w_max · max(h_glo, h_loc) + w_avg · mean(h_glo, h_loc) + bias`.
pub fn head_fusion(h: &HeadOutputs, params: &AttentionParams) -> Grid {
    fuse(&h.h_glo, &h.h_loc, &params.fusion)
}

fn fuse(g: &Grid, l: &Grid, fusion: &Grid) -> Grid {
    let f = fusion.as_slice();
    let (w_max, w_avg, b) = (f[FUSION_W_MAX], f[FUSION_W_AVG], f[FUSION_BIAS]);
    let mut m = Grid::zeros(g.shape());
    for ((o, &x), &y) in m.as_mut_slice().iter_mut().zip(g.as_slice()).zip(l.as_slice()) {
        *o = w_max * x.max(y) + w_avg * (0.5 * (x + y)) + b;
    }
    m
}

pub fn apply_skip(m: &Grid, s: &BandCombination) -> Result<Grid> {
    if m.shape() != s.s.shape() {
        return Err(invalid_arg!(
            "skip connection shape mismatch: {:?} vs {:?}",
            m.shape(),
            s.s.shape()
        ));
    }
    let mut out = m.clone();
    out.add_assign(&s.s);
    Ok(out)
}

/// Full block `M' = fusion(heads(S)) + S` on a raw `C × K` matrix, keeping
/// the trace for [`attention_block_backward`].
pub fn attention_block(
    s: &Grid,
    layout: &BandLayout,
    params: &AttentionParams,
    scale: f64,
) -> Result<(Grid, AttentionTrace)> {
    let trace = heads_forward(s, layout, params, scale)?;
    let mut out = fuse(&trace.h_glo, &trace.h_loc, &params.fusion);
    out.add_assign(s);
    Ok((out, trace))
}

/// Parameter gradients of [`attention_block`] given `dL/dM'`. The skip
/// path carries no parameters; the gradient with respect to S itself is
/// not formed.
pub fn attention_block_backward(
    trace: &AttentionTrace,
    layout: &BandLayout,
    params: &AttentionParams,
    scale: f64,
    dm: &Grid,
) -> Result<AttentionParams> {
    if dm.shape() != trace.h_glo.shape() {
        return Err(invalid_arg!("attention upstream gradient shape {:?}", dm.shape()));
    }
    let f = params.fusion.as_slice();
    let (w_max, w_avg) = (f[FUSION_W_MAX], f[FUSION_W_AVG]);
    let mut d_glo = Grid::zeros(dm.shape());
    let mut d_loc = Grid::zeros(dm.shape());
    let mut dfusion = [0.0; 3];
    for (i, &g) in dm.as_slice().iter().enumerate() {
        let x = trace.h_glo.as_slice()[i];
        let y = trace.h_loc.as_slice()[i];
        dfusion[FUSION_W_MAX] += g * x.max(y);
        dfusion[FUSION_W_AVG] += g * 0.5 * (x + y);
        dfusion[FUSION_BIAS] += g;
        let (to_glo, to_loc) = if x >= y { (w_max, 0.0) } else { (0.0, w_max) };
        d_glo.as_mut_slice()[i] = g * (to_glo + 0.5 * w_avg);
        d_loc.as_mut_slice()[i] = g * (to_loc + 0.5 * w_avg);
    }
    let global = head_backward(&trace.global, scale, &d_glo);
    let local = trace
        .local
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let r = layout.block(i);
            head_backward(t, scale, &d_loc.col_block(r.start, r.end))
        })
        .collect();
    Ok(AttentionParams {
        global,
        local,
        fusion: Grid::from_vec(&[3], dfusion.to_vec())?,
    })
}
