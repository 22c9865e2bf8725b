use serde::{Deserialize, Serialize};

use super::Grid;
use crate::error::{invalid_arg, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel normalisation over batch and spatial axes, with learnable
/// gain (`gamma`) and shift (`beta`). Running statistics are buffers and
/// receive no gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Grid,
    pub beta: Grid,
    pub running_mean: Grid,
    pub running_var: Grid,
}

/// Statistics of one training batch, used to advance the running buffers.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

pub struct BnCache {
    x_hat: Grid,
    inv_std: Vec<f64>,
    mode: Mode,
}

pub struct BnGrads {
    pub input: Grid,
    pub gamma: Grid,
    pub beta: Grid,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Grid::filled(&[channels], 1.0),
            beta: Grid::zeros(&[channels]),
            running_mean: Grid::zeros(&[channels]),
            running_var: Grid::filled(&[channels], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let rm = self.running_mean.as_mut_slice();
        let rv = self.running_var.as_mut_slice();
        for c in 0..rm.len() {
            rm[c] = (1.0 - BN_MOMENTUM) * rm[c] + BN_MOMENTUM * stats.mean[c];
            rv[c] = (1.0 - BN_MOMENTUM) * rv[c] + BN_MOMENTUM * stats.var_unbiased[c];
        }
    }
}

fn layout(input: &Grid) -> Result<(usize, usize, usize)> {
    match *input.shape() {
        [b, c] => Ok((b, c, 1)),
        [b, c, h, w] => Ok((b, c, h * w)),
        ref s => Err(invalid_arg!("batch norm expects rank 2 or 4, got {:?}", s)),
    }
}

/// Returns the normalised output, the backward cache and (train mode only)
/// the batch statistics; the caller decides whether to fold those into the
/// running buffers.
pub fn batch_norm(input: &Grid, bn: &BatchNorm, mode: Mode) -> Result<(Grid, BnCache, Option<BatchStats>)> {
    let (b, c, hw) = layout(input)?;
    if c != bn.channels() {
        return Err(invalid_arg!(
            "batch norm has {} channels, input has {c}",
            bn.channels()
        ));
    }
    if mode == Mode::Train && b < 2 {
        return Err(invalid_arg!("batch norm in train mode needs batch >= 2, got {b}"));
    }
    let x = input.as_slice();
    let n = (b * hw) as f64;
    let (mean, var, stats) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for bi in 0..b {
                    s += x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().sum::<f64>();
                }
                let m = s / n;
                let mut ss = 0.0;
                for bi in 0..b {
                    ss += x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                        .iter()
                        .map(|v| (v - m) * (v - m))
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = ss / n;
            }
            let var_unbiased = var.iter().map(|v| v * n / (n - 1.0)).collect();
            let stats = BatchStats {
                mean: mean.clone(),
                var_unbiased,
            };
            (mean, var, Some(stats))
        }
        Mode::Eval => (
            bn.running_mean.as_slice().to_vec(),
            bn.running_var.as_slice().to_vec(),
            None,
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut x_hat = Grid::zeros(input.shape());
    let mut out = Grid::zeros(input.shape());
    {
        let xh = x_hat.as_mut_slice();
        let o = out.as_mut_slice();
        let (gamma, beta) = (bn.gamma.as_slice(), bn.beta.as_slice());
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    let v = (x[i] - mean[ch]) * inv_std[ch];
                    xh[i] = v;
                    o[i] = gamma[ch] * v + beta[ch];
                }
            }
        }
    }
    Ok((out, BnCache { x_hat, inv_std, mode }, stats))
}

pub fn batch_norm_backward(cache: &BnCache, bn: &BatchNorm, grad_out: &Grid) -> Result<BnGrads> {
    let (b, c, hw) = layout(grad_out)?;
    if grad_out.shape() != cache.x_hat.shape() {
        return Err(invalid_arg!("batch norm gradient shape mismatch"));
    }
    let g = grad_out.as_slice();
    let xh = cache.x_hat.as_slice();
    let gamma = bn.gamma.as_slice();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * hw;
            for i in off..off + hw {
                dgamma[ch] += g[i] * xh[i];
                dbeta[ch] += g[i];
            }
        }
    }
    let mut dx = Grid::zeros(grad_out.shape());
    let d = dx.as_mut_slice();
    let n = (b * hw) as f64;
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * hw;
            let scale = gamma[ch] * cache.inv_std[ch];
            for i in off..off + hw {
                d[i] = match cache.mode {
                    // dgamma/dbeta double as the sums of dy·x̂ and dy.
                    Mode::Train => scale * (g[i] - dbeta[ch] / n - xh[i] * dgamma[ch] / n),
                    Mode::Eval => scale * g[i],
                };
            }
        }
    }
    Ok(BnGrads {
        input: dx,
        gamma: Grid::from_vec(&[c], dgamma)?,
        beta: Grid::from_vec(&[c], dbeta)?,
    })
}
