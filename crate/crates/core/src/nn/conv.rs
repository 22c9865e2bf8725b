//! 2-D cross-correlation with explicit zero padding.

use serde::{Deserialize, Serialize};

use super::linalg::{axpy, dot};
use super::Grid;
use crate::error::{invalid_arg, Result};

/// Zero padding added on each side of the two spatial axes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn valid() -> Self {
        Self::default()
    }

    /// Padding that preserves the spatial extent. Odd kernels pad
    /// symmetrically; an even kernel puts the extra row/column at the
    /// bottom/right.
    pub fn same(kh: usize, kw: usize) -> Self {
        Padding {
            top: (kh - 1) / 2,
            bottom: kh / 2,
            left: (kw - 1) / 2,
            right: kw / 2,
        }
    }

    /// Like [`Padding::same`] but rejects even kernels.
    pub fn same_symmetric(kh: usize, kw: usize) -> Result<Self> {
        if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
            return Err(invalid_arg!(
                "symmetric same padding needs odd kernels, got {kh}x{kw}"
            ));
        }
        Ok(Self::same(kh, kw))
    }

    pub fn output_extent(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let ph = h + self.top + self.bottom;
        let pw = w + self.left + self.right;
        if kh == 0 || kw == 0 || kh > ph || kw > pw {
            return Err(invalid_arg!(
                "kernel {kh}x{kw} does not fit padded input {ph}x{pw}"
            ));
        }
        Ok((ph - kh + 1, pw - kw + 1))
    }
}

pub struct ConvGrads {
    pub input: Option<Grid>,
    pub kernels: Grid,
    pub bias: Grid,
}

fn check_shapes(input: &Grid, kernels: &Grid, bias: &Grid) -> Result<()> {
    if input.shape().len() != 4 || kernels.shape().len() != 4 {
        return Err(invalid_arg!(
            "conv2d expects rank-4 input and kernels, got {:?} and {:?}",
            input.shape(),
            kernels.shape()
        ));
    }
    let cin = input.shape()[1];
    let [cout, kcin, _, _] = kernels.dims4();
    if cin != kcin {
        return Err(invalid_arg!(
            "conv2d channel mismatch: input has {cin}, kernels expect {kcin}"
        ));
    }
    if bias.len() != cout {
        return Err(invalid_arg!(
            "conv2d bias has {} entries for {cout} output channels",
            bias.len()
        ));
    }
    Ok(())
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k`: the
/// output positions `o` whose input index `o + k - pad` lands inside `[0, n)`.
#[inline]
fn tap_range(k: usize, pad: usize, n: usize, out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (n + pad).saturating_sub(k).min(out);
    (lo, hi.max(lo))
}

/// `input[b, cin, h, w] ⋆ kernels[cout, cin, kh, kw] + bias[cout]`.
pub fn conv2d(input: &Grid, kernels: &Grid, bias: &Grid, padding: Padding) -> Result<Grid> {
    check_shapes(input, kernels, bias)?;
    let [b, cin, h, w] = input.dims4();
    let [cout, _, kh, kw] = kernels.dims4();
    let (oh, ow) = padding.output_extent(h, w, kh, kw)?;
    let mut out = Grid::zeros(&[b, cout, oh, ow]);
    let x = input.as_slice();
    let k = kernels.as_slice();
    let o = out.as_mut_slice();
    for bi in 0..b {
        for co in 0..cout {
            let plane = &mut o[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
            plane.fill(bias.as_slice()[co]);
            for ci in 0..cin {
                let in_plane = &x[(bi * cin + ci) * h * w..(bi * cin + ci + 1) * h * w];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = tap_range(ky, padding.top, h, oh);
                    for kx in 0..kw {
                        let wv = k[((co * cin + ci) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = tap_range(kx, padding.left, w, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix_lo = ox_lo + kx - padding.left;
                        let span = ox_hi - ox_lo;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - padding.top;
                            axpy(
                                wv,
                                &in_plane[iy * w + ix_lo..iy * w + ix_lo + span],
                                &mut plane[oy * ow + ox_lo..oy * ow + ox_hi],
                            );
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] given the upstream gradient of its output.
/// The input gradient is only formed when `input_grad` is set.
pub fn conv2d_backward(
    input: &Grid,
    kernels: &Grid,
    padding: Padding,
    grad_out: &Grid,
    input_grad: bool,
) -> Result<ConvGrads> {
    let [b, cin, h, w] = input.dims4();
    let [cout, _, kh, kw] = kernels.dims4();
    let (oh, ow) = padding.output_extent(h, w, kh, kw)?;
    if grad_out.shape() != [b, cout, oh, ow] {
        return Err(invalid_arg!(
            "conv2d upstream gradient shape {:?}, expected {:?}",
            grad_out.shape(),
            [b, cout, oh, ow]
        ));
    }
    let x = input.as_slice();
    let k = kernels.as_slice();
    let g = grad_out.as_slice();
    let mut dk = Grid::zeros(kernels.shape());
    let mut dbias = Grid::zeros(&[cout]);
    let mut dx = input_grad.then(|| Grid::zeros(input.shape()));
    for bi in 0..b {
        for co in 0..cout {
            let gplane = &g[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
            dbias.as_mut_slice()[co] += gplane.iter().sum::<f64>();
            for ci in 0..cin {
                let base = (bi * cin + ci) * h * w;
                let in_plane = &x[base..base + h * w];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = tap_range(ky, padding.top, h, oh);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = tap_range(kx, padding.left, w, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix_lo = ox_lo + kx - padding.left;
                        let span = ox_hi - ox_lo;
                        let kidx = ((co * cin + ci) * kh + ky) * kw + kx;
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - padding.top;
                            acc += dot(
                                &gplane[oy * ow + ox_lo..oy * ow + ox_hi],
                                &in_plane[iy * w + ix_lo..iy * w + ix_lo + span],
                            );
                        }
                        dk.as_mut_slice()[kidx] += acc;
                        if let Some(dx) = dx.as_mut() {
                            let wv = k[kidx];
                            if wv == 0.0 {
                                continue;
                            }
                            let dplane = &mut dx.as_mut_slice()[base..base + h * w];
                            for oy in oy_lo..oy_hi {
                                let iy = oy + ky - padding.top;
                                axpy(
                                    wv,
                                    &gplane[oy * ow + ox_lo..oy * ow + ox_hi],
                                    &mut dplane[iy * w + ix_lo..iy * w + ix_lo + span],
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        kernels: dk,
        bias: dbias,
    })
}
