use super::Grid;
use crate::error::{invalid_arg, Result};

fn pooled_extent(h: usize, w: usize, pool: (usize, usize), stride: (usize, usize)) -> Result<(usize, usize)> {
    let (ph, pw) = pool;
    let (sh, sw) = stride;
    if ph == 0 || pw == 0 || sh == 0 || sw == 0 {
        return Err(invalid_arg!("pool and stride extents must be positive"));
    }
    if ph > h || pw > w {
        return Err(invalid_arg!("pool {ph}x{pw} larger than input {h}x{w}"));
    }
    Ok(((h - ph) / sh + 1, (w - pw) / sw + 1))
}

/// Window means over the last two axes; windows that would run past the
/// edge are dropped.
pub fn avg_pool2d(input: &Grid, pool: (usize, usize), stride: (usize, usize)) -> Result<Grid> {
    let [b, c, h, w] = input.dims4();
    let (oh, ow) = pooled_extent(h, w, pool, stride)?;
    let norm = 1.0 / (pool.0 * pool.1) as f64;
    let mut shape = input.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    let mut out = Grid::zeros(&shape);
    let x = input.as_slice();
    let o = out.as_mut_slice();
    for plane in 0..b * c {
        let xin = &x[plane * h * w..(plane + 1) * h * w];
        let xout = &mut o[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..pool.0 {
                    let row = &xin[(oy * stride.0 + dy) * w..];
                    for dx in 0..pool.1 {
                        acc += row[ox * stride.1 + dx];
                    }
                }
                xout[oy * ow + ox] = acc * norm;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2d_backward(
    input_shape: &[usize],
    grad_out: &Grid,
    pool: (usize, usize),
    stride: (usize, usize),
) -> Result<Grid> {
    let mut dx = Grid::zeros(input_shape);
    let [b, c, h, w] = dx.dims4();
    let (oh, ow) = pooled_extent(h, w, pool, stride)?;
    if grad_out.len() != b * c * oh * ow {
        return Err(invalid_arg!(
            "pool upstream gradient has {} values, expected {}",
            grad_out.len(),
            b * c * oh * ow
        ));
    }
    let norm = 1.0 / (pool.0 * pool.1) as f64;
    let g = grad_out.as_slice();
    let d = dx.as_mut_slice();
    for plane in 0..b * c {
        let gin = &g[plane * oh * ow..(plane + 1) * oh * ow];
        let dout = &mut d[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = gin[oy * ow + ox] * norm;
                for dy in 0..pool.0 {
                    for dxp in 0..pool.1 {
                        dout[(oy * stride.0 + dy) * w + ox * stride.1 + dxp] += v;
                    }
                }
            }
        }
    }
    Ok(dx)
}
