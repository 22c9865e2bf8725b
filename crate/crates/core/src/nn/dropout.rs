use rand::Rng;

use super::{Grid, Mode};
use crate::error::{invalid_arg, Result};

/// Inverted dropout. In train mode each element is zeroed with probability
/// `p_drop` and survivors are scaled by `1 / (1 - p_drop)`; the returned
/// mask holds the per-element multiplier for the backward pass.
pub fn dropout<R: Rng + ?Sized>(input: &Grid, p_drop: f64, mode: Mode, rng: &mut R) -> Result<(Grid, Option<Grid>)> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(invalid_arg!("dropout probability must be in [0, 1), got {p_drop}"));
    }
    if mode == Mode::Eval || p_drop == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep_scale = 1.0 / (1.0 - p_drop);
    let mut mask = Grid::zeros(input.shape());
    for m in mask.as_mut_slice() {
        if rng.random::<f64>() >= p_drop {
            *m = keep_scale;
        }
    }
    let mut out = input.clone();
    for (o, m) in out.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        *o *= m;
    }
    Ok((out, Some(mask)))
}

pub fn dropout_backward(mask: Option<&Grid>, grad_out: &Grid) -> Grid {
    match mask {
        None => grad_out.clone(),
        Some(mask) => {
            let mut g = grad_out.clone();
            for (v, m) in g.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *v *= m;
            }
            g
        }
    }
}
