use super::Grid;

/// Exponential linear unit with α = 1.
pub fn elu(x: &Grid) -> Grid {
    x.map(|v| if v > 0.0 { v } else { v.exp_m1() })
}

/// Gradient of [`elu`] given its input and the upstream gradient.
pub fn elu_backward(input: &Grid, grad_out: &Grid) -> Grid {
    let mut out = grad_out.clone();
    for (g, &x) in out.as_mut_slice().iter_mut().zip(input.as_slice()) {
        if x <= 0.0 {
            *g *= x.exp();
        }
    }
    out
}
