use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use super::Grid;
use crate::error::{invalid_arg, Result};

/// Fully connected layer `y = x · W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Grid,
    pub bias: Grid,
}

pub struct DenseGrads {
    pub input: Grid,
    pub weight: Grid,
    pub bias: Grid,
}

impl Dense {
    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Grid) -> Result<Grid> {
        let (b, n_in) = (x.shape()[0], x.len() / x.shape()[0].max(1));
        if n_in != self.inputs() {
            return Err(invalid_arg!(
                "dense layer expects {} inputs, got {n_in}",
                self.inputs()
            ));
        }
        let n_out = self.outputs();
        let mut out = Grid::zeros(&[b, n_out]);
        for r in 0..b {
            out.row_mut(r).copy_from_slice(self.bias.as_slice());
        }
        gemm_nn(x.as_slice(), self.weight.as_slice(), out.as_mut_slice(), b, n_in, n_out);
        Ok(out)
    }

    pub fn backward(&self, x: &Grid, grad_out: &Grid) -> Result<DenseGrads> {
        let b = x.shape()[0];
        let (n_in, n_out) = (self.inputs(), self.outputs());
        if grad_out.shape() != [b, n_out] {
            return Err(invalid_arg!("dense upstream gradient shape {:?}", grad_out.shape()));
        }
        let mut dw = Grid::zeros(&[n_in, n_out]);
        gemm_tn(x.as_slice(), grad_out.as_slice(), dw.as_mut_slice(), n_in, b, n_out);
        let mut db = Grid::zeros(&[n_out]);
        for r in 0..b {
            for (d, g) in db.as_mut_slice().iter_mut().zip(grad_out.row(r)) {
                *d += g;
            }
        }
        let mut dx = Grid::zeros(&[b, n_in]);
        gemm_nt(grad_out.as_slice(), self.weight.as_slice(), dx.as_mut_slice(), b, n_out, n_in);
        Ok(DenseGrads {
            input: dx.reshape(x.shape())?,
            weight: dw,
            bias: db,
        })
    }
}
