use rand::Rng;

use super::params::{join, normal, Parameters, PROJECTION_INIT_STD};
use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// `y = x·W + b` with `W: in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub w: Tensor,
    pub b: Tensor,
}

impl Affine {
    pub fn new(rng: &mut impl Rng, input: usize, output: usize) -> Self {
        Affine {
            w: normal(rng, &[input, output], PROJECTION_INIT_STD),
            b: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Affine {
            w: Tensor::zeros(&[input, output]),
            b: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        affine(x, &self.w, &self.b)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Tensor, dout: &Tensor, grad: &mut Affine) -> Result<Tensor> {
        let (dx, dw, db) = affine_backward(x, &self.w, dout)?;
        grad.w.add_assign(&dw);
        grad.b.add_assign(&db);
        Ok(dx)
    }
}

impl Parameters for Affine {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "b"), &self.b);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}

/// `out[r,c] = Σ_k x[r,k]·W[k,c] + b[c]` over the rank-2 view of `x`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (rows, input) = (x.rows(), x.cols());
    if w.shape().len() != 2 || w.shape()[0] != input {
        return Err(Error::ShapeMismatch {
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
            context: "affine input vs weight",
        });
    }
    let output = w.shape()[1];
    if b.shape() != [output] {
        return Err(Error::ShapeMismatch {
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
            context: "affine weight vs bias",
        });
    }
    let mut out = vec![0.0; rows * output];
    for row in out.chunks_mut(output) {
        row.copy_from_slice(b.data());
    }
    gemm(rows, input, output, x.data(), false, w.data(), false, &mut out, true);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = output;
    Tensor::from_vec(&shape, out)
}

/// Returns `(dx, dW, db)` for `out = x·W + b` given `dout`.
pub fn affine_backward(x: &Tensor, w: &Tensor, dout: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (rows, input) = (x.rows(), x.cols());
    let output = w.shape()[1];
    if dout.rows() != rows || dout.cols() != output {
        return Err(Error::ShapeMismatch {
            left: x.shape().to_vec(),
            right: dout.shape().to_vec(),
            context: "affine backward input vs upstream gradient",
        });
    }
    let mut dx = vec![0.0; rows * input];
    gemm(rows, output, input, dout.data(), false, w.data(), true, &mut dx, false);
    let mut dw = vec![0.0; input * output];
    gemm(input, rows, output, x.data(), true, dout.data(), false, &mut dw, false);
    let mut db = vec![0.0; output];
    for r in 0..rows {
        for (acc, g) in db.iter_mut().zip(dout.row(r)) {
            *acc += g;
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(w.shape(), dw)?,
        Tensor::from_vec(&[output], db)?,
    ))
}
