//! LSTM cell with gates ordered `[input, forget, candidate, output]`.

use rand::Rng;

use super::params::{join, normal, Parameters, PROJECTION_INIT_STD};
use super::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `input × 4·hidden`
    pub wx: Tensor,
    /// `hidden × 4·hidden`
    pub wh: Tensor,
    /// `4·hidden`
    pub b: Tensor,
}

impl LstmParams {
    pub fn new(rng: &mut impl Rng, input: usize, hidden: usize) -> Self {
        LstmParams {
            wx: normal(rng, &[input, 4 * hidden], PROJECTION_INIT_STD),
            wh: normal(rng, &[hidden, 4 * hidden], PROJECTION_INIT_STD),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            wx: Tensor::zeros(&[input, 4 * hidden]),
            wh: Tensor::zeros(&[hidden, 4 * hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.wx.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.wh.shape()[0]
    }
}

impl Parameters for LstmParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "wx"), &self.wx);
        f(join(prefix, "wh"), &self.wh);
        f(join(prefix, "b"), &self.b);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "wx"), &mut self.wx);
        f(join(prefix, "wh"), &mut self.wh);
        f(join(prefix, "b"), &mut self.b);
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Values kept from the forward step for the backward pass.
#[derive(Clone, Debug)]
pub struct LstmStepCache {
    x: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    /// Activated gates, `batch × 4·hidden`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

pub struct LstmStep {
    pub h: Tensor,
    pub c: Tensor,
    pub cache: LstmStepCache,
}

pub fn lstm_step(x: &Tensor, h_prev: &Tensor, c_prev: &Tensor, p: &LstmParams) -> Result<LstmStep> {
    let (batch, input) = (x.rows(), x.cols());
    let hidden = p.hidden_dim();
    if input != p.input_dim() {
        return Err(Error::ShapeMismatch {
            left: x.shape().to_vec(),
            right: p.wx.shape().to_vec(),
            context: "lstm input vs wx",
        });
    }
    for state in [h_prev, c_prev] {
        if state.rows() != batch || state.cols() != hidden {
            return Err(Error::ShapeMismatch {
                left: state.shape().to_vec(),
                right: vec![batch, hidden],
                context: "lstm state",
            });
        }
    }
    let g4 = 4 * hidden;
    let mut z = vec![0.0; batch * g4];
    for row in z.chunks_mut(g4) {
        row.copy_from_slice(p.b.data());
    }
    gemm(batch, input, g4, x.data(), false, p.wx.data(), false, &mut z, true);
    gemm(batch, hidden, g4, h_prev.data(), false, p.wh.data(), false, &mut z, true);

    let mut h = vec![0.0; batch * hidden];
    let mut c = vec![0.0; batch * hidden];
    let mut tanh_c = vec![0.0; batch * hidden];
    for r in 0..batch {
        let zr = &mut z[r * g4..(r + 1) * g4];
        for k in 0..hidden {
            let i = sigmoid(zr[k]);
            let f = sigmoid(zr[hidden + k]);
            let g = zr[2 * hidden + k].tanh();
            let o = sigmoid(zr[3 * hidden + k]);
            zr[k] = i;
            zr[hidden + k] = f;
            zr[2 * hidden + k] = g;
            zr[3 * hidden + k] = o;
            let idx = r * hidden + k;
            c[idx] = f * c_prev.data()[idx] + i * g;
            tanh_c[idx] = c[idx].tanh();
            h[idx] = o * tanh_c[idx];
        }
    }
    Ok(LstmStep {
        h: Tensor::from_vec(&[batch, hidden], h)?,
        c: Tensor::from_vec(&[batch, hidden], c)?,
        cache: LstmStepCache {
            x: x.clone(),
            h_prev: h_prev.clone(),
            c_prev: c_prev.clone(),
            gates: z,
            tanh_c,
        },
    })
}

/// Given `dL/dh_t` and `dL/dc_t`, accumulates parameter gradients into `grad`
/// and returns `(dx_t, dh_prev, dc_prev)`.
pub fn lstm_step_backward(
    cache: &LstmStepCache,
    dh: &Tensor,
    dc: &Tensor,
    p: &LstmParams,
    grad: &mut LstmParams,
) -> (Tensor, Tensor, Tensor) {
    let batch = cache.x.rows();
    let input = cache.x.cols();
    let hidden = p.hidden_dim();
    let g4 = 4 * hidden;
    let mut dz = vec![0.0; batch * g4];
    let mut dc_prev = vec![0.0; batch * hidden];
    for r in 0..batch {
        let gr = &cache.gates[r * g4..(r + 1) * g4];
        let dzr = &mut dz[r * g4..(r + 1) * g4];
        for k in 0..hidden {
            let idx = r * hidden + k;
            let (i, f, g, o) = (gr[k], gr[hidden + k], gr[2 * hidden + k], gr[3 * hidden + k]);
            let tc = cache.tanh_c[idx];
            let dh_v = dh.data()[idx];
            let dct = dc.data()[idx] + dh_v * o * (1.0 - tc * tc);
            dzr[k] = dct * g * i * (1.0 - i);
            dzr[hidden + k] = dct * cache.c_prev.data()[idx] * f * (1.0 - f);
            dzr[2 * hidden + k] = dct * i * (1.0 - g * g);
            dzr[3 * hidden + k] = dh_v * tc * o * (1.0 - o);
            dc_prev[idx] = dct * f;
        }
    }
    gemm(input, batch, g4, cache.x.data(), true, &dz, false, grad.wx.data_mut(), true);
    gemm(hidden, batch, g4, cache.h_prev.data(), true, &dz, false, grad.wh.data_mut(), true);
    let gb = grad.b.data_mut();
    for row in dz.chunks(g4) {
        for (acc, v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let mut dx = vec![0.0; batch * input];
    gemm(batch, g4, input, &dz, false, p.wx.data(), true, &mut dx, false);
    let mut dh_prev = vec![0.0; batch * hidden];
    gemm(batch, g4, hidden, &dz, false, p.wh.data(), true, &mut dh_prev, false);
    (
        Tensor::from_vec(&[batch, input], dx).expect("sized"),
        Tensor::from_vec(&[batch, hidden], dh_prev).expect("sized"),
        Tensor::from_vec(&[batch, hidden], dc_prev).expect("sized"),
    )
}

/// Output of running one LSTM layer over a sequence.
pub struct LstmSequence {
    /// Hidden state after consuming each time step, indexed by time.
    pub outputs: Vec<Tensor>,
    caches: Vec<LstmStepCache>,
    reverse: bool,
}

/// Runs `p` over `xs` (one `batch × input` tensor per time step) from zero
/// state, left to right or, when `reverse`, right to left. `outputs[t]` is
/// always the state after consuming `xs[t]`.
pub fn lstm_sequence(xs: &[Tensor], p: &LstmParams, reverse: bool) -> Result<LstmSequence> {
    let len = xs.len();
    let batch = xs.first().map_or(0, |x| x.rows());
    let hidden = p.hidden_dim();
    let mut h = Tensor::zeros(&[batch, hidden]);
    let mut c = Tensor::zeros(&[batch, hidden]);
    let mut outputs = vec![Tensor::zeros(&[0]); len];
    let mut caches = Vec::with_capacity(len);
    let order: Vec<usize> = if reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    };
    for &t in &order {
        let step = lstm_step(&xs[t], &h, &c, p)?;
        h = step.h;
        c = step.c;
        outputs[t] = h.clone();
        caches.push(step.cache);
    }
    Ok(LstmSequence {
        outputs,
        caches,
        reverse,
    })
}

/// Backpropagates `douts[t] = dL/d outputs[t]` through time; returns `dL/dxs`.
pub fn lstm_sequence_backward(
    seq: &LstmSequence,
    douts: &[Tensor],
    p: &LstmParams,
    grad: &mut LstmParams,
) -> Vec<Tensor> {
    let len = seq.outputs.len();
    let batch = seq.outputs.first().map_or(0, |o| o.rows());
    let hidden = p.hidden_dim();
    let mut dh_next = Tensor::zeros(&[batch, hidden]);
    let mut dc_next = Tensor::zeros(&[batch, hidden]);
    let mut dxs = vec![Tensor::zeros(&[0]); len];
    let order: Vec<usize> = if seq.reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    };
    for (k, &t) in order.iter().enumerate().rev() {
        let mut dh = douts[t].clone();
        dh.add_assign(&dh_next);
        let (dx, dh_prev, dc_prev) = lstm_step_backward(&seq.caches[k], &dh, &dc_next, p, grad);
        dxs[t] = dx;
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    dxs
}
