//! Post-norm transformer block: multi-head self-attention, residual, layer
//! norm, GELU feed-forward, residual, layer norm.

use rand::Rng;

use super::affine::{affine, affine_backward, Affine};
use super::params::{join, normal, Parameters, PROJECTION_INIT_STD};
use super::softmax::softmax_in_place;
use super::Tensor;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub shift: Tensor,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Tensor::filled(&[dim], 1.0),
            shift: Tensor::zeros(&[dim]),
        }
    }
}

impl Parameters for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "shift"), &self.shift);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "shift"), &mut self.shift);
    }
}

struct LayerNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &[f64], dim: usize, p: &LayerNorm) -> (Vec<f64>, LayerNormCache) {
    let rows = x.len() / dim;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for k in 0..dim {
            let xh = (row[k] - mean) * is;
            xhat[r * dim + k] = xh;
            out[r * dim + k] = p.gain.data()[k] * xh + p.shift.data()[k];
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &[f64],
    dim: usize,
    cache: &LayerNormCache,
    p: &LayerNorm,
    grad: &mut LayerNorm,
) -> Vec<f64> {
    let rows = dy.len() / dim;
    let mut dx = vec![0.0; dy.len()];
    let n = dim as f64;
    for r in 0..rows {
        let dyr = &dy[r * dim..(r + 1) * dim];
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for k in 0..dim {
            grad.gain.data_mut()[k] += dyr[k] * xh[k];
            grad.shift.data_mut()[k] += dyr[k];
            let d = dyr[k] * p.gain.data()[k];
            mean_d += d;
            mean_dx += d * xh[k];
        }
        mean_d /= n;
        mean_dx /= n;
        for k in 0..dim {
            let d = dyr[k] * p.gain.data()[k];
            dx[r * dim + k] = cache.inv_std[r] * (d - mean_d - xh[k] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Affine,
    /// Key projection, `dim × dim`. It has no bias: a key bias adds the same
    /// amount to every score in a row and cancels in the softmax.
    pub wk: Tensor,
    pub wv: Affine,
    pub wo: Affine,
    pub ln1: LayerNorm,
    pub ff1: Affine,
    pub ff2: Affine,
    pub ln2: LayerNorm,
}

impl AttentionParams {
    pub fn new(rng: &mut impl Rng, dim: usize, intermediate: usize) -> Self {
        AttentionParams {
            wq: Affine::new(rng, dim, dim),
            wk: normal(rng, &[dim, dim], PROJECTION_INIT_STD),
            wv: Affine::new(rng, dim, dim),
            wo: Affine::new(rng, dim, dim),
            ln1: LayerNorm::new(dim),
            ff1: Affine::new(rng, dim, intermediate),
            ff2: Affine::new(rng, intermediate, dim),
            ln2: LayerNorm::new(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.input_dim()
    }
}

impl Parameters for AttentionParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.wq.visit(&join(prefix, "wq"), f);
        f(join(prefix, "wk"), &self.wk);
        self.wv.visit(&join(prefix, "wv"), f);
        self.wo.visit(&join(prefix, "wo"), f);
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.ff1.visit(&join(prefix, "ff1"), f);
        self.ff2.visit(&join(prefix, "ff2"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.wq.visit_mut(&join(prefix, "wq"), f);
        f(join(prefix, "wk"), &mut self.wk);
        self.wv.visit_mut(&join(prefix, "wv"), f);
        self.wo.visit_mut(&join(prefix, "wo"), f);
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.ff1.visit_mut(&join(prefix, "ff1"), f);
        self.ff2.visit_mut(&join(prefix, "ff2"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
    }
}

pub struct AttentionCache {
    batch: usize,
    len: usize,
    heads: usize,
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// `batch × heads × len × len`; masked entries are exactly 0.
    att: Vec<f64>,
    ctx: Tensor,
    ln1: LayerNormCache,
    y1: Tensor,
    f1: Tensor,
    act: Tensor,
    ln2: LayerNormCache,
}

impl AttentionCache {
    /// Attention weights of head `h` for batch row `b`, as a `len × len` slice.
    pub fn weights(&self, b: usize, h: usize) -> &[f64] {
        let l2 = self.len * self.len;
        let off = (b * self.heads + h) * l2;
        &self.att[off..off + l2]
    }
}

/// Applies the block to `x` (`batch × len × dim`). With `causal`, position `i`
/// attends only to positions `≤ i`.
pub fn attention_block(
    x: &Tensor,
    p: &AttentionParams,
    heads: usize,
    causal: bool,
) -> Result<(Tensor, AttentionCache)> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "attention input must be batch×len×dim, got {shape:?}"
        )));
    }
    let (batch, len, dim) = (shape[0], shape[1], shape[2]);
    if heads == 0 || dim % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "model dimension {dim} is not divisible by {heads} heads"
        )));
    }
    if p.dim() != dim {
        return Err(Error::ShapeMismatch {
            left: shape.to_vec(),
            right: p.wq.w.shape().to_vec(),
            context: "attention input vs projection",
        });
    }
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let q = p.wq.forward(x)?;
    let k = affine(x, &p.wk, &Tensor::zeros(&[dim]))?;
    let v = p.wv.forward(x)?;
    let mut att = vec![0.0; batch * heads * len * len];
    let mut ctx = vec![0.0; batch * len * dim];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut scores = vec![0.0; len];
    for b in 0..batch {
        for h in 0..heads {
            let base = (b * heads + h) * len * len;
            for i in 0..len {
                let visible = if causal { i + 1 } else { len };
                let qi = &qd[(b * len + i) * dim + h * hd..][..hd];
                for (j, s) in scores[..visible].iter_mut().enumerate() {
                    let kj = &kd[(b * len + j) * dim + h * hd..][..hd];
                    *s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                }
                softmax_in_place(&mut scores[..visible]);
                att[base + i * len..base + i * len + visible].copy_from_slice(&scores[..visible]);
                let out = &mut ctx[(b * len + i) * dim + h * hd..][..hd];
                for (j, &w) in scores[..visible].iter().enumerate() {
                    let vj = &vd[(b * len + j) * dim + h * hd..][..hd];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += w * vv;
                    }
                }
            }
        }
    }
    let ctx = Tensor::from_vec(shape, ctx)?;
    let a = p.wo.forward(&ctx)?;
    let mut r1 = a.into_data();
    for (r, xv) in r1.iter_mut().zip(x.data()) {
        *r += xv;
    }
    let (y1, ln1) = layer_norm(&r1, dim, &p.ln1);
    let y1 = Tensor::from_vec(shape, y1)?;
    let f1 = p.ff1.forward(&y1)?;
    let act = Tensor::from_vec(f1.shape(), f1.data().iter().map(|&z| gelu(z)).collect())?;
    let f2 = p.ff2.forward(&act)?;
    let mut r2 = f2.into_data();
    for (r, yv) in r2.iter_mut().zip(y1.data()) {
        *r += yv;
    }
    let (out, ln2) = layer_norm(&r2, dim, &p.ln2);
    Ok((
        Tensor::from_vec(shape, out)?,
        AttentionCache {
            batch,
            len,
            heads,
            x: x.clone(),
            q,
            k,
            v,
            att,
            ctx,
            ln1,
            y1,
            f1,
            act,
            ln2,
        },
    ))
}

/// Accumulates parameter gradients into `grad`; returns `dL/dx`.
pub fn attention_block_backward(
    cache: &AttentionCache,
    dout: &Tensor,
    p: &AttentionParams,
    grad: &mut AttentionParams,
) -> Result<Tensor> {
    let (batch, len, heads) = (cache.batch, cache.len, cache.heads);
    let dim = p.dim();
    let shape = cache.x.shape();
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let dr2 = layer_norm_backward(dout.data(), dim, &cache.ln2, &p.ln2, &mut grad.ln2);
    let dr2 = Tensor::from_vec(shape, dr2)?;
    let dact = p.ff2.backward(&cache.act, &dr2, &mut grad.ff2)?;
    let df1: Vec<f64> = dact
        .data()
        .iter()
        .zip(cache.f1.data())
        .map(|(d, &z)| d * gelu_grad(z))
        .collect();
    let df1 = Tensor::from_vec(cache.f1.shape(), df1)?;
    let mut dy1 = p.ff1.backward(&cache.y1, &df1, &mut grad.ff1)?;
    dy1.add_assign(&dr2);

    let dr1 = layer_norm_backward(dy1.data(), dim, &cache.ln1, &p.ln1, &mut grad.ln1);
    let dr1 = Tensor::from_vec(shape, dr1)?;
    let dctx = p.wo.backward(&cache.ctx, &dr1, &mut grad.wo)?;

    let mut dq = vec![0.0; batch * len * dim];
    let mut dk = vec![0.0; batch * len * dim];
    let mut dv = vec![0.0; batch * len * dim];
    let (qd, kd, vd, dcd) = (cache.q.data(), cache.k.data(), cache.v.data(), dctx.data());
    let mut datt = vec![0.0; len];
    for b in 0..batch {
        for h in 0..heads {
            let w = cache.weights(b, h);
            for i in 0..len {
                let wi = &w[i * len..(i + 1) * len];
                let dci = &dcd[(b * len + i) * dim + h * hd..][..hd];
                let mut dot = 0.0;
                for j in 0..len {
                    if wi[j] == 0.0 {
                        datt[j] = 0.0;
                        continue;
                    }
                    let vj = &vd[(b * len + j) * dim + h * hd..][..hd];
                    datt[j] = dci.iter().zip(vj).map(|(a, c)| a * c).sum();
                    dot += wi[j] * datt[j];
                    let dvj = &mut dv[(b * len + j) * dim + h * hd..][..hd];
                    for (o, g) in dvj.iter_mut().zip(dci) {
                        *o += wi[j] * g;
                    }
                }
                let qi_off = (b * len + i) * dim + h * hd;
                for j in 0..len {
                    if wi[j] == 0.0 {
                        continue;
                    }
                    let ds = wi[j] * (datt[j] - dot) * scale;
                    let kj_off = (b * len + j) * dim + h * hd;
                    for t in 0..hd {
                        dq[qi_off + t] += ds * kd[kj_off + t];
                        dk[kj_off + t] += ds * qd[qi_off + t];
                    }
                }
            }
        }
    }
    let dq = Tensor::from_vec(shape, dq)?;
    let dk = Tensor::from_vec(shape, dk)?;
    let dv = Tensor::from_vec(shape, dv)?;
    let mut dx = dr1;
    dx.add_assign(&p.wq.backward(&cache.x, &dq, &mut grad.wq)?);
    let (dxk, dwk, _) = affine_backward(&cache.x, &p.wk, &dk)?;
    grad.wk.add_assign(&dwk);
    dx.add_assign(&dxk);
    dx.add_assign(&p.wv.backward(&cache.x, &dv, &mut grad.wv)?);
    Ok(dx)
}
