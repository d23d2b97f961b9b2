use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay:
/// `θ ← θ − lr·(m̂/(√v̂+ε) + wd·θ)`.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            config,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: Vec<&Tensor>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "adam state tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(&grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                    context: "adam parameter vs gradient",
                });
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gd[i];
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * pd[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![x]).unwrap()
    }

    #[test]
    fn zero_gradient_applies_only_weight_decay() {
        let mut p = scalar(2.0);
        let g = scalar(0.0);
        let mut s = AdamState::new(AdamConfig::default(), [&p]);
        s.step(vec![&mut p], vec![&g]).unwrap();
        assert_eq!(p.data()[0], 2.0 - 1e-3 * (0.01 * 2.0));
    }

    #[test]
    fn first_step_hand_evaluation() {
        let mut p = scalar(0.0);
        let g = scalar(1.0);
        let mut s = AdamState::new(AdamConfig::default(), [&p]);
        s.step(vec![&mut p], vec![&g]).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expected = -1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((p.data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn state_advances_between_calls() {
        let g = scalar(1.0);
        let mut p = scalar(0.5);
        let mut s = AdamState::new(AdamConfig::default(), [&p]);
        s.step(vec![&mut p], vec![&g]).unwrap();
        let d1 = 0.5 - p.data()[0];
        let before = p.data()[0];
        s.step(vec![&mut p], vec![&g]).unwrap();
        let d2 = before - p.data()[0];
        assert_eq!(s.t, 2);
        assert_ne!(d1, d2);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = Tensor::from_vec(&[3], vec![1.0, -2.0, 3.5]).unwrap();
        let orig = p.clone();
        let g = Tensor::from_vec(&[3], vec![0.3, 9.0, -1.0]).unwrap();
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        let mut s = AdamState::new(cfg, [&p]);
        for _ in 0..3 {
            s.step(vec![&mut p], vec![&g]).unwrap();
        }
        assert_eq!(p, orig);
    }
}
