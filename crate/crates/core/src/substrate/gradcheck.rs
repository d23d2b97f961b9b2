use super::params::Parameters;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter tensor and flat index where the maximum occurred.
    pub worst: (String, usize),
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// Compares the analytic gradient returned by `loss_and_grad` against central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε`, scalar by scalar. The error per
/// scalar is `|a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<P, F>(loss_and_grad: F, params: &P, eps: f64) -> Result<GradCheck>
where
    P: Parameters,
    F: Fn(&P) -> Result<(f64, P)>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let (loss, analytic) = loss_and_grad(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteGradCheck);
    }
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.data().to_vec()).collect();
    let mut probe = params.clone();
    let mut result = GradCheck {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    for (ti, name) in names.iter().enumerate() {
        for i in 0..analytic[ti].len() {
            let orig = probe.tensors()[ti].data()[i];
            probe.tensors_mut()[ti].data_mut()[i] = orig + eps;
            let (plus, _) = loss_and_grad(&probe)?;
            probe.tensors_mut()[ti].data_mut()[i] = orig - eps;
            let (minus, _) = loss_and_grad(&probe)?;
            probe.tensors_mut()[ti].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteGradCheck);
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti][i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if err > result.max_rel_error {
                result.max_rel_error = err;
                result.worst = (name.clone(), i);
                result.worst_values = (a, numeric);
            }
            result.checked += 1;
        }
    }
    Ok(result)
}
