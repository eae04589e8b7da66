//! Homoscedastic (task-dependent) uncertainty weighting of the main and
//! auxiliary segmentation losses.
//!
//! Each objective carries a learnable noise scale parameterised as
//! `s = log σ²`. The scaled-softmax likelihood `p = softmax(f / σ²)` leads to
//! the per-objective loss `exp(−s)·L + ½·s`.

use ndarray::{Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("sigma must be positive and finite, got {sigma}")))
    }
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of `logits / σ²` over a class vector.
pub fn scaled_softmax(logits: &[f64], sigma: f64) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    let t = sigma * sigma;
    let lse = log_sum_exp(logits.iter().map(|&f| f / t));
    Ok(logits.iter().map(|&f| (f / t - lse).exp()).collect())
}

/// Per-pixel scaled softmax over the class axis of a `C × H × W` array.
pub fn scaled_softmax_map(logits: ArrayView3<f64>, sigma: f64) -> Result<Array3<f64>> {
    check_sigma(sigma)?;
    let mut out = logits.to_owned();
    for mut lane in out.lanes_mut(Axis(0)) {
        let v: Vec<f64> = lane.iter().copied().collect();
        let p = scaled_softmax(&v, sigma)?;
        lane.iter_mut().zip(p).for_each(|(o, p)| *o = p);
    }
    Ok(out)
}

/// `exp(−s)·L + ½·s`, the negative log-likelihood of one objective with
/// learned noise `σ² = exp(s)`.
pub fn single_objective_loss(base_loss: f64, s: f64) -> f64 {
    (-s).exp() * base_loss + 0.5 * s
}

/// `d/ds` of [`single_objective_loss`].
pub fn single_objective_grad(base_loss: f64, s: f64) -> f64 {
    -(-s).exp() * base_loss + 0.5
}

/// Minimiser of [`single_objective_loss`] for a positive base loss.
pub fn stationary_log_variance(base_loss: f64) -> f64 {
    (2.0 * base_loss).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyParams {
    /// `log σ_main²`
    pub s_main: f64,
    /// `log σ_aux²`
    pub s_aux: f64,
}

impl Default for UncertaintyParams {
    fn default() -> Self {
        Self { s_main: 0.0, s_aux: 0.0 }
    }
}

impl UncertaintyParams {
    pub fn sigma_main(&self) -> f64 {
        (0.5 * self.s_main).exp()
    }

    pub fn sigma_aux(&self) -> f64 {
        (0.5 * self.s_aux).exp()
    }

    /// Factors multiplying the main and auxiliary losses.
    pub fn loss_weights(&self) -> (f64, f64) {
        ((-self.s_main).exp(), (-self.s_aux).exp())
    }

    /// Gradient of the combined loss with respect to `(s_main, s_aux)`.
    pub fn grad(&self, l_main: f64, l_aux: f64) -> (f64, f64) {
        (
            single_objective_grad(l_main, self.s_main),
            single_objective_grad(l_aux, self.s_aux),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.s_main.is_finite() && self.s_aux.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_main: f64,
    pub l_aux: f64,
    pub combined: f64,
    pub sigma_main: f64,
    pub sigma_aux: f64,
}

pub fn combined_loss(l_main: f64, l_aux: f64, params: &UncertaintyParams) -> LossBreakdown {
    LossBreakdown {
        l_main,
        l_aux,
        combined: single_objective_loss(l_main, params.s_main) + single_objective_loss(l_aux, params.s_aux),
        sigma_main: params.sigma_main(),
        sigma_aux: params.sigma_aux(),
    }
}

/// Fixed-weight baseline `L_main + λ·L_aux`.
pub fn static_combined_loss(l_main: f64, l_aux: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    Ok(l_main + lambda * l_aux)
}

/// Log-space gap between `(Σ exp f)^(1/σ²)` and `(1/σ)·Σ exp(f/σ²)`, the
/// approximation that turns the scaled-softmax likelihood into the loss above.
pub fn approximation_gap(logits: &[f64], sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    if logits.is_empty() {
        return Err(Error::InvalidArgument("approximation gap needs at least one logit".into()));
    }
    let t = sigma * sigma;
    let lhs = log_sum_exp(logits.iter().copied()) / t;
    let rhs = -sigma.ln() + log_sum_exp(logits.iter().map(|&f| f / t));
    Ok((lhs - rhs).abs())
}
