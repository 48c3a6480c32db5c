//! Loss components for both families and their analytic gradients with
//! respect to the prediction logits.
//!
//! Predictions always enter as logits; the softmax is applied internally so
//! the predicted pmf is strictly positive. Gradients are assembled in two
//! steps: the derivative with respect to the predicted probabilities, then
//! the softmax Jacobian `∂L/∂zⱼ = pⱼ (gⱼ − Σᵢ pᵢgᵢ)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::grid::{moments, softmax, LabelGrid, Moments, NumericPolicy, Pmf};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Reference,
    FullKl,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Reference => "reference",
            Family::FullKl => "full_kl",
        })
    }
}

/// Weight of the L1 expectation term in the reference loss. There is no
/// principled default; 1.0 is the documented example value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLossConfig<T> {
    pub lambda: T,
}

impl<T: Scalar> ReferenceLossConfig<T> {
    pub fn new(lambda: T) -> Result<Self> {
        if !lambda.is_finite() || lambda < T::zero() {
            return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }
}

/// Which loss family to train with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LossConfig<T> {
    Reference { lambda: T },
    FullKl,
}

impl<T: Scalar> LossConfig<T> {
    pub fn family(&self) -> Family {
        match self {
            LossConfig::Reference { .. } => Family::Reference,
            LossConfig::FullKl => Family::FullKl,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LossConfig::Reference { lambda } = *self {
            ReferenceLossConfig::new(lambda)?;
        }
        Ok(())
    }

    pub fn loss(
        &self,
        target: &Pmf<T>,
        logits: &[T],
        g: &LabelGrid<T>,
        policy: &NumericPolicy<T>,
    ) -> Result<LossBreakdown<T>> {
        match *self {
            LossConfig::Reference { lambda } => {
                reference_loss(target, logits, g, &ReferenceLossConfig { lambda }, policy)
            }
            LossConfig::FullKl => full_kl_loss(target, logits, g, policy),
        }
    }

    /// Loss and its logit gradient, sharing one softmax and one moment pass.
    pub fn loss_and_grad(
        &self,
        target: &Pmf<T>,
        logits: &[T],
        g: &LabelGrid<T>,
        policy: &NumericPolicy<T>,
    ) -> Result<(LossBreakdown<T>, Vec<T>)> {
        let head = Head::new(target, logits, g)?;
        Ok(match *self {
            LossConfig::Reference { lambda } => {
                let cfg = ReferenceLossConfig { lambda };
                (head.reference_loss(&cfg, policy)?, head.reference_grad(&cfg, policy))
            }
            LossConfig::FullKl => (head.full_kl_loss(policy)?, head.full_kl_grad(policy)),
        })
    }
}

/// Per-component loss values.
///
/// `total = l_ld + λ·l_exp` for the reference family and
/// `total = l_ld + l_exp + l_smooth` for the full-KL family. `l_exp` is in
/// label units for the reference family and in nats otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub family: Family,
    pub l_ld: T,
    pub l_exp: T,
    pub l_smooth: Option<T>,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    /// Component-wise arithmetic mean, accumulated in iteration order.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a LossBreakdown<T>>) -> Result<Self> {
        let mut iter = items.into_iter();
        let first = *iter.next().ok_or(Error::Empty("loss breakdowns"))?;
        let mut acc = first;
        let mut count = 1usize;
        for b in iter {
            if b.family != first.family {
                return Err(Error::InvalidArgument("cannot average breakdowns of different families".into()));
            }
            acc.l_ld = acc.l_ld + b.l_ld;
            acc.l_exp = acc.l_exp + b.l_exp;
            acc.l_smooth = match (acc.l_smooth, b.l_smooth) {
                (Some(a), Some(s)) => Some(a + s),
                _ => None,
            };
            acc.total = acc.total + b.total;
            count += 1;
        }
        let n = T::of_usize(count);
        Ok(LossBreakdown {
            family: first.family,
            l_ld: acc.l_ld / n,
            l_exp: acc.l_exp / n,
            l_smooth: acc.l_smooth.map(|s| s / n),
            total: acc.total / n,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.l_ld.is_finite()
            && self.l_exp.is_finite()
            && self.l_smooth.is_none_or(|s| s.is_finite())
            && self.total.is_finite()
    }
}

/// `Σ tᵢ ln(tᵢ / max(pᵢ, eps_log))` with `0·ln 0 = 0`. Terms with `pᵢ = tᵢ`
/// are exactly zero, floor or not.
pub fn kl_div<T: Scalar>(target: &Pmf<T>, pred: &Pmf<T>, policy: &NumericPolicy<T>) -> Result<T> {
    ensure_len("prediction", target.len(), pred.len())?;
    Ok(target
        .probs()
        .iter()
        .zip(pred.probs())
        .filter(|(&t, &p)| t > T::zero() && t != p)
        .map(|(&t, &p)| t * (t.ln() - policy.ln_floored(p)))
        .sum())
}

/// `|μ̂ − μ|` in label units.
pub fn l1_expectation<T: Scalar>(target_mu: T, pred_mu: T) -> Result<T> {
    if target_mu.is_nan() || pred_mu.is_nan() {
        return Err(Error::InvalidArgument("NaN expectation".into()));
    }
    Ok((pred_mu - target_mu).abs())
}

/// KL divergence between the normal distributions matching two sets of
/// moments: `ln(σ̂/σ) + (σ² + (μ̂−μ)²)/(2σ̂²) − ½`.
///
/// The predicted variance is floored at `eps_var`, both in the log and in the
/// denominator. The target variance must already be at least `eps_var`.
pub fn gaussian_kl<T: Scalar>(target_m: &Moments<T>, pred_m: &Moments<T>, policy: &NumericPolicy<T>) -> Result<T> {
    check_moments(target_m, pred_m)?;
    if target_m.var < policy.eps_var {
        return Err(Error::InvalidArgument(format!(
            "target variance {} is below the floor {}",
            target_m.var, policy.eps_var
        )));
    }
    Ok(gaussian_kl_unchecked(target_m, pred_m.mu, pred_m.var.max(policy.eps_var)))
}

fn check_moments<T: Scalar>(a: &Moments<T>, b: &Moments<T>) -> Result<()> {
    for (i, v) in [a.mu, a.var, b.mu, b.var].into_iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { what: "moments", index: i });
        }
    }
    Ok(())
}

#[inline]
fn gaussian_kl_unchecked<T: Scalar>(target_m: &Moments<T>, pred_mu: T, pred_var: T) -> T {
    let half = T::of(0.5);
    let d = pred_mu - target_m.mu;
    half * (pred_var / target_m.var).ln() + (target_m.var + d * d) / (T::of(2.0) * pred_var) - half
}

/// Symmetrized KL between the pmf and its one-bin shift, summed over the
/// `n − 1` adjacent pairs: `½ Σ (pᵢ − pᵢ₊₁) ln(pᵢ / pᵢ₊₁)`.
pub fn smoothness<T: Scalar>(pred: &Pmf<T>, policy: &NumericPolicy<T>) -> Result<T> {
    if pred.len() < 2 {
        return Err(Error::InvalidArgument(format!("smoothness needs at least 2 bins, got {}", pred.len())));
    }
    let logs: Vec<T> = pred.probs().iter().map(|&p| policy.ln_floored(p)).collect();
    Ok(smoothness_from_logs(pred.probs(), &logs))
}

fn smoothness_from_logs<T: Scalar>(p: &[T], logs: &[T]) -> T {
    let sum: T = (0..p.len() - 1).map(|i| (p[i] - p[i + 1]) * (logs[i] - logs[i + 1])).sum();
    T::of(0.5) * sum
}

/// `KL(P‖softmax(z)) + λ·|μ̂ − μ|`.
pub fn reference_loss<T: Scalar>(
    target: &Pmf<T>,
    logits: &[T],
    g: &LabelGrid<T>,
    cfg: &ReferenceLossConfig<T>,
    policy: &NumericPolicy<T>,
) -> Result<LossBreakdown<T>> {
    Head::new(target, logits, g)?.reference_loss(cfg, policy)
}

/// Unweighted sum of distribution KL, Gaussian-moment KL and shift-KL
/// smoothness of `softmax(z)`.
pub fn full_kl_loss<T: Scalar>(
    target: &Pmf<T>,
    logits: &[T],
    g: &LabelGrid<T>,
    policy: &NumericPolicy<T>,
) -> Result<LossBreakdown<T>> {
    Head::new(target, logits, g)?.full_kl_loss(policy)
}

/// `∂ full_kl_loss.total / ∂z`.
///
/// Gradients flow through `σ̂²` including its dependence on `μ̂`. While `σ̂²`
/// sits at the `eps_var` floor it is treated as a constant.
pub fn full_kl_grad<T: Scalar>(
    target: &Pmf<T>,
    logits: &[T],
    g: &LabelGrid<T>,
    policy: &NumericPolicy<T>,
) -> Result<Vec<T>> {
    Ok(Head::new(target, logits, g)?.full_kl_grad(policy))
}

/// `∂ reference_loss.total / ∂z`, with subgradient 0 for the L1 term when
/// `μ̂ = μ`.
pub fn reference_grad<T: Scalar>(
    target: &Pmf<T>,
    logits: &[T],
    g: &LabelGrid<T>,
    cfg: &ReferenceLossConfig<T>,
    policy: &NumericPolicy<T>,
) -> Result<Vec<T>> {
    Ok(Head::new(target, logits, g)?.reference_grad(cfg, policy))
}

/// Gradient of the distribution term alone, `softmax(z) − t` away from the
/// `eps_log` floor.
pub fn kl_grad<T: Scalar>(target: &Pmf<T>, logits: &[T], policy: &NumericPolicy<T>) -> Result<Vec<T>> {
    ensure_len("logits", target.len(), logits.len())?;
    let pred = softmax(logits)?;
    Ok(kl_logit_grad(target.probs(), pred.probs(), policy))
}

/// Everything the losses need from one `(target, logits)` pair.
struct Head<'a, T> {
    target: &'a Pmf<T>,
    pred: Pmf<T>,
    ys: &'a [T],
    target_m: Moments<T>,
    pred_m: Moments<T>,
}

impl<'a, T: Scalar> Head<'a, T> {
    fn new(target: &'a Pmf<T>, logits: &[T], g: &'a LabelGrid<T>) -> Result<Self> {
        ensure_len("target", g.len(), target.len())?;
        ensure_len("logits", g.len(), logits.len())?;
        let pred = softmax(logits)?;
        let target_m = moments(target, g)?;
        let pred_m = moments(&pred, g)?;
        Ok(Self { target, pred, ys: g.values(), target_m, pred_m })
    }

    fn reference_loss(&self, cfg: &ReferenceLossConfig<T>, policy: &NumericPolicy<T>) -> Result<LossBreakdown<T>> {
        ReferenceLossConfig::new(cfg.lambda)?;
        let l_ld = kl_div(self.target, &self.pred, policy)?;
        let l_exp = l1_expectation(self.target_m.mu, self.pred_m.mu)?;
        Ok(LossBreakdown { family: Family::Reference, l_ld, l_exp, l_smooth: None, total: l_ld + cfg.lambda * l_exp })
    }

    fn full_kl_loss(&self, policy: &NumericPolicy<T>) -> Result<LossBreakdown<T>> {
        let l_ld = kl_div(self.target, &self.pred, policy)?;
        let l_exp = gaussian_kl(&self.target_m, &self.pred_m, policy)?;
        let l_smooth = smoothness(&self.pred, policy)?;
        Ok(LossBreakdown {
            family: Family::FullKl,
            l_ld,
            l_exp,
            l_smooth: Some(l_smooth),
            total: l_ld + l_exp + l_smooth,
        })
    }

    fn reference_grad(&self, cfg: &ReferenceLossConfig<T>, policy: &NumericPolicy<T>) -> Vec<T> {
        let p = self.pred.probs();
        let mut g = vec![T::zero(); p.len()];
        let diff = self.pred_m.mu - self.target_m.mu;
        let sign = if diff > T::zero() {
            T::one()
        } else if diff < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        let w = cfg.lambda * sign;
        if w != T::zero() {
            // ∂μ̂/∂pᵢ = yᵢ; shifting by μ̂ leaves the projected gradient unchanged
            for (gi, &y) in g.iter_mut().zip(self.ys) {
                *gi = *gi + w * (y - self.pred_m.mu);
            }
        }
        add(kl_logit_grad(self.target.probs(), p, policy), &softmax_backward(p, &g))
    }

    fn full_kl_grad(&self, policy: &NumericPolicy<T>) -> Vec<T> {
        let p = self.pred.probs();
        let n = p.len();
        let mut g = vec![T::zero(); n];

        // Gaussian-moment term through μ̂ and σ̂².
        let two = T::of(2.0);
        let mu_hat = self.pred_m.mu;
        let floored = self.pred_m.var < policy.eps_var;
        let var_hat = self.pred_m.var.max(policy.eps_var);
        let d = mu_hat - self.target_m.mu;
        let d_mu = d / var_hat;
        let d_var = if floored {
            T::zero()
        } else {
            // ½/σ̂² − (σ² + d²)/(2σ̂⁴), written so it vanishes exactly at matching moments
            (var_hat - self.target_m.var - d * d) / (two * var_hat * var_hat)
        };
        for (gi, &y) in g.iter_mut().zip(self.ys) {
            let c = y - mu_hat;
            *gi = *gi + d_mu * c + d_var * c * c;
        }

        // Smoothness term: pair (i, i+1) contributes ½[(ln pᵢ − ln pᵢ₊₁) + (pᵢ − pᵢ₊₁)/pᵢ] to gᵢ
        // and ½[−(ln pᵢ − ln pᵢ₊₁) − (pᵢ − pᵢ₊₁)/pᵢ₊₁] to gᵢ₊₁.
        let half = T::of(0.5);
        let logs: Vec<T> = p.iter().map(|&x| policy.ln_floored(x)).collect();
        let inv: Vec<T> = p.iter().map(|&x| if x > policy.eps_log { T::one() / x } else { T::zero() }).collect();
        for i in 0..n - 1 {
            let dp = p[i] - p[i + 1];
            let dl = logs[i] - logs[i + 1];
            g[i] = g[i] + half * (dl + dp * inv[i]);
            g[i + 1] = g[i + 1] - half * (dl + dp * inv[i + 1]);
        }

        add(kl_logit_grad(self.target.probs(), p, policy), &softmax_backward(p, &g))
    }
}

/// `∂ KL(t‖softmax(z)) / ∂z`. With no floored prediction under a positive
/// target this is `p − t`; otherwise floored terms are constant in `z` and
/// drop out, leaving `pᵢ·Σ_active tⱼ − tᵢ·[i active]`.
fn kl_logit_grad<T: Scalar>(t: &[T], p: &[T], policy: &NumericPolicy<T>) -> Vec<T> {
    let active = |ti: T, pi: T| ti > T::zero() && pi > policy.eps_log;
    if t.iter().zip(p).all(|(&ti, &pi)| ti == T::zero() || active(ti, pi)) {
        return p.iter().zip(t).map(|(&pi, &ti)| pi - ti).collect();
    }
    let mass: T = t.iter().zip(p).filter(|(&ti, &pi)| active(ti, pi)).map(|(&ti, _)| ti).sum();
    t.iter().zip(p).map(|(&ti, &pi)| if active(ti, pi) { pi * mass - ti } else { pi * mass }).collect()
}

fn add<T: Scalar>(mut a: Vec<T>, b: &[T]) -> Vec<T> {
    a.iter_mut().zip(b).for_each(|(x, &y)| *x = *x + y);
    a
}

/// Pulls a gradient with respect to `p = softmax(z)` back to `z`.
fn softmax_backward<T: Scalar>(p: &[T], g: &[T]) -> Vec<T> {
    let dot: T = p.iter().zip(g).map(|(&pi, &gi)| pi * gi).sum();
    p.iter().zip(g).map(|(&pi, &gi)| pi * (gi - dot)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use approx::assert_relative_eq;

    fn pol() -> NumericPolicy<f64> {
        NumericPolicy::default()
    }

    fn pmf(v: &[f64]) -> Pmf<f64> {
        Pmf::new(v.to_vec()).unwrap()
    }

    #[test]
    fn kl_div_examples() {
        assert_eq!(kl_div(&pmf(&[0.5, 0.5]), &pmf(&[0.5, 0.5]), &pol()).unwrap(), 0.0);
        assert_relative_eq!(kl_div(&pmf(&[1.0, 0.0]), &pmf(&[0.5, 0.5]), &pol()).unwrap(), 2f64.ln(), epsilon = 1e-15);
        // 0.5 ln 2 + 0.5 ln(2/3)
        assert_relative_eq!(
            kl_div(&pmf(&[0.5, 0.5]), &pmf(&[0.25, 0.75]), &pol()).unwrap(),
            0.143841036225890,
            epsilon = 1e-12
        );
        assert!(matches!(kl_div(&pmf(&[1.0]), &pmf(&[0.5, 0.5]), &pol()), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn kl_div_floors_vanishing_predictions() {
        let v = kl_div(&pmf(&[0.5, 0.5]), &pmf(&[1.0, 0.0]), &pol()).unwrap();
        assert!(v.is_finite());
        assert_relative_eq!(v, 0.5 * 0.5f64.ln() + 0.5 * (0.5f64.ln() - 1e-12f64.ln()), epsilon = 1e-12);
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_expectation(5.0, 7.0).unwrap(), 2.0);
        assert_eq!(l1_expectation(3.25, 3.25).unwrap(), 0.0);
        assert_eq!(l1_expectation(0.0, -3.5).unwrap(), 3.5);
        assert!(l1_expectation(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn reference_loss_examples() {
        let g = make_grid(0.0, 1.0, 1.0).unwrap();
        let t = pmf(&[0.5, 0.5]);
        let z = [0.0, 3f64.ln()];
        let b = reference_loss(&t, &z, &g, &ReferenceLossConfig { lambda: 1.0 }, &pol()).unwrap();
        assert_relative_eq!(b.l_ld, 0.143841036225890, epsilon = 1e-12);
        assert_relative_eq!(b.l_exp, 0.25, epsilon = 1e-15);
        assert_relative_eq!(b.total, 0.393841036225890, epsilon = 1e-12);
        assert_eq!(b.l_smooth, None);

        let b0 = reference_loss(&t, &z, &g, &ReferenceLossConfig { lambda: 0.0 }, &pol()).unwrap();
        assert_eq!(b0.total, b0.l_ld);

        let b = reference_loss(&t, &[0.7, 0.7], &g, &ReferenceLossConfig { lambda: 2.0 }, &pol()).unwrap();
        assert!(b.l_ld.abs() < 1e-15);
        assert_eq!(b.l_exp, 0.0);

        assert!(ReferenceLossConfig::new(-1.0).is_err());
        assert!(reference_loss(&t, &z, &g, &ReferenceLossConfig { lambda: f64::NAN }, &pol()).is_err());
    }

    #[test]
    fn gaussian_kl_examples() {
        let m = |mu, var| Moments::new(mu, var).unwrap();
        assert_eq!(gaussian_kl(&m(5.0, 4.0), &m(5.0, 4.0), &pol()).unwrap(), 0.0);
        assert_relative_eq!(gaussian_kl(&m(0.0, 1.0), &m(1.0, 1.0), &pol()).unwrap(), 0.5, epsilon = 1e-15);
        // ln 2 + 1/8 − 1/2
        assert_relative_eq!(
            gaussian_kl(&m(0.0, 1.0), &m(0.0, 4.0), &pol()).unwrap(),
            0.318147180559945,
            epsilon = 1e-12
        );
    }

    #[test]
    fn gaussian_kl_floors_predicted_variance() {
        let t = Moments::new(1.0, 1.0).unwrap();
        let collapsed = Moments { mu: 1.0, var: 0.0 };
        let v = gaussian_kl(&t, &collapsed, &pol()).unwrap();
        let expect = 0.5 * (1e-8f64).ln() + 1.0 / (2.0 * 1e-8) - 0.5;
        assert_relative_eq!(v, expect, max_relative = 1e-12);
        let nan = Moments { mu: f64::NAN, var: 1.0 };
        assert!(matches!(gaussian_kl(&t, &nan, &pol()), Err(Error::NonFinite { .. })));
        assert!(gaussian_kl(&collapsed, &t, &pol()).is_err());
    }

    #[test]
    fn smoothness_examples() {
        assert_eq!(smoothness(&Pmf::uniform(7).unwrap(), &pol()).unwrap(), 0.0);
        // 0.5 · 0.6 · ln 4
        assert_relative_eq!(smoothness(&pmf(&[0.8, 0.2]), &pol()).unwrap(), 0.415888308335967, epsilon = 1e-12);
        assert_relative_eq!(smoothness(&pmf(&[0.2, 0.8]), &pol()).unwrap(), 0.415888308335967, epsilon = 1e-12);
        assert!(smoothness(&pmf(&[1.0]), &pol()).is_err());
    }

    #[test]
    fn full_kl_worked_example() {
        let g = make_grid(0.0, 1.0, 1.0).unwrap();
        let b = full_kl_loss(&pmf(&[0.5, 0.5]), &[0.0, 3f64.ln()], &g, &pol()).unwrap();
        // target moments (0.5, 0.25), predicted (0.75, 0.1875)
        assert_relative_eq!(b.l_ld, 0.143841036225890, epsilon = 1e-12);
        assert_relative_eq!(b.l_exp, 0.189492297107443, epsilon = 1e-12);
        // 0.5 · (0.75 − 0.25) · ln 3
        assert_relative_eq!(b.l_smooth.unwrap(), 0.274653072167027, epsilon = 1e-12);
        assert_relative_eq!(b.total, 0.607986405500361, epsilon = 1e-12);
        assert_eq!(b.family, Family::FullKl);
    }

    #[test]
    fn full_kl_global_minimum_is_zero_with_zero_gradient() {
        let g = make_grid(0.0, 100.0, 1.0).unwrap();
        let t = Pmf::uniform(101).unwrap();
        let z = vec![0.3; 101];
        let b = full_kl_loss(&t, &z, &g, &pol()).unwrap();
        assert!(b.l_ld.abs() < 1e-13);
        assert!(b.l_exp.abs() < 1e-13);
        assert_eq!(b.l_smooth, Some(0.0));
        assert!(b.total.abs() < 1e-13);
        let grad = full_kl_grad(&t, &z, &g, &pol()).unwrap();
        assert!(grad.iter().all(|x| x.abs() < 1e-13), "{grad:?}");
    }

    #[test]
    fn full_kl_penalizes_rough_targets_even_when_matched() {
        let g = make_grid(0.0, 2.0, 1.0).unwrap();
        let t = pmf(&[0.2, 0.5, 0.3]);
        let z: Vec<f64> = t.probs().iter().map(|p| p.ln()).collect();
        let b = full_kl_loss(&t, &z, &g, &pol()).unwrap();
        assert!(b.l_ld.abs() < 1e-15);
        assert!(b.l_exp.abs() < 1e-15);
        assert!(b.total > 0.0);
    }

    #[test]
    fn kl_grad_is_pred_minus_target() {
        let t = pmf(&[0.1, 0.2, 0.3, 0.4]);
        let z = [0.3, -1.2, 2.0, 0.5];
        let p = softmax(&z).unwrap();
        let g = kl_grad(&t, &z, &pol()).unwrap();
        for ((gi, pi), ti) in g.iter().zip(p.probs()).zip(t.probs()) {
            assert_relative_eq!(*gi, pi - ti, epsilon = 1e-15);
        }
    }

    #[test]
    fn reference_grad_subgradient_cases() {
        let g = make_grid(0.0, 2.0, 1.0).unwrap();
        let t = pmf(&[0.25, 0.5, 0.25]);
        // symmetric logits put μ̂ exactly on μ = 1
        let z = [0.4, -0.3, 0.4];
        let grad = reference_grad(&t, &z, &g, &ReferenceLossConfig { lambda: 5.0 }, &pol()).unwrap();
        let p = softmax(&z).unwrap();
        for ((gi, pi), ti) in grad.iter().zip(p.probs()).zip(t.probs()) {
            assert_relative_eq!(*gi, pi - ti, epsilon = 1e-15);
        }

        let z = [1.0, 0.2, -0.7];
        let g0 = reference_grad(&t, &z, &g, &ReferenceLossConfig { lambda: 0.0 }, &pol()).unwrap();
        assert_eq!(g0, kl_grad(&t, &z, &pol()).unwrap());
    }

    #[test]
    fn breakdown_mean() {
        let a = LossBreakdown { family: Family::FullKl, l_ld: 1.0, l_exp: 2.0, l_smooth: Some(0.5), total: 3.5 };
        let b = LossBreakdown { family: Family::FullKl, l_ld: 3.0, l_exp: 0.0, l_smooth: Some(1.5), total: 4.5 };
        let m = LossBreakdown::mean([&a, &b]).unwrap();
        assert_eq!((m.l_ld, m.l_exp, m.l_smooth, m.total), (2.0, 1.0, Some(1.0), 4.0));
        let r = LossBreakdown { family: Family::Reference, l_smooth: None, ..a };
        assert!(LossBreakdown::mean([&a, &r]).is_err());
        assert!(LossBreakdown::<f64>::mean([]).is_err());
    }

    #[test]
    fn loss_config_json_shape() {
        let c: LossConfig<f64> = serde_json::from_str(r#"{"family":"reference","lambda":1.0}"#).unwrap();
        assert_eq!(c, LossConfig::Reference { lambda: 1.0 });
        let c: LossConfig<f64> = serde_json::from_str(r#"{"family":"full_kl"}"#).unwrap();
        assert_eq!(c.family(), Family::FullKl);
    }

    #[test]
    fn works_in_f32() {
        let g = make_grid(0.0f32, 4.0, 1.0).unwrap();
        let t = crate::grid::discretize_gaussian(2.0f32, 1.0, &g).unwrap();
        let b = full_kl_loss(&t, &[0.0f32, 0.5, 1.0, 0.5, 0.0], &g, &NumericPolicy::default()).unwrap();
        assert!(b.total.is_finite() && b.total > 0.0);
    }
}
