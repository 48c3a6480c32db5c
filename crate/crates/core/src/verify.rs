//! Independent numerical oracles: central finite differences for gradients
//! and a fine-grid quadrature for the Gaussian KL closed form.

use crate::error::{ensure_len, Error, Result};
use crate::grid::Moments;
use crate::scalar::Scalar;

/// Outcome of comparing an analytic gradient with a numerical one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport<T> {
    pub max_rel_error: T,
    pub worst_index: usize,
    pub passed: bool,
    pub tolerance: T,
}

/// Central differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` with a fixed step.
pub fn fd_grad<T, F>(loss_fn: F, logits: &[T], h: T) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    central_differences(loss_fn, logits, |_| h)
}

/// Central differences with per-coordinate step `h·max(1, |xᵢ|)`.
pub fn fd_grad_relative<T, F>(loss_fn: F, logits: &[T], h: T) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    central_differences(loss_fn, logits, |x| h * x.abs().max(T::one()))
}

fn central_differences<T, F, S>(mut loss_fn: F, x: &[T], step: S) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<T>,
    S: Fn(T) -> T,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = step(x[i]);
        probe[i] = x[i] + h;
        let up = loss_fn(&probe)?;
        probe[i] = x[i] - h;
        let down = loss_fn(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { what: "finite-difference evaluation", index: i });
        }
        // Divide by the step actually realized in floating point.
        grad.push((up - down) / ((x[i] + h) - (x[i] - h)));
    }
    Ok(grad)
}

/// Per-coordinate comparison: `max |aᵢ − nᵢ| / max(1e-12, |aᵢ|, |nᵢ|)`.
pub fn check_grad<T: Scalar>(analytic: &[T], numeric: &[T], tol: T) -> Result<GradCheckReport<T>> {
    ensure_len("numeric gradient", analytic.len(), numeric.len())?;
    let floor = T::of(1e-12);
    let mut worst = (T::zero(), 0usize);
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs() / floor.max(a.abs()).max(n.abs());
        if err.is_nan() || err > worst.0 {
            worst = (err, i);
            if err.is_nan() {
                break;
            }
        }
    }
    Ok(report(worst, tol))
}

/// Whole-vector comparison: `‖a − n‖₂ / max(1e-12, ‖a‖₂, ‖n‖₂)`. The worst
/// index is the coordinate with the largest absolute discrepancy.
pub fn check_grad_norm<T: Scalar>(analytic: &[T], numeric: &[T], tol: T) -> Result<GradCheckReport<T>> {
    ensure_len("numeric gradient", analytic.len(), numeric.len())?;
    let norm = |v: &mut dyn Iterator<Item = T>| v.map(|x| x * x).sum::<T>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(&a, &n)| a - n));
    let scale = T::of(1e-12).max(norm(&mut analytic.iter().copied())).max(norm(&mut numeric.iter().copied()));
    let worst_index = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs())
        .enumerate()
        .fold((0, T::neg_infinity()), |best, (i, e)| if e > best.1 { (i, e) } else { best })
        .0;
    Ok(report((diff / scale, worst_index), tol))
}

fn report<T: Scalar>((max_rel_error, worst_index): (T, usize), tolerance: T) -> GradCheckReport<T> {
    GradCheckReport { max_rel_error, worst_index, passed: max_rel_error <= tolerance, tolerance }
}

/// Gaussian KL evaluated by brute force: both densities are sampled on a
/// shared uniform grid of `points` nodes covering both means
/// `± span_sigmas·max(σ, σ̂)`, renormalized, and compared with a discrete KL.
///
/// Log-probabilities are normalized with log-sum-exp, so far tails that
/// underflow in linear space still contribute their exact log-ratio.
pub fn numeric_gaussian_kl<T: Scalar>(
    target_m: &Moments<T>,
    pred_m: &Moments<T>,
    points: usize,
    span_sigmas: T,
) -> Result<T> {
    if points < 10_000 {
        return Err(Error::InvalidArgument(format!("quadrature needs at least 10^4 points, got {points}")));
    }
    if !(span_sigmas >= T::of(8.0)) {
        return Err(Error::InvalidArgument(format!("span must be at least 8 sigma, got {span_sigmas}")));
    }
    for (i, v) in [target_m.mu, target_m.var, pred_m.mu, pred_m.var].into_iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { what: "moments", index: i });
        }
    }
    if !(target_m.var > T::zero()) || !(pred_m.var > T::zero()) {
        return Err(Error::InvalidArgument("quadrature needs positive variances".into()));
    }
    let reach = span_sigmas * target_m.sigma().max(pred_m.sigma());
    let lo = target_m.mu.min(pred_m.mu) - reach;
    let hi = target_m.mu.max(pred_m.mu) + reach;
    let step = (hi - lo) / T::of_usize(points - 1);
    let ys: Vec<T> = (0..points).map(|i| lo + step * T::of_usize(i)).collect();

    let log_t = log_normalized_gaussian(target_m, &ys);
    let log_p = log_normalized_gaussian(pred_m, &ys);
    Ok(log_t.iter().zip(&log_p).map(|(&lt, &lp)| lt.exp() * (lt - lp)).sum())
}

fn log_normalized_gaussian<T: Scalar>(m: &Moments<T>, ys: &[T]) -> Vec<T> {
    let two_var = T::of(2.0) * m.var;
    let exps: Vec<T> = ys.iter().map(|&y| -(y - m.mu) * (y - m.mu) / two_var).collect();
    let top = exps.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = top + exps.iter().map(|&e| (e - top).exp()).sum::<T>().ln();
    exps.into_iter().map(|e| e - lse).collect()
}
