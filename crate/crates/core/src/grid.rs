//! Label grids, probability mass functions over them, and the moment and
//! softmax machinery every loss is built from.

use crate::error::{ensure_len, Error, Result};
use crate::scalar::Scalar;

/// Numerical floors used wherever a probability enters a logarithm or a
/// variance enters a denominator. All logarithms are natural.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NumericPolicy<T> {
    pub eps_log: T,
    /// Label units squared.
    pub eps_var: T,
}

impl<T: Scalar> Default for NumericPolicy<T> {
    fn default() -> Self {
        Self { eps_log: T::of(1e-12), eps_var: T::of(1e-8) }
    }
}

impl<T: Scalar> NumericPolicy<T> {
    pub fn new(eps_log: T, eps_var: T) -> Result<Self> {
        if !(eps_log > T::zero()) || !(eps_var > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "numeric floors must be positive (eps_log={eps_log}, eps_var={eps_var})"
            )));
        }
        Ok(Self { eps_log, eps_var })
    }

    #[inline]
    pub fn ln_floored(&self, p: T) -> T {
        p.max(self.eps_log).ln()
    }
}

/// Ordered bin centers of a discretized regression range.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid<T> {
    values: Vec<T>,
    /// `Some(Δl)` when the grid is uniform.
    spacing: Option<T>,
}

/// Uniform grid from `start` to `stop` inclusive with spacing `step`.
pub fn make_grid<T: Scalar>(start: T, stop: T, step: T) -> Result<LabelGrid<T>> {
    LabelGrid::uniform(start, stop, step)
}

impl<T: Scalar> LabelGrid<T> {
    pub fn uniform(start: T, stop: T, step: T) -> Result<Self> {
        if !start.is_finite() || !stop.is_finite() || !step.is_finite() {
            return Err(Error::InvalidGrid("non-finite grid parameter".into()));
        }
        if step <= T::zero() {
            return Err(Error::InvalidGrid(format!("step must be positive, got {step}")));
        }
        if stop <= start {
            return Err(Error::InvalidGrid(format!("stop {stop} must exceed start {start}")));
        }
        let intervals = (stop - start) / step;
        let rounded = intervals.round();
        if (intervals - rounded).abs() > T::of(1e-9).max(T::epsilon() * intervals * T::of(4.0)) {
            return Err(Error::InvalidGrid(format!("(stop - start) / step = {intervals} is not integral")));
        }
        let n = rounded.to_usize().ok_or_else(|| Error::InvalidGrid("bin count overflow".into()))? + 1;
        // Index-based construction keeps every center within one rounding of start + i·step.
        let values = (0..n).map(|i| start + step * T::of_usize(i)).collect();
        Ok(Self { values, spacing: Some(step) })
    }

    /// Arbitrary strictly increasing bin centers. Uniformity is detected, so
    /// a uniform grid built this way still supports [`discretize_gaussian`].
    pub fn from_values(values: Vec<T>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 bins, got {}", values.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "grid values", index: i });
        }
        if let Some(i) = values.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(format!("values not strictly increasing at index {}", i + 1)));
        }
        let step = values[1] - values[0];
        let tol = T::of(1e-12).max(T::epsilon() * T::of(8.0));
        let uniform = values.windows(2).all(|w| ((w[1] - w[0]) - step).abs() <= tol * step.abs().max(w[1].abs()));
        Ok(Self { values, spacing: uniform.then_some(step) })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spacing(&self) -> Option<T> {
        self.spacing
    }

    pub fn is_uniform(&self) -> bool {
        self.spacing.is_some()
    }

    pub fn min(&self) -> T {
        self.values[0]
    }

    pub fn max(&self) -> T {
        self.values[self.values.len() - 1]
    }

    pub fn span(&self) -> T {
        self.max() - self.min()
    }

    /// Relabel every bin as `scale·y + offset` (`scale > 0`).
    pub fn affine(&self, scale: T, offset: T) -> Result<Self> {
        if !(scale > T::zero()) {
            return Err(Error::InvalidArgument(format!("affine scale must be positive, got {scale}")));
        }
        Ok(Self {
            values: self.values.iter().map(|&y| scale * y + offset).collect(),
            spacing: self.spacing.map(|s| s * scale),
        })
    }
}

/// Probability mass function over the bins of a [`LabelGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf<T> {
    probs: Vec<T>,
}

impl<T: Scalar> Pmf<T> {
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("pmf"));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite { what: "pmf", index: i });
        }
        if let Some(i) = probs.iter().position(|&p| p < T::zero()) {
            return Err(Error::InvalidPmf(format!("negative probability {} at index {i}", probs[i])));
        }
        let sum: T = probs.iter().copied().sum();
        if (sum - T::one()).abs() > T::sum_tolerance() {
            return Err(Error::InvalidPmf(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights into a pmf.
    pub fn from_weights(weights: Vec<T>) -> Result<Self> {
        if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < T::zero()) {
            return Err(Error::InvalidPmf(format!(
                "weight {} at index {i} is not a finite non-negative number",
                weights[i]
            )));
        }
        let sum: T = weights.iter().copied().sum();
        if !(sum > T::zero()) {
            return Err(Error::InvalidPmf("weights sum to zero".into()));
        }
        Pmf::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("pmf"));
        }
        Ok(Self { probs: vec![T::one() / T::of_usize(n); n] })
    }

    pub fn one_hot(n: usize, k: usize) -> Result<Self> {
        if k >= n {
            return Err(Error::InvalidArgument(format!("one-hot index {k} out of range for {n} bins")));
        }
        let mut probs = vec![T::zero(); n];
        probs[k] = T::one();
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_vec(self) -> Vec<T> {
        self.probs
    }
}

/// Mean and variance of a pmf on its grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments<T> {
    pub mu: T,
    pub var: T,
}

impl<T: Scalar> Moments<T> {
    pub fn new(mu: T, var: T) -> Result<Self> {
        if !mu.is_finite() || !var.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite moments ({mu}, {var})")));
        }
        if var < T::zero() {
            return Err(Error::InvalidArgument(format!("negative variance {var}")));
        }
        Ok(Self { mu, var })
    }

    pub fn sigma(&self) -> T {
        self.var.sqrt()
    }
}

/// Shift-invariant softmax: the maximum logit is subtracted before
/// exponentiation, so adding a constant to every logit changes nothing.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Pmf<T>> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
        return Err(Error::NonFinite { what: "logits", index: i });
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    Ok(Pmf { probs: exps.into_iter().map(|e| e / sum).collect() })
}

/// `μ = Σ yᵢpᵢ`, `σ² = Σ (yᵢ − μ)² pᵢ`. Accepts non-uniform grids.
pub fn moments<T: Scalar>(p: &Pmf<T>, g: &LabelGrid<T>) -> Result<Moments<T>> {
    ensure_len("pmf", g.len(), p.len())?;
    let mu: T = p.probs.iter().zip(&g.values).map(|(&pi, &y)| pi * y).sum();
    let var: T = p
        .probs
        .iter()
        .zip(&g.values)
        .map(|(&pi, &y)| {
            let d = y - mu;
            d * d * pi
        })
        .sum();
    Ok(Moments { mu, var })
}

/// Normal density evaluated at the bin centers and renormalized.
///
/// Requires a uniform grid, `sigma ≥ Δl/2`, and `mu` no further than `5σ`
/// outside the grid span.
pub fn discretize_gaussian<T: Scalar>(mu: T, sigma: T, g: &LabelGrid<T>) -> Result<Pmf<T>> {
    let step = g.spacing().ok_or_else(|| Error::InvalidGrid("gaussian discretization needs a uniform grid".into()))?;
    if !mu.is_finite() || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite gaussian parameters ({mu}, {sigma})")));
    }
    let floor = step * T::of(0.5);
    if sigma < floor {
        return Err(Error::SigmaBelowFloor { sigma: sigma.to_f64_lossy(), floor: floor.to_f64_lossy() });
    }
    let reach = sigma * T::of(5.0);
    if mu < g.min() - reach || mu > g.max() + reach {
        return Err(Error::MeanOffGrid {
            mu: mu.to_f64_lossy(),
            lo: g.min().to_f64_lossy(),
            hi: g.max().to_f64_lossy(),
        });
    }
    Ok(Pmf { probs: gaussian_weights(mu, sigma, g.values()) })
}

/// Renormalized `exp(−(y−μ)²/2σ²)` over `ys`, computed relative to the
/// largest exponent so nothing underflows to an all-zero vector.
pub(crate) fn gaussian_weights<T: Scalar>(mu: T, sigma: T, ys: &[T]) -> Vec<T> {
    let two_var = T::of(2.0) * sigma * sigma;
    let exponents: Vec<T> = ys.iter().map(|&y| -(y - mu) * (y - mu) / two_var).collect();
    let top = exponents.iter().copied().fold(T::neg_infinity(), T::max);
    let weights: Vec<T> = exponents.into_iter().map(|e| (e - top).exp()).collect();
    let sum: T = weights.iter().copied().sum();
    weights.into_iter().map(|w| w / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn make_grid_examples() {
        let g = make_grid(0.0, 100.0, 1.0).unwrap();
        assert_eq!(g.len(), 101);
        assert_eq!(g.spacing(), Some(1.0));
        assert_eq!(g.max(), 100.0);

        let g = make_grid(0.0, 1.0, 0.5).unwrap();
        assert_eq!(g.values(), &[0.0, 0.5, 1.0]);

        assert!(make_grid(0.0, 1.0, -1.0).is_err());
        assert!(make_grid(0.0, 1.0, 0.0).is_err());
        assert!(make_grid(1.0, 1.0, 0.5).is_err());
        assert!(make_grid(0.0, 1.0, 0.3).is_err());
    }

    #[test]
    fn make_grid_spacing_is_uniform() {
        let g = make_grid(-3.0, 7.0, 0.1).unwrap();
        assert_eq!(g.len(), 101);
        for w in g.values().windows(2) {
            assert_relative_eq!(w[1] - w[0], 0.1, max_relative = 1e-12, epsilon = 1e-14);
        }
    }

    #[test]
    fn from_values_detects_uniformity() {
        assert!(LabelGrid::from_values(vec![0.0, 1.0, 2.0]).unwrap().is_uniform());
        assert!(!LabelGrid::from_values(vec![0.0, 1.0, 3.0]).unwrap().is_uniform());
        assert!(LabelGrid::from_values(vec![0.0, 0.0, 1.0]).is_err());
        assert!(LabelGrid::<f64>::from_values(vec![1.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().probs(), &[0.5, 0.5]);
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert_relative_eq!(p.probs()[0], 0.25, epsilon = 1e-15);
        assert_relative_eq!(p.probs()[1], 0.75, epsilon = 1e-15);
        let p = softmax(&[1000.0, 1000.0, 1000.0]).unwrap();
        for &pi in p.probs() {
            assert_relative_eq!(pi, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(softmax::<f64>(&[]), Err(Error::Empty(_))));
        assert!(matches!(softmax(&[0.0, f64::NAN]), Err(Error::NonFinite { index: 1, .. })));
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn softmax_f32_saturates_without_overflow() {
        let p = softmax(&[100.0f32, 0.0, -100.0]).unwrap();
        assert!(p.probs()[0] > 0.999_999);
        assert!(p.probs().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn moments_examples() {
        let g = make_grid(0.0, 2.0, 1.0).unwrap();
        let m = moments(&Pmf::new(vec![0.25, 0.5, 0.25]).unwrap(), &g).unwrap();
        assert_eq!(m.mu, 1.0);
        assert_eq!(m.var, 0.5);

        let g = make_grid(0.0, 100.0, 1.0).unwrap();
        let m = moments(&Pmf::one_hot(101, 37).unwrap(), &g).unwrap();
        assert_eq!(m.mu, 37.0);
        assert_eq!(m.var, 0.0);

        let m = moments(&Pmf::uniform(101).unwrap(), &g).unwrap();
        assert_relative_eq!(m.mu, 50.0, epsilon = 1e-12);

        assert!(matches!(moments(&Pmf::uniform(3).unwrap(), &g), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn moments_on_non_uniform_grid() {
        let g = LabelGrid::from_values(vec![0.0, 1.0, 4.0]).unwrap();
        let m = moments(&Pmf::new(vec![0.5, 0.0, 0.5]).unwrap(), &g).unwrap();
        assert_eq!(m.mu, 2.0);
        assert_eq!(m.var, 4.0);
    }

    #[test]
    fn discretize_gaussian_three_points() {
        let g = make_grid(0.0, 2.0, 1.0).unwrap();
        let p = discretize_gaussian(1.0, 1.0, &g).unwrap();
        // exp(-1/2) / (1 + 2 exp(-1/2)) and 1 / (1 + 2 exp(-1/2))
        assert_relative_eq!(p.probs()[0], 0.274068619061197, epsilon = 1e-12);
        assert_relative_eq!(p.probs()[1], 0.451862761877606, epsilon = 1e-12);
        assert_eq!(p.probs()[0], p.probs()[2]);
    }

    #[test]
    fn discretize_gaussian_symmetric_about_center() {
        let g = make_grid(0.0, 100.0, 1.0).unwrap();
        for sigma in [0.5, 1.7, 9.0, 30.0] {
            let p = discretize_gaussian(50.0, sigma, &g).unwrap();
            for i in 0..50 {
                assert_eq!(p.probs()[i], p.probs()[100 - i]);
            }
        }
    }

    #[test]
    fn discretize_gaussian_recovers_moments() {
        let g = make_grid(0.0f64, 100.0, 1.0).unwrap();
        let m = moments(&discretize_gaussian(40.0, 5.0, &g).unwrap(), &g).unwrap();
        assert!((m.mu - 40.0).abs() <= 0.01);
        assert!((m.var / 25.0 - 1.0).abs() <= 0.01);
    }

    #[test]
    fn discretize_gaussian_errors() {
        let g = make_grid(0.0, 100.0, 1.0).unwrap();
        assert!(matches!(discretize_gaussian(50.0, 0.49, &g), Err(Error::SigmaBelowFloor { .. })));
        assert!(matches!(discretize_gaussian(50.0, 0.0, &g), Err(Error::SigmaBelowFloor { .. })));
        assert!(discretize_gaussian(50.0, 0.5, &g).is_ok());
        assert!(matches!(discretize_gaussian(-11.0, 2.0, &g), Err(Error::MeanOffGrid { .. })));
        assert!(discretize_gaussian(-9.0, 2.0, &g).is_ok());
        let ragged = LabelGrid::from_values(vec![0.0, 1.0, 3.0]).unwrap();
        assert!(matches!(discretize_gaussian(1.0, 1.0, &ragged), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn moment_error_shrinks_with_finer_grid() {
        // fixed sigma, shrinking spacing
        let (mu, sigma) = (3.3f64, 0.8);
        let mut last = f64::INFINITY;
        for step in [0.4, 0.2, 0.1, 0.05] {
            let g = make_grid(-6.0, 14.0, step).unwrap();
            let m = moments(&discretize_gaussian(mu, sigma, &g).unwrap(), &g).unwrap();
            let err = (m.mu - mu).abs() + (m.var - sigma * sigma).abs();
            assert!(err <= last + 1e-12, "step {step}: {err} > {last}");
            last = err;
        }
        assert!(last < 1e-9);
    }

    #[test]
    fn pmf_validation() {
        assert!(Pmf::new(vec![0.5, 0.6]).is_err());
        assert!(Pmf::new(vec![-0.1, 1.1]).is_err());
        assert!(Pmf::<f64>::new(vec![]).is_err());
        assert!(Pmf::new(vec![0.3f32, 0.7]).is_ok());
        let p = Pmf::from_weights(vec![1.0, 3.0]).unwrap();
        assert_eq!(p.probs(), &[0.25, 0.75]);
    }

    proptest! {
        #[test]
        fn softmax_is_a_pmf(logits in prop::collection::vec(-50.0f64..50.0, 1..120)) {
            let p = softmax(&logits).unwrap();
            prop_assert!(p.probs().iter().all(|&x| x > 0.0));
            let s: f64 = p.probs().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn softmax_exact_shift_invariance(
            ticks in prop::collection::vec(-400i32..400, 1..64),
            shift in -1000i32..1000,
        ) {
            // Eighths and integer shifts keep every addition exact in f64.
            let logits: Vec<f64> = ticks.iter().map(|&k| f64::from(k) / 8.0).collect();
            let shifted: Vec<f64> = logits.iter().map(|&z| z + f64::from(shift)).collect();
            prop_assert_eq!(softmax(&logits).unwrap(), softmax(&shifted).unwrap());
        }

        #[test]
        fn one_hot_has_zero_variance(n in 2usize..150, k in 0usize..150, start in -100.0f64..100.0) {
            let k = k % n;
            let g = make_grid(start, start + (n - 1) as f64 * 0.5, 0.5).unwrap();
            let m = moments(&Pmf::one_hot(n, k).unwrap(), &g).unwrap();
            prop_assert_eq!(m.var, 0.0);
            prop_assert_eq!(m.mu, g.values()[k]);
        }

        #[test]
        fn wide_gaussians_keep_moments_within_one_percent(sigma in 5.0f64..10.0, offset in -1.0f64..1.0) {
            let g = make_grid(0.0, 100.0, 1.0).unwrap();
            let mu = 50.0 + offset * (50.0 - 5.0 * sigma);
            let m = moments(&discretize_gaussian(mu, sigma, &g).unwrap(), &g).unwrap();
            prop_assert!((m.mu - mu).abs() / sigma <= 0.01);
            prop_assert!((m.var / (sigma * sigma) - 1.0).abs() <= 0.01);
        }
    }
}
