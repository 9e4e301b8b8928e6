//! Noise schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 500;
pub const DEFAULT_OFFSET: f64 = 8e-3;
pub const MAX_BETA: f64 = 0.999;
/// Lower bound applied to ᾱ so that `sqrt(ᾱ)` and divisions by it stay finite.
pub const ALPHA_BAR_FLOOR: f64 = 1e-8;

/// Per-step diffusion coefficients.
///
/// `alpha_bar` has `steps + 1` entries indexed by `t = 0..=T`; `beta` and
/// `alpha` have `T` entries and are indexed with `t - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    offset: f64,
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
    alpha: Vec<f64>,
}

/// The squared-cosine cumulative signal level at step `t` (not floored).
pub fn cosine_alpha_bar(t: usize, steps: usize, offset: f64) -> f64 {
    let f = |t: f64| (((t / steps as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2).cos();
    let r = f(t as f64) / f(0.0);
    r * r
}

impl NoiseSchedule {
    /// Squared-cosine schedule with `steps` steps and offset `offset`.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(offset > 0.0) || !offset.is_finite() {
            return Err(Error::invalid(format!("offset must be positive, got {offset}")));
        }
        let mut alpha_bar: Vec<f64> = (0..=steps)
            .map(|t| cosine_alpha_bar(t, steps, offset))
            .collect();
        alpha_bar[0] = 1.0;
        let mut s = Self::from_alpha_bar(alpha_bar)?;
        s.offset = offset;
        Ok(s)
    }

    pub fn default_cosine() -> Self {
        Self::cosine(DEFAULT_STEPS, DEFAULT_OFFSET).expect("default schedule is valid")
    }

    /// Builds a schedule from an explicit ᾱ table (`ᾱ_0` must be 1).
    ///
    /// ᾱ is floored at [`ALPHA_BAR_FLOOR`], then β is derived from
    /// consecutive ratios and clipped to [`MAX_BETA`].
    pub fn from_alpha_bar(mut alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::invalid("alpha_bar table needs at least two entries"));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::invalid(format!("alpha_bar[0] must be 1, got {}", alpha_bar[0])));
        }
        for (t, w) in alpha_bar.windows(2).enumerate() {
            if !(w[1] < w[0]) && !(w[1] <= ALPHA_BAR_FLOOR && w[0] <= ALPHA_BAR_FLOOR) {
                return Err(Error::invalid(format!(
                    "alpha_bar must be strictly decreasing (t={})",
                    t + 1
                )));
            }
        }
        // Flooring before taking ratios keeps ᾱ_t / ᾱ_{t−1} == α_t on every
        // step the clip does not bind.
        for a in alpha_bar.iter_mut() {
            *a = a.max(ALPHA_BAR_FLOOR);
        }
        let beta: Vec<f64> = alpha_bar
            .windows(2)
            .map(|w| (1.0 - w[1] / w[0]).clamp(0.0, MAX_BETA))
            .collect();
        let alpha = beta.iter().map(|b| 1.0 - b).collect();
        Ok(NoiseSchedule {
            steps: beta.len(),
            offset: 0.0,
            alpha_bar,
            beta,
            alpha,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// ᾱ_t for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// β_t for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// α_t = 1 − β_t for `1 <= t <= T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            Err(Error::invalid(format!("step {t} outside [1, {}]", self.steps)))
        } else {
            Ok(())
        }
    }

    /// Variance of the forward-process posterior q(x_{t−1} | x_t, x_0).
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        let num = 1.0 - self.alpha_bar(t - 1);
        let den = 1.0 - self.alpha_bar(t);
        Ok(num / den * self.beta(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bar_starts_at_one_and_ends_near_zero() {
        let s = NoiseSchedule::default_cosine();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(500) < 1e-3);
        assert!(cosine_alpha_bar(500, 500, 0.008) < 1e-30);
    }

    #[test]
    fn alpha_bar_250_matches_closed_form() {
        // Hand evaluation: cos((0.5 + 0.008) / 1.008 · π/2) / cos(0.008 / 1.008 · π/2), squared.
        let num = ((0.508f64 / 1.008) * std::f64::consts::FRAC_PI_2).cos();
        let den = ((0.008f64 / 1.008) * std::f64::consts::FRAC_PI_2).cos();
        let oracle = (num / den).powi(2);
        let s = NoiseSchedule::default_cosine();
        assert!((s.alpha_bar(250) - oracle).abs() < 1e-12);
        assert!((s.alpha_bar(250) - 0.4939).abs() < 1e-3);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(NoiseSchedule::cosine(0, 0.008).is_err());
        assert!(NoiseSchedule::cosine(10, 0.0).is_err());
    }

    #[test]
    fn strictly_decreasing_and_consistent() {
        let s = NoiseSchedule::default_cosine();
        for t in 1..=s.steps() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "t={t}");
            let b = s.beta(t);
            assert!(b > 0.0 && b <= MAX_BETA);
            if b < MAX_BETA {
                let ratio = s.alpha_bar(t) / s.alpha_bar(t - 1);
                assert!((ratio - s.alpha(t)).abs() <= 1e-6 * s.alpha(t));
            }
        }
        // With the floor applied first the clip never binds, so the product
        // matches the table through t = T.
        assert!(s.beta(s.steps()) < MAX_BETA);
        let mut prod = 1.0;
        for t in 1..=s.steps() {
            prod *= s.alpha(t);
            assert!((prod - s.alpha_bar(t)).abs() <= 1e-6 * s.alpha_bar(t), "t={t}");
        }
    }

    #[test]
    fn posterior_variance_bounds() {
        let s = NoiseSchedule::default_cosine();
        assert_eq!(s.posterior_variance(1).unwrap(), 0.0);
        for t in 1..=s.steps() {
            let v = s.posterior_variance(t).unwrap();
            assert!(v >= 0.0 && v <= s.beta(t), "t={t}");
        }
        assert!(s.posterior_variance(0).is_err());
        assert!(s.posterior_variance(501).is_err());
    }

    #[test]
    fn posterior_variance_at_250_from_table() {
        let s = NoiseSchedule::default_cosine();
        let a = |t: usize| cosine_alpha_bar(t, 500, 0.008);
        let beta = 1.0 - a(250) / a(249);
        let oracle = (1.0 - a(249)) / (1.0 - a(250)) * beta;
        assert!((s.posterior_variance(250).unwrap() - oracle).abs() < 1e-12);
    }
}
