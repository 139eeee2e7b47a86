//! Variance-preserving noise schedules and the PF-ODE linear coefficients.
//!
//! Forward marginals are `x_t | x_0 ~ N(alpha(t) x_0, sigma(t)^2 I)` with
//! `alpha^2 + sigma^2 = 1`. The probability-flow ODE is
//! `x' = f(t) x - 0.5 g^2(t) score(x, t)` where `f = d log(alpha)/dt` and
//! `g^2 = d(sigma^2)/dt - 2 f sigma^2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A noise schedule as seen by the samplers.
///
/// `log_alpha` must be finite for any real `t` a sampler asks for: composition
/// schemes with negative fractions evaluate the linear sub-flow slightly
/// outside `[0, 1]`.
pub trait NoiseSchedule: Send + Sync {
    fn log_alpha(&self, t: f64) -> f64;

    /// `f(t) = d log(alpha) / dt`.
    fn drift_rate(&self, t: f64) -> f64;

    fn sigma(&self, t: f64) -> f64;

    /// Squared diffusion rate `g^2(t)`.
    fn g2(&self, t: f64) -> f64;

    /// Time at which backward integration stops.
    fn t_min(&self) -> f64 {
        0.0
    }

    fn alpha(&self, t: f64) -> f64 {
        self.log_alpha(t).exp()
    }

    /// Exact linear sub-flow multiplier `exp(int_s^t f) = alpha(t) / alpha(s)`,
    /// without a domain check.
    fn linear_flow(&self, t: f64, s: f64) -> f64 {
        (self.log_alpha(t) - self.log_alpha(s)).exp()
    }
}

/// `beta(t) = beta0 + (beta1 - beta0) t` on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearBetaSchedule {
    pub beta0: f64,
    pub beta1: f64,
    #[serde(default)]
    pub t_min: f64,
}

/// Schedule quantities at a single time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleEval {
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub f: f64,
    pub g2: f64,
    pub beta: f64,
}

impl Default for LinearBetaSchedule {
    fn default() -> Self {
        Self {
            beta0: 0.1,
            beta1: 20.0,
            t_min: 0.0,
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain { t })
    }
}

impl LinearBetaSchedule {
    pub fn new(beta0: f64, beta1: f64, t_min: f64) -> Result<Self> {
        let s = Self {
            beta0,
            beta1,
            t_min,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta0 > 0.0 && self.beta0.is_finite()) {
            return Err(Error::Config(format!("beta0 must be > 0, got {}", self.beta0)));
        }
        if !(self.beta1 >= self.beta0 && self.beta1.is_finite()) {
            return Err(Error::Config(format!(
                "beta1 must be >= beta0 = {}, got {}",
                self.beta0, self.beta1
            )));
        }
        if !(0.0..1.0).contains(&self.t_min) {
            return Err(Error::Config(format!("t_min must lie in [0, 1), got {}", self.t_min)));
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta0 + (self.beta1 - self.beta0) * t
    }

    /// `int_0^t beta(s) ds`.
    pub fn integrated_beta(&self, t: f64) -> f64 {
        self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t
    }

    pub fn eval(&self, t: f64) -> Result<ScheduleEval> {
        check_time(t)?;
        let alpha = self.alpha(t);
        Ok(ScheduleEval {
            t,
            alpha,
            sigma: self.sigma(t),
            f: self.drift_rate(t),
            g2: self.g2(t),
            beta: self.beta(t),
        })
    }

    /// `m_f(t, s) = exp(int_s^t f) = alpha(t) / alpha(s)`.
    pub fn integrating_factor(&self, t: f64, s: f64) -> Result<f64> {
        check_time(t)?;
        check_time(s)?;
        Ok(self.linear_flow(t, s))
    }
}

impl NoiseSchedule for LinearBetaSchedule {
    fn log_alpha(&self, t: f64) -> f64 {
        -0.5 * self.integrated_beta(t)
    }

    fn drift_rate(&self, t: f64) -> f64 {
        -0.5 * self.beta(t)
    }

    fn sigma(&self, t: f64) -> f64 {
        // 1 - alpha^2 without cancellation near t = 0
        (-(2.0 * self.log_alpha(t)).exp_m1()).max(0.0).sqrt()
    }

    fn g2(&self, t: f64) -> f64 {
        let a2 = (2.0 * self.log_alpha(t)).exp();
        let s2 = -(2.0 * self.log_alpha(t)).exp_m1();
        let dsigma2 = self.beta(t) * a2;
        dsigma2 - 2.0 * self.drift_rate(t) * s2
    }

    fn t_min(&self) -> f64 {
        self.t_min
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sched() -> LinearBetaSchedule {
        LinearBetaSchedule::default()
    }

    #[test]
    fn endpoints() {
        let e = sched().eval(0.0).unwrap();
        assert_eq!(e.beta, 0.1);
        assert_eq!(e.alpha, 1.0);
        assert_eq!(e.sigma, 0.0);

        let a1 = sched().eval(1.0).unwrap().alpha;
        assert!((a1 - (-5.025f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn alpha_one_matches_quadrature() {
        // composite Simpson on beta, independent of the closed form
        let s = sched();
        let n = 2000;
        let h = 1.0 / n as f64;
        let mut acc = s.beta(0.0) + s.beta(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * s.beta(i as f64 * h);
        }
        let integral = acc * h / 3.0;
        let alpha = (-0.5 * integral).exp();
        assert!((alpha - s.alpha(1.0)).abs() < 1e-10);
    }

    #[test]
    fn vp_identity_and_monotone() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let t: f64 = rng.gen();
            let e = s.eval(t).unwrap();
            assert!((e.alpha * e.alpha + e.sigma * e.sigma - 1.0).abs() < 1e-12);
        }
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let a = s.alpha(i as f64 / 100.0);
            assert!(a < prev);
            prev = a;
        }
    }

    #[test]
    fn drift_rate_matches_finite_difference() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 1e-5;
        for _ in 0..100 {
            let t: f64 = rng.gen_range(d..1.0 - d);
            let fd = (s.log_alpha(t + d) - s.log_alpha(t - d)) / (2.0 * d);
            assert!((fd - s.drift_rate(t)).abs() < 1e-7);
        }
    }

    #[test]
    fn g2_equals_beta() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 1e-5;
        for _ in 0..10 {
            let t: f64 = rng.gen_range(d..1.0 - d);
            assert!((s.g2(t) - s.beta(t)).abs() < 1e-10);
            // finite-difference route for d(sigma^2)/dt and f
            let s2 = |u: f64| s.sigma(u).powi(2);
            let ds2 = (s2(t + d) - s2(t - d)) / (2.0 * d);
            let f = (s.log_alpha(t + d) - s.log_alpha(t - d)) / (2.0 * d);
            let g2_fd = ds2 - 2.0 * f * s2(t);
            assert!((g2_fd - s.beta(t)).abs() < 1e-6);
        }
    }

    #[test]
    fn integrating_factor_cocycle() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let (t, u, v): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
            assert_eq!(s.integrating_factor(t, t).unwrap(), 1.0);
            let lhs = s.integrating_factor(t, u).unwrap() * s.integrating_factor(u, v).unwrap();
            let rhs = s.integrating_factor(t, v).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
        }
        let m = s.integrating_factor(0.0, 1.0).unwrap();
        assert!((m - 5.025f64.exp()).abs() < 1e-12 * m);
    }

    #[test]
    fn domain_errors() {
        let s = sched();
        assert!(matches!(s.eval(1.5), Err(Error::Domain { .. })));
        assert!(matches!(s.eval(-1e-9), Err(Error::Domain { .. })));
        assert!(s.integrating_factor(0.5, 1.01).is_err());
        assert!(LinearBetaSchedule::new(0.0, 1.0, 0.0).is_err());
        assert!(LinearBetaSchedule::new(1.0, 0.5, 0.0).is_err());
        assert!(LinearBetaSchedule::new(0.1, 20.0, 1.0).is_err());
    }
}
