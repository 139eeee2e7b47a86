//! Gaussian data, its forward-time marginal law, and the score-field interface
//! shared by the analytic oracle and the learned noise predictor.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedules::NoiseSchedule;

/// Step used for central-difference Jacobians of black-box fields.
pub const JACOBIAN_FD_STEP: f64 = 1e-4;

/// Data distribution `N(mu, sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianData {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
}

impl GaussianData {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(Error::Config("data dimension must be >= 1".into()));
        }
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::Shape {
                expected: d,
                got: sigma.nrows(),
            });
        }
        for i in 0..d {
            for j in 0..i {
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-12 {
                    return Err(Error::Config("covariance is not symmetric".into()));
                }
            }
        }
        if Cholesky::new(sigma.clone()).is_none() {
            return Err(Error::Config("covariance is not positive definite".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn from_rows(mu: &[f64], sigma: &[Vec<f64>]) -> Result<Self> {
        let d = mu.len();
        if sigma.len() != d || sigma.iter().any(|r| r.len() != d) {
            return Err(Error::Config(format!("covariance must be {d}x{d}")));
        }
        let flat: Vec<f64> = sigma.iter().flatten().copied().collect();
        Self::new(
            DVector::from_column_slice(mu),
            DMatrix::from_row_slice(d, d, &flat),
        )
    }

    /// The two-dimensional benchmark: `mu = (1, -1)`, `sigma = [[1.5, 0.6], [0.6, 0.8]]`.
    pub fn benchmark() -> Self {
        Self::from_rows(&[1.0, -1.0], &[vec![1.5, 0.6], vec![0.6, 0.8]])
            .expect("benchmark covariance is SPD")
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn density(&self) -> GaussianDensity {
        GaussianDensity::new(self.mu.clone(), self.sigma.clone()).expect("validated SPD")
    }

    /// Mean and covariance of `x_t` without a domain check.
    fn marginal_moments<S: NoiseSchedule + ?Sized>(
        &self,
        sched: &S,
        t: f64,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let a = sched.alpha(t);
        let s = sched.sigma(t);
        let mut cov = &self.sigma * (a * a);
        for i in 0..self.dim() {
            cov[(i, i)] += s * s;
        }
        (&self.mu * a, cov)
    }
}

/// A multivariate normal density with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianDensity {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl GaussianDensity {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Shape {
                expected: d,
                got: cov.nrows(),
            });
        }
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::Numeric("covariance factorization failed".into()))?;
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let log_norm = -0.5 * (d as f64 * (2.0 * PI).ln() + log_det);
        Ok(Self {
            mean,
            cov,
            chol,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_iterator(self.dim(), x.iter().zip(self.mean.iter()).map(|(a, b)| a - b));
        let l = self.chol.l_dirty();
        let z = l
            .view_range(.., ..)
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * z.norm_squared()
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        self.log_pdf(x).exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        &self.mean + self.chol.l() * z
    }

    /// `-cov^{-1} (x - mean)`.
    pub fn grad_log_pdf(&self, x: &DVector<f64>) -> DVector<f64> {
        -self.chol.solve(&(x - &self.mean))
    }

    pub fn precision(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Law of `x_t` under the forward process started from Gaussian data.
#[derive(Debug, Clone)]
pub struct MarginalLaw {
    pub t: f64,
    density: GaussianDensity,
}

impl MarginalLaw {
    pub fn mean(&self) -> &DVector<f64> {
        self.density.mean()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        self.density.cov()
    }

    pub fn density(&self) -> &GaussianDensity {
        &self.density
    }

    pub fn into_density(self) -> GaussianDensity {
        self.density
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain { t })
    }
}

/// `x_t ~ N(alpha(t) mu, alpha(t)^2 sigma + sigma(t)^2 I)`.
pub fn marginal_law<S: NoiseSchedule + ?Sized>(
    data: &GaussianData,
    sched: &S,
    t: f64,
) -> Result<MarginalLaw> {
    check_time(t)?;
    let (mean, cov) = data.marginal_moments(sched, t);
    Ok(MarginalLaw {
        t,
        density: GaussianDensity::new(mean, cov)?,
    })
}

/// `grad_x log q(x, t) = -(alpha^2 sigma + sigma^2 I)^{-1} (x - alpha mu)`.
pub fn exact_score<S: NoiseSchedule + ?Sized>(
    data: &GaussianData,
    sched: &S,
    x: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>> {
    check_time(t)?;
    let (mean, cov) = data.marginal_moments(sched, t);
    let chol = Cholesky::new(cov).ok_or_else(|| Error::Numeric("marginal covariance is not SPD".into()))?;
    Ok(-chol.solve(&(x - mean)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    ExactGaussian,
    LearnedMlp,
    Zero,
    Custom,
}

/// A score field `s(x, t)` together with its noise-prediction view
/// `eps(x, t) = -sigma(t) s(x, t)`.
///
/// Batch methods take one state per column of a `d x m` matrix.
pub trait ScoreField: Send + Sync {
    fn kind(&self) -> FieldKind;

    fn dim(&self) -> usize;

    fn score_batch(&self, xs: &DMatrix<f64>, t: f64) -> DMatrix<f64>;

    fn noise_batch(&self, xs: &DMatrix<f64>, t: f64) -> DMatrix<f64>;

    /// Whether the field natively predicts noise (and the score is derived by
    /// dividing by sigma).
    fn native_noise(&self) -> bool {
        false
    }

    fn score(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        first_column(self.score_batch(&as_column(x), t))
    }

    fn noise(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        first_column(self.noise_batch(&as_column(x), t))
    }

    /// Jacobian of the score in `x`; black-box fields use central differences.
    fn jacobian(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        finite_difference_jacobian(|y| self.score(y, t), x, JACOBIAN_FD_STEP)
    }
}

pub(crate) fn as_column(x: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(x.len(), 1, x.as_slice())
}

pub(crate) fn first_column(m: DMatrix<f64>) -> DVector<f64> {
    m.column(0).into_owned()
}

macro_rules! forward_score_field {
    ($($ty:ty),*) => {$(
        impl<F: ScoreField + ?Sized> ScoreField for $ty {
            fn kind(&self) -> FieldKind {
                (**self).kind()
            }
            fn dim(&self) -> usize {
                (**self).dim()
            }
            fn score_batch(&self, xs: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
                (**self).score_batch(xs, t)
            }
            fn noise_batch(&self, xs: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
                (**self).noise_batch(xs, t)
            }
            fn native_noise(&self) -> bool {
                (**self).native_noise()
            }
            fn score(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
                (**self).score(x, t)
            }
            fn noise(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
                (**self).noise(x, t)
            }
            fn jacobian(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
                (**self).jacobian(x, t)
            }
        }
    )*};
}

forward_score_field!(&F, Box<F>, std::sync::Arc<F>);

/// Central-difference Jacobian `J[i][j] = d f_i / d x_j`.
pub fn finite_difference_jacobian<F>(f: F, x: &DVector<f64>, step: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let d = x.len();
    let mut jac = DMatrix::zeros(d, d);
    let mut probe = x.clone();
    for j in 0..d {
        probe[j] = x[j] + step;
        let fp = f(&probe);
        probe[j] = x[j] - step;
        let fm = f(&probe);
        probe[j] = x[j];
        jac.set_column(j, &((fp - fm) / (2.0 * step)));
    }
    jac
}

/// Analytic score of Gaussian data under the forward process.
#[derive(Debug, Clone)]
pub struct ExactGaussianScore<S> {
    data: GaussianData,
    sched: S,
}

impl<S: NoiseSchedule> ExactGaussianScore<S> {
    pub fn new(data: GaussianData, sched: S) -> Self {
        Self { data, sched }
    }

    pub fn data(&self) -> &GaussianData {
        &self.data
    }

    fn factor(&self, t: f64) -> (DVector<f64>, Cholesky<f64, Dyn>) {
        let (mean, cov) = self.data.marginal_moments(&self.sched, t);
        let chol = Cholesky::new(cov).expect("marginal covariance of valid data is SPD");
        (mean, chol)
    }
}

impl<S: NoiseSchedule> ScoreField for ExactGaussianScore<S> {
    fn kind(&self) -> FieldKind {
        FieldKind::ExactGaussian
    }

    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn score_batch(&self, xs: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        let (mean, chol) = self.factor(t);
        let mut centered = xs.clone();
        for mut col in centered.column_iter_mut() {
            col -= &mean;
        }
        -chol.solve(&centered)
    }

    fn noise_batch(&self, xs: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        self.score_batch(xs, t) * -self.sched.sigma(t)
    }

    fn jacobian(&self, _x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        -self.factor(t).1.inverse()
    }
}

/// The zero score; the PF-ODE reduces to its linear part.
#[derive(Debug, Clone, Copy)]
pub struct ZeroScore {
    pub dim: usize,
}

impl ScoreField for ZeroScore {
    fn kind(&self) -> FieldKind {
        FieldKind::Zero
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn score_batch(&self, xs: &DMatrix<f64>, _t: f64) -> DMatrix<f64> {
        DMatrix::zeros(self.dim, xs.ncols())
    }

    fn noise_batch(&self, xs: &DMatrix<f64>, _t: f64) -> DMatrix<f64> {
        DMatrix::zeros(self.dim, xs.ncols())
    }

    fn jacobian(&self, _x: &DVector<f64>, _t: f64) -> DMatrix<f64> {
        DMatrix::zeros(self.dim, self.dim)
    }
}
