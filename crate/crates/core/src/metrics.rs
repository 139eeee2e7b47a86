//! Error measurements: KDE + Monte-Carlo total variation, trajectory error
//! against a fine reference solve, log-log slope fits and score-field error
//! metrics.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::samplers::{drift_b_batch, initial_point, integrate_batch, SamplerRun, TimeGrid};
use crate::schedules::NoiseSchedule;
use crate::score_fields::{marginal_law, GaussianData, GaussianDensity, ScoreField};

/// A density that can be evaluated and sampled.
pub trait Density: Send + Sync {
    fn dim(&self) -> usize;
    fn pdf(&self, x: &[f64]) -> f64;
    fn sample_into(&self, rng: &mut dyn RngCore, out: &mut [f64]);
}

impl Density for GaussianDensity {
    fn dim(&self) -> usize {
        GaussianDensity::dim(self)
    }

    fn pdf(&self, x: &[f64]) -> f64 {
        GaussianDensity::pdf(self, x)
    }

    fn sample_into(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        out.copy_from_slice(self.sample(rng).as_slice());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthRule {
    /// `std_k * n^(-1/(d+4))` per dimension.
    Scott,
}

impl BandwidthRule {
    pub fn id(self) -> &'static str {
        match self {
            BandwidthRule::Scott => "scott",
        }
    }
}

/// Gaussian-kernel density estimate with a diagonal bandwidth.
#[derive(Debug, Clone)]
pub struct KdeModel {
    dim: usize,
    n: usize,
    bandwidths: Vec<f64>,
    /// Points divided by the bandwidth, one `Vec` per dimension.
    scaled: Vec<Vec<f64>>,
    norm: f64,
    rule: Option<BandwidthRule>,
}

pub fn kde_fit(samples: &[DVector<f64>], rule: BandwidthRule) -> Result<KdeModel> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("KDE needs at least 2 points, got {n}")));
    }
    let d = samples[0].len();
    let factor = match rule {
        BandwidthRule::Scott => (n as f64).powf(-1.0 / (d as f64 + 4.0)),
    };
    let mut bw = Vec::with_capacity(d);
    for k in 0..d {
        let mean = samples.iter().map(|p| p[k]).sum::<f64>() / n as f64;
        let var = samples.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        if !(var > 0.0) {
            return Err(Error::Degenerate(format!("KDE sample has zero variance in dimension {k}")));
        }
        bw.push(var.sqrt() * factor);
    }
    let mut model = KdeModel::with_bandwidths(samples, bw)?;
    model.rule = Some(rule);
    Ok(model)
}

impl KdeModel {
    pub fn with_bandwidths(samples: &[DVector<f64>], bandwidths: Vec<f64>) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::Degenerate(format!("KDE needs at least 2 points, got {n}")));
        }
        let d = bandwidths.len();
        if samples.iter().any(|p| p.len() != d) {
            return Err(Error::Shape {
                expected: d,
                got: samples.iter().map(|p| p.len()).find(|&l| l != d).unwrap_or(d),
            });
        }
        if bandwidths.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::Degenerate(format!("bandwidths must be positive, got {bandwidths:?}")));
        }
        if samples.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Degenerate("KDE sample contains non-finite values".into()));
        }
        let scaled = (0..d)
            .map(|k| samples.iter().map(|p| p[k] / bandwidths[k]).collect())
            .collect();
        let prod_h: f64 = bandwidths.iter().product();
        let norm = 1.0 / (n as f64 * prod_h * (2.0 * std::f64::consts::PI).powf(d as f64 / 2.0));
        Ok(Self {
            dim: d,
            n,
            bandwidths,
            scaled,
            norm,
            rule: None,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn rule(&self) -> Option<BandwidthRule> {
        self.rule
    }
}

impl Density for KdeModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn pdf(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        match self.dim {
            2 => {
                let (a, b) = (x[0] / self.bandwidths[0], x[1] / self.bandwidths[1]);
                for (&u, &v) in self.scaled[0].iter().zip(&self.scaled[1]) {
                    let (da, db) = (a - u, b - v);
                    acc += (-0.5 * (da * da + db * db)).exp();
                }
            }
            _ => {
                let y: Vec<f64> = x.iter().zip(&self.bandwidths).map(|(v, h)| v / h).collect();
                for i in 0..self.n {
                    let q: f64 = (0..self.dim).map(|k| (y[k] - self.scaled[k][i]).powi(2)).sum();
                    acc += (-0.5 * q).exp();
                }
            }
        }
        acc * self.norm
    }

    fn sample_into(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        let i = rng.gen_range(0..self.n);
        for k in 0..self.dim {
            let z: f64 = StandardNormal.sample(rng);
            out[k] = (self.scaled[k][i] + z) * self.bandwidths[k];
        }
    }
}

/// Monte-Carlo TV estimate. `value` is clamped to `[0, 1]`; `raw` is not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvEstimate {
    pub value: f64,
    pub raw: f64,
    pub std_error: f64,
    pub n_mc: usize,
    pub seed: u64,
}

pub const MIN_MC_POINTS: usize = 1000;
const MC_CHUNK: usize = 2048;

/// `TV(p, q) = 1/2 int |p - q|`, importance-sampled from `(p + q) / 2`.
///
/// Half of the points are drawn from each component (stratified), and each
/// contributes `|p - q| / (p + q)`, which is bounded by 1.
pub fn tv_monte_carlo(p: &dyn Density, q: &dyn Density, n_mc: usize, seed: u64) -> Result<TvEstimate> {
    if n_mc < MIN_MC_POINTS {
        return Err(Error::Config(format!("n_mc must be >= {MIN_MC_POINTS}, got {n_mc}")));
    }
    if p.dim() != q.dim() {
        return Err(Error::Shape {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    let d = p.dim();
    let n_p = n_mc / 2;
    let n_q = n_mc - n_p;
    // (stratum, chunk start, chunk len); stream ids are 2 * chunk + stratum
    let mut tasks = Vec::new();
    for (stratum, total) in [(0u64, n_p), (1u64, n_q)] {
        for (c, lo) in (0..total).step_by(MC_CHUNK).enumerate() {
            tasks.push((stratum, c as u64, (total - lo).min(MC_CHUNK)));
        }
    }
    let sums: Vec<(u64, f64, f64)> = tasks
        .into_par_iter()
        .map(|(stratum, c, len)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(2 * c + stratum);
            let src = if stratum == 0 { p } else { q };
            let mut y = vec![0.0; d];
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..len {
                src.sample_into(&mut rng, &mut y);
                let (a, b) = (p.pdf(&y), q.pdf(&y));
                let w = if a + b > 0.0 { (a - b).abs() / (a + b) } else { 0.0 };
                s1 += w;
                s2 += w * w;
            }
            (stratum, s1, s2)
        })
        .collect();
    let mut acc = [(0.0, 0.0); 2];
    for (stratum, s1, s2) in sums {
        acc[stratum as usize].0 += s1;
        acc[stratum as usize].1 += s2;
    }
    let stats = |(s1, s2): (f64, f64), n: usize| {
        let mean = s1 / n as f64;
        let var = if n > 1 { ((s2 - n as f64 * mean * mean) / (n - 1) as f64).max(0.0) } else { 0.0 };
        (mean, var / n as f64)
    };
    let (mp, vp) = stats(acc[0], n_p);
    let (mq, vq) = stats(acc[1], n_q);
    let raw = 0.5 * (mp + mq);
    Ok(TvEstimate {
        value: raw.clamp(0.0, 1.0),
        raw,
        std_error: 0.5 * (vp + vq).sqrt(),
        n_mc,
        seed,
    })
}

/// Ordinary least squares of `log(value)` on `log(h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
}

pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<LogLogFit> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!(
            "slope fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|&(h, v)| !(h > 0.0 && v > 0.0 && h.is_finite() && v.is_finite())) {
        return Err(Error::Degenerate("slope fit needs positive finite h and values".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all step sizes are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals = xs.iter().zip(&ys).map(|(x, y)| y - (intercept + slope * x)).collect();
    Ok(LogLogFit {
        slope,
        intercept,
        residuals,
    })
}

/// One row of a TV-versus-step-size sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub steps: usize,
    pub h: f64,
    pub tv: TvEstimate,
    /// Whether the point clears the estimator floor and enters the fit.
    pub included: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// TV between the target and a KDE of exact target draws.
    pub kde_floor: TvEstimate,
    /// Points need `tv >= floor_factor * kde_floor` to enter the fit.
    pub floor_factor: f64,
    /// Fit over the included points; `None` with fewer than three.
    pub fit: Option<LogLogFit>,
    /// Fit over every point, for context.
    pub fit_all: Option<LogLogFit>,
}

impl ConvergenceReport {
    /// `points` are `(T, tv)`; they must have strictly increasing `T`.
    pub fn build(points: Vec<(usize, TvEstimate)>, kde_floor: TvEstimate, floor_factor: f64) -> Result<Self> {
        if points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("step counts must be strictly increasing".into()));
        }
        let threshold = floor_factor * kde_floor.value;
        let rows: Vec<ConvergenceRow> = points
            .into_iter()
            .map(|(steps, tv)| ConvergenceRow {
                steps,
                h: 1.0 / steps as f64,
                tv,
                included: tv.value >= threshold && tv.value > 0.0,
            })
            .collect();
        let pick = |all: bool| -> Vec<(f64, f64)> {
            rows.iter()
                .filter(|r| all || r.included)
                .map(|r| (r.h, r.tv.value))
                .collect()
        };
        Ok(Self {
            fit: fit_loglog_slope(&pick(false)).ok(),
            fit_all: fit_loglog_slope(&pick(true)).ok(),
            rows,
            kde_floor,
            floor_factor,
        })
    }

    pub fn slope(&self) -> Option<f64> {
        self.fit.as_ref().map(|f| f.slope)
    }
}

/// Outcome of [`trajectory_global_error`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryError {
    pub steps: usize,
    pub ref_steps: usize,
    /// Max over probes and grid times of the Euclidean deviation.
    pub error: f64,
    /// Endpoint change when the reference resolution is halved.
    pub ref_shift: f64,
}

/// Classical RK4 on the full PF-ODE, written for `z = x / alpha(t)` so that
/// the linear drift is integrated exactly: `z' = B(t, alpha z) / alpha`.
/// Returns the states at every `stride`-th reference grid time, from `t = 1`.
fn reference_solve<F, S>(field: &F, sched: &S, x1: &DMatrix<f64>, ref_steps: usize, stride: usize) -> Vec<DMatrix<f64>>
where
    F: ScoreField + ?Sized,
    S: NoiseSchedule + ?Sized,
{
    let grid = TimeGrid::new(ref_steps, sched.t_min());
    let dt = -grid.step();
    let rhs = |t: f64, z: &DMatrix<f64>| -> DMatrix<f64> {
        let a = sched.alpha(t);
        drift_b_batch(field, sched, &(z * a), t) / a
    };
    let mut z = x1 / sched.alpha(grid.time(ref_steps));
    let mut out = vec![x1.clone()];
    for n in (1..=ref_steps).rev() {
        let t = grid.time(n);
        let t_half = t + 0.5 * dt;
        let k1 = rhs(t, &z);
        let k2 = rhs(t_half, &(&z + &k1 * (0.5 * dt)));
        let k3 = rhs(t_half, &(&z + &k2 * (0.5 * dt)));
        let k4 = rhs(grid.time(n - 1), &(&z + &k3 * dt));
        z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        if (ref_steps - (n - 1)) % stride == 0 {
            out.push(&z * sched.alpha(grid.time(n - 1)));
        }
    }
    out
}

/// Max deviation between the sampler and a fine RK4 reference over `n_probe`
/// seeded start points and every coarse grid time.
pub fn trajectory_global_error<F, S>(
    run: &SamplerRun,
    field: &F,
    sched: &S,
    ref_steps: usize,
    n_probe: usize,
    seed: u64,
) -> Result<TrajectoryError>
where
    F: ScoreField + ?Sized,
    S: NoiseSchedule + ?Sized,
{
    run.validate()?;
    let steps = run.steps;
    if ref_steps < 16 * steps || ref_steps % (2 * steps) != 0 {
        return Err(Error::Config(format!(
            "ref_steps must be >= 16 T and a multiple of 2 T (T = {steps}, got {ref_steps})"
        )));
    }
    if n_probe == 0 {
        return Err(Error::Config("n_probe must be >= 1".into()));
    }
    let dim = field.dim();
    let cols: Vec<_> = (0..n_probe).map(|i| initial_point(dim, seed, i as u64)).collect();
    let x1 = DMatrix::from_columns(&cols);
    let coarse = run.clone().with_trajectory(true);
    let (_, traj) = integrate_batch(&coarse, field, sched, x1.clone())?;
    let traj = traj.expect("trajectory was requested");

    let reference = reference_solve(field, sched, &x1, ref_steps, ref_steps / steps);
    let half = reference_solve(field, sched, &x1, ref_steps / 2, ref_steps / 2 / steps);
    let mut error: f64 = 0.0;
    for ((_, x), r) in traj.iter().zip(&reference) {
        for j in 0..n_probe {
            error = error.max((x.column(j) - r.column(j)).norm());
        }
    }
    let (r_end, h_end) = (reference.last().unwrap(), half.last().unwrap());
    let ref_shift = (0..n_probe)
        .map(|j| (r_end.column(j) - h_end.column(j)).norm())
        .fold(0.0, f64::max);
    if !error.is_finite() || !ref_shift.is_finite() {
        return Err(Error::Numeric("trajectory comparison produced non-finite values".into()));
    }
    if ref_shift > 0.01 * error {
        return Err(Error::ReferenceResolution { shift: ref_shift, error });
    }
    Ok(TrajectoryError {
        steps,
        ref_steps,
        error,
        ref_shift,
    })
}

/// `n` equally spaced times covering `[0, 1]`.
pub fn uniform_time_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

fn check_grid(grid: &[f64], n_mc: usize) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Config("time grid must be a non-empty subset of [0, 1]".into()));
    }
    if n_mc == 0 {
        return Err(Error::Config("n_mc must be >= 1".into()));
    }
    Ok(())
}

fn marginal_draws<S: NoiseSchedule + ?Sized>(
    data: &GaussianData,
    sched: &S,
    t: f64,
    n: usize,
    seed: u64,
    stream: u64,
) -> Result<DMatrix<f64>> {
    let law = marginal_law(data, sched, t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let cols: Vec<_> = (0..n).map(|_| law.density().sample(&mut rng)).collect();
    Ok(DMatrix::from_columns(&cols))
}

/// `sup_t (E_{x ~ q(., t)} |s_a - s_b|^2)^{1/2}` over `grid`.
pub fn epsilon_score_estimate<S: NoiseSchedule + ?Sized>(
    a: &dyn ScoreField,
    b: &dyn ScoreField,
    data: &GaussianData,
    sched: &S,
    grid: &[f64],
    n_mc: usize,
    seed: u64,
) -> Result<f64> {
    check_grid(grid, n_mc)?;
    let mut sup: f64 = 0.0;
    for (i, &t) in grid.iter().enumerate() {
        let xs = marginal_draws(data, sched, t, n_mc, seed, i as u64)?;
        let diff = a.score_batch(&xs, t) - b.score_batch(&xs, t);
        sup = sup.max((diff.norm_squared() / n_mc as f64).sqrt());
    }
    Ok(sup)
}

/// `sup_t E_{x ~ q(., t)} |J s_a - J s_b|_op` over `grid`.
pub fn epsilon_jacobian_estimate<S: NoiseSchedule + ?Sized>(
    a: &dyn ScoreField,
    b: &dyn ScoreField,
    data: &GaussianData,
    sched: &S,
    grid: &[f64],
    n_mc: usize,
    seed: u64,
) -> Result<f64> {
    check_grid(grid, n_mc)?;
    let mut sup: f64 = 0.0;
    for (i, &t) in grid.iter().enumerate() {
        let xs = marginal_draws(data, sched, t, n_mc, seed, i as u64)?;
        let mut acc = 0.0;
        for x in xs.column_iter() {
            let x = x.into_owned();
            let diff = a.jacobian(&x, t) - b.jacobian(&x, t);
            acc += operator_norm(&diff);
        }
        sup = sup.max(acc / n_mc as f64);
    }
    Ok(sup)
}

/// Largest singular value.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    m.singular_values().max()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreErrorReport {
    pub eps_score: f64,
    pub eps_jac: f64,
    pub n_mc: usize,
    pub time_grid: Vec<f64>,
}

pub fn score_error_report<S: NoiseSchedule + ?Sized>(
    a: &dyn ScoreField,
    b: &dyn ScoreField,
    data: &GaussianData,
    sched: &S,
    grid: &[f64],
    n_mc: usize,
    seed: u64,
) -> Result<ScoreErrorReport> {
    Ok(ScoreErrorReport {
        eps_score: epsilon_score_estimate(a, b, data, sched, grid, n_mc, seed)?,
        eps_jac: epsilon_jacobian_estimate(a, b, data, sched, grid, n_mc, seed)?,
        n_mc,
        time_grid: grid.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::adaptive_simpson;
    use crate::schedules::LinearBetaSchedule;
    use crate::score_fields::{ExactGaussianScore, FieldKind, ZeroScore};

    fn normal_cdf(x: f64) -> f64 {
        0.5 + adaptive_simpson(|u| (-0.5 * u * u).exp(), 0.0, x, 1e-13) / (2.0 * std::f64::consts::PI).sqrt()
    }

    fn gauss1(mean: f64, var: f64) -> GaussianDensity {
        GaussianDensity::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var)).unwrap()
    }

    #[test]
    fn kde_two_points() {
        let pts = vec![DVector::from_element(1, -1.0), DVector::from_element(1, 1.0)];
        let kde = KdeModel::with_bandwidths(&pts, vec![0.5]).unwrap();
        let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let expect = 0.5 * (phi(2.0) + phi(2.0)) / 0.5;
        assert!((kde.pdf(&[0.0]) - expect).abs() < 1e-15);
        for x in [0.3, 1.7, 4.0] {
            assert!((kde.pdf(&[x]) - kde.pdf(&[-x])).abs() < 1e-15);
        }
        let mass = adaptive_simpson(|x| kde.pdf(&[x]), -12.0, 12.0, 1e-12);
        assert!((mass - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kde_recovers_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<_> = (0..10_000)
            .map(|_| DVector::from_element(1, StandardNormal.sample(&mut rng)))
            .collect();
        let kde = kde_fit(&pts, BandwidthRule::Scott).unwrap();
        let target = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((kde.pdf(&[0.0]) / target - 1.0).abs() < 0.05);
    }

    #[test]
    fn scott_bandwidth_scaling() {
        // deterministic, identical spread: only n changes
        let make = |n: usize| -> Vec<DVector<f64>> {
            (0..n)
                .map(|i| {
                    let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                    DVector::from_vec(vec![s, -s])
                })
                .collect()
        };
        let small = kde_fit(&make(100), BandwidthRule::Scott).unwrap();
        let large = kde_fit(&make(6400), BandwidthRule::Scott).unwrap();
        let var = |n: usize| n as f64 / (n - 1) as f64;
        let ratio = large.bandwidths()[0] / small.bandwidths()[0] * (var(100) / var(6400)).sqrt();
        assert!((ratio - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kde_rejects_degenerate_input() {
        let pts = vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![1.0, 2.0])];
        assert!(matches!(kde_fit(&pts, BandwidthRule::Scott), Err(Error::Degenerate(_))));
        assert!(kde_fit(&pts[..1], BandwidthRule::Scott).is_err());
    }

    #[test]
    fn tv_identical_is_zero() {
        let q = GaussianData::benchmark().density();
        let est = tv_monte_carlo(&q, &q, 4000, 3).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn tv_shifted_normals() {
        let exact = 2.0 * normal_cdf(0.5) - 1.0;
        // trapezoid route on 1/2 |p - q|
        let (p, q) = (gauss1(0.0, 1.0), gauss1(1.0, 1.0));
        let n = 200_000;
        let (a, b) = (-12.0, 13.0);
        let dx = (b - a) / n as f64;
        let trap: f64 = (0..=n)
            .map(|i| {
                let x = a + i as f64 * dx;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * (p.pdf(&[x]) - q.pdf(&[x])).abs()
            })
            .sum::<f64>()
            * dx
            * 0.5;
        assert!((trap - exact).abs() < 1e-9);
        assert!((exact - 0.3829).abs() < 1e-4);
        let est = tv_monte_carlo(&p, &q, 100_000, 9).unwrap();
        assert!((est.value - exact).abs() < 0.01, "{est:?}");
        assert!((est.value - exact).abs() < 4.0 * est.std_error + 1e-3);
    }

    #[test]
    fn tv_estimates_agree_across_budgets() {
        let (p, q) = (gauss1(0.0, 1.0), gauss1(0.7, 2.0));
        let a = tv_monte_carlo(&p, &q, 10_000, 5).unwrap();
        let b = tv_monte_carlo(&p, &q, 40_000, 6).unwrap();
        let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        assert!((a.value - b.value).abs() < 3.0 * se);
        let swapped = tv_monte_carlo(&q, &p, 10_000, 5).unwrap();
        assert!((swapped.value - a.value).abs() < 3.0 * (2.0f64).sqrt() * a.std_error);
    }

    #[test]
    fn tv_is_deterministic_and_checks_budget() {
        let (p, q) = (gauss1(0.0, 1.0), gauss1(0.5, 1.0));
        assert_eq!(tv_monte_carlo(&p, &q, 5000, 1).unwrap(), tv_monte_carlo(&p, &q, 5000, 1).unwrap());
        assert!(tv_monte_carlo(&p, &q, 999, 1).is_err());
    }

    #[test]
    fn slope_fit_recovers_planted_slopes() {
        let hs = [0.5, 0.25, 0.125, 1.0 / 16.0, 1.0 / 32.0];
        for p in [1.0, 2.0, 3.0] {
            for c in [0.01, 3.7] {
                let pts: Vec<_> = hs.iter().map(|&h: &f64| (h, c * h.powf(p))).collect();
                let fit = fit_loglog_slope(&pts).unwrap();
                assert!((fit.slope - p).abs() < 1e-12);
                assert!((fit.intercept - f64::ln(c)).abs() < 1e-12);
                assert!(fit.residuals.iter().all(|r| r.abs() < 1e-12));
            }
        }
        assert!(fit_loglog_slope(&[(0.1, 1.0), (0.1, 2.0), (0.1, 3.0)]).is_err());
        assert!(fit_loglog_slope(&[(0.1, 1.0), (0.2, 2.0)]).is_err());
        assert!(fit_loglog_slope(&[(0.1, 1.0), (0.2, 0.0), (0.3, 1.0)]).is_err());
    }

    #[test]
    fn convergence_report_excludes_floor_points() {
        let tv = |v: f64| TvEstimate {
            value: v,
            raw: v,
            std_error: 0.0,
            n_mc: 1000,
            seed: 0,
        };
        let pts = vec![(8, tv(0.64)), (16, tv(0.16)), (32, tv(0.04)), (64, tv(0.02))];
        let rep = ConvergenceReport::build(pts, tv(0.01), 3.0).unwrap();
        assert_eq!(rep.rows.iter().filter(|r| r.included).count(), 3);
        assert!((rep.slope().unwrap() - 2.0).abs() < 1e-12);
        assert!(rep.fit_all.is_some());
        assert!(ConvergenceReport::build(vec![(16, tv(0.1)), (8, tv(0.2))], tv(0.0), 3.0).is_err());
    }

    #[test]
    fn zero_field_trajectory_error_vanishes() {
        let sched = LinearBetaSchedule::default();
        let field = ZeroScore { dim: 2 };
        for steps in [4, 16] {
            let run = SamplerRun::strang_midpoint(steps);
            let e = trajectory_global_error(&run, &field, &sched, 64 * steps, 4, 1).unwrap();
            assert!(e.error <= 1e-12, "{e:?}");
        }
    }

    #[test]
    fn trajectory_error_rejects_coarse_reference() {
        let sched = LinearBetaSchedule::default();
        let run = SamplerRun::strang_midpoint(8);
        let field = ZeroScore { dim: 2 };
        assert!(trajectory_global_error(&run, &field, &sched, 64, 2, 0).is_err());
        assert!(trajectory_global_error(&run, &field, &sched, 8 * 17, 2, 0).is_err());
    }

    struct Shifted<'a> {
        inner: &'a dyn ScoreField,
        shift: DVector<f64>,
    }

    impl ScoreField for Shifted<'_> {
        fn kind(&self) -> FieldKind {
            FieldKind::Custom
        }
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn score_batch(&self, xs: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
            let mut s = self.inner.score_batch(xs, t);
            for mut c in s.column_iter_mut() {
                c += &self.shift;
            }
            s
        }
        fn noise_batch(&self, xs: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
            self.inner.noise_batch(xs, t)
        }
        fn jacobian(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
            self.inner.jacobian(x, t)
        }
    }

    struct Scaled<'a> {
        inner: &'a dyn ScoreField,
        factor: f64,
    }

    impl ScoreField for Scaled<'_> {
        fn kind(&self) -> FieldKind {
            FieldKind::Custom
        }
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn score_batch(&self, xs: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
            self.inner.score_batch(xs, t) * self.factor
        }
        fn noise_batch(&self, xs: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
            self.inner.noise_batch(xs, t) * self.factor
        }
        fn jacobian(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
            self.inner.jacobian(x, t) * self.factor
        }
    }

    #[test]
    fn score_errors_of_exact_field() {
        let data = GaussianData::benchmark();
        let sched = LinearBetaSchedule::default();
        let exact = ExactGaussianScore::new(data.clone(), sched);
        let grid = uniform_time_grid(21);
        let rep = score_error_report(&exact, &exact, &data, &sched, &grid, 64, 3).unwrap();
        assert_eq!((rep.eps_score, rep.eps_jac), (0.0, 0.0));

        let c = DVector::from_vec(vec![0.3, -0.4]);
        let shifted = Shifted {
            inner: &exact,
            shift: c.clone(),
        };
        let e = epsilon_score_estimate(&shifted, &exact, &data, &sched, &grid, 64, 3).unwrap();
        assert!((e - c.norm()).abs() < 1e-12);

        let delta = 0.05;
        let scaled = Scaled {
            inner: &exact,
            factor: 1.0 + delta,
        };
        let e = epsilon_jacobian_estimate(&scaled, &exact, &data, &sched, &grid, 16, 4).unwrap();
        // closed form: largest eigenvalue of (alpha^2 Sigma + sigma^2 I)^{-1}
        let expect = grid
            .iter()
            .map(|&t| {
                let (a, s) = (sched.alpha(t), sched.sigma(t));
                let m = data.sigma() * (a * a) + DMatrix::identity(2, 2) * (s * s);
                let (p, q, r) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
                let lmin = 0.5 * (p + r) - (0.25 * (p - r).powi(2) + q * q).sqrt();
                delta / lmin
            })
            .fold(0.0, f64::max);
        assert!((e - expect).abs() < 1e-10 * expect, "{e} vs {expect}");
        assert!(epsilon_score_estimate(&exact, &exact, &data, &sched, &[], 4, 0).is_err());
        assert!(epsilon_score_estimate(&exact, &exact, &data, &sched, &[1.5], 4, 0).is_err());
    }
}
