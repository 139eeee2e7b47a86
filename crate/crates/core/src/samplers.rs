//! Backward integration of the probability-flow ODE by operator splitting.
//!
//! The PF-ODE `x' = f(t) x + B(t, x)` is split into its linear part, whose
//! flow is the exact multiplier `alpha(t) / alpha(s)`, and the score-driven part
//! `B(t, x) = -0.5 g^2(t) s(x, t)`, advanced by an explicit Runge-Kutta
//! tableau. A [`SplittingScheme`] lists the fractions of the step given to
//! each linear / nonlinear sub-flow, alternating linear first.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedules::NoiseSchedule;
use crate::score_fields::{as_column, first_column, ScoreField};

/// Below this sigma the noise view `g^2 / (2 sigma) eps` is not used.
pub const SIGMA_FLOOR: f64 = 1e-6;

const SUM_TOL: f64 = 1e-14;
const CLOCK_TOL: f64 = 1e-12;

/// Fractions `a_1..a_K` (linear) and `b_1..b_K` (nonlinear) of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplittingScheme {
    pub name: String,
    pub linear: Vec<f64>,
    pub nonlinear: Vec<f64>,
}

impl SplittingScheme {
    pub fn new(name: impl Into<String>, linear: Vec<f64>, nonlinear: Vec<f64>) -> Result<Self> {
        let s = Self {
            name: name.into(),
            linear,
            nonlinear,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.linear.is_empty() || self.linear.len() != self.nonlinear.len() {
            return Err(Error::Config(format!(
                "scheme {}: need K >= 1 linear and nonlinear fractions of equal length",
                self.name
            )));
        }
        for (label, v) in [("linear", &self.linear), ("nonlinear", &self.nonlinear)] {
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::Config(format!("scheme {}: non-finite {label} fraction", self.name)));
            }
            let sum: f64 = v.iter().sum();
            if (sum - 1.0).abs() > SUM_TOL {
                return Err(Error::Config(format!(
                    "scheme {}: {label} fractions sum to {sum}, expected 1",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.linear.len()
    }

    /// Full linear step, then one full nonlinear step.
    pub fn lie() -> Self {
        Self {
            name: "lie".into(),
            linear: vec![1.0],
            nonlinear: vec![1.0],
        }
    }

    /// Half linear, full nonlinear, half linear.
    pub fn strang() -> Self {
        Self {
            name: "strang".into(),
            linear: vec![0.5, 0.5],
            nonlinear: vec![1.0, 0.0],
        }
    }

    /// Triple-jump composition of the symmetric nonlinear/linear/nonlinear
    /// kernel with weights `w1 = 1 / (2 - 2^(1/3))`, `w0 = 1 - 2 w1`.
    ///
    /// The nonlinear sub-flow sits on the outside so its clock never leaves
    /// `[t_n - h, t_n]`; the negative fraction lands on the linear sub-flow,
    /// which is exact for any time argument.
    pub fn yoshida4() -> Self {
        let w1 = 1.0 / (2.0 - 2f64.cbrt());
        let w0 = 1.0 - 2.0 * w1;
        Self {
            name: "yoshida4".into(),
            linear: vec![0.0, w1, w0, w1],
            nonlinear: vec![0.5 * w1, 0.5 * (w1 + w0), 0.5 * (w0 + w1), 0.5 * w1],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "lie" => Ok(Self::lie()),
            "strang" => Ok(Self::strang()),
            "yoshida4" => Ok(Self::yoshida4()),
            other => Err(Error::Config(format!("unknown splitting scheme {other:?}"))),
        }
    }
}

/// Explicit Runge-Kutta tableau (strictly lower-triangular stage matrix).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RkTableau {
    pub name: String,
    pub nodes: Vec<f64>,
    pub matrix: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub order: u32,
}

impl RkTableau {
    pub fn new(
        name: impl Into<String>,
        nodes: Vec<f64>,
        matrix: Vec<Vec<f64>>,
        weights: Vec<f64>,
        order: u32,
    ) -> Result<Self> {
        let t = Self {
            name: name.into(),
            nodes,
            matrix,
            weights,
            order,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.weights.len();
        let bad = |msg: &str| Err(Error::Config(format!("tableau {}: {msg}", self.name)));
        if s == 0 || self.nodes.len() != s || self.matrix.len() != s {
            return bad("stage count mismatch");
        }
        if self.nodes[0] != 0.0 {
            return bad("first node must be 0");
        }
        for (i, row) in self.matrix.iter().enumerate() {
            if row.len() != i {
                return bad("stage matrix must be strictly lower triangular (row i has i entries)");
            }
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return bad("weights must sum to 1");
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.weights.len()
    }

    pub fn euler() -> Self {
        Self {
            name: "euler".into(),
            nodes: vec![0.0],
            matrix: vec![vec![]],
            weights: vec![1.0],
            order: 1,
        }
    }

    pub fn midpoint() -> Self {
        Self {
            name: "midpoint".into(),
            nodes: vec![0.0, 0.5],
            matrix: vec![vec![], vec![0.5]],
            weights: vec![0.0, 1.0],
            order: 2,
        }
    }

    pub fn heun() -> Self {
        Self {
            name: "heun".into(),
            nodes: vec![0.0, 1.0],
            matrix: vec![vec![], vec![1.0]],
            weights: vec![0.5, 0.5],
            order: 2,
        }
    }

    pub fn rk4() -> Self {
        Self {
            name: "rk4".into(),
            nodes: vec![0.0, 0.5, 0.5, 1.0],
            matrix: vec![vec![], vec![0.5], vec![0.0, 0.5], vec![0.0, 0.0, 1.0]],
            weights: vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            order: 4,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "euler" => Ok(Self::euler()),
            "midpoint" => Ok(Self::midpoint()),
            "heun" => Ok(Self::heun()),
            "rk4" => Ok(Self::rk4()),
            other => Err(Error::Config(format!("unknown RK tableau {other:?}"))),
        }
    }
}

/// Nonlinear drift `B(t, x) = -0.5 g^2(t) s(x, t) = g^2(t) / (2 sigma(t)) eps(x, t)`.
pub fn drift_b<F, S>(field: &F, sched: &S, x: &DVector<f64>, t: f64) -> DVector<f64>
where
    F: ScoreField + ?Sized,
    S: NoiseSchedule + ?Sized,
{
    first_column(drift_b_batch(field, sched, &as_column(x), t))
}

/// [`drift_b`] applied to every column of `xs`.
pub fn drift_b_batch<F, S>(field: &F, sched: &S, xs: &DMatrix<f64>, t: f64) -> DMatrix<f64>
where
    F: ScoreField + ?Sized,
    S: NoiseSchedule + ?Sized,
{
    let g2 = sched.g2(t);
    let sigma = sched.sigma(t);
    if field.native_noise() && sigma >= SIGMA_FLOOR {
        field.noise_batch(xs, t) * (g2 / (2.0 * sigma))
    } else {
        field.score_batch(xs, t) * (-0.5 * g2)
    }
}

/// Integrates the nonlinear sub-flow `x' = B(t, x)` from `t` to `t + dt`
/// with one step of `tableau`. Backward marching uses `dt < 0`.
pub fn rk_advance<F, S>(
    tableau: &RkTableau,
    field: &F,
    sched: &S,
    y: &DVector<f64>,
    t: f64,
    dt: f64,
) -> DVector<f64>
where
    F: ScoreField + ?Sized,
    S: NoiseSchedule + ?Sized,
{
    first_column(rk_advance_batch(tableau, field, sched, &as_column(y), t, dt))
}

pub fn rk_advance_batch<F, S>(
    tableau: &RkTableau,
    field: &F,
    sched: &S,
    y: &DMatrix<f64>,
    t: f64,
    dt: f64,
) -> DMatrix<f64>
where
    F: ScoreField + ?Sized,
    S: NoiseSchedule + ?Sized,
{
    if dt == 0.0 {
        return y.clone();
    }
    let mut k: Vec<DMatrix<f64>> = Vec::with_capacity(tableau.stages());
    for (i, row) in tableau.matrix.iter().enumerate() {
        let mut yi = y.clone();
        for (aij, kj) in row.iter().zip(&k) {
            if *aij != 0.0 {
                yi += kj * (aij * dt);
            }
        }
        k.push(drift_b_batch(field, sched, &yi, t + tableau.nodes[i] * dt));
    }
    let mut incr = DMatrix::zeros(y.nrows(), y.ncols());
    for (bi, ki) in tableau.weights.iter().zip(&k) {
        incr += ki * *bi;
    }
    y + incr * dt
}

/// One Strang step `t_n -> t_n - h`: half linear, midpoint RK2 on the
/// nonlinear flow over the full step, half linear.
pub fn strang_step<F, S>(field: &F, sched: &S, x_n: &DVector<f64>, t_n: f64, h: f64) -> DVector<f64>
where
    F: ScoreField + ?Sized,
    S: NoiseSchedule + ?Sized,
{
    let t_half = t_n - 0.5 * h;
    let t_prev = t_n - h;
    let x_star = x_n * sched.linear_flow(t_half, t_n);
    let x_star2 = rk_advance(&RkTableau::midpoint(), field, sched, &x_star, t_n, -h);
    x_star2 * sched.linear_flow(t_prev, t_half)
}

/// The same Strang step written as a single expression:
/// `m_f(t_{n-1}, t_n) x_n - h m_f(t_{n-1}, t_{n-1/2}) B(t_{n-1/2}, p)` with
/// `p = m_f(t_{n-1/2}, t_n) x_n - (h/2) B(t_n, m_f(t_{n-1/2}, t_n) x_n)`.
pub fn strang_step_closed_form<F, S>(
    field: &F,
    sched: &S,
    x_n: &DVector<f64>,
    t_n: f64,
    h: f64,
) -> DVector<f64>
where
    F: ScoreField + ?Sized,
    S: NoiseSchedule + ?Sized,
{
    let t_half = t_n - 0.5 * h;
    let t_prev = t_n - h;
    let lifted = x_n * sched.linear_flow(t_half, t_n);
    let p = &lifted - drift_b(field, sched, &lifted, t_n) * (0.5 * h);
    x_n * sched.linear_flow(t_prev, t_n)
        - drift_b(field, sched, &p, t_half) * (h * sched.linear_flow(t_prev, t_half))
}

/// One Lie step: full linear flow, then one explicit-Euler nonlinear step.
pub fn lie_step<F, S>(field: &F, sched: &S, x_n: &DVector<f64>, t_n: f64, h: f64) -> DVector<f64>
where
    F: ScoreField + ?Sized,
    S: NoiseSchedule + ?Sized,
{
    let x_star = x_n * sched.linear_flow(t_n - h, t_n);
    rk_advance(&RkTableau::euler(), field, sched, &x_star, t_n, -h)
}

/// Generic K-stage composition step `t_n -> t_n - h`.
///
/// Stage `m` multiplies by the exact linear flow over the fraction `a_m`,
/// then advances the nonlinear flow by `b_m h` with `tableau`, each operator
/// running on its own clock. Nonlinear clocks must stay inside `[t_n - h, t_n]`.
pub fn composition_step<F, S>(
    scheme: &SplittingScheme,
    tableau: &RkTableau,
    field: &F,
    sched: &S,
    x_n: &DVector<f64>,
    t_n: f64,
    h: f64,
) -> Result<DVector<f64>>
where
    F: ScoreField + ?Sized,
    S: NoiseSchedule + ?Sized,
{
    composition_step_batch(scheme, tableau, field, sched, &as_column(x_n), t_n, h).map(first_column)
}

pub fn composition_step_batch<F, S>(
    scheme: &SplittingScheme,
    tableau: &RkTableau,
    field: &F,
    sched: &S,
    xs: &DMatrix<f64>,
    t_n: f64,
    h: f64,
) -> Result<DMatrix<f64>>
where
    F: ScoreField + ?Sized,
    S: NoiseSchedule + ?Sized,
{
    let mut x = xs.clone();
    let mut lin_offset = 0.0;
    let mut nl_offset = 0.0;
    for (&a, &b) in scheme.linear.iter().zip(&scheme.nonlinear) {
        if a != 0.0 {
            let from = t_n - lin_offset * h;
            lin_offset += a;
            let to = t_n - lin_offset * h;
            x *= sched.linear_flow(to, from);
        }
        if b != 0.0 {
            let start = t_n - nl_offset * h;
            let dt = -(b * h);
            for c in &tableau.nodes {
                let frac = nl_offset + c * b;
                let time = start + c * dt;
                if !(-CLOCK_TOL..=1.0 + CLOCK_TOL).contains(&frac) || !(0.0..=1.0).contains(&time) {
                    return Err(Error::Config(format!(
                        "scheme {} with tableau {}: nonlinear stage time {time} leaves [{}, {t_n}]",
                        scheme.name,
                        tableau.name,
                        t_n - h,
                    )));
                }
            }
            x = rk_advance_batch(tableau, field, sched, &x, start, dt);
            nl_offset += b;
        }
    }
    Ok(x)
}

/// Configuration of one backward sweep from `t = 1` to `t_min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerRun {
    pub steps: usize,
    pub scheme: SplittingScheme,
    pub tableau: RkTableau,
    #[serde(default)]
    pub record_trajectory: bool,
}

impl SamplerRun {
    pub fn new(steps: usize, scheme: SplittingScheme, tableau: RkTableau) -> Result<Self> {
        let run = Self {
            steps,
            scheme,
            tableau,
            record_trajectory: false,
        };
        run.validate()?;
        Ok(run)
    }

    pub fn strang_midpoint(steps: usize) -> Self {
        Self {
            steps,
            scheme: SplittingScheme::strang(),
            tableau: RkTableau::midpoint(),
            record_trajectory: false,
        }
    }

    pub fn lie_euler(steps: usize) -> Self {
        Self {
            steps,
            scheme: SplittingScheme::lie(),
            tableau: RkTableau::euler(),
            record_trajectory: false,
        }
    }

    pub fn yoshida_rk4(steps: usize) -> Self {
        Self {
            steps,
            scheme: SplittingScheme::yoshida4(),
            tableau: RkTableau::rk4(),
            record_trajectory: false,
        }
    }

    pub fn with_trajectory(mut self, record: bool) -> Self {
        self.record_trajectory = record;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("step count T must be >= 1".into()));
        }
        self.scheme.validate()?;
        self.tableau.validate()
    }
}

/// Uniform grid `t_k = t_min + (1 - t_min) k / T`, which is exactly `k / T`
/// when `t_min = 0`.
#[derive(Debug, Clone, Copy)]
pub struct TimeGrid {
    pub steps: usize,
    pub t_min: f64,
}

impl TimeGrid {
    pub fn new(steps: usize, t_min: f64) -> Self {
        Self { steps, t_min }
    }

    pub fn step(&self) -> f64 {
        (1.0 - self.t_min) / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if self.t_min == 0.0 {
            k as f64 / self.steps as f64
        } else {
            self.t_min + (1.0 - self.t_min) * (k as f64 / self.steps as f64)
        }
    }
}

/// A state on the time grid.
pub type TrajectoryPoint = (f64, DVector<f64>);

/// Particles integrated together as one matrix in [`generate_samples`].
pub const PARTICLE_CHUNK: usize = 256;

/// Integrates one particle from `t = 1` down to `t_min`; optionally returns
/// the states at every grid time, starting with `t = 1`.
pub fn integrate_particle<F, S>(
    run: &SamplerRun,
    field: &F,
    sched: &S,
    x_start: DVector<f64>,
) -> Result<(DVector<f64>, Option<Vec<TrajectoryPoint>>)>
where
    F: ScoreField + ?Sized,
    S: NoiseSchedule + ?Sized,
{
    let (end, traj) = integrate_batch(run, field, sched, as_column(&x_start))?;
    let traj = traj.map(|tr| tr.into_iter().map(|(t, m)| (t, first_column(m))).collect());
    Ok((first_column(end), traj))
}

/// Integrates the columns of `x_start` from `t = 1` down to `t_min`.
pub fn integrate_batch<F, S>(
    run: &SamplerRun,
    field: &F,
    sched: &S,
    x_start: DMatrix<f64>,
) -> Result<(DMatrix<f64>, Option<Vec<(f64, DMatrix<f64>)>>)>
where
    F: ScoreField + ?Sized,
    S: NoiseSchedule + ?Sized,
{
    let grid = TimeGrid::new(run.steps, sched.t_min());
    let h = grid.step();
    let mut traj = run
        .record_trajectory
        .then(|| vec![(grid.time(run.steps), x_start.clone())]);
    let mut x = x_start;
    for n in (1..=run.steps).rev() {
        let t_n = grid.time(n);
        x = composition_step_batch(&run.scheme, &run.tableau, field, sched, &x, t_n, h)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "particle state became non-finite stepping from t={t_n}"
            )));
        }
        if let Some(tr) = traj.as_mut() {
            tr.push((grid.time(n - 1), x.clone()));
        }
    }
    Ok((x, traj))
}

/// Draws a standard-normal start point from the counter-based stream
/// `(seed, index)`.
pub fn initial_point(dim: usize, seed: u64, index: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    DVector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(&mut rng)))
}

/// Generated points (and trajectories when requested).
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub dim: usize,
    pub points: Vec<DVector<f64>>,
    pub trajectories: Option<Vec<Vec<TrajectoryPoint>>>,
}

/// Draws `n` start points `x_T ~ N(0, I)` and integrates them backward.
///
/// Each particle owns its RNG stream and particles are integrated in fixed
/// chunks of [`PARTICLE_CHUNK`], so output does not depend on the thread count.
pub fn generate_samples<F, S>(
    run: &SamplerRun,
    field: &F,
    sched: &S,
    n: usize,
    seed: u64,
) -> Result<SampleSet>
where
    F: ScoreField + ?Sized,
    S: NoiseSchedule + ?Sized,
{
    run.validate()?;
    if n == 0 {
        return Err(Error::Config("sample count must be >= 1".into()));
    }
    let dim = field.dim();
    let chunks: Vec<_> = (0..n)
        .step_by(PARTICLE_CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|lo| {
            let hi = (lo + PARTICLE_CHUNK).min(n);
            let cols: Vec<_> = (lo..hi).map(|i| initial_point(dim, seed, i as u64)).collect();
            integrate_batch(run, field, sched, DMatrix::from_columns(&cols))
        })
        .collect::<Result<_>>()?;
    let mut points = Vec::with_capacity(n);
    let mut trajectories = run.record_trajectory.then(|| Vec::with_capacity(n));
    for (end, traj) in chunks {
        points.extend(end.column_iter().map(|c| c.into_owned()));
        if let (Some(all), Some(traj)) = (trajectories.as_mut(), traj) {
            for j in 0..end.ncols() {
                all.push(traj.iter().map(|(t, m)| (*t, m.column(j).into_owned())).collect());
            }
        }
    }
    Ok(SampleSet {
        dim,
        points,
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::LinearBetaSchedule;
    use crate::score_fields::{ExactGaussianScore, FieldKind, GaussianData, ZeroScore};
    use rand::Rng;

    fn sched() -> LinearBetaSchedule {
        LinearBetaSchedule::default()
    }

    fn exact() -> ExactGaussianScore<LinearBetaSchedule> {
        ExactGaussianScore::new(GaussianData::benchmark(), sched())
    }

    /// alpha == 1 so the linear flow is the identity.
    struct FlatSchedule;

    impl NoiseSchedule for FlatSchedule {
        fn log_alpha(&self, _t: f64) -> f64 {
            0.0
        }
        fn drift_rate(&self, _t: f64) -> f64 {
            0.0
        }
        fn sigma(&self, t: f64) -> f64 {
            0.2 + t
        }
        fn g2(&self, t: f64) -> f64 {
            1.0 + t * t
        }
    }

    /// Constant drift `B = c` (score = -2c / g^2).
    struct ConstantDrift(DVector<f64>, LinearBetaSchedule);

    impl ScoreField for ConstantDrift {
        fn kind(&self) -> FieldKind {
            FieldKind::Custom
        }
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn score_batch(&self, xs: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
            let col = &self.0 * (-2.0 / self.1.g2(t));
            DMatrix::from_fn(xs.nrows(), xs.ncols(), |i, _| col[i])
        }
        fn noise_batch(&self, xs: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
            self.score_batch(xs, t) * -self.1.sigma(t)
        }
    }

    /// `B(t, x) = x` under `FlatSchedule`'s g^2.
    struct IdentityDrift;

    impl ScoreField for IdentityDrift {
        fn kind(&self) -> FieldKind {
            FieldKind::Custom
        }
        fn dim(&self) -> usize {
            1
        }
        fn score_batch(&self, xs: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
            xs * (-2.0 / FlatSchedule.g2(t))
        }
        fn noise_batch(&self, xs: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
            self.score_batch(xs, t) * -FlatSchedule.sigma(t)
        }
    }

    fn random_state(rng: &mut impl Rng, d: usize) -> DVector<f64> {
        DVector::from_iterator(d, (0..d).map(|_| rng.gen_range(-3.0..3.0)))
    }

    #[test]
    fn preset_sums() {
        for s in [SplittingScheme::lie(), SplittingScheme::strang(), SplittingScheme::yoshida4()] {
            s.validate().unwrap();
        }
        for t in [RkTableau::euler(), RkTableau::midpoint(), RkTableau::heun(), RkTableau::rk4()] {
            t.validate().unwrap();
        }
        assert!(SplittingScheme::new("bad", vec![0.5, 0.4], vec![1.0, 0.0]).is_err());
        assert!(RkTableau::new("bad", vec![0.1], vec![vec![]], vec![1.0], 1).is_err());
        assert!(RkTableau::new("bad", vec![0.0, 1.0], vec![vec![], vec![1.0]], vec![0.4, 0.5], 2).is_err());
    }

    #[test]
    fn drift_zero_cases() {
        let s = sched();
        let z = ZeroScore { dim: 2 };
        let x = DVector::from_vec(vec![0.3, -1.2]);
        assert_eq!(drift_b(&z, &s, &x, 0.4), DVector::zeros(2));
        let f = exact();
        for i in 0..=10 {
            let t = i as f64 / 10.0;
            let mode = f.data().mu() * s.alpha(t);
            assert!(drift_b(&f, &s, &mode, t).amax() < 1e-14);
        }
    }

    #[test]
    fn drift_views_agree() {
        let s = sched();
        let f = exact();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let t: f64 = rng.gen();
            if s.sigma(t) <= 1e-3 {
                continue;
            }
            let x = random_state(&mut rng, 2);
            let via_noise = f.noise(&x, t) * (s.g2(t) / (2.0 * s.sigma(t)));
            let via_score = drift_b(&f, &s, &x, t);
            assert!((via_noise - via_score).amax() < 1e-10);
        }
    }

    #[test]
    fn rk_advance_basics() {
        let s = sched();
        let c = DVector::from_vec(vec![0.7, -0.4]);
        let field = ConstantDrift(c.clone(), s);
        let y = DVector::from_vec(vec![1.0, 2.0]);
        for tab in [RkTableau::euler(), RkTableau::midpoint(), RkTableau::heun(), RkTableau::rk4()] {
            assert_eq!(rk_advance(&tab, &field, &s, &y, 0.5, 0.0), y);
            let dt = -0.03;
            let out = rk_advance(&tab, &field, &s, &y, 0.5, dt);
            assert!((out - (&y + &c * dt)).amax() < 1e-14, "{}", tab.name);
        }
    }

    #[test]
    fn midpoint_matches_taylor_of_exp() {
        // x' = x backward by h: y * (1 - h + h^2/2) exactly, exp(-h) to O(h^3)
        let y = DVector::from_vec(vec![1.3]);
        for h in [0.1, 0.05, 0.025] {
            let out = rk_advance(&RkTableau::midpoint(), &IdentityDrift, &FlatSchedule, &y, 0.5, -h);
            let taylor = 1.3 * (1.0 - h + 0.5 * h * h);
            assert!((out[0] - taylor).abs() < 1e-14);
            assert!((out[0] - 1.3 * (-h as f64).exp()).abs() < 1.3 * h * h * h / 6.0 + 1e-15);
        }
    }

    #[test]
    fn zero_field_is_pure_linear_flow() {
        let s = sched();
        let z = ZeroScore { dim: 2 };
        let x = DVector::from_vec(vec![0.4, -0.9]);
        let (t_n, h) = (0.75, 0.125);
        let expected = &x * (s.alpha(t_n - h) / s.alpha(t_n));
        let st = strang_step(&z, &s, &x, t_n, h);
        let li = lie_step(&z, &s, &x, t_n, h);
        assert!((&st - &expected).amax() < 1e-14);
        assert!((&st - &li).amax() < 1e-14);
        for scheme in [SplittingScheme::lie(), SplittingScheme::strang(), SplittingScheme::yoshida4()] {
            let out = composition_step(&scheme, &RkTableau::rk4(), &z, &s, &x, t_n, h).unwrap();
            assert!((out - &expected).amax() < 1e-13, "{}", scheme.name);
        }
    }

    #[test]
    fn flat_schedule_reduces_to_plain_rk() {
        let field = IdentityDrift;
        let x = DVector::from_vec(vec![0.8]);
        let (t_n, h) = (0.6, 0.1);
        let st = strang_step(&field, &FlatSchedule, &x, t_n, h);
        let mid = rk_advance(&RkTableau::midpoint(), &field, &FlatSchedule, &x, t_n, -h);
        assert_eq!(st, mid);
        let li = lie_step(&field, &FlatSchedule, &x, t_n, h);
        assert!((li - (&x - &x * h)).amax() < 1e-15);
    }

    #[test]
    fn closed_form_matches_five_line_update() {
        let s = sched();
        let f = exact();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let steps = rng.gen_range(1..=256usize);
            let n = rng.gen_range(1..=steps);
            let (t_n, h) = (n as f64 / steps as f64, 1.0 / steps as f64);
            let x = random_state(&mut rng, 2);
            let a = strang_step(&f, &s, &x, t_n, h);
            let b = strang_step_closed_form(&f, &s, &x, t_n, h);
            assert!((&a - &b).amax() <= 1e-12 * a.amax().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn presets_are_bitwise_equal_to_dedicated_steps() {
        let s = sched();
        let f = exact();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..500 {
            let steps = rng.gen_range(1..=128usize);
            let n = rng.gen_range(1..=steps);
            let (t_n, h) = (n as f64 / steps as f64, 1.0 / steps as f64);
            let x = random_state(&mut rng, 2);
            let st = composition_step(&SplittingScheme::strang(), &RkTableau::midpoint(), &f, &s, &x, t_n, h).unwrap();
            assert_eq!(st, strang_step(&f, &s, &x, t_n, h));
            let li = composition_step(&SplittingScheme::lie(), &RkTableau::euler(), &f, &s, &x, t_n, h).unwrap();
            assert_eq!(li, lie_step(&f, &s, &x, t_n, h));
        }
    }

    #[test]
    fn composition_rejects_clock_outside_step() {
        let s = sched();
        let f = exact();
        let x = DVector::from_vec(vec![0.1, 0.2]);
        let bad = SplittingScheme::new("overshoot", vec![0.5, 0.5], vec![1.5, -0.5]).unwrap();
        let err = composition_step(&bad, &RkTableau::midpoint(), &f, &s, &x, 0.5, 0.1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    /// `d = 1`, `mu = 0`, `Sigma = 1`: the marginal stays N(0, 1), the score is
    /// `-x` and the PF-ODE is `x' = 0`, so the exact solution is constant.
    fn linear_probe() -> ExactGaussianScore<LinearBetaSchedule> {
        let data = GaussianData::from_rows(&[0.0], &[vec![1.0]]).unwrap();
        ExactGaussianScore::new(data, sched())
    }

    fn probe_error(run: &SamplerRun) -> f64 {
        let f = linear_probe();
        let x1 = DVector::from_vec(vec![1.0]);
        let (x0, _) = integrate_particle(run, &f, &sched(), x1.clone()).unwrap();
        (x0[0] - x1[0]).abs()
    }

    #[test]
    fn strang_local_error_is_third_order() {
        let f = linear_probe();
        let s = sched();
        let x = DVector::from_vec(vec![1.0]);
        let errs: Vec<f64> = [1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0]
            .iter()
            .map(|&h| (strang_step(&f, &s, &x, 1.0, h)[0] - 1.0).abs())
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((7.0..9.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn probe_global_orders() {
        let ratio = |mk: fn(usize) -> SamplerRun, t: usize| probe_error(&mk(t)) / probe_error(&mk(2 * t));
        let lie = ratio(SamplerRun::lie_euler, 256);
        assert!((1.8..2.2).contains(&lie), "lie {lie}");
        let strang = ratio(SamplerRun::strang_midpoint, 128);
        assert!((3.6..4.4).contains(&strang), "strang {strang}");
        let yoshida = ratio(SamplerRun::yoshida_rk4, 64);
        assert!((14.0..18.0).contains(&yoshida), "yoshida {yoshida}");
    }

    #[test]
    fn one_step_stability() {
        let s = sched();
        let f = exact();
        // amplification of the affine Strang map, measured on a coarse grid
        let amplification = |steps: usize, rng: &mut ChaCha8Rng| -> f64 {
            let h = 1.0 / steps as f64;
            let mut worst: f64 = 0.0;
            for n in 1..=steps {
                let t_n = n as f64 * h;
                let xi = random_state(rng, 2);
                let eta = random_state(rng, 2);
                let d_out = (strang_step(&f, &s, &xi, t_n, h) - strang_step(&f, &s, &eta, t_n, h)).norm();
                let d_in = (&xi - &eta).norm();
                worst = worst.max((d_out / d_in - 1.0) / h);
            }
            worst
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = amplification(32, &mut rng).max(0.0) * 1.5 + 1.0;
        for steps in [64, 128, 256, 512] {
            let w = amplification(steps, &mut rng);
            assert!(w <= c, "T={steps}: {w} > C={c}");
        }
    }

    #[test]
    fn zero_field_samples_follow_linear_flow() {
        let s = sched();
        let z = ZeroScore { dim: 2 };
        let run = SamplerRun::strang_midpoint(16);
        let n = 10_000;
        let out = generate_samples(&run, &z, &s, n, 3).unwrap();
        let scale = s.alpha(0.0) / s.alpha(1.0);
        let var_expected = scale * scale;
        for i in 0..2 {
            let var = out.points.iter().map(|p| p[i] * p[i]).sum::<f64>() / n as f64;
            let se = var_expected * (2.0 / n as f64).sqrt();
            assert!((var - var_expected).abs() < 3.0 * se);
        }
        for (k, p) in out.points.iter().enumerate().take(10) {
            let x0 = initial_point(2, 3, k as u64);
            assert!((p - x0 * scale).amax() < 1e-9 * scale);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = sched();
        let f = exact();
        let run = SamplerRun::strang_midpoint(32).with_trajectory(true);
        let a = generate_samples(&run, &f, &s, 1, 99).unwrap();
        let b = generate_samples(&run, &f, &s, 1, 99).unwrap();
        assert_eq!(a.points, b.points);
        let tr = a.trajectories.unwrap();
        assert_eq!(tr[0].len(), 33);
        assert_eq!(tr[0][0].0, 1.0);
        assert_eq!(tr[0][32].0, 0.0);
        assert!(generate_samples(&run, &f, &s, 0, 1).is_err());
    }

    #[test]
    fn exact_score_recovers_data_moments() {
        let s = sched();
        let f = exact();
        let n = 20_000;
        let out = generate_samples(&SamplerRun::strang_midpoint(128), &f, &s, n, 2024).unwrap();
        let mean = out.points.iter().fold(DVector::zeros(2), |a, p| a + p) / n as f64;
        let mut cov = DMatrix::zeros(2, 2);
        for p in &out.points {
            let c = p - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        let sigma = f.data().sigma();
        let mu = f.data().mu();
        for i in 0..2 {
            let se = (sigma[(i, i)] / n as f64).sqrt();
            assert!((mean[i] - mu[i]).abs() < 3.0 * se, "mean[{i}] {}", mean[i]);
            for j in 0..2 {
                let se = ((sigma[(i, i)] * sigma[(j, j)] + sigma[(i, j)].powi(2)) / n as f64).sqrt();
                assert!((cov[(i, j)] - sigma[(i, j)]).abs() < 3.0 * se, "cov[{i}{j}] {}", cov[(i, j)]);
            }
        }
    }
}
