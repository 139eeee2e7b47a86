//! Experiment configuration, orchestration and outputs.
//!
//! Every experiment is a pure function of an [`ExperimentConfig`]; random
//! streams are derived from the master seed and a phase label, and recorded
//! in the [`RunManifest`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{
    kde_fit, score_error_report, trajectory_global_error, tv_monte_carlo, uniform_time_grid, BandwidthRule,
    ConvergenceReport, Density, LogLogFit, ScoreErrorReport, TrajectoryError,
};
use crate::mlp::{optimal_loss_oracle, train_noise_predictor, Checkpoint, Mlp, MlpScore, TrainConfig};
use crate::report::{csv_table, emit_report, fmt_f64, fmt_opt, to_json, Format, Report};
use crate::samplers::{generate_samples, RkTableau, SamplerRun, SplittingScheme};
use crate::schedules::{LinearBetaSchedule, NoiseSchedule};
use crate::score_fields::{marginal_law, ExactGaussianScore, FieldKind, GaussianData, GaussianDensity, ScoreField, ZeroScore};
use crate::seeds::derive_seed;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
}

impl Default for DataSpec {
    fn default() -> Self {
        let g = GaussianData::benchmark();
        Self {
            mu: g.mu().iter().copied().collect(),
            sigma: g.sigma().row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

impl DataSpec {
    pub fn build(&self) -> Result<GaussianData> {
        GaussianData::from_rows(&self.mu, &self.sigma)
    }
}

/// A splitting scheme paired with the tableau for its nonlinear stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSpec {
    pub scheme: String,
    pub tableau: String,
}

impl SchemeSpec {
    pub fn new(scheme: &str, tableau: &str) -> Self {
        Self {
            scheme: scheme.into(),
            tableau: tableau.into(),
        }
    }

    pub fn run(&self, steps: usize) -> Result<SamplerRun> {
        SamplerRun::new(steps, SplittingScheme::by_name(&self.scheme)?, RkTableau::by_name(&self.tableau)?)
    }

    pub fn label(&self) -> String {
        format!("{}+{}", self.scheme, self.tableau)
    }
}

fn default_steps() -> Vec<usize> {
    vec![8, 16, 32, 64, 128]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default = "default_tableau")]
    pub tableau: String,
    #[serde(default = "default_steps")]
    pub steps: Vec<usize>,
}

fn default_scheme() -> String {
    "strang".into()
}
fn default_tableau() -> String {
    "midpoint".into()
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            scheme: default_scheme(),
            tableau: default_tableau(),
            steps: default_steps(),
        }
    }
}

impl SamplerSpec {
    pub fn scheme_spec(&self) -> SchemeSpec {
        SchemeSpec::new(&self.scheme, &self.tableau)
    }
}

/// Which score field drives the sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScoreSpec {
    #[default]
    Exact,
    Zero,
    /// A trained network loaded from a checkpoint file.
    Mlp { checkpoint: PathBuf },
    /// Train a network before sampling.
    Train {
        hidden: Vec<usize>,
        #[serde(default)]
        train: TrainConfig,
    },
}

fn default_n_samples() -> usize {
    20_000
}
fn default_n_mc() -> usize {
    100_000
}
fn default_floor_factor() -> f64 {
    3.0
}
fn default_time_grid() -> usize {
    21
}
fn default_score_mc() -> usize {
    2_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSpec {
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    #[serde(default = "default_bandwidth")]
    pub bandwidth: BandwidthRule,
    /// TV points must reach this multiple of the KDE floor to enter the fit.
    #[serde(default = "default_floor_factor")]
    pub floor_factor: f64,
    /// Points of the uniform grid used for the sup over t in score errors.
    #[serde(default = "default_time_grid")]
    pub time_grid: usize,
    /// Monte-Carlo points per grid time for score errors.
    #[serde(default = "default_score_mc")]
    pub score_error_mc: usize,
}

fn default_bandwidth() -> BandwidthRule {
    BandwidthRule::Scott
}

impl Default for MetricsSpec {
    fn default() -> Self {
        Self {
            n_samples: default_n_samples(),
            n_mc: default_n_mc(),
            bandwidth: default_bandwidth(),
            floor_factor: default_floor_factor(),
            time_grid: default_time_grid(),
            score_error_mc: default_score_mc(),
        }
    }
}

fn default_order_schemes() -> Vec<SchemeSpec> {
    vec![
        SchemeSpec::new("strang", "midpoint"),
        SchemeSpec::new("lie", "euler"),
        SchemeSpec::new("yoshida4", "rk4"),
    ]
}
fn default_order_steps() -> Vec<usize> {
    vec![16, 32, 64, 128, 256]
}
fn default_ref_factor() -> usize {
    64
}
fn default_n_probe() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderSpec {
    #[serde(default = "default_order_schemes")]
    pub schemes: Vec<SchemeSpec>,
    #[serde(default = "default_order_steps")]
    pub steps: Vec<usize>,
    /// Reference steps per sampler step.
    #[serde(default = "default_ref_factor")]
    pub ref_factor: usize,
    #[serde(default = "default_n_probe")]
    pub n_probe: usize,
}

impl Default for OrderSpec {
    fn default() -> Self {
        Self {
            schemes: default_order_schemes(),
            steps: default_order_steps(),
            ref_factor: default_ref_factor(),
            n_probe: default_n_probe(),
        }
    }
}

fn default_layers() -> Vec<usize> {
    vec![1, 2, 3, 4]
}
fn default_widths() -> Vec<usize> {
    vec![100, 200, 400, 800]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_layers")]
    pub layers: Vec<usize>,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            layers: default_layers(),
            widths: default_widths(),
            train: TrainConfig::default(),
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Full experiment description, read from TOML.
///
/// Seeds inside `train` sections are ignored: training seeds are derived
/// from `seed` like every other stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub schedule: LinearBetaSchedule,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub score: ScoreSpec,
    #[serde(default)]
    pub metrics: MetricsSpec,
    #[serde(default)]
    pub order: OrderSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: default_out_dir(),
            data: DataSpec::default(),
            schedule: LinearBetaSchedule::default(),
            sampler: SamplerSpec::default(),
            score: ScoreSpec::default(),
            metrics: MetricsSpec::default(),
            order: OrderSpec::default(),
            sweep: SweepSpec::default(),
        }
    }
}

fn check_steps(what: &str, steps: &[usize]) -> Result<()> {
    if steps.is_empty() || steps[0] == 0 || steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "{what} must be a non-empty, strictly increasing list of positive counts, got {steps:?}"
        )));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            what: "config",
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.build()?;
        self.schedule.validate()?;
        check_steps("sampler.steps", &self.sampler.steps)?;
        self.sampler.scheme_spec().run(self.sampler.steps[0])?;
        let m = &self.metrics;
        if m.n_samples < 100 {
            return Err(Error::Config(format!("metrics.n_samples must be >= 100, got {}", m.n_samples)));
        }
        if m.n_mc < crate::metrics::MIN_MC_POINTS {
            return Err(Error::Config(format!("metrics.n_mc must be >= 1000, got {}", m.n_mc)));
        }
        if !(m.floor_factor >= 0.0 && m.floor_factor.is_finite()) {
            return Err(Error::Config("metrics.floor_factor must be finite and >= 0".into()));
        }
        if m.time_grid == 0 || m.score_error_mc == 0 {
            return Err(Error::Config("metrics.time_grid and metrics.score_error_mc must be >= 1".into()));
        }
        check_steps("order.steps", &self.order.steps)?;
        if self.order.ref_factor < 16 || self.order.ref_factor % 2 != 0 {
            return Err(Error::Config(format!(
                "order.ref_factor must be even and >= 16, got {}",
                self.order.ref_factor
            )));
        }
        if self.order.n_probe == 0 || self.order.schemes.is_empty() {
            return Err(Error::Config("order needs >= 1 scheme and >= 1 probe".into()));
        }
        for s in &self.order.schemes {
            s.run(self.order.steps[0])?;
        }
        if self.sweep.layers.iter().chain(&self.sweep.widths).any(|&v| v == 0) {
            return Err(Error::Config("sweep layers and widths must be positive".into()));
        }
        self.sweep.train.validate()?;
        match &self.score {
            ScoreSpec::Train { hidden, train } => {
                if hidden.iter().any(|&w| w == 0) {
                    return Err(Error::Config("score.hidden widths must be positive".into()));
                }
                train.validate()?;
            }
            ScoreSpec::Exact | ScoreSpec::Zero | ScoreSpec::Mlp { .. } => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

/// Config echo, every derived seed and per-phase wall-clock timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: BTreeMap<String, u64>,
    pub timings: Vec<PhaseTiming>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            version: VERSION.to_string(),
            config: config.clone(),
            seeds: BTreeMap::new(),
            timings: Vec::new(),
        }
    }

    /// Derives and records the seed for `(label, index)`.
    pub fn seed(&mut self, label: &str, index: u64) -> u64 {
        let s = derive_seed(self.config.seed, label, index);
        self.seeds.insert(format!("{label}/{index}"), s);
        s
    }

    pub fn time<T>(&mut self, phase: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        let start = Instant::now();
        let out = f(self);
        self.timings.push(PhaseTiming {
            phase: phase.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, to_json(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Builds the configured score field, training inline if asked to.
pub fn resolve_score(cfg: &ExperimentConfig, manifest: &mut RunManifest) -> Result<Box<dyn ScoreField>> {
    let data = cfg.data.build()?;
    let sched = cfg.schedule;
    Ok(match &cfg.score {
        ScoreSpec::Exact => Box::new(ExactGaussianScore::new(data, sched)),
        ScoreSpec::Zero => Box::new(ZeroScore { dim: data.dim() }),
        ScoreSpec::Mlp { checkpoint } => {
            let net = Mlp::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
            if net.output_dim() != data.dim() {
                return Err(Error::Shape {
                    expected: data.dim(),
                    got: net.output_dim(),
                });
            }
            Box::new(MlpScore::new(net, sched)?)
        }
        ScoreSpec::Train { hidden, train } => {
            let tc = TrainConfig {
                seed: manifest.seed("train", 0),
                ..*train
            };
            let (net, _) = manifest.time("train", |_| train_noise_predictor(&tc, hidden, &data, &sched))?;
            Box::new(MlpScore::new(net, sched)?)
        }
    })
}

/// The density the sampler output is compared against: `q(., t_min)` for a
/// real score, and the exact linear-flow image of `N(0, I)` for the zero field.
pub fn convergence_target(cfg: &ExperimentConfig, kind: FieldKind) -> Result<GaussianDensity> {
    let data = cfg.data.build()?;
    let sched = cfg.schedule;
    let t_min = sched.t_min();
    match kind {
        FieldKind::Zero => {
            let m = sched.linear_flow(t_min, 1.0);
            let d = data.dim();
            GaussianDensity::new(DVector::zeros(d), DMatrix::identity(d, d) * (m * m))
        }
        _ => Ok(marginal_law(&data, &sched, t_min)?.into_density()),
    }
}

/// TV-versus-h sweep for the given field.
pub fn convergence_with_field(
    cfg: &ExperimentConfig,
    field: &dyn ScoreField,
    manifest: &mut RunManifest,
) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let target = convergence_target(cfg, field.kind())?;
    let m = &cfg.metrics;
    let sched = cfg.schedule;

    let floor_draw_seed = manifest.seed("kde-floor-draws", 0);
    let floor_tv_seed = manifest.seed("kde-floor-tv", 0);
    let kde_floor = manifest.time("kde-floor", |_| -> Result<_> {
        let mut rng = ChaCha8Rng::seed_from_u64(floor_draw_seed);
        let draws: Vec<_> = (0..m.n_samples).map(|_| target.sample(&mut rng)).collect();
        let kde = kde_fit(&draws, m.bandwidth)?;
        tv_monte_carlo(&kde, &target, m.n_mc, floor_tv_seed)
    })?;

    let spec = cfg.sampler.scheme_spec();
    let mut points = Vec::with_capacity(cfg.sampler.steps.len());
    for &steps in &cfg.sampler.steps {
        let run = spec.run(steps)?;
        let sample_seed = manifest.seed("samples", steps as u64);
        let tv_seed = manifest.seed("tv", steps as u64);
        let tv = manifest.time(format!("converge/T={steps}"), |_| -> Result<_> {
            let samples = generate_samples(&run, field, &sched, m.n_samples, sample_seed)
                .map_err(|e| e.in_phase("sampling", steps))?;
            let kde = kde_fit(&samples.points, m.bandwidth).map_err(|e| e.in_phase("kde", steps))?;
            tv_monte_carlo(&kde, &target, m.n_mc, tv_seed).map_err(|e| e.in_phase("tv", steps))
        })?;
        points.push((steps, tv));
    }
    ConvergenceReport::build(points, kde_floor, m.floor_factor)
}

/// Output of [`run_convergence_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRun {
    pub config: ExperimentConfig,
    pub bandwidth_rule: String,
    pub seeds: BTreeMap<String, u64>,
    pub report: ConvergenceReport,
    /// Learned-versus-exact score errors, for network fields.
    pub score_errors: Option<ScoreErrorReport>,
}

impl Report for ConvergenceRun {
    fn csv(&self) -> String {
        let r = &self.report;
        let (slope, intercept) = (r.fit.as_ref().map(|f| f.slope), r.fit.as_ref().map(|f| f.intercept));
        csv_table(
            &[
                "T",
                "h",
                "tv",
                "tv_raw",
                "tv_stderr",
                "kde_floor",
                "kde_floor_stderr",
                "included",
                "slope",
                "intercept",
            ],
            r.rows.iter().map(|row| {
                vec![
                    row.steps.to_string(),
                    fmt_f64(row.h),
                    fmt_f64(row.tv.value),
                    fmt_f64(row.tv.raw),
                    fmt_f64(row.tv.std_error),
                    fmt_f64(r.kde_floor.value),
                    fmt_f64(r.kde_floor.std_error),
                    row.included.to_string(),
                    fmt_opt(slope),
                    fmt_opt(intercept),
                ]
            }),
        )
    }

    fn json(&self) -> Result<String> {
        to_json(self)
    }
}

/// Writes `<stem>.csv`, `<stem>.json` and `manifest.json` into `out_dir`.
fn write_outputs(out_dir: &Path, stem: &str, report: &dyn Report, manifest: &RunManifest) -> Result<()> {
    for format in [Format::Csv, Format::Json] {
        emit_report(report, format, &out_dir.join(format!("{stem}.{}", format.extension())))?;
    }
    manifest.write(&out_dir.join("manifest.json"))
}

/// Runs the TV sweep for the configured score, writes its outputs and
/// returns them with the manifest.
pub fn run_convergence_experiment(cfg: &ExperimentConfig) -> Result<(ConvergenceRun, RunManifest)> {
    cfg.validate()?;
    let mut manifest = RunManifest::new(cfg);
    let field = resolve_score(cfg, &mut manifest)?;
    let report = convergence_with_field(cfg, field.as_ref(), &mut manifest)?;
    let score_errors = match field.kind() {
        FieldKind::LearnedMlp => {
            let data = cfg.data.build()?;
            let exact = ExactGaussianScore::new(data.clone(), cfg.schedule);
            let seed = manifest.seed("score-errors", 0);
            let grid = uniform_time_grid(cfg.metrics.time_grid);
            Some(manifest.time("score-errors", |_| {
                score_error_report(
                    field.as_ref(),
                    &exact,
                    &data,
                    &cfg.schedule,
                    &grid,
                    cfg.metrics.score_error_mc,
                    seed,
                )
            })?)
        }
        _ => None,
    };
    let run = ConvergenceRun {
        config: cfg.clone(),
        bandwidth_rule: cfg.metrics.bandwidth.id().to_string(),
        seeds: manifest.seeds.clone(),
        report,
        score_errors,
    };
    write_outputs(&cfg.out_dir, "convergence", &run, &manifest)?;
    Ok((run, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub layers: usize,
    pub width: usize,
    pub seed: u64,
    pub status: CellStatus,
    pub final_loss: Option<f64>,
    pub fresh_loss: Option<f64>,
    pub message: Option<String>,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSweepRun {
    pub config: ExperimentConfig,
    pub optimal_loss: f64,
    pub cells: Vec<SweepCell>,
}

impl TrainingSweepRun {
    pub fn cell(&self, layers: usize, width: usize) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.layers == layers && c.width == width)
    }
}

impl Report for TrainingSweepRun {
    /// One row per depth, one column per width; diverged cells are blank.
    fn csv(&self) -> String {
        let widths = &self.config.sweep.widths;
        let header: Vec<String> = std::iter::once("layers".to_string())
            .chain(widths.iter().map(|w| format!("width_{w}")))
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut out = csv_table(
            &header,
            self.config.sweep.layers.iter().map(|&l| {
                std::iter::once(l.to_string())
                    .chain(widths.iter().map(|&w| fmt_opt(self.cell(l, w).and_then(|c| c.final_loss))))
                    .collect()
            }),
        );
        out.push_str(&format!("optimal,{}\n", fmt_f64(self.optimal_loss)));
        out
    }

    fn json(&self) -> Result<String> {
        to_json(self)
    }
}

/// Trains every `(layers, width)` cell, saving a checkpoint per cell;
/// divergent cells are recorded and the sweep continues.
pub fn run_training_sweep(cfg: &ExperimentConfig) -> Result<(TrainingSweepRun, RunManifest)> {
    cfg.validate()?;
    let mut manifest = RunManifest::new(cfg);
    let data = cfg.data.build()?;
    let sched = cfg.schedule;
    let ck_dir = cfg.out_dir.join("checkpoints");
    std::fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let mut cells = Vec::new();
    for (li, &layers) in cfg.sweep.layers.iter().enumerate() {
        for (wi, &width) in cfg.sweep.widths.iter().enumerate() {
            let index = (li * cfg.sweep.widths.len() + wi) as u64;
            let tc = TrainConfig {
                seed: manifest.seed("sweep", index),
                ..cfg.sweep.train
            };
            let hidden = vec![width; layers];
            let outcome = manifest.time(format!("train/L={layers}/W={width}"), |_| {
                train_noise_predictor(&tc, &hidden, &data, &sched)
            });
            let cell = match outcome {
                Ok((net, report)) => {
                    let name = format!("mlp_l{layers}_w{width}.json");
                    net.to_checkpoint(Some(tc)).save(&ck_dir.join(&name))?;
                    SweepCell {
                        layers,
                        width,
                        seed: tc.seed,
                        status: CellStatus::Ok,
                        final_loss: Some(report.final_loss),
                        fresh_loss: Some(report.fresh_loss),
                        message: None,
                        checkpoint: Some(format!("checkpoints/{name}")),
                    }
                }
                Err(e @ Error::Divergence { .. }) => SweepCell {
                    layers,
                    width,
                    seed: tc.seed,
                    status: CellStatus::Diverged,
                    final_loss: None,
                    fresh_loss: None,
                    message: Some(e.to_string()),
                    checkpoint: None,
                },
                Err(e) => return Err(e),
            };
            cells.push(cell);
        }
    }
    let run = TrainingSweepRun {
        config: cfg.clone(),
        optimal_loss: optimal_loss_oracle(&data, &sched),
        cells,
    };
    write_outputs(&cfg.out_dir, "training_sweep", &run, &manifest)?;
    Ok((run, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeOrder {
    pub scheme: String,
    pub tableau: String,
    pub points: Vec<TrajectoryError>,
    pub fit: LogLogFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderStudyRun {
    pub config: ExperimentConfig,
    pub probe_seed: u64,
    pub schemes: Vec<SchemeOrder>,
}

impl OrderStudyRun {
    pub fn scheme(&self, name: &str) -> Option<&SchemeOrder> {
        self.schemes.iter().find(|s| s.scheme == name)
    }
}

impl Report for OrderStudyRun {
    fn csv(&self) -> String {
        csv_table(
            &["scheme", "tableau", "T", "h", "error", "ref_steps", "ref_shift", "slope"],
            self.schemes.iter().flat_map(|s| {
                s.points.iter().map(move |p| {
                    vec![
                        s.scheme.clone(),
                        s.tableau.clone(),
                        p.steps.to_string(),
                        fmt_f64(1.0 / p.steps as f64),
                        fmt_f64(p.error),
                        p.ref_steps.to_string(),
                        fmt_f64(p.ref_shift),
                        fmt_f64(s.fit.slope),
                    ]
                })
            }),
        )
    }

    fn json(&self) -> Result<String> {
        to_json(self)
    }
}

/// Trajectory-error slopes per scheme, without writing outputs.
pub fn order_study_with_field(
    cfg: &ExperimentConfig,
    field: &dyn ScoreField,
    manifest: &mut RunManifest,
) -> Result<OrderStudyRun> {
    cfg.validate()?;
    let o = &cfg.order;
    let probe_seed = manifest.seed("probes", 0);
    let mut schemes = Vec::new();
    for spec in &o.schemes {
        let mut points = Vec::new();
        for &steps in &o.steps {
            let run = spec.run(steps)?;
            let e = manifest.time(format!("order/{}/T={steps}", spec.label()), |_| {
                trajectory_global_error(&run, field, &cfg.schedule, o.ref_factor * steps, o.n_probe, probe_seed)
            });
            points.push(e.map_err(|e| e.in_phase("trajectory error", steps))?);
        }
        let fit = crate::metrics::fit_loglog_slope(
            &points.iter().map(|p| (1.0 / p.steps as f64, p.error)).collect::<Vec<_>>(),
        )?;
        schemes.push(SchemeOrder {
            scheme: spec.scheme.clone(),
            tableau: spec.tableau.clone(),
            points,
            fit,
        });
    }
    Ok(OrderStudyRun {
        config: cfg.clone(),
        probe_seed,
        schemes,
    })
}

pub fn run_order_study(cfg: &ExperimentConfig) -> Result<(OrderStudyRun, RunManifest)> {
    cfg.validate()?;
    let mut manifest = RunManifest::new(cfg);
    let field = resolve_score(cfg, &mut manifest)?;
    let run = order_study_with_field(cfg, field.as_ref(), &mut manifest)?;
    write_outputs(&cfg.out_dir, "order_study", &run, &manifest)?;
    Ok((run, manifest))
}

/// Writes points as CSV with header `x1,...,xd`.
pub fn write_sample_csv(path: &Path, points: &[DVector<f64>]) -> Result<()> {
    let d = points.first().map_or(0, |p| p.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record((1..=d).map(|i| format!("x{i}"))).map_err(|e| csv_error(path, e))?;
    for p in points {
        w.write_record(p.iter().map(|&v| fmt_f64(v))).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sample_csv(path: &Path) -> Result<Vec<DVector<f64>>> {
    let parse_err = |message: String| Error::Parse {
        what: "sample file",
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    let d = header.len();
    if d == 0 || header.iter().enumerate().any(|(i, h)| h.trim() != format!("x{}", i + 1)) {
        return Err(parse_err(format!("header must be x1,...,xd, got {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let vals = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(format!("row {}: {e}", line + 2)))?;
        if vals.len() != d {
            return Err(parse_err(format!("row {} has {} fields, expected {d}", line + 2, vals.len())));
        }
        out.push(DVector::from_vec(vals));
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked is_io_error"),
        }
    } else {
        Error::Parse {
            what: "sample file",
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

/// Convenience: target density for a standalone `tv` measurement.
pub fn tv_against_target(cfg: &ExperimentConfig, points: &[DVector<f64>], seed: u64) -> Result<crate::metrics::TvEstimate> {
    let target = convergence_target(cfg, FieldKind::ExactGaussian)?;
    if points.first().map(|p| p.len()) != Some(target.dim()) {
        return Err(Error::Shape {
            expected: target.dim(),
            got: points.first().map_or(0, |p| p.len()),
        });
    }
    let kde = kde_fit(points, cfg.metrics.bandwidth)?;
    tv_monte_carlo(&kde, &target as &dyn Density, cfg.metrics.n_mc, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            out_dir: dir.to_path_buf(),
            sampler: SamplerSpec {
                steps: vec![4, 8, 16],
                ..SamplerSpec::default()
            },
            metrics: MetricsSpec {
                n_samples: 400,
                n_mc: 2000,
                time_grid: 3,
                score_error_mc: 20,
                ..MetricsSpec::default()
            },
            order: OrderSpec {
                steps: vec![8, 16, 32],
                n_probe: 2,
                ..OrderSpec::default()
            },
            sweep: SweepSpec {
                layers: vec![1],
                widths: vec![4, 8],
                train: TrainConfig {
                    n_train: 300,
                    n_iters: 20,
                    lr_start: 1e-3,
                    lr_end: 1e-4,
                    batch_size: 32,
                    seed: 0,
                },
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.sampler.steps, vec![8, 16, 32, 64, 128]);
        assert_eq!((cfg.metrics.n_samples, cfg.metrics.n_mc), (20_000, 100_000));
        let round = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(round, cfg);

        for bad in [
            "[sampler]\nsteps = [16, 8]",
            "[sampler]\nsteps = []",
            "[sampler]\nscheme = \"leapfrog\"",
            "[metrics]\nn_samples = 10",
            "[data]\nmu = [0.0, 0.0]\nsigma = [[1.0, 2.0], [2.0, 1.0]]",
            "[score]\nkind = \"oracle\"",
            "unknown_key = 1",
        ] {
            assert!(matches!(ExperimentConfig::from_toml_str(bad), Err(Error::Config(_))), "{bad}");
        }
        let train = ExperimentConfig::from_toml_str(
            "[score]\nkind = \"train\"\nhidden = [200, 200]\n[score.train]\nn_iters = 10\n",
        )
        .unwrap();
        assert!(matches!(train.score, ScoreSpec::Train { ref hidden, train } if hidden == &[200, 200] && train.n_iters == 10));
    }

    #[test]
    fn convergence_outputs_are_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(&dir.path().join("a"));
        let (run, manifest) = run_convergence_experiment(&cfg).unwrap();
        assert_eq!(run.report.rows.len(), 3);
        assert!(manifest.seeds.contains_key("samples/8"));
        let read = |f: &str| std::fs::read(dir.path().join("a").join(f)).unwrap();
        let first = (read("convergence.csv"), read("convergence.json"));
        run_convergence_experiment(&cfg).unwrap();
        assert_eq!(first, (read("convergence.csv"), read("convergence.json")));
        let text = std::fs::read_to_string(dir.path().join("a/convergence.json")).unwrap();
        let back: ConvergenceRun = serde_json::from_str(&text).unwrap();
        assert_eq!(back, run);
    }

    #[test]
    fn zero_field_targets_linear_flow_image() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.score = ScoreSpec::Zero;
        cfg.metrics.n_samples = 2000;
        cfg.metrics.n_mc = 4000;
        let (run, _) = run_convergence_experiment(&cfg).unwrap();
        let floor = run.report.kde_floor;
        for row in &run.report.rows {
            let se = (row.tv.std_error.powi(2) + floor.std_error.powi(2)).sqrt();
            assert!((row.tv.value - floor.value).abs() < 0.05 + 4.0 * se, "{row:?} vs {floor:?}");
        }
    }

    #[test]
    fn order_study_small() {
        let dir = tempfile::tempdir().unwrap();
        let (run, _) = run_order_study(&small(dir.path())).unwrap();
        assert_eq!(run.schemes.len(), 3);
        let strang = run.scheme("strang").unwrap();
        assert!(strang.points.windows(2).all(|w| w[1].error < w[0].error));
        assert!(dir.path().join("order_study.csv").exists());
    }

    #[test]
    fn training_sweep_small() {
        let dir = tempfile::tempdir().unwrap();
        let (run, manifest) = run_training_sweep(&small(dir.path())).unwrap();
        assert_eq!(run.cells.len(), 2);
        assert!(run.cells.iter().all(|c| c.status == CellStatus::Ok));
        assert_eq!(manifest.seeds.len(), 2);
        let ck = dir.path().join(run.cell(1, 8).unwrap().checkpoint.as_ref().unwrap());
        let net = Mlp::from_checkpoint(&Checkpoint::load(&ck).unwrap()).unwrap();
        assert_eq!(net.layer_sizes(), &[3, 8, 2]);
        let csv = std::fs::read_to_string(dir.path().join("training_sweep.csv")).unwrap();
        assert!(csv.starts_with("layers,width_4,width_8\n1,"));

        let mut diverging = small(dir.path());
        diverging.sweep.train.lr_start = 1e3;
        diverging.sweep.train.lr_end = 1e2;
        diverging.sweep.train.n_iters = 200;
        let (run, _) = run_training_sweep(&diverging).unwrap();
        assert!(run.cells.iter().any(|c| c.status == CellStatus::Diverged && c.final_loss.is_none()));
    }

    #[test]
    fn sample_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let pts = vec![DVector::from_vec(vec![0.1, -2.5]), DVector::from_vec(vec![1.0 / 3.0, 7e-9])];
        write_sample_csv(&path, &pts).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("x1,x2\n"));
        assert_eq!(read_sample_csv(&path).unwrap(), pts);
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_sample_csv(&path), Err(Error::Parse { .. })));
        std::fs::write(&path, "x1,x2\n1,oops\n").unwrap();
        assert!(matches!(read_sample_csv(&path), Err(Error::Parse { .. })));
        assert!(matches!(read_sample_csv(&dir.path().join("missing.csv")), Err(Error::Io { .. })));
    }
}
