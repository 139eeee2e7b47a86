//! `splitflow`: run the sampler experiments from a TOML config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use splitflow::harness::{
    read_sample_csv, resolve_score, run_convergence_experiment, run_order_study, run_training_sweep,
    tv_against_target, write_sample_csv, ExperimentConfig, RunManifest, ScoreSpec,
};
use splitflow::mlp::{optimal_loss_oracle, TrainConfig};
use splitflow::report::{csv_table, fmt_f64, to_json, Format, Report};
use splitflow::samplers::generate_samples;
use splitflow::{Error, Result};

/// Environment variable overriding the worker thread count.
const THREADS_ENV: &str = "SPLITFLOW_THREADS";

#[derive(Parser, Debug)]
#[command(name = "splitflow", version, about = "Operator-splitting samplers for diffusion PF-ODEs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Format of the report printed to stdout.
    #[arg(long, global = true, value_enum, default_value_t = OutFormat::Csv)]
    format: OutFormat,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OutFormat {
    Csv,
    Json,
}

impl From<OutFormat> for Format {
    fn from(f: OutFormat) -> Self {
        match f {
            OutFormat::Csv => Format::Csv,
            OutFormat::Json => Format::Json,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ScoreArg {
    Exact,
    Mlp,
    Zero,
}

#[derive(Args, Debug, Default)]
struct ScoreOpts {
    /// Score field; `mlp` uses --checkpoint, else the config, else trains inline.
    #[arg(long, value_enum)]
    score: Option<ScoreArg>,
    /// Network checkpoint for `--score mlp`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Hidden widths when training inline, e.g. `200,200`.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// TV distance versus step size, with a log-log slope fit.
    Converge {
        #[command(flatten)]
        score: ScoreOpts,
        /// Step counts, overriding the config, e.g. `8,16,32`.
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
    },
    /// Train the depth x width grid and tabulate final losses.
    TrainSweep,
    /// Trajectory error versus a fine reference, per scheme.
    OrderStudy,
    /// Generate samples and write them as CSV.
    Sample {
        #[command(flatten)]
        score: ScoreOpts,
        /// Number of steps (default: the largest configured count).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 20_000)]
        n: usize,
    },
    /// TV distance between a sample file and the analytic target.
    Tv {
        /// CSV file with header `x1,...,xd`.
        #[arg(long)]
        samples: PathBuf,
    },
    /// Bayes-optimal noise-prediction loss of the configured data.
    OracleLoss,
}

fn apply_score(cfg: &mut ExperimentConfig, opts: &ScoreOpts) -> Result<()> {
    if let (Some(c), Some(arg)) = (&opts.checkpoint, opts.score) {
        if arg != ScoreArg::Mlp {
            return Err(Error::Config(format!("--checkpoint {} requires --score mlp", c.display())));
        }
    }
    match opts.score {
        None if opts.checkpoint.is_some() => {
            return Err(Error::Config("--checkpoint requires --score mlp".into()));
        }
        None => {}
        Some(ScoreArg::Exact) => cfg.score = ScoreSpec::Exact,
        Some(ScoreArg::Zero) => cfg.score = ScoreSpec::Zero,
        Some(ScoreArg::Mlp) => {
            if let Some(path) = &opts.checkpoint {
                cfg.score = ScoreSpec::Mlp { checkpoint: path.clone() };
            } else if !matches!(cfg.score, ScoreSpec::Mlp { .. } | ScoreSpec::Train { .. }) {
                cfg.score = ScoreSpec::Train {
                    hidden: vec![200, 200],
                    train: TrainConfig::default(),
                };
            }
        }
    }
    if let Some(h) = &opts.hidden {
        match &mut cfg.score {
            ScoreSpec::Train { hidden, .. } => *hidden = h.clone(),
            _ => return Err(Error::Config("--hidden only applies when training inline".into())),
        }
    }
    Ok(())
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn print_report(report: &dyn Report, format: Format) -> Result<()> {
    print!("{}", report.render(format)?);
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Single-value results (TV estimate, oracle loss) as a tiny report.
struct Scalars(Vec<(&'static str, f64)>);

impl Report for Scalars {
    fn csv(&self) -> String {
        let header: Vec<&str> = self.0.iter().map(|(k, _)| *k).collect();
        csv_table(&header, [self.0.iter().map(|(_, v)| fmt_f64(*v)).collect()])
    }

    fn json(&self) -> Result<String> {
        let map: serde_json::Map<String, serde_json::Value> =
            self.0.iter().map(|(k, v)| (k.to_string(), serde_json::json!(v))).collect();
        to_json(&map)
    }
}

fn run(cli: Cli) -> Result<()> {
    let format: Format = cli.common.format.into();
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Converge { score, steps } => {
            apply_score(&mut cfg, &score)?;
            if let Some(steps) = steps {
                cfg.sampler.steps = steps;
            }
            let (run, _) = run_convergence_experiment(&cfg)?;
            print_report(&run, format)
        }
        Command::TrainSweep => {
            let (run, _) = run_training_sweep(&cfg)?;
            print_report(&run, format)
        }
        Command::OrderStudy => {
            let (run, _) = run_order_study(&cfg)?;
            print_report(&run, format)
        }
        Command::Sample { score, steps, n } => {
            apply_score(&mut cfg, &score)?;
            cfg.validate()?;
            let steps = steps.unwrap_or(*cfg.sampler.steps.last().expect("validated non-empty"));
            let run = cfg.sampler.scheme_spec().run(steps)?;
            let mut manifest = RunManifest::new(&cfg);
            let field = resolve_score(&cfg, &mut manifest)?;
            let seed = manifest.seed("samples", steps as u64);
            let set = generate_samples(&run, field.as_ref(), &cfg.schedule, n, seed)?;
            let path = cfg.out_dir.join("samples.csv");
            std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io {
                path: cfg.out_dir.clone(),
                source: e,
            })?;
            write_sample_csv(&path, &set.points)?;
            manifest.write(&cfg.out_dir.join("manifest.json"))?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Tv { samples } => {
            let points = read_sample_csv(&samples)?;
            let mut manifest = RunManifest::new(&cfg);
            let est = tv_against_target(&cfg, &points, manifest.seed("tv-file", 0))?;
            let report = Scalars(vec![
                ("tv", est.value),
                ("tv_raw", est.raw),
                ("tv_stderr", est.std_error),
                ("n_mc", est.n_mc as f64),
            ]);
            write_text(&cfg.out_dir.join(format!("tv.{}", format.extension())), &report.render(format)?)?;
            print_report(&report, format)
        }
        Command::OracleLoss => {
            cfg.validate()?;
            let loss = optimal_loss_oracle(&cfg.data.build()?, &cfg.schedule);
            print_report(&Scalars(vec![("optimal_loss", loss)]), format)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|()| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
