//! `remedi` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use remedi_core::datasets::{load_delimited, Body, DatasetSpec, TriangleMixtureSpec, TwoMoonsSpec, UniformBodySpec};
use remedi_core::estimators::{estimate_cross_entropy, estimate_knn_kl, estimate_remedi, oracle_kde, oracle_mc};
use remedi_core::harness::{run_experiment, sweep, ExperimentConfig};
use remedi_core::persist::{load_model, write_samples_csv, write_trajectory_csv};
use remedi_core::rng;
use remedi_core::samplers::{
    calibrate_envelope, langevin_simulate, rejection_sample, Budget, LangevinConfig, DEFAULT_MARGIN,
};
use remedi_core::{Error, Tensor};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "remedi", version, about = "Differential entropy estimation with a corrected mixture base")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset to CSV.
    Generate(GenerateArgs),
    /// Train base and correction per a config; writes curves, results and models.
    Train(TrainArgs),
    /// Evaluate a saved model on data.
    Estimate(EstimateArgs),
    /// Draw from a saved model by rejection or Langevin dynamics.
    Sample(SampleArgs),
    /// Repeat training over values of one config field.
    Sweep(SweepArgs),
    /// Reference estimators: Monte Carlo, kernel density, nearest neighbor.
    Oracle(OracleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Triangle,
    TwoMoons,
    Ball,
    Cube,
    Gaussian,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    /// Dimension (ignored for two-moons).
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Two-moons noise standard deviation.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

impl DatasetArgs {
    fn spec(&self) -> DatasetSpec {
        match self.kind {
            Kind::Triangle => DatasetSpec::Triangle(TriangleMixtureSpec::default_for(self.dim)),
            Kind::TwoMoons => DatasetSpec::TwoMoons(TwoMoonsSpec { noise: self.noise }),
            Kind::Ball => DatasetSpec::Uniform(UniformBodySpec { body: Body::Ball, dim: self.dim }),
            Kind::Cube => DatasetSpec::Uniform(UniformBodySpec { body: Body::Cube, dim: self.dim }),
            Kind::Gaussian => DatasetSpec::Gaussian { mean: vec![0.0; self.dim], std: 1.0 },
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Flag overrides applied on top of the config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    /// Mixture components `M`.
    #[arg(long)]
    components: Option<usize>,
    /// Base epochs `k1`.
    #[arg(long)]
    k1: Option<usize>,
    /// Correction epochs `k2`.
    #[arg(long)]
    k2: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    val_size: Option<usize>,
    /// Base samples `m`.
    #[arg(long)]
    q_samples: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    ema_decay: Option<f64>,
    /// Any field by dotted path, value as JSON: `--set base.diagonal=true`.
    #[arg(long = "set", value_name = "PATH=JSON")]
    set: Vec<String>,
}

impl Overrides {
    fn apply(&self, mut cfg: ExperimentConfig) -> Result<ExperimentConfig, Error> {
        if let Some(v) = &self.seeds {
            cfg.seeds = v.clone();
        }
        if let Some(v) = self.threads {
            cfg.threads = v;
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = Some(v.clone());
        }
        if let Some(v) = &self.run_id {
            cfg.run_id = v.clone();
        }
        if let Some(v) = self.components {
            cfg.base.components = v;
        }
        if let Some(v) = self.k1 {
            cfg.base.epochs = v;
        }
        if let Some(v) = self.k2 {
            cfg.correction.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.optimizer.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.optimizer.weight_decay = v;
        }
        if let Some(v) = self.batch_size {
            cfg.optimizer.batch_size = v;
        }
        if let Some(v) = self.train_size {
            cfg.data.train_size = Some(v);
        }
        if let Some(v) = self.val_size {
            cfg.data.val_size = Some(v);
            cfg.data.val_fraction = None;
        }
        if let Some(v) = self.q_samples {
            cfg.correction.q_samples = Some(v);
        }
        if let Some(v) = &self.widths {
            cfg.correction.widths = v.clone();
        }
        if let Some(v) = self.ema_decay {
            cfg.correction.ema_decay = v;
        }
        for item in &self.set {
            let (path, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("--set expects PATH=JSON, got `{item}`")))?;
            cfg = cfg.with_field(path, parse_value(raw))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// JSON when it parses, otherwise a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()))
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct DataFile {
    /// Delimited numeric file, one point per row.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    #[arg(long)]
    header: bool,
}

impl DataFile {
    fn load(&self) -> Result<Tensor, Error> {
        load_file(&self.data, self.delimiter, self.header)
    }
}

fn load_file(path: &Path, delimiter: char, header: bool) -> Result<Tensor, Error> {
    if !delimiter.is_ascii() {
        return Err(Error::InvalidArgument(format!("delimiter `{delimiter}` must be ASCII")));
    }
    load_delimited(path, delimiter as u8, header)
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataFile,
    /// Base samples for the normalizing term; defaults to the data size.
    #[arg(long)]
    q_samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SampleMethod {
    Rejection,
    Langevin,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    method: SampleMethod,
    /// Rejection: proposals to make. Langevin: chains to run.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Rejection: data whose maximum of `e^T` sets the envelope, normally the training set.
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    margin: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 0.1)]
    horizon: f64,
    /// Langevin: also write every `record_every`-th state here.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    record_every: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dotted config field, for example `base.components`.
    #[arg(long)]
    axis: String,
    /// Comma-separated values, each parsed as JSON when possible.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleMethod {
    Mc,
    Kde,
    Knn,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, value_enum)]
    method: OracleMethod,
    /// Evaluation points.
    #[command(flatten)]
    data: DataFile,
    /// Kernel centers for `kde` (disjoint from the evaluation points).
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    bandwidth: f64,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Known dataset whose exact density `mc` uses.
    #[arg(long, value_enum)]
    kind: Option<Kind>,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

fn print_json(v: Value) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(a) => {
            let x = a.dataset.spec().generate(a.n, a.seed)?;
            write_samples_csv(&a.out, &x)?;
            print_json(json!({"path": a.out, "rows": x.rows(), "cols": x.cols()}))
        }
        Command::Train(a) => {
            let cfg = a.overrides.apply(ExperimentConfig::load(&a.config)?)?;
            let (results, agg) = run_experiment(&cfg)?;
            let per_seed: Vec<Value> = results
                .iter()
                .map(|r| json!({"seed": r.seed, "estimates": r.estimates, "best_val": r.best_val, "timing": r.timing}))
                .collect();
            print_json(json!({"config_hash": cfg.hash(), "aggregate": agg, "runs": per_seed}))
        }
        Command::Estimate(a) => {
            let gibbs = load_model(&a.model)?;
            let p = a.data.load()?;
            let m = a.q_samples.unwrap_or(p.rows());
            let q = gibbs.base.sample(m, &mut rng::substream(a.seed, rng::purpose::Q_VAL));
            let knife = estimate_cross_entropy(&gibbs.base, &p)?;
            let remedi = estimate_remedi(&gibbs.base, gibbs.network.as_ref(), &p, &q)?;
            print_json(json!({"estimates": [knife, remedi]}))
        }
        Command::Sample(a) => {
            let gibbs = load_model(&a.model)?;
            match a.method {
                SampleMethod::Rejection => {
                    let path = a.calibration.as_ref().ok_or_else(|| {
                        Error::InvalidArgument("rejection needs --calibration (the training data)".into())
                    })?;
                    let calib = load_file(path, ',', false).or_else(|_| load_file(path, ',', true))?;
                    let sampler = calibrate_envelope(gibbs, &calib, a.margin)?;
                    let out = rejection_sample(&sampler, Budget::Proposals(a.n), a.seed)?;
                    write_samples_csv(&a.out, &out.samples)?;
                    print_json(json!({"path": a.out, "envelope": sampler.envelope, "stats": out.stats}))
                }
                SampleMethod::Langevin => {
                    let cfg = LangevinConfig {
                        beta: a.beta,
                        dt: a.dt,
                        horizon: a.horizon,
                        record_every: a.trajectory.as_ref().map(|_| a.record_every),
                    };
                    let out = langevin_simulate(&gibbs, &cfg, a.n, a.seed)?;
                    write_samples_csv(&a.out, &out.terminal)?;
                    if let Some(t) = &a.trajectory {
                        write_trajectory_csv(t, &out.trajectory, gibbs.dim())?;
                    }
                    print_json(json!({
                        "path": a.out,
                        "steps": cfg.steps(),
                        "chains": out.chain_ids.len(),
                        "excluded": out.excluded,
                    }))
                }
            }
        }
        Command::Sweep(a) => {
            let cfg = a.overrides.apply(ExperimentConfig::load(&a.config)?)?;
            let values: Vec<Value> = a.values.iter().map(|v| parse_value(v)).collect();
            let rows = sweep(&cfg, &a.axis, &values)?;
            print_json(serde_json::to_value(rows)?)
        }
        Command::Oracle(a) => {
            let x = a.data.load()?;
            let est = match a.method {
                OracleMethod::Knn => estimate_knn_kl(&x, a.k)?,
                OracleMethod::Kde => {
                    let train = a.train.as_ref().ok_or_else(|| Error::InvalidArgument("kde needs --train".into()))?;
                    oracle_kde(&load_file(train, a.data.delimiter, a.data.header)?, &x, a.bandwidth)?
                }
                OracleMethod::Mc => {
                    let kind = a.kind.ok_or_else(|| Error::InvalidArgument("mc needs --kind".into()))?;
                    let spec = DatasetArgs { kind, dim: a.dim, noise: a.noise }.spec();
                    if spec.dim() != x.cols() {
                        return Err(Error::Shape(format!("dataset dim {} vs data dim {}", spec.dim(), x.cols())));
                    }
                    oracle_mc(|v| spec.true_log_density(v).value, &x)?
                }
            };
            print_json(serde_json::to_value(est)?)
        }
    }
}

fn error_json(kind: &str, message: String) -> String {
    json!({"error": {"kind": kind, "message": message}}).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_json("usage", e.to_string()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json("runtime", e.to_string()));
            ExitCode::FAILURE
        }
    }
}
