use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{DatasetConfig, ExperimentConfig, Oracle};
use super::emit::{emit, EmitFormats};
use crate::datasets::{load_delimited, DatasetSpec};
use crate::dv::{train_dv, DvValidation, GibbsDensity};
use crate::error::{Error, Result};
use crate::estimators::{
    estimate_cross_entropy, estimate_knn_kl, estimate_remedi, oracle_kde, oracle_mc, EntropyEstimate, Method,
};
use crate::gmm::GaussianMixture;
use crate::network::CorrectionNetwork;
use crate::rng::{self, purpose};
use crate::stats::{mean_and_std, median};
use crate::tensor::Tensor;

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Cross-entropy training of the base mixture.
    Knife,
    /// Correction training with the base frozen.
    Remedi,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Knife => "knife",
            Phase::Remedi => "remedi",
        }
    }
}

/// One training-curve row. In the knife phase the losses are cross-entropies
/// and the entropy estimate is the validation cross-entropy; in the remedi
/// phase the losses are negated DV estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub run_id: String,
    pub seed: u64,
    pub phase: Phase,
    pub epoch: usize,
    /// Absent for the remedi row before any update.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub dv_estimate: f64,
    pub entropy_estimate: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestEpoch {
    pub phase: Phase,
    pub epoch: usize,
    pub entropy_estimate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub data_seconds: f64,
    pub knife_seconds: f64,
    pub remedi_seconds: f64,
    pub evaluation_seconds: f64,
    pub total_seconds: f64,
}

/// Everything one seed produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
    pub config: ExperimentConfig,
    pub true_entropy: Option<f64>,
    pub curves: Vec<CurveRow>,
    /// Last-epoch estimates on the validation split: knife, remedi, then oracles.
    pub estimates: Vec<EntropyEstimate>,
    /// Epoch with the lowest validation loss in each phase.
    pub best_val: Vec<BestEpoch>,
    pub timing: Timing,
}

impl RunResult {
    pub fn estimate(&self, method: Method) -> Option<&EntropyEstimate> {
        self.estimates.iter().find(|e| e.method == method)
    }

    /// Last-row train/val loss gap of the knife phase.
    pub fn knife_generalization_gap(&self) -> Option<f64> {
        let last = self.curves.iter().rfind(|r| r.phase == Phase::Knife)?;
        Some(last.val_loss - last.train_loss?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mean: f64,
    /// Sample standard deviation across seeds (0 for one seed).
    pub std: f64,
    pub median: f64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub run_id: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub true_entropy: Option<f64>,
    pub methods: Vec<MethodSummary>,
}

impl Aggregate {
    pub fn method(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }
}

/// Mean, std and median of every method across runs, in first-seen order.
pub fn aggregate(results: &[RunResult]) -> Result<Aggregate> {
    let first = results.first().ok_or(Error::Empty("run results"))?;
    let mut order = Vec::new();
    let mut values: BTreeMap<String, (Method, Vec<f64>)> = BTreeMap::new();
    for r in results {
        for e in &r.estimates {
            let key = format!("{:?}", e.method);
            if !values.contains_key(&key) {
                order.push(key.clone());
            }
            values.entry(key).or_insert((e.method, Vec::new())).1.push(e.value);
        }
    }
    let methods = order
        .iter()
        .map(|k| {
            let (method, v) = &values[k];
            let (mean, std) = mean_and_std(v);
            MethodSummary { method: *method, mean, std, median: median(v), values: v.clone() }
        })
        .collect();
    Ok(Aggregate {
        run_id: first.run_id.clone(),
        config_hash: first.config_hash.clone(),
        seeds: results.iter().map(|r| r.seed).collect(),
        true_entropy: first.true_entropy,
        methods,
    })
}

/// Train and validation matrices for one seed.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub train: Tensor,
    pub val: Tensor,
    pub spec: Option<DatasetSpec>,
}

/// Generate (synthetic) or load and shuffle-split (file) the data for `seed`.
pub fn load_data(config: &ExperimentConfig, seed: u64) -> Result<SplitData> {
    let val_size = |total: usize| match (config.data.val_size, config.data.val_fraction) {
        (Some(v), _) => v,
        (None, Some(f)) => ((total as f64) * f).round() as usize,
        (None, None) => unreachable!("validated config"),
    };
    match &config.dataset {
        DatasetConfig::File { path, delimiter, header } => {
            if !delimiter.is_ascii() {
                return Err(Error::Config(format!("delimiter `{delimiter}` must be ASCII")));
            }
            let all = load_delimited(path, *delimiter as u8, *header)?;
            let n = all.rows();
            let nv = val_size(n);
            if nv == 0 || nv >= n {
                return Err(Error::Config(format!("validation split of {nv} rows leaves no data out of {n}")));
            }
            let order = rng::permutation(&mut rng::substream(seed, purpose::TRAIN_DATA), n);
            Ok(SplitData { train: all.select_rows(&order[nv..]), val: all.select_rows(&order[..nv]), spec: None })
        }
        _ => {
            let spec = config.dataset.spec().expect("synthetic dataset");
            let n = config.data.train_size.expect("validated config");
            let nv = val_size(n);
            if nv == 0 {
                return Err(Error::Config("validation split is empty".into()));
            }
            let train = spec.generate_with(n, &mut rng::substream(seed, purpose::TRAIN_DATA))?;
            let val = spec.generate_with(nv, &mut rng::substream(seed, purpose::VAL_DATA))?;
            Ok(SplitData { train, val, spec: Some(spec) })
        }
    }
}

/// Trained models of one seed alongside its result.
pub struct ExperimentOutcome {
    pub result: RunResult,
    pub gibbs: GibbsDensity,
}

/// Run the two-phase procedure for one seed.
///
/// On failure, the curve rows completed so far are returned with the error.
pub fn run_seed(
    config: &ExperimentConfig,
    seed: u64,
) -> std::result::Result<ExperimentOutcome, (Error, Vec<CurveRow>)> {
    let mut curves = Vec::new();
    match run_seed_inner(config, seed, &mut curves) {
        Ok(outcome) => Ok(outcome),
        Err(e) => Err((e.context(format!("run `{}` seed {seed}", config.run_id)), curves)),
    }
}

fn run_seed_inner(config: &ExperimentConfig, seed: u64, curves: &mut Vec<CurveRow>) -> Result<ExperimentOutcome> {
    config.validate()?;
    let total = Instant::now();
    let mut timing = Timing::default();
    let data = load_data(config, seed)?;
    timing.data_seconds = total.elapsed().as_secs_f64();
    let row = |phase, epoch, train_loss, val_loss, dv_estimate, entropy_estimate, wall_seconds| CurveRow {
        run_id: config.run_id.clone(),
        seed,
        phase,
        epoch,
        train_loss,
        val_loss,
        dv_estimate,
        entropy_estimate,
        wall_seconds,
    };

    // Phase 1: base mixture by cross-entropy.
    let phase_start = Instant::now();
    let mut base = GaussianMixture::initialize(
        &data.train,
        config.base.components,
        config.base.diagonal,
        &mut rng::substream(seed, purpose::BASE_INIT),
    )?;
    let knife_curve = base
        .train_cross_entropy(&data.train, &data.val, &config.base_settings(), seed)
        .map_err(|e| e.context("knife phase"))?;
    let offset = timing.data_seconds;
    for r in &knife_curve {
        curves.push(row(
            Phase::Knife,
            r.epoch,
            Some(r.train_loss),
            r.val_loss,
            0.0,
            r.val_loss,
            offset + r.wall_seconds,
        ));
    }
    timing.knife_seconds = phase_start.elapsed().as_secs_f64();
    let val_cross_entropy = knife_curve.last().expect("epoch 0 recorded").val_loss;

    // Phase 2: m base samples drawn once, then the correction.
    let phase_start = Instant::now();
    let m = config.correction.q_samples.unwrap_or(data.train.rows());
    let q_train = base.sample(m, &mut rng::substream(seed, purpose::Q_TRAIN));
    let q_val = base.sample(data.val.rows(), &mut rng::substream(seed, purpose::Q_VAL));
    let mut network = CorrectionNetwork::new(
        config.correction.network(),
        base.dim(),
        Some(base.clone()),
        &mut rng::substream(seed, purpose::NET_INIT),
    )?;
    let resample = config.correction.resample_each_epoch.then_some(&base);
    let dv_curve = train_dv(
        &mut network,
        &data.train,
        &q_train,
        Some(DvValidation { p: &data.val, q: &q_val }),
        &config.dv_settings(),
        resample,
        seed,
    )
    .map_err(|e| e.context("remedi phase"))?;
    let offset = offset + timing.knife_seconds;
    for r in &dv_curve {
        curves.push(row(
            Phase::Remedi,
            r.epoch,
            r.train_dv.is_finite().then_some(-r.train_dv),
            -r.val_dv,
            r.val_dv,
            val_cross_entropy - r.val_dv,
            offset + r.wall_seconds,
        ));
    }
    timing.remedi_seconds = phase_start.elapsed().as_secs_f64();

    // Evaluation on the held-out split.
    let phase_start = Instant::now();
    let mut estimates =
        vec![estimate_cross_entropy(&base, &data.val)?, estimate_remedi(&base, Some(&network), &data.val, &q_val)?];
    for oracle in &config.evaluation.oracles {
        let est = match oracle {
            Oracle::Mc => {
                let spec = data.spec.as_ref().expect("validated config");
                oracle_mc(|x| spec.true_log_density(x).value, &data.val)?
            }
            Oracle::Knn => estimate_knn_kl(&data.val, config.evaluation.knn_k)?,
            Oracle::Kde => oracle_kde(&data.train, &data.val, config.evaluation.kde_bandwidth)?,
        };
        estimates.push(est);
    }
    timing.evaluation_seconds = phase_start.elapsed().as_secs_f64();
    timing.total_seconds = total.elapsed().as_secs_f64();

    let best_val = [Phase::Knife, Phase::Remedi]
        .into_iter()
        .filter_map(|phase| {
            curves
                .iter()
                .filter(|r| r.phase == phase)
                .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
                .map(|r| BestEpoch { phase, epoch: r.epoch, entropy_estimate: r.entropy_estimate })
        })
        .collect();

    let gibbs = GibbsDensity::new(base, network)?;
    let result = RunResult {
        run_id: config.run_id.clone(),
        seed,
        config_hash: config.hash(),
        code_version: CODE_VERSION.to_owned(),
        config: config.clone(),
        true_entropy: data.spec.as_ref().and_then(|s| s.true_entropy().value()),
        curves: std::mem::take(curves),
        estimates,
        best_val,
        timing,
    };
    Ok(ExperimentOutcome { result, gibbs })
}

/// Run every seed (up to `config.threads` at a time), emit files when an
/// output directory is configured, and aggregate.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(Vec<RunResult>, Aggregate)> {
    config.validate()?;
    let outcomes = run_seeds(config);
    let mut results = Vec::with_capacity(outcomes.len());
    for (seed, outcome) in config.seeds.iter().zip(outcomes) {
        match outcome {
            Ok(o) => {
                if let Some(dir) = &config.output_dir {
                    emit(&o.result, Some(&o.gibbs), dir, EmitFormats::all())?;
                }
                results.push(o.result);
            }
            Err((err, partial)) => {
                if let Some(dir) = &config.output_dir {
                    let path = dir.join(format!("{}_seed{seed}_partial_curves.csv", config.run_id));
                    super::emit::write_curves_csv(&path, &partial, &config.hash())?;
                }
                return Err(err);
            }
        }
    }
    let agg = aggregate(&results)?;
    if let Some(dir) = &config.output_dir {
        crate::persist::write_json(&dir.join(format!("{}_aggregate.json", config.run_id)), &agg)?;
    }
    Ok((results, agg))
}

type SeedOutcome = std::result::Result<ExperimentOutcome, (Error, Vec<CurveRow>)>;

fn run_seeds(config: &ExperimentConfig) -> Vec<SeedOutcome> {
    let threads = config.threads.min(config.seeds.len()).max(1);
    if threads == 1 {
        return config.seeds.iter().map(|&s| run_seed(config, s)).collect();
    }
    let mut slots: Vec<Option<SeedOutcome>> = (0..config.seeds.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                scope.spawn(move || {
                    (w..config.seeds.len())
                        .step_by(threads)
                        .map(|i| (i, run_seed(config, config.seeds[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, out) in h.join().expect("worker panicked") {
                slots[i] = Some(out);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every seed ran")).collect()
}

/// One sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: serde_json::Value,
    pub aggregate: Aggregate,
}

/// `run_experiment` once per value of the dotted config field `axis`.
pub fn sweep(template: &ExperimentConfig, axis: &str, values: &[serde_json::Value]) -> Result<Vec<SweepRow>> {
    let configs = values
        .iter()
        .map(|v| {
            let mut cfg = template.with_field(axis, v.clone())?;
            cfg.run_id = format!("{}_{}_{}", template.run_id, axis.replace('.', "-"), value_label(v));
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (cfg, v) in configs.iter().zip(values) {
        let (_, aggregate) = run_experiment(cfg)?;
        rows.push(SweepRow { axis: axis.to_owned(), value: v.clone(), aggregate });
    }
    if let Some(dir) = &template.output_dir {
        crate::persist::write_json(&dir.join(format!("{}_sweep.json", template.run_id)), &rows)?;
    }
    Ok(rows)
}

fn value_label(v: &serde_json::Value) -> String {
    let s = match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}
