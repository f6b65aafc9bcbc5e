//! Entropy estimators: the combined base-plus-correction estimator and the
//! reference oracles (Monte Carlo, kernel plug-in, nearest neighbor).

mod knn;

use std::f64::consts::PI;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::DatasetSpec;
use crate::dv::dv_estimate;
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::network::CorrectionNetwork;
use crate::special::{digamma, ln_unit_ball_volume};
use crate::stats::mean_and_stderr;
use crate::tensor::Tensor;

pub use knn::{squared_distance, KnnIndex, Neighbor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Base cross-entropy minus the correction's variational estimate.
    Remedi,
    /// Cross-entropy of the base alone, an upper bound on the entropy.
    Knife,
    MonteCarlo,
    Kde,
    Knn,
}

/// An entropy estimate in nats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    pub method: Method,
    pub value: f64,
    pub std_error: f64,
    /// Number of evaluation points drawn from the data distribution.
    pub n: usize,
    /// Number of base samples used, zero when none.
    pub m: usize,
    pub wall_seconds: f64,
    /// For the combined estimator: `(cross_entropy, dv_estimate)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terms: Option<(f64, f64)>,
}

impl EntropyEstimate {
    fn checked(self) -> Result<Self> {
        if !self.value.is_finite() {
            return Err(Error::InvalidArgument(format!("{:?} estimate is not finite", self.method)));
        }
        Ok(self)
    }
}

/// A density whose exact log can be evaluated row by row.
pub trait LogDensityModel {
    fn log_density_rows(&self, x: &Tensor) -> Result<Vec<f64>>;
}

impl LogDensityModel for GaussianMixture {
    fn log_density_rows(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.log_density_batch(x)
    }
}

impl LogDensityModel for DatasetSpec {
    fn log_density_rows(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.true_log_density_batch(x))
    }
}

/// `mean(-log q(x_p)) - [mean T(x_p) - log mean exp T(x_q)]`.
///
/// `network = None` means `T = 0`, giving the base cross-entropy exactly.
/// The standard error uses the per-sample variance of `-log q - T` over the
/// data points.
pub fn estimate_remedi(
    base: &dyn LogDensityModel,
    network: Option<&CorrectionNetwork>,
    p: &Tensor,
    q: &Tensor,
) -> Result<EntropyEstimate> {
    let start = Instant::now();
    if p.is_empty() || (network.is_some() && q.is_empty()) {
        return Err(Error::Empty("evaluation data"));
    }
    let log_q = base.log_density_rows(p)?;
    let (t_p, t_q) = match network {
        Some(net) => (net.t_values(p)?, net.t_values(q)?),
        None => (vec![0.0; p.rows()], vec![0.0]),
    };
    let cross: Vec<f64> = log_q.iter().map(|v| -v).collect();
    let per_sample: Vec<f64> = cross.iter().zip(&t_p).map(|(c, t)| c - t).collect();
    let (cross_mean, _) = mean_and_stderr(&cross);
    let dv = if network.is_some() { dv_estimate(&t_p, &t_q) } else { 0.0 };
    let (_, std_error) = mean_and_stderr(&per_sample);
    EntropyEstimate {
        method: Method::Remedi,
        value: cross_mean - dv,
        std_error,
        n: p.rows(),
        m: if network.is_some() { q.rows() } else { 0 },
        wall_seconds: start.elapsed().as_secs_f64(),
        terms: Some((cross_mean, dv)),
    }
    .checked()
}

/// Cross-entropy of a base density alone.
pub fn estimate_cross_entropy(base: &dyn LogDensityModel, p: &Tensor) -> Result<EntropyEstimate> {
    let mut est = estimate_remedi(base, None, p, p)?;
    est.method = Method::Knife;
    est.terms = None;
    Ok(est)
}

/// Monte Carlo oracle `mean(-log p(x_i))` with an exact log-density.
pub fn oracle_mc(log_density: impl Fn(&[f64]) -> f64, samples: &Tensor) -> Result<EntropyEstimate> {
    let start = Instant::now();
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let neg: Vec<f64> = (0..samples.rows()).map(|i| -log_density(samples.row(i))).collect();
    let (value, std_error) = mean_and_stderr(&neg);
    EntropyEstimate {
        method: Method::MonteCarlo,
        value,
        std_error,
        n: samples.rows(),
        m: 0,
        wall_seconds: start.elapsed().as_secs_f64(),
        terms: None,
    }
    .checked()
}

/// Kernel terms below `exp(-KDE_CUTOFF)` relative to the nearest one are dropped.
const KDE_CUTOFF: f64 = 40.0;

/// Gaussian-kernel plug-in estimate with bandwidth `h`.
///
/// Train and eval sets are expected to be disjoint draws. For each eval
/// point the sum runs over training points within
/// `sqrt(r0^2 + 2 h^2 KDE_CUTOFF)`, where `r0` is the nearest distance, so
/// the dropped mass is below `n exp(-KDE_CUTOFF)` relative to the kept sum.
pub fn oracle_kde(train: &Tensor, eval: &Tensor, h: f64) -> Result<EntropyEstimate> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth {h} must be positive")));
    }
    if eval.is_empty() {
        return Err(Error::Empty("evaluation samples"));
    }
    if train.cols() != eval.cols() {
        return Err(Error::Shape(format!("train dim {} vs eval dim {}", train.cols(), eval.cols())));
    }
    let start = Instant::now();
    let index = KnnIndex::new(train.clone())?;
    let d = train.cols() as f64;
    let two_h2 = 2.0 * h * h;
    let log_norm = -(train.rows() as f64).ln() - 0.5 * d * (2.0 * PI * h * h).ln();
    let mut neg = Vec::with_capacity(eval.rows());
    for i in 0..eval.rows() {
        let x = eval.row(i);
        let r0 = index.nearest(x, 1, None)[0].dist2;
        let mut sum = 0.0;
        index.for_each_within(x, r0 + two_h2 * KDE_CUTOFF, |_, d2| sum += (-(d2 - r0) / two_h2).exp());
        neg.push(-(log_norm - r0 / two_h2 + sum.ln()));
    }
    let (value, std_error) = mean_and_stderr(&neg);
    EntropyEstimate {
        method: Method::Kde,
        value,
        std_error,
        n: eval.rows(),
        m: train.rows(),
        wall_seconds: start.elapsed().as_secs_f64(),
        terms: None,
    }
    .checked()
}

/// Kozachenko–Leonenko estimate
/// `psi(n) - psi(k) + log V_d + (d/n) sum log eps_i`.
///
/// The standard error is the sample std of the per-point terms
/// `d log eps_i` over `sqrt(n)`.
pub fn estimate_knn_kl(samples: &Tensor, k: usize) -> Result<EntropyEstimate> {
    let n = samples.rows();
    if k == 0 || n <= k {
        return Err(Error::InvalidArgument(format!("need k >= 1 and n > k, got k = {k}, n = {n}")));
    }
    let start = Instant::now();
    let d = samples.cols();
    let index = KnnIndex::new(samples.clone())?;
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let nn = index.nearest(samples.row(i), k, Some(i));
        let kth = nn[k - 1];
        if kth.dist2 == 0.0 {
            let first = nn.iter().find(|x| x.dist2 == 0.0).expect("zero distance present");
            return Err(Error::DuplicatePoints { first: i.min(first.index), second: i.max(first.index) });
        }
        terms.push(0.5 * d as f64 * kth.dist2.ln());
    }
    let (mean, std_error) = mean_and_stderr(&terms);
    let value = digamma(n as f64) - digamma(k as f64) + ln_unit_ball_volume(d) + mean;
    EntropyEstimate {
        method: Method::Knn,
        value,
        std_error,
        n,
        m: 0,
        wall_seconds: start.elapsed().as_secs_f64(),
        terms: None,
    }
    .checked()
}
