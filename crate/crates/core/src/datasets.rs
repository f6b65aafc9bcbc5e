//! Synthetic benchmarks with exact densities, plus delimited-file loading.
//!
//! Generation is single-threaded and draws every value from one ChaCha
//! stream keyed by the caller's seed, so the same seed yields identical bytes.

use std::f64::consts::PI;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::special::ln_unit_ball_volume;
use crate::stats::logsumexp;
use crate::tensor::Tensor;

/// One symmetric triangular bump: support `[center - width/2, center + width/2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triangle {
    pub center: f64,
    pub width: f64,
    pub weight: f64,
}

/// Product of identical one-dimensional triangle mixtures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriangleMixtureSpec {
    pub dim: usize,
    pub marginal: Vec<Triangle>,
}

/// Entropy of the 8-d product that fixes the default bump width.
const TRIANGLE_ENTROPY_8D: f64 = 2.5852;
/// Cross-entropy of the best single Gaussian on the 8-d product; fixes the
/// default bump separation.
const TRIANGLE_GAUSSIAN_FIT_8D: f64 = 5.6612;

impl TriangleMixtureSpec {
    /// Default benchmark: a 10-bump mixture on `[0, 1]` with weights
    /// proportional to `1..=10` for `dim = 1`, otherwise the `dim`-fold product
    /// of an equal-weight bimodal marginal.
    pub fn default_for(dim: usize) -> Self {
        if dim == 1 {
            let total: f64 = (1..=10).map(f64::from).sum();
            let marginal = (0..10)
                .map(|k| Triangle { center: 0.05 + 0.1 * k as f64, width: 0.1, weight: f64::from(k + 1) / total })
                .collect();
            return Self { dim, marginal };
        }
        let (center, width) = default_bimodal_geometry();
        Self {
            dim,
            marginal: vec![Triangle { center: -center, width, weight: 0.5 }, Triangle { center, width, weight: 0.5 }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.marginal.is_empty() {
            return Err(Error::InvalidSpec("triangle mixture needs a dimension and components".into()));
        }
        let total: f64 = self.marginal.iter().map(|t| t.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!("triangle weights sum to {total}, not 1")));
        }
        for t in &self.marginal {
            if !(t.width > 0.0) || !(t.weight > 0.0) {
                return Err(Error::InvalidSpec(format!("triangle {t:?} needs positive width and weight")));
            }
        }
        let mut sorted = self.marginal.clone();
        sorted.sort_by(|a, b| a.center.total_cmp(&b.center));
        for pair in sorted.windows(2) {
            let gap = (pair[1].center - pair[1].width / 2.0) - (pair[0].center + pair[0].width / 2.0);
            if gap < -1e-12 {
                return Err(Error::InvalidSpec(format!(
                    "triangles centered at {} and {} overlap",
                    pair[0].center, pair[1].center
                )));
            }
        }
        Ok(())
    }

    fn marginal_density(&self, x: f64) -> f64 {
        self.marginal
            .iter()
            .map(|t| {
                let half = t.width / 2.0;
                let u = (x - t.center).abs();
                if u < half {
                    t.weight * (1.0 - u / half) / half
                } else {
                    0.0
                }
            })
            .sum()
    }

    /// Closed form: `H(weights) + sum_i w_i (1/2 + log(width_i / 2))` per dimension.
    pub fn marginal_entropy(&self) -> f64 {
        self.marginal.iter().map(|t| -t.weight * t.weight.ln() + t.weight * (0.5 + (t.width / 2.0).ln())).sum()
    }
}

/// `(center, width)` of the default bimodal marginal.
pub fn default_bimodal_geometry() -> (f64, f64) {
    let marginal_entropy = TRIANGLE_ENTROPY_8D / 8.0;
    let width = 2.0 * (marginal_entropy - 0.5 - std::f64::consts::LN_2).exp();
    // Single-Gaussian fit has variance center^2 + width^2 / 24 per coordinate.
    let variance = (2.0 * TRIANGLE_GAUSSIAN_FIT_8D / 8.0).exp() / (2.0 * PI * std::f64::consts::E);
    let center = (variance - width * width / 24.0).sqrt();
    (center, width)
}

/// Two interleaving half circles with isotropic Gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoMoonsSpec {
    pub noise: f64,
}

impl Default for TwoMoonsSpec {
    fn default() -> Self {
        Self { noise: 0.05 }
    }
}

impl TwoMoonsSpec {
    /// Noise-free arc point for arc `0` (upper) or `1` (lower) at angle `t`.
    pub fn arc_point(arc: usize, t: f64) -> [f64; 2] {
        if arc == 0 {
            [t.cos(), t.sin()]
        } else {
            [1.0 - t.cos(), 1.0 - t.sin() - 0.5]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Body {
    Ball,
    Cube,
}

/// Uniform distribution on a centered unit-volume ball or cube.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformBodySpec {
    pub body: Body,
    pub dim: usize,
}

impl UniformBodySpec {
    /// Radius of the unit-volume ball, `V_d r^d = 1`.
    pub fn ball_radius(dim: usize) -> f64 {
        (-ln_unit_ball_volume(dim) / dim as f64).exp()
    }
}

/// Benchmark distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Triangle(TriangleMixtureSpec),
    TwoMoons(TwoMoonsSpec),
    Uniform(UniformBodySpec),
    /// Isotropic Gaussian `N(mean, std^2 I)`.
    Gaussian {
        mean: Vec<f64>,
        std: f64,
    },
}

/// Closed-form entropy, or the reason there is none.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrueEntropy {
    Exact(f64),
    NoClosedForm,
}

impl TrueEntropy {
    pub fn value(self) -> Option<f64> {
        match self {
            TrueEntropy::Exact(v) => Some(v),
            TrueEntropy::NoClosedForm => None,
        }
    }
}

/// Exact or quadrature-based log-density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogDensity {
    pub value: f64,
    /// True when the value comes from numerical integration.
    pub approximate: bool,
}

const MOON_QUADRATURE_INTERVALS: usize = 2048;

impl DatasetSpec {
    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::Triangle(s) => s.dim,
            DatasetSpec::TwoMoons(_) => 2,
            DatasetSpec::Uniform(s) => s.dim,
            DatasetSpec::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Triangle(s) => s.validate(),
            DatasetSpec::TwoMoons(s) if !(s.noise >= 0.0) => {
                Err(Error::InvalidSpec(format!("two-moons noise {} must be nonnegative", s.noise)))
            }
            DatasetSpec::Uniform(s) if s.dim == 0 => Err(Error::InvalidSpec("uniform body needs dim >= 1".into())),
            DatasetSpec::Gaussian { mean, std } if mean.is_empty() || !(*std > 0.0) => {
                Err(Error::InvalidSpec("gaussian needs a mean and positive std".into()))
            }
            _ => Ok(()),
        }
    }

    /// `n` i.i.d. draws as an `n x d` matrix, deterministic in `seed`.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Tensor> {
        self.generate_with(n, &mut rng::seeded(seed))
    }

    pub fn generate_with<R: RngCore>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        self.validate()?;
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        let d = self.dim();
        let mut out = Vec::with_capacity(n * d);
        match self {
            DatasetSpec::Triangle(s) => {
                let mut cum = Vec::with_capacity(s.marginal.len());
                let mut acc = 0.0;
                for t in &s.marginal {
                    acc += t.weight;
                    cum.push(acc);
                }
                for _ in 0..n * d {
                    let t = &s.marginal[rng::categorical(rng, &cum)];
                    // sum of two uniforms is triangular on [0, 2]
                    let u = rng::uniform(rng) + rng::uniform(rng) - 1.0;
                    out.push(t.center + u * t.width / 2.0);
                }
            }
            DatasetSpec::TwoMoons(s) => {
                let n_upper = n / 2;
                let mut rows = Vec::with_capacity(n);
                for k in 0..n {
                    let arc = usize::from(k >= n_upper);
                    let t = PI * rng::uniform(rng);
                    let p = TwoMoonsSpec::arc_point(arc, t);
                    let (e1, e2) = rng::normal_pair(rng);
                    rows.push([p[0] + s.noise * e1, p[1] + s.noise * e2]);
                }
                for i in rng::permutation(rng, n) {
                    out.extend_from_slice(&rows[i]);
                }
            }
            DatasetSpec::Uniform(s) => match s.body {
                Body::Cube => {
                    for _ in 0..n * d {
                        out.push(rng::uniform(rng) - 0.5);
                    }
                }
                Body::Ball => {
                    let radius = UniformBodySpec::ball_radius(d);
                    let mut z = vec![0.0; d];
                    for _ in 0..n {
                        let norm = loop {
                            rng::fill_normal(rng, &mut z);
                            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                            if norm > 0.0 {
                                break norm;
                            }
                        };
                        let r = radius * rng::uniform(rng).powf(1.0 / d as f64);
                        out.extend(z.iter().map(|v| v / norm * r));
                    }
                }
            },
            DatasetSpec::Gaussian { mean, std } => {
                let mut z = vec![0.0; d];
                for _ in 0..n {
                    rng::fill_normal(rng, &mut z);
                    out.extend(z.iter().zip(mean).map(|(v, m)| m + std * v));
                }
            }
        }
        Tensor::matrix(n, d, out)
    }

    /// Log-density at `x` (`-inf` outside the support).
    pub fn true_log_density(&self, x: &[f64]) -> LogDensity {
        let exact = |value| LogDensity { value, approximate: false };
        match self {
            DatasetSpec::Triangle(s) => exact(x.iter().map(|&v| s.marginal_density(v).ln()).sum()),
            DatasetSpec::TwoMoons(s) => LogDensity { value: moons_log_density(s.noise, x), approximate: true },
            DatasetSpec::Uniform(s) => {
                let inside = match s.body {
                    Body::Cube => x.iter().all(|v| v.abs() <= 0.5),
                    Body::Ball => x.iter().map(|v| v * v).sum::<f64>() <= UniformBodySpec::ball_radius(s.dim).powi(2),
                };
                exact(if inside { 0.0 } else { f64::NEG_INFINITY })
            }
            DatasetSpec::Gaussian { mean, std } => {
                let d = mean.len() as f64;
                let sq: f64 = x.iter().zip(mean).map(|(a, m)| (a - m).powi(2)).sum();
                exact(-0.5 * sq / (std * std) - d * std.ln() - 0.5 * d * (2.0 * PI).ln())
            }
        }
    }

    /// Log-density of every row.
    pub fn true_log_density_batch(&self, x: &Tensor) -> Vec<f64> {
        (0..x.rows()).map(|i| self.true_log_density(x.row(i)).value).collect()
    }

    pub fn true_entropy(&self) -> TrueEntropy {
        match self {
            DatasetSpec::Triangle(s) => TrueEntropy::Exact(s.dim as f64 * s.marginal_entropy()),
            DatasetSpec::TwoMoons(_) => TrueEntropy::NoClosedForm,
            DatasetSpec::Uniform(_) => TrueEntropy::Exact(0.0),
            DatasetSpec::Gaussian { mean, std } => {
                let d = mean.len() as f64;
                TrueEntropy::Exact(0.5 * d * (2.0 * PI * std::f64::consts::E * std * std).ln())
            }
        }
    }
}

/// Log of `1/2 sum_arcs (1/pi) int_0^pi N(x; c(t), noise^2 I) dt` by composite Simpson.
fn moons_log_density(noise: f64, x: &[f64]) -> f64 {
    let k = MOON_QUADRATURE_INTERVALS;
    let h = PI / k as f64;
    let var = noise * noise;
    let log_norm = -(2.0 * PI * var).ln();
    let mut terms = Vec::with_capacity(2 * (k + 1));
    for arc in 0..2 {
        for j in 0..=k {
            let t = j as f64 * h;
            let w = if j == 0 || j == k {
                1.0
            } else if j % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let c = TwoMoonsSpec::arc_point(arc, t);
            let sq = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
            terms.push((w * h / 3.0 / PI * 0.5).ln() + log_norm - 0.5 * sq / var);
        }
    }
    logsumexp(&terms)
}

/// Parse a rectangular numeric delimited file.
pub fn load_delimited(path: &Path, delimiter: u8, has_header: bool) -> Result<Tensor> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse { path: path.to_owned(), line: 0, message: e.to_string() })?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    line,
                    message: format!("expected {c} fields, found {}", record.len()),
                })
            }
            _ => {}
        }
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                path: path.to_owned(),
                line,
                message: format!("non-numeric field `{field}`"),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or(Error::Empty("delimited file"))?;
    Tensor::matrix(rows, cols, data)
}
