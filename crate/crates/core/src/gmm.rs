//! Trainable Gaussian-mixture base distribution.
//!
//! Each component `i` has a mean `mu_i` and a precision `L_i^T L_i`, so the
//! log-kernel is `-0.5 |L_i (x - mu_i)|^2` up to normalization. `L_i` is lower
//! triangular, factored as `L_i = (I + N_i) diag(exp(s_i))`. The
//! raw parameter tensor holds `s_i` on its diagonal and the strictly-lower
//! `N_i` below it, so any real parameter vector is a valid model and the
//! off-diagonal entries scale with their column. Mixture weights are the
//! softmax of unconstrained logits.

use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, ParameterStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, purpose};
use crate::tensor::Tensor;

/// How component relevances `p(i | x)` are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relevance {
    /// Exact posterior, including each component's `det L_i` normalizer.
    #[default]
    Posterior,
    /// `w_i exp(-0.5 |L_i (x - mu_i)|^2)` without the determinant term.
    Unnormalized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    weight_logits: Tensor,
    means: Tensor,
    chol_raw: Tensor,
    diagonal: bool,
}

/// Tape handles for a mixture's parameters.
#[derive(Clone, Copy, Debug)]
pub struct MixtureVars {
    pub weight_logits: Var,
    pub means: Var,
    pub chol_raw: Var,
    pub diagonal: bool,
}

/// One row of a base-model training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossEntropyEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Seconds since training started.
    pub wall_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl GaussianMixture {
    pub fn new(weight_logits: Tensor, means: Tensor, chol_raw: Tensor, diagonal: bool) -> Result<Self> {
        let m = weight_logits.len();
        let d = means.cols();
        if m == 0 || d == 0 {
            return Err(Error::InvalidArgument("mixture needs at least one component and dimension".into()));
        }
        if means.shape() != [m, d] || chol_raw.shape() != [m, d, d] {
            return Err(Error::Shape(format!(
                "mixture parameters: logits {:?}, means {:?}, cholesky {:?}",
                weight_logits.shape(),
                means.shape(),
                chol_raw.shape()
            )));
        }
        let weight_logits = weight_logits.reshape(vec![m])?;
        let mut model = Self { weight_logits, means, chol_raw, diagonal };
        if diagonal {
            model.clear_off_diagonal();
        }
        Ok(model)
    }

    /// Build from dense lower-triangular precision factors (`M x d x d`, positive diagonal).
    pub fn from_cholesky(weight_logits: Tensor, means: Tensor, factors: &Tensor) -> Result<Self> {
        let shape = factors.shape().to_vec();
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(Error::Shape(format!("cholesky factors {shape:?}")));
        }
        let d = shape[1];
        let mut raw = factors.clone();
        for i in 0..shape[0] {
            for j in 0..d {
                let idx = i * d * d + j * d + j;
                let v = factors.data()[idx];
                if v <= 0.0 {
                    return Err(Error::InvalidArgument(format!("component {i}: cholesky diagonal entry {j} is {v}")));
                }
                for k in 0..d {
                    let off = i * d * d + j * d + k;
                    raw.data_mut()[off] = match k.cmp(&j) {
                        std::cmp::Ordering::Less => factors.data()[off] / factors.data()[i * d * d + k * d + k],
                        std::cmp::Ordering::Equal => v.ln(),
                        std::cmp::Ordering::Greater => 0.0,
                    };
                }
            }
        }
        Self::new(weight_logits, means, raw, false)
    }

    /// Single standard normal component in `d` dimensions.
    pub fn standard_normal(d: usize) -> Self {
        Self::new(Tensor::zeros(&[1]), Tensor::zeros(&[1, d]), Tensor::zeros(&[1, d, d]), false).expect("valid shapes")
    }

    /// Data-driven initialization: means at random training points, every
    /// precision factor `diag(1 / std_j)`, uniform weights.
    pub fn initialize<R: RngCore>(data: &Tensor, components: usize, diagonal: bool, rng: &mut R) -> Result<Self> {
        if data.rows() == 0 {
            return Err(Error::Empty("training data"));
        }
        if components == 0 {
            return Err(Error::InvalidArgument("components must be at least 1".into()));
        }
        let (n, d) = (data.rows(), data.cols());
        let picks: Vec<usize> = if components <= n {
            rng::permutation(rng, n).into_iter().take(components).collect()
        } else {
            (0..components).map(|_| ((rng::uniform(rng) * n as f64) as usize).min(n - 1)).collect()
        };
        let means = data.select_rows(&picks);
        let stds = data.column_stds();
        let mut chol = Tensor::zeros(&[components, d, d]);
        for i in 0..components {
            for (j, s) in stds.iter().enumerate() {
                let s = if *s > 0.0 { *s } else { 1.0 };
                chol.data_mut()[i * d * d + j * d + j] = -s.ln();
            }
        }
        Self::new(Tensor::zeros(&[components]), means, chol, diagonal)
    }

    pub fn components(&self) -> usize {
        self.weight_logits.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    pub fn weight_logits(&self) -> &Tensor {
        &self.weight_logits
    }

    pub fn means(&self) -> &Tensor {
        &self.means
    }

    pub fn chol_raw(&self) -> &Tensor {
        &self.chol_raw
    }

    /// Mixture weights (softmax of the logits).
    pub fn weights(&self) -> Vec<f64> {
        let lse = crate::stats::logsumexp(self.weight_logits.data());
        self.weight_logits.data().iter().map(|l| (l - lse).exp()).collect()
    }

    /// Dense factor `L_i`.
    pub fn cholesky_factor(&self, i: usize) -> Tensor {
        let d = self.dim();
        let mut l = Tensor::zeros(&[d, d]);
        let raw = &self.chol_raw.data()[i * d * d..(i + 1) * d * d];
        for j in 0..d {
            l.set(j, j, raw[j * d + j].exp());
        }
        if !self.diagonal {
            for j in 0..d {
                for k in 0..j {
                    l.set(j, k, raw[j * d + k] * raw[k * d + k].exp());
                }
            }
        }
        l
    }

    /// Covariance `(L_i^T L_i)^{-1}` of component `i`.
    pub fn covariance(&self, i: usize) -> Tensor {
        let d = self.dim();
        let l = self.cholesky_factor(i);
        // columns of L^{-1}: solve L c = e_k
        let mut inv_t = Tensor::zeros(&[d, d]);
        for k in 0..d {
            let mut e = vec![0.0; d];
            e[k] = 1.0;
            let c = solve_lower(&l, &e);
            for j in 0..d {
                inv_t.set(j, k, c[j]);
            }
        }
        // Sigma = L^{-1} L^{-T} = inv_t inv_t^T
        let mut cov = Tensor::zeros(&[d, d]);
        for a in 0..d {
            for b in 0..d {
                let s: f64 = (0..d).map(|k| inv_t.get(a, k) * inv_t.get(b, k)).sum();
                cov.set(a, b, s);
            }
        }
        cov
    }

    fn clear_off_diagonal(&mut self) {
        let d = self.dim();
        for i in 0..self.components() {
            for j in 0..d {
                for k in 0..d {
                    if j != k {
                        self.chol_raw.data_mut()[i * d * d + j * d + k] = 0.0;
                    }
                }
            }
        }
    }

    /// Parameters as trainable leaves.
    pub fn attach(&self, tape: &mut Tape) -> MixtureVars {
        MixtureVars {
            weight_logits: tape.param(self.weight_logits.clone()),
            means: tape.param(self.means.clone()),
            chol_raw: tape.param(self.chol_raw.clone()),
            diagonal: self.diagonal,
        }
    }

    /// Parameters as constants.
    pub fn attach_frozen(&self, tape: &mut Tape) -> MixtureVars {
        MixtureVars {
            weight_logits: tape.constant(self.weight_logits.clone()),
            means: tape.constant(self.means.clone()),
            chol_raw: tape.constant(self.chol_raw.clone()),
            diagonal: self.diagonal,
        }
    }

    fn check_dim(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::Shape(format!("points have dimension {}, mixture has {}", x.cols(), self.dim())));
        }
        Ok(())
    }

    /// `log q(x)` for every row of `x`.
    pub fn log_density_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut tape = Tape::new();
        let vars = self.attach_frozen(&mut tape);
        let xv = tape.constant(as_matrix(x)?);
        let out = log_density(&mut tape, xv, &vars)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let t = Tensor::matrix(1, x.len(), x.to_vec())?;
        Ok(self.log_density_batch(&t)?[0])
    }

    /// Component relevances `p(i | x)`, one row per point.
    pub fn responsibilities(&self, x: &Tensor, mode: Relevance) -> Result<Tensor> {
        self.check_dim(x)?;
        if x.rows() == 0 {
            return Err(Error::Empty("batch"));
        }
        let mut tape = Tape::new();
        let vars = self.attach_frozen(&mut tape);
        let xv = tape.constant(as_matrix(x)?);
        let r = responsibilities(&mut tape, xv, &vars, mode)?;
        Ok(tape.value(r).clone())
    }

    /// Draw `n` points: categorical component choice, then `mu_i + L_i^{-1} z`.
    pub fn sample<R: RngCore>(&self, n: usize, rng: &mut R) -> Tensor {
        let d = self.dim();
        let weights = self.weights();
        let mut cum = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in &weights {
            acc += w;
            cum.push(acc);
        }
        let factors: Vec<Tensor> = (0..self.components()).map(|i| self.cholesky_factor(i)).collect();
        let mut out = Vec::with_capacity(n * d);
        let mut z = vec![0.0; d];
        for _ in 0..n {
            let i = rng::categorical(rng, &cum);
            rng::fill_normal(rng, &mut z);
            let offset = solve_lower(&factors[i], &z);
            let mu = self.means.row(i);
            out.extend(mu.iter().zip(&offset).map(|(m, o)| m + o));
        }
        Tensor::matrix(n, d, out).expect("n x d")
    }

    /// Mean and standard error of `-log q` over `data` (plug-in entropy estimate).
    pub fn cross_entropy(&self, data: &Tensor) -> Result<(f64, f64)> {
        if data.rows() == 0 {
            return Err(Error::Empty("evaluation data"));
        }
        let mut neg = Vec::with_capacity(data.rows());
        for start in (0..data.rows()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(data.rows());
            neg.extend(self.log_density_batch(&data.slice_rows(start, end))?.into_iter().map(|v| -v));
        }
        Ok(crate::stats::mean_and_stderr(&neg))
    }

    /// Minibatch Adam on the mean negative log-density.
    ///
    /// Returns one row per epoch, starting with epoch 0 (before any update);
    /// both losses are full-pass evaluations at the end of each epoch.
    pub fn train_cross_entropy(
        &mut self,
        train: &Tensor,
        val: &Tensor,
        settings: &TrainSettings,
        seed: u64,
    ) -> Result<Vec<CrossEntropyEpoch>> {
        if train.rows() == 0 {
            return Err(Error::Empty("training data"));
        }
        self.check_dim(train)?;
        self.check_dim(val)?;
        if settings.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let mut store = ParameterStore::new();
        store.insert("weight_logits", self.weight_logits.clone());
        store.insert("means", self.means.clone());
        store.insert("chol_raw", self.chol_raw.clone());
        let mut shuffle = rng::substream(seed, purpose::BASE_SHUFFLE);
        let start = Instant::now();

        let mut curve = Vec::with_capacity(settings.epochs + 1);
        curve.push(self.epoch_record(0, train, val, &start)?);
        for epoch in 1..=settings.epochs {
            let order = rng::permutation(&mut shuffle, train.rows());
            for (batch, idx) in order.chunks(settings.batch_size).enumerate() {
                let x = train.select_rows(idx);
                let mut tape = Tape::new();
                let vars = store.attach(&mut tape);
                let mv =
                    MixtureVars { weight_logits: vars[0], means: vars[1], chol_raw: vars[2], diagonal: self.diagonal };
                let xv = tape.constant(x);
                let logq = log_density(&mut tape, xv, &mv)?;
                let mean = tape.mean(logq);
                let loss = tape.scale(mean, -1.0);
                if !tape.value(loss).item().is_finite() {
                    return Err(Error::NonFiniteLoss { phase: "knife", epoch, batch });
                }
                let mut grads = tape.backward_scalar(loss)?;
                let g: Vec<_> = vars.iter().map(|v| grads.take(*v)).collect();
                store.adam_step(&g, &settings.optimizer)?;
                if self.diagonal {
                    self.chol_raw = store.value(2).clone();
                    self.clear_off_diagonal();
                    *store.value_mut(2) = self.chol_raw.clone();
                }
            }
            self.weight_logits = store.value(0).clone();
            self.means = store.value(1).clone();
            self.chol_raw = store.value(2).clone();
            curve.push(self.epoch_record(epoch, train, val, &start)?);
        }
        Ok(curve)
    }

    fn epoch_record(&self, epoch: usize, train: &Tensor, val: &Tensor, start: &Instant) -> Result<CrossEntropyEpoch> {
        let train_loss = self.cross_entropy(train)?.0;
        let val_loss = if val.rows() > 0 { self.cross_entropy(val)?.0 } else { f64::NAN };
        Ok(CrossEntropyEpoch { epoch, train_loss, val_loss, wall_seconds: start.elapsed().as_secs_f64() })
    }
}

const EVAL_CHUNK: usize = 4096;

/// Solve `L y = z` for lower-triangular `L`.
fn solve_lower(l: &Tensor, z: &[f64]) -> Vec<f64> {
    let d = z.len();
    let mut y = vec![0.0; d];
    for j in 0..d {
        let mut s = z[j];
        for k in 0..j {
            s -= l.get(j, k) * y[k];
        }
        y[j] = s / l.get(j, j);
    }
    y
}

fn as_matrix(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 2 {
        Ok(x.clone())
    } else {
        x.clone().reshape(vec![x.rows(), x.cols()])
    }
}

/// Per-point `log w_i + log N(x; mu_i, (L_i^T L_i)^{-1})`, `n x M`.
pub fn joint_log_terms(tape: &mut Tape, x: Var, vars: &MixtureVars, normalized: bool) -> Result<Var> {
    let kernels = tape.gaussian_log_kernels(x, vars.means, vars.chol_raw, normalized, vars.diagonal)?;
    let m = tape.value(vars.weight_logits).len();
    let logits = tape.reshape(vars.weight_logits, vec![1, m])?;
    let log_w = tape.log_softmax_rows(logits);
    tape.add_row(kernels, log_w)
}

/// Differentiable `log q(x)`, `n x 1`.
pub fn log_density(tape: &mut Tape, x: Var, vars: &MixtureVars) -> Result<Var> {
    let joint = joint_log_terms(tape, x, vars, true)?;
    Ok(tape.logsumexp_rows(joint))
}

/// Differentiable component relevances, `n x M`.
pub fn responsibilities(tape: &mut Tape, x: Var, vars: &MixtureVars, mode: Relevance) -> Result<Var> {
    let joint = joint_log_terms(tape, x, vars, mode == Relevance::Posterior)?;
    Ok(tape.softmax_rows(joint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn normal_pdf(x: f64, mu: f64, sd: f64) -> f64 {
        (-(x - mu).powi(2) / (2.0 * sd * sd)).exp() / (sd * (2.0 * PI).sqrt())
    }

    fn two_component_1d(mu: [f64; 2], precision_sd: [f64; 2], logits: [f64; 2]) -> GaussianMixture {
        // L = 1/sd
        let factors = Tensor::new(vec![2, 1, 1], vec![1.0 / precision_sd[0], 1.0 / precision_sd[1]]).unwrap();
        GaussianMixture::from_cholesky(
            Tensor::vector(logits.to_vec()),
            Tensor::matrix(2, 1, mu.to_vec()).unwrap(),
            &factors,
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_at_mode() {
        let g = GaussianMixture::standard_normal(1);
        let v = g.log_density(&[0.0]).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn identical_components_collapse() {
        let two = two_component_1d([0.3, 0.3], [1.0, 1.0], [0.0, 0.0]);
        let mut one = GaussianMixture::standard_normal(1);
        one.means = Tensor::matrix(1, 1, vec![0.3]).unwrap();
        for x in [-2.0, 0.0, 0.3, 1.7] {
            let a = two.log_density(&[x]).unwrap();
            let b = one.log_density(&[x]).unwrap();
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn symmetric_pair_at_origin() {
        let g = two_component_1d([-2.0, 2.0], [1.0, 1.0], [0.0, 0.0]);
        let expected = (0.5 * (normal_pdf(0.0, -2.0, 1.0) + normal_pdf(0.0, 2.0, 1.0))).ln();
        assert!((g.log_density(&[0.0]).unwrap() - expected).abs() < 1e-13);
    }

    #[test]
    fn responsibilities_match_bayes_rule() {
        let g = two_component_1d([-1.0, 0.5], [0.7, 1.6], [0.3, -0.4]);
        let w = g.weights();
        let x = Tensor::matrix(3, 1, vec![-0.4, 0.0, 2.2]).unwrap();
        let r = g.responsibilities(&x, Relevance::Posterior).unwrap();
        for (row, &xv) in x.data().iter().enumerate() {
            let a = w[0] * normal_pdf(xv, -1.0, 0.7);
            let b = w[1] * normal_pdf(xv, 0.5, 1.6);
            assert!((r.get(row, 0) - a / (a + b)).abs() < 1e-12);
            assert!((r.get(row, 0) + r.get(row, 1) - 1.0).abs() < 1e-12);
        }
        // literal relevance drops the 1/sd factor
        let u = g.responsibilities(&x, Relevance::Unnormalized).unwrap();
        let xv = -0.4f64;
        let a = w[0] * (-(xv + 1.0).powi(2) / (2.0 * 0.49)).exp();
        let b = w[1] * (-(xv - 0.5).powi(2) / (2.0 * 2.56)).exp();
        assert!((u.get(0, 0) - a / (a + b)).abs() < 1e-12);
    }

    #[test]
    fn single_component_responsibility_is_one() {
        let g = GaussianMixture::standard_normal(3);
        let x = Tensor::matrix(2, 3, vec![0.1, 2.0, -1.0, 5.0, 5.0, 5.0]).unwrap();
        let r = g.responsibilities(&x, Relevance::Posterior).unwrap();
        assert!(r.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn symmetric_midpoint_is_even() {
        let g = two_component_1d([-1.0, 1.0], [0.5, 0.5], [0.0, 0.0]);
        let r = g.responsibilities(&Tensor::matrix(1, 1, vec![0.0]).unwrap(), Relevance::Posterior).unwrap();
        assert!((r.get(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn density_integrates_to_one() {
        let g = two_component_1d([-3.0, 1.0], [0.4, 2.5], [0.2, -0.1]);
        let (a, b, n) = (-50.0, 50.0, 200_000);
        let h = (b - a) / n as f64;
        let xs = Tensor::matrix(n + 1, 1, (0..=n).map(|k| a + k as f64 * h).collect()).unwrap();
        let ld = g.log_density_batch(&xs).unwrap();
        // Simpson
        let mut s = ld[0].exp() + ld[n].exp();
        for (k, v) in ld.iter().enumerate().take(n).skip(1) {
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * v.exp();
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dominant_logit_selects_component() {
        let g = two_component_1d([-100.0, 100.0], [1.0, 1.0], [30.0, 0.0]);
        let s = g.sample(1000, &mut rng::seeded(1));
        assert!(s.data().iter().all(|&v| v < 0.0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let g = two_component_1d([-1.0, 1.0], [1.0, 0.5], [0.0, 0.0]);
        assert_eq!(g.sample(50, &mut rng::seeded(9)), g.sample(50, &mut rng::seeded(9)));
    }

    #[test]
    fn covariance_inverts_precision() {
        let factors = Tensor::new(vec![1, 2, 2], vec![2.0, 0.0, 0.5, 1.0]).unwrap();
        let g = GaussianMixture::from_cholesky(Tensor::zeros(&[1]), Tensor::zeros(&[1, 2]), &factors).unwrap();
        let cov = g.covariance(0);
        // precision = L^T L = [[4.25, 0.5], [0.5, 1]]
        let p = [[4.25, 0.5], [0.5, 1.0]];
        for a in 0..2 {
            for b in 0..2 {
                let v: f64 = (0..2).map(|k| p[a][k] * cov.get(k, b)).sum();
                assert!((v - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_moments_match_covariance() {
        let factors = Tensor::new(vec![1, 2, 2], vec![2.0, 0.0, 1.5, 0.5]).unwrap();
        let g = GaussianMixture::from_cholesky(Tensor::zeros(&[1]), Tensor::zeros(&[1, 2]), &factors).unwrap();
        let cov = g.covariance(0);
        let n = 200_000;
        let xs = g.sample(n, &mut rng::seeded(4));
        for a in 0..2 {
            for b in 0..2 {
                let emp: f64 = (0..n).map(|r| xs.get(r, a) * xs.get(r, b)).sum::<f64>() / n as f64;
                assert!(
                    (emp - cov.get(a, b)).abs() < 0.05 * cov.get(a, a).max(cov.get(b, b)),
                    "{a}{b}: {emp} vs {}",
                    cov.get(a, b)
                );
            }
        }
        // samples score like the density says: mean -log q is the Gaussian entropy
        let (ce, _) = g.cross_entropy(&xs).unwrap();
        let det: f64 = cov.get(0, 0) * cov.get(1, 1) - cov.get(0, 1) * cov.get(1, 0);
        let h = 1.0 + (2.0 * std::f64::consts::PI).ln() + 0.5 * det.ln();
        assert!((ce - h).abs() < 0.01, "{ce} vs {h}");
    }

    #[test]
    fn factor_round_trips_through_raw() {
        let factors = Tensor::new(vec![1, 3, 3], vec![2.0, 0.0, 0.0, 0.5, 0.25, 0.0, -1.0, 3.0, 4.0]).unwrap();
        let g = GaussianMixture::from_cholesky(Tensor::zeros(&[1]), Tensor::zeros(&[1, 3]), &factors).unwrap();
        // off-diagonal raw entries are divided by their column's diagonal
        assert!((g.chol_raw().data()[3] - 0.25).abs() < 1e-15);
        assert!((g.chol_raw().data()[7] - 12.0).abs() < 1e-12);
        let l = g.cholesky_factor(0);
        for (a, b) in l.data().iter().zip(factors.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
