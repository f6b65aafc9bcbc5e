//! The corrective network `T`.
//!
//! The network produces `f(x) = ELU(z(x)) + 1 + eps > 0` and `T = log f`.
//! Two variants share that output transform:
//!
//! * plain MLP: `z` is a linear head on a ReLU trunk applied to `x`;
//! * mixture-aware: for each base component `i` the whitened offset
//!   `L_i (x - mu_i)` is projected by a learned `d x d` matrix, pushed through
//!   the shared ReLU trunk, reduced to a scalar by a per-component head vector
//!   `b_i`, and the scalars are averaged with the component relevances
//!   `p(i | x)` of the frozen base mixture.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tape, Var};
use crate::error::{Error, Result};
use crate::gmm::{self, GaussianMixture, MixtureVars, Relevance};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    PlainMlp,
    #[default]
    MixtureAware,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub widths: Vec<usize>,
    pub epsilon: f64,
    pub relevance: Relevance,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { variant: Variant::MixtureAware, widths: vec![500, 500], epsilon: 1e-6, relevance: Relevance::Posterior }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("trunk widths {:?} must be nonempty and positive", self.widths)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("output epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CorrectionNetwork {
    config: NetworkConfig,
    dim: usize,
    base: Option<GaussianMixture>,
    params: ParameterStore,
}

/// Tape handles produced when the network is placed on a tape.
#[derive(Clone, Debug)]
pub struct NetworkVars {
    pub params: Vec<Var>,
    pub base: Option<MixtureVars>,
}

const PROJECTIONS: &str = "projections";
const HEAD: &str = "head";
const HEAD_BIAS: &str = "head_bias";

impl CorrectionNetwork {
    /// Fresh network: trunk layers get uniform `+-1/sqrt(fan_in)` weights and
    /// biases, projections start at the identity, and the head is zero so
    /// that `T = log(1 + eps)` everywhere.
    pub fn new<R: RngCore>(
        config: NetworkConfig,
        dim: usize,
        base: Option<GaussianMixture>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::InvalidArgument("network input dimension must be positive".into()));
        }
        let mut params = ParameterStore::new();
        let components = match (config.variant, &base) {
            (Variant::MixtureAware, Some(b)) => {
                if b.dim() != dim {
                    return Err(Error::Shape(format!("base dimension {} vs network {dim}", b.dim())));
                }
                b.components()
            }
            (Variant::MixtureAware, None) => {
                return Err(Error::InvalidArgument("mixture-aware network needs a base mixture".into()))
            }
            (Variant::PlainMlp, _) => 0,
        };
        if config.variant == Variant::MixtureAware {
            let mut proj = Tensor::zeros(&[components, dim, dim]);
            for i in 0..components {
                for j in 0..dim {
                    proj.data_mut()[i * dim * dim + j * dim + j] = 1.0;
                }
            }
            params.insert(PROJECTIONS, proj);
        }
        let mut fan_in = dim;
        for (layer, &width) in config.widths.iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * width).map(|_| (2.0 * rng::uniform(rng) - 1.0) * bound).collect();
            let b: Vec<f64> = (0..width).map(|_| (2.0 * rng::uniform(rng) - 1.0) * bound).collect();
            params.insert(format!("trunk.{layer}.weight"), Tensor::matrix(fan_in, width, w)?);
            params.insert(format!("trunk.{layer}.bias"), Tensor::vector(b));
            fan_in = width;
        }
        match config.variant {
            Variant::MixtureAware => {
                params.insert(HEAD, Tensor::zeros(&[components, fan_in]));
            }
            Variant::PlainMlp => {
                params.insert(HEAD, Tensor::zeros(&[fan_in, 1]));
                params.insert(HEAD_BIAS, Tensor::zeros(&[1]));
            }
        }
        let base = if config.variant == Variant::MixtureAware { base } else { None };
        Ok(Self { config, dim, base, params })
    }

    /// Reassemble from stored parameters (used by the model-file reader).
    pub fn from_parts(
        config: NetworkConfig,
        dim: usize,
        base: Option<GaussianMixture>,
        slots: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        config.validate()?;
        let mut template = Self::new(config, dim, base, &mut rng::seeded(0))?;
        if slots.len() != template.params.len() {
            return Err(Error::ModelFormat(format!(
                "network expects {} parameter tensors, found {}",
                template.params.len(),
                slots.len()
            )));
        }
        let mut params = ParameterStore::new();
        for ((name, value), expected) in slots.into_iter().zip(template.params.slots()) {
            if name != expected.name || value.shape() != expected.value.shape() {
                return Err(Error::ModelFormat(format!(
                    "parameter `{name}` {:?} does not match expected `{}` {:?}",
                    value.shape(),
                    expected.name,
                    expected.value.shape()
                )));
            }
            params.insert(name, value);
        }
        template.params = params;
        Ok(template)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> Option<&GaussianMixture> {
        self.base.as_ref()
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn slot_index(&self, name: &str) -> Option<usize> {
        self.params.index_of(name)
    }

    /// Place the network on `tape`; parameters are differentiable when `trainable`.
    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> NetworkVars {
        let params = if trainable { self.params.attach(tape) } else { self.params.attach_frozen(tape) };
        let base = self.base.as_ref().map(|b| b.attach_frozen(tape));
        NetworkVars { params, base }
    }

    /// Differentiable `T(x)`, `n x 1`.
    pub fn forward(&self, tape: &mut Tape, x: Var, vars: &NetworkVars) -> Result<Var> {
        if tape.value(x).cols() != self.dim {
            return Err(Error::Shape(format!(
                "network input has dimension {}, expected {}",
                tape.value(x).cols(),
                self.dim
            )));
        }
        let p = &vars.params;
        let z = match self.config.variant {
            Variant::MixtureAware => {
                let base = vars.base.as_ref().expect("mixture-aware network carries its base");
                let offsets = tape.decorrelated_offsets(x, base.means, base.chol_raw, base.diagonal)?;
                let mut h = tape.block_matmul(offsets, p[0])?;
                h = self.trunk(tape, h, &p[1..])?;
                let head = p[p.len() - 1];
                let scores = tape.block_row_dot(h, head)?;
                let relevance = gmm::responsibilities(tape, x, base, self.config.relevance)?;
                let weighted = tape.mul(scores, relevance)?;
                tape.sum_rows(weighted)
            }
            Variant::PlainMlp => {
                let h = self.trunk(tape, x, p)?;
                let (w, b) = (p[p.len() - 2], p[p.len() - 1]);
                let z = tape.matmul(h, w)?;
                tape.add_row(z, b)?
            }
        };
        let e = tape.elu(z);
        let f = tape.add_scalar(e, 1.0 + self.config.epsilon);
        Ok(tape.log(f))
    }

    fn trunk(&self, tape: &mut Tape, mut h: Var, layer_params: &[Var]) -> Result<Var> {
        for layer in 0..self.config.widths.len() {
            let (w, b) = (layer_params[2 * layer], layer_params[2 * layer + 1]);
            let lin = tape.matmul(h, w)?;
            let lin = tape.add_row(lin, b)?;
            h = tape.relu(lin);
        }
        Ok(h)
    }

    /// `T(x)` for every row of `x`, evaluated in chunks.
    pub fn t_values(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(x.rows());
        for start in (0..x.rows()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(x.rows());
            let mut tape = Tape::new();
            let vars = self.attach(&mut tape, false);
            let xv = tape.constant(x.slice_rows(start, end));
            let t = self.forward(&mut tape, xv, &vars)?;
            out.extend_from_slice(tape.value(t).data());
        }
        Ok(out)
    }

    pub fn t_value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.t_values(&Tensor::matrix(1, x.len(), x.to_vec())?)?[0])
    }

    /// Product of trunk and head operator norms; bounds the Lipschitz
    /// constant of `T` for the plain variant (the output transform has slope
    /// at most one). `None` for the mixture-aware variant, whose relevance
    /// weighting depends on `x`.
    pub fn lipschitz_bound(&self) -> Option<f64> {
        if self.config.variant != Variant::PlainMlp {
            return None;
        }
        let mut bound = 1.0;
        for layer in 0..self.config.widths.len() {
            bound *= spectral_norm(self.params.value(2 * layer));
        }
        bound *= spectral_norm(self.params.value(2 * self.config.widths.len()));
        Some(bound)
    }
}

const EVAL_CHUNK: usize = 2048;

/// Largest singular value by power iteration on `W^T W`.
fn spectral_norm(w: &Tensor) -> f64 {
    let (r, c) = (w.rows(), w.cols());
    let mut v = vec![1.0 / (c as f64).sqrt(); c];
    let mut sigma = 0.0;
    for _ in 0..200 {
        let u: Vec<f64> = (0..r).map(|i| w.row(i).iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let mut nv = vec![0.0; c];
        for (i, ui) in u.iter().enumerate() {
            for (o, a) in nv.iter_mut().zip(w.row(i)) {
                *o += a * ui;
            }
        }
        let norm = nv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        sigma = norm.sqrt();
        v = nv.into_iter().map(|x| x / norm).collect();
    }
    sigma
}
