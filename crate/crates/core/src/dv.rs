//! Donsker-Varadhan correction: loss, bias-corrected gradient steps, training
//! loop, and the induced Gibbs density `q e^T / E_Q[e^T]`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Tape};
use crate::error::{Error, Result};
use crate::gmm::{self, GaussianMixture};
use crate::network::CorrectionNetwork;
use crate::rng::{self, purpose};
use crate::stats::{log_mean_exp, logsumexp};
use crate::tensor::Tensor;

/// `mean_P T - log mean_Q e^T`, the Donsker-Varadhan estimate of `R(P || Q)`.
pub fn dv_estimate(t_p: &[f64], t_q: &[f64]) -> f64 {
    let mean_p = t_p.iter().sum::<f64>() / t_p.len() as f64;
    mean_p - log_mean_exp(t_q)
}

/// The minimized DV loss (negated estimate) for a network on two batches.
pub fn dv_loss(network: &CorrectionNetwork, p_batch: &Tensor, q_batch: &Tensor) -> Result<f64> {
    if p_batch.rows() == 0 || q_batch.rows() == 0 {
        return Err(Error::Empty("DV batch"));
    }
    if p_batch.cols() != q_batch.cols() {
        return Err(Error::Shape(format!("P batch dim {} vs Q batch dim {}", p_batch.cols(), q_batch.cols())));
    }
    Ok(-dv_estimate(&network.t_values(p_batch)?, &network.t_values(q_batch)?))
}

/// Running average of `mean_Q e^T` used to debias the log-expectation gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DvLossState {
    pub ema: Option<f64>,
    pub decay: f64,
}

impl DvLossState {
    pub fn new(decay: f64) -> Self {
        Self { ema: None, decay }
    }

    /// Fold in a fresh batch statistic; the first batch initializes the average.
    pub fn update(&mut self, batch_mean_exp: f64) -> f64 {
        let next = match self.ema {
            None => batch_mean_exp,
            Some(prev) => self.decay * prev + (1.0 - self.decay) * batch_mean_exp,
        };
        self.ema = Some(next);
        next
    }
}

/// Where in training a step happens, for error reporting.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepContext {
    pub epoch: usize,
    pub batch: usize,
}

/// Outcome of one corrective step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Batch DV estimate before the update.
    pub dv_estimate: f64,
    pub batch_mean_exp: f64,
    pub ema: f64,
}

/// One Adam step on the DV objective with the moving-average correction.
///
/// The gradient of `log mean_Q e^T` is replaced by
/// `grad(mean_Q e^T) / ema`, where `ema` already includes this batch.
/// With `decay = 0` this is exactly the plain gradient of the batch loss.
pub fn dv_gradient_step(
    network: &mut CorrectionNetwork,
    state: &mut DvLossState,
    p_batch: &Tensor,
    q_batch: &Tensor,
    optimizer: &AdamConfig,
    ctx: StepContext,
) -> Result<StepReport> {
    if p_batch.rows() == 0 || q_batch.rows() == 0 {
        return Err(Error::Empty("DV batch"));
    }
    let (np, nq) = (p_batch.rows(), q_batch.rows());
    let mut tape = Tape::new();
    let vars = network.attach(&mut tape, true);
    let x = tape.constant(Tensor::vstack(&[p_batch, q_batch])?);
    let t = network.forward(&mut tape, x, &vars)?;
    let t_p = tape.slice_rows(t, 0, np)?;
    let t_q = tape.slice_rows(t, np, np + nq)?;
    let estimate = dv_estimate(tape.value(t_p).data(), tape.value(t_q).data());
    if !estimate.is_finite() {
        return Err(Error::NonFiniteLoss { phase: "remedi", epoch: ctx.epoch, batch: ctx.batch });
    }
    let e_q = tape.exp(t_q);
    let mean_e = tape.mean(e_q);
    let batch_mean_exp = tape.value(mean_e).item();
    let ema = state.update(batch_mean_exp);
    if !(ema >= 1e-300) {
        return Err(Error::EmaUnderflow { value: ema, epoch: ctx.epoch, batch: ctx.batch });
    }
    // surrogate = -mean_P T + mean_Q e^T / ema
    let mean_p = tape.mean(t_p);
    let neg_p = tape.scale(mean_p, -1.0);
    let corr = tape.scale(mean_e, 1.0 / ema);
    let surrogate = tape.add(neg_p, corr)?;
    let mut grads = tape.backward_scalar(surrogate)?;
    let g: Vec<_> = vars.params.iter().map(|v| grads.take(*v)).collect();
    network.params_mut().adam_step(&g, optimizer)?;
    Ok(StepReport { dv_estimate: estimate, batch_mean_exp, ema })
}

#[derive(Clone, Debug)]
pub struct DvSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub ema_decay: f64,
}

/// One row of the corrective training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DvEpoch {
    pub epoch: usize,
    /// Mean of the batch DV estimates seen during the epoch (NaN for epoch 0).
    pub train_dv: f64,
    /// Held-out DV estimate after the epoch.
    pub val_dv: f64,
    /// Seconds since training started.
    pub wall_seconds: f64,
}

/// Held-out samples for the per-epoch DV estimate.
pub struct DvValidation<'a> {
    pub p: &'a Tensor,
    pub q: &'a Tensor,
}

/// Maximize the DV bound over `epochs` passes of `p_data`.
///
/// `q_samples` are drawn once from the frozen base before training; when
/// `resample_from` is given, a fresh set of the same size is drawn from it at
/// the start of every epoch instead.
pub fn train_dv(
    network: &mut CorrectionNetwork,
    p_data: &Tensor,
    q_samples: &Tensor,
    validation: Option<DvValidation<'_>>,
    settings: &DvSettings,
    resample_from: Option<&GaussianMixture>,
    seed: u64,
) -> Result<Vec<DvEpoch>> {
    if p_data.rows() == 0 || q_samples.rows() == 0 {
        return Err(Error::Empty("DV training data"));
    }
    if settings.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut state = DvLossState::new(settings.ema_decay);
    let mut shuffle = rng::substream(seed, purpose::NET_SHUFFLE);
    let mut resample = rng::substream(seed, purpose::Q_TRAIN + 100);
    let mut q_owned = q_samples.clone();

    let val_dv = |net: &CorrectionNetwork| -> Result<f64> {
        match &validation {
            Some(v) => Ok(dv_estimate(&net.t_values(v.p)?, &net.t_values(v.q)?)),
            None => Ok(f64::NAN),
        }
    };

    let start = Instant::now();
    let mut curve = vec![DvEpoch {
        epoch: 0,
        train_dv: f64::NAN,
        val_dv: val_dv(network)?,
        wall_seconds: start.elapsed().as_secs_f64(),
    }];
    for epoch in 1..=settings.epochs {
        if let Some(base) = resample_from {
            q_owned = base.sample(q_samples.rows(), &mut resample);
        }
        let p_order = rng::permutation(&mut shuffle, p_data.rows());
        let q_order = rng::permutation(&mut shuffle, q_owned.rows());
        let mut q_cursor = 0;
        let mut sum = 0.0;
        let mut count = 0;
        for (batch, p_idx) in p_order.chunks(settings.batch_size).enumerate() {
            let q_idx: Vec<usize> = (0..p_idx.len()).map(|k| q_order[(q_cursor + k) % q_order.len()]).collect();
            q_cursor = (q_cursor + p_idx.len()) % q_order.len();
            let report = dv_gradient_step(
                network,
                &mut state,
                &p_data.select_rows(p_idx),
                &q_owned.select_rows(&q_idx),
                &settings.optimizer,
                StepContext { epoch, batch },
            )?;
            sum += report.dv_estimate;
            count += 1;
        }
        let val = val_dv(network)?;
        if validation.is_some() && !val.is_finite() {
            return Err(Error::NonFiniteLoss { phase: "remedi", epoch, batch: count });
        }
        curve.push(DvEpoch {
            epoch,
            train_dv: sum / count as f64,
            val_dv: val,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(curve)
}

/// The density `q(x) e^{T(x)} / E_Q[e^T]` implied by a trained correction.
///
/// Without a network the correction is `T = 0` and the density is the base.
#[derive(Clone, Debug)]
pub struct GibbsDensity {
    pub base: GaussianMixture,
    pub network: Option<CorrectionNetwork>,
    /// `log E_Q[e^T]` estimate and the number of base samples behind it.
    pub log_normalizer: Option<(f64, usize)>,
}

impl GibbsDensity {
    pub fn new(base: GaussianMixture, network: CorrectionNetwork) -> Result<Self> {
        if base.dim() != network.dim() {
            return Err(Error::Shape(format!("base dimension {} vs network {}", base.dim(), network.dim())));
        }
        Ok(Self { base, network: Some(network), log_normalizer: None })
    }

    /// Gibbs density with `T = 0`.
    pub fn base_only(base: GaussianMixture) -> Self {
        Self { base, network: None, log_normalizer: None }
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// `T(x)` for every row (zeros without a network).
    pub fn t_values(&self, x: &Tensor) -> Result<Vec<f64>> {
        match &self.network {
            Some(net) => net.t_values(x),
            None => Ok(vec![0.0; x.rows()]),
        }
    }

    /// `log q(x) + T(x)` for every row.
    pub fn log_unnormalized(&self, x: &Tensor) -> Result<Vec<f64>> {
        let lq = self.base.log_density_batch(x)?;
        let t = self.t_values(x)?;
        Ok(lq.into_iter().zip(t).map(|(a, b)| a + b).collect())
    }

    /// Values and input gradients of `log q + T`, one gradient row per point.
    pub fn log_unnormalized_with_grad(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let base = self.base.attach_frozen(&mut tape);
        let mut total = gmm::log_density(&mut tape, xv, &base)?;
        if let Some(net) = &self.network {
            let vars = net.attach(&mut tape, false);
            let t = net.forward(&mut tape, xv, &vars)?;
            total = tape.add(total, t)?;
        }
        let values = tape.value(total).data().to_vec();
        let sum = tape.sum(total);
        let mut grads = tape.backward_scalar(sum)?;
        let g = grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((values, g))
    }

    /// Monte Carlo `log E_Q[e^T]` from `count` base draws; stored on `self`.
    pub fn estimate_log_normalizer(&mut self, count: usize, seed: u64) -> Result<f64> {
        if count == 0 {
            return Err(Error::InvalidArgument("normalizer sample count must be positive".into()));
        }
        let q = self.base.sample(count, &mut rng::seeded(seed));
        let t = self.t_values(&q)?;
        let v = logsumexp(&t) - (count as f64).ln();
        self.log_normalizer = Some((v, count));
        Ok(v)
    }
}
