//! Reverse-mode gradients against central finite differences, shared by
//! the gradient tests and the acceptance suite.

use rand::RngCore;
use remedi_core::autodiff::{Tape, Var};
use remedi_core::gmm::{self, GaussianMixture, MixtureVars, Relevance};
use remedi_core::network::{CorrectionNetwork, NetworkConfig, Variant};
use remedi_core::rng::{self, StreamRng};
use remedi_core::{Result, Tensor};

pub const SEEDS: u64 = 100;
const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely rather than relatively.
const FLOOR: f64 = 1e-3;

fn normal(rng: &mut StreamRng, shape: &[usize], scale: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    rng::fill_normal(rng, t.data_mut());
    t.map(|v| v * scale)
}

fn dim(rng: &mut StreamRng, max: usize) -> usize {
    1 + (rng.next_u64() % max as u64) as usize
}

/// Build on `tape` from `inputs`; return the output and the var of each input.
type Builder<'a> = dyn Fn(&[Tensor], &mut Tape) -> Result<(Var, Vec<Var>)> + 'a;

/// Worst relative error over every entry of every input for the scalar
/// `sum(weights * output)`, weights drawn from `rng`.
fn worst_error(inputs: &[Tensor], build: &Builder<'_>, rng: &mut StreamRng) -> f64 {
    let scalar = |tape: &mut Tape, out: Var, w: &Tensor| -> Var {
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv).unwrap();
        tape.sum(prod)
    };
    let mut tape = Tape::new();
    let (out, vars) = build(inputs, &mut tape).unwrap();
    let weights = normal(rng, tape.value(out).shape(), 1.0);
    let loss = scalar(&mut tape, out, &weights);
    let mut grads = tape.backward_scalar(loss).unwrap();
    let analytic: Vec<Tensor> =
        vars.iter().zip(inputs).map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();

    let eval = |ts: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let (out, _) = build(ts, &mut tape).unwrap();
        let l = scalar(&mut tape, out, &weights);
        tape.value(l).item()
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[k].data_mut()[j] = orig + STEP;
            let up = eval(&work);
            work[k].data_mut()[j] = orig - STEP;
            let down = eval(&work);
            work[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[k].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

/// Worst error of one check over all seeds.
#[derive(Debug)]
pub struct Check {
    pub name: String,
    pub worst: f64,
    pub worst_seed: u64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

fn run_seeds(out: &mut Vec<Check>, name: &str, case: impl Fn(&mut StreamRng) -> f64) {
    let mut check = Check { name: name.to_owned(), worst: 0.0, worst_seed: 0 };
    for seed in 0..SEEDS {
        let e = case(&mut rng::seeded(seed));
        // NaN counts as a failure
        if e.is_nan() || e > check.worst {
            check.worst = if e.is_nan() { f64::INFINITY } else { e };
            check.worst_seed = seed;
        }
    }
    out.push(check);
}

fn random_mixture(rng: &mut StreamRng, m: usize, d: usize, diagonal: bool) -> GaussianMixture {
    let mut chol = normal(rng, &[m, d, d], 0.3);
    if diagonal {
        for i in 0..m {
            for a in 0..d {
                for b in 0..d {
                    if a != b {
                        chol.data_mut()[i * d * d + a * d + b] = 0.0;
                    }
                }
            }
        }
    }
    GaussianMixture::new(normal(rng, &[m], 0.5), normal(rng, &[m, d], 1.0), chol, diagonal).unwrap()
}

fn mixture_inputs(b: &GaussianMixture, x: Tensor) -> Vec<Tensor> {
    vec![b.weight_logits().clone(), b.means().clone(), b.chol_raw().clone(), x]
}

fn attach_mixture(ts: &[Tensor], tape: &mut Tape, diagonal: bool) -> (MixtureVars, Var) {
    let vars = MixtureVars {
        weight_logits: tape.param(ts[0].clone()),
        means: tape.param(ts[1].clone()),
        chol_raw: tape.param(ts[2].clone()),
        diagonal,
    };
    let x = tape.param(ts[3].clone());
    (vars, x)
}

pub fn mixture_log_density_gradients(out: &mut Vec<Check>) {
    run_seeds(out, "mixture log-density", |rng| {
        let (m, d, n) = (dim(rng, 4), dim(rng, 16), 4);
        let diagonal = rng.next_u64() % 2 == 0;
        let base = random_mixture(rng, m, d, diagonal);
        let x = normal(rng, &[n, d], 1.0);
        let inputs = mixture_inputs(&base, x);
        let build = move |ts: &[Tensor], tape: &mut Tape| {
            let (vars, x) = attach_mixture(ts, tape, diagonal);
            let out = gmm::log_density(tape, x, &vars)?;
            Ok((out, vec![vars.weight_logits, vars.means, vars.chol_raw, x]))
        };
        worst_error(&inputs, &build, rng)
    });
}

pub fn responsibility_gradients(out: &mut Vec<Check>) {
    for mode in [Relevance::Posterior, Relevance::Unnormalized] {
        run_seeds(out, &format!("responsibilities {mode:?}"), |rng| {
            let (m, d, n) = (1 + dim(rng, 4), dim(rng, 16), 4);
            let diagonal = rng.next_u64() % 2 == 0;
            let base = random_mixture(rng, m, d, diagonal);
            let inputs = mixture_inputs(&base, normal(rng, &[n, d], 1.0));
            let build = move |ts: &[Tensor], tape: &mut Tape| {
                let (vars, x) = attach_mixture(ts, tape, diagonal);
                let out = gmm::responsibilities(tape, x, &vars, mode)?;
                Ok((out, vec![vars.weight_logits, vars.means, vars.chol_raw, x]))
            };
            worst_error(&inputs, &build, rng)
        });
    }
}

fn random_network(rng: &mut StreamRng, variant: Variant, relevance: Relevance, d: usize) -> CorrectionNetwork {
    let m = dim(rng, 3);
    let base = random_mixture(rng, m, d, false);
    let widths = vec![dim(rng, 6), dim(rng, 6)];
    let cfg = NetworkConfig { variant, widths, epsilon: 1e-6, relevance };
    let mut net = CorrectionNetwork::new(cfg, d, Some(base), rng).unwrap();
    // move every parameter off its initial value so no gradient is trivially zero
    for k in 0..net.params().len() {
        let shape = net.params().value(k).shape().to_vec();
        let noise = normal(rng, &shape, 0.3);
        let v = net.params_mut().value_mut(k);
        for (a, b) in v.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
    }
    net
}

fn network_inputs(net: &CorrectionNetwork, x: Tensor) -> Vec<Tensor> {
    let mut v: Vec<Tensor> = net.params().slots().iter().map(|s| s.value.clone()).collect();
    v.push(x);
    v
}

fn network_builder(net: CorrectionNetwork) -> impl Fn(&[Tensor], &mut Tape) -> Result<(Var, Vec<Var>)> {
    move |ts: &[Tensor], tape: &mut Tape| {
        let mut net = net.clone();
        let p = net.params().len();
        for (k, t) in ts[..p].iter().enumerate() {
            *net.params_mut().value_mut(k) = t.clone();
        }
        let vars = net.attach(tape, true);
        let x = tape.param(ts[p].clone());
        let out = net.forward(tape, x, &vars)?;
        let mut all = vars.params.clone();
        all.push(x);
        Ok((out, all))
    }
}

pub fn network_parameter_and_input_gradients(out: &mut Vec<Check>) {
    let cases = [
        (Variant::MixtureAware, Relevance::Posterior),
        (Variant::MixtureAware, Relevance::Unnormalized),
        (Variant::PlainMlp, Relevance::Posterior),
    ];
    for (variant, relevance) in cases {
        run_seeds(out, &format!("network {variant:?} {relevance:?}"), |rng| {
            let d = dim(rng, 16);
            let net = random_network(rng, variant, relevance, d);
            let inputs = network_inputs(&net, normal(rng, &[3, d], 1.0));
            worst_error(&inputs, &network_builder(net), rng)
        });
    }
}

pub fn dv_objective_gradients(out: &mut Vec<Check>) {
    run_seeds(out, "dv objective", |rng| {
        let d = dim(rng, 8);
        let net = random_network(rng, Variant::MixtureAware, Relevance::Posterior, d);
        let inputs = network_inputs(&net, normal(rng, &[6, d], 1.0));
        let forward = network_builder(net);
        let build = move |ts: &[Tensor], tape: &mut Tape| {
            // rows 0..3 are P points, rows 3..6 are Q points
            let (t, vars) = forward(ts, tape)?;
            let tp = tape.slice_rows(t, 0, 3)?;
            let tq = tape.slice_rows(t, 3, 6)?;
            let mp = tape.mean(tp);
            let eq = tape.exp(tq);
            let meq = tape.mean(eq);
            let lq = tape.log(meq);
            let est = tape.sub(mp, lq)?;
            Ok((tape.scale(est, -1.0), vars))
        };
        worst_error(&inputs, &build, rng)
    });
}

pub fn gibbs_input_gradient(out: &mut Vec<Check>) {
    use remedi_core::dv::GibbsDensity;
    run_seeds(out, "gibbs input gradient", |rng| {
        let d = dim(rng, 16);
        let net = random_network(rng, Variant::MixtureAware, Relevance::Posterior, d);
        let gibbs = GibbsDensity::new(net.base().unwrap().clone(), net).unwrap();
        let x = normal(rng, &[3, d], 1.0);
        let (_, g) = gibbs.log_unnormalized_with_grad(&x).unwrap();
        let mut worst: f64 = 0.0;
        let mut work = x.clone();
        for j in 0..x.len() {
            let orig = x.data()[j];
            let row = j / d;
            work.data_mut()[j] = orig + STEP;
            let up = gibbs.log_unnormalized(&work).unwrap()[row];
            work.data_mut()[j] = orig - STEP;
            let down = gibbs.log_unnormalized(&work).unwrap()[row];
            work.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = g.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR));
        }
        worst
    });
}

pub fn fused_mixture_ops(out: &mut Vec<Check>) {
    for (normalized, diagonal) in [(true, false), (false, false), (true, true), (false, true)] {
        run_seeds(out, &format!("log kernels normalized={normalized} diagonal={diagonal}"), |rng| {
            let (m, d) = (dim(rng, 4), dim(rng, 16));
            let base = random_mixture(rng, m, d, diagonal);
            let inputs = mixture_inputs(&base, normal(rng, &[3, d], 1.0));
            let build = move |ts: &[Tensor], tape: &mut Tape| {
                let (v, x) = attach_mixture(ts, tape, diagonal);
                let out = tape.gaussian_log_kernels(x, v.means, v.chol_raw, normalized, diagonal)?;
                Ok((out, vec![v.weight_logits, v.means, v.chol_raw, x]))
            };
            worst_error(&inputs, &build, rng)
        });
    }
    for diagonal in [false, true] {
        run_seeds(out, &format!("decorrelated offsets diagonal={diagonal}"), |rng| {
            let (m, d) = (dim(rng, 4), dim(rng, 16));
            let base = random_mixture(rng, m, d, diagonal);
            let inputs = mixture_inputs(&base, normal(rng, &[3, d], 1.0));
            let build = move |ts: &[Tensor], tape: &mut Tape| {
                let (v, x) = attach_mixture(ts, tape, diagonal);
                let out = tape.decorrelated_offsets(x, v.means, v.chol_raw, diagonal)?;
                Ok((out, vec![v.weight_logits, v.means, v.chol_raw, x]))
            };
            worst_error(&inputs, &build, rng)
        });
    }
}

pub fn block_ops(out: &mut Vec<Check>) {
    run_seeds(out, "block matmul", |rng| {
        let (m, n, p, q) = (dim(rng, 4), dim(rng, 5), dim(rng, 6), dim(rng, 6));
        let inputs = vec![normal(rng, &[m * n, p], 1.0), normal(rng, &[m, p, q], 1.0)];
        let build = |ts: &[Tensor], tape: &mut Tape| {
            let a = tape.param(ts[0].clone());
            let b = tape.param(ts[1].clone());
            Ok((tape.block_matmul(a, b)?, vec![a, b]))
        };
        worst_error(&inputs, &build, rng)
    });
    run_seeds(out, "block row dot", |rng| {
        let (m, n, k) = (dim(rng, 4), dim(rng, 5), dim(rng, 6));
        let inputs = vec![normal(rng, &[m * n, k], 1.0), normal(rng, &[m, k], 1.0)];
        let build = |ts: &[Tensor], tape: &mut Tape| {
            let a = tape.param(ts[0].clone());
            let b = tape.param(ts[1].clone());
            Ok((tape.block_row_dot(a, b)?, vec![a, b]))
        };
        worst_error(&inputs, &build, rng)
    });
}

pub fn elementwise_and_row_ops(out: &mut Vec<Check>) {
    run_seeds(out, "row ops", |rng| {
        let (n, k) = (dim(rng, 5), 1 + dim(rng, 5));
        let inputs = vec![
            normal(rng, &[n, k], 1.0),
            normal(rng, &[k], 1.0),
            normal(rng, &[n, 1], 1.0),
            normal(rng, &[k, 3], 1.0),
        ];
        let build = move |ts: &[Tensor], tape: &mut Tape| {
            let v: Vec<Var> = ts.iter().map(|t| tape.param(t.clone())).collect();
            let a = tape.add_row(v[0], v[1])?;
            let a = tape.mul_col(a, v[2])?;
            let e = tape.elu(a);
            let s = tape.softmax_rows(e);
            let ls = tape.log_softmax_rows(a);
            let lse = tape.logsumexp_rows(ls);
            let sq = tape.mul(s, s)?;
            let mm = tape.matmul(sq, v[3])?;
            let c = tape.slice_cols(mm, 1, 3)?;
            let r = tape.sum_rows(c);
            let both = tape.concat_rows(&[r, lse])?;
            let ex = tape.exp(both);
            let sc = tape.add_scalar(ex, 0.5);
            let out = tape.log(sc);
            let out = tape.reshape(out, vec![1, 2 * n])?;
            Ok((out, v))
        };
        worst_error(&inputs, &build, rng)
    });
}

/// Every check, in a fixed order.
pub fn all() -> Vec<Check> {
    let mut out = Vec::new();
    mixture_log_density_gradients(&mut out);
    responsibility_gradients(&mut out);
    network_parameter_and_input_gradients(&mut out);
    dv_objective_gradients(&mut out);
    gibbs_input_gradient(&mut out);
    fused_mixture_ops(&mut out);
    block_ops(&mut out);
    elementwise_and_row_ops(&mut out);
    out
}
