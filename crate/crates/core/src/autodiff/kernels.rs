//! Numeric kernels shared by tape operations.

use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Overflow-safe `log sum exp(xs)`; `-inf` for an empty or all `-inf` slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

/// Dense lower-triangular factors `L_i` materialized from raw parameters.
///
/// `L = (I + N) diag(exp(s))` where `s` is the raw diagonal and `N` the raw
/// strictly-lower part, so `L_jj = exp(s_j)` and `L_jk = N_jk exp(s_k)`.
pub(crate) struct CholeskyView {
    factors: Vec<f64>,
    log_dets: Vec<f64>,
    d: usize,
}

impl CholeskyView {
    pub fn new(raw: &Tensor, diagonal: bool) -> Self {
        let shape = raw.shape();
        let (m, d) = (shape[0], shape[1]);
        let mut factors = vec![0.0; m * d * d];
        let mut log_dets = vec![0.0; m];
        for i in 0..m {
            let base = i * d * d;
            for j in 0..d {
                let r = raw.data()[base + j * d + j];
                factors[base + j * d + j] = r.exp();
                log_dets[i] += r;
            }
            if !diagonal {
                for j in 0..d {
                    for k in 0..j {
                        factors[base + j * d + k] = raw.data()[base + j * d + k] * factors[base + k * d + k];
                    }
                }
            }
        }
        Self { factors, log_dets, d }
    }

    pub fn factor(&self, i: usize) -> &[f64] {
        &self.factors[i * self.d * self.d..(i + 1) * self.d * self.d]
    }

    pub fn log_det(&self, i: usize) -> f64 {
        self.log_dets[i]
    }
}

/// `y = L diff` for lower-triangular `L`.
#[inline]
fn tri_mul(l: &[f64], diff: &[f64], y: &mut [f64]) {
    let d = diff.len();
    for j in 0..d {
        let row = &l[j * d..j * d + j + 1];
        y[j] = row.iter().zip(&diff[..=j]).map(|(a, b)| a * b).sum();
    }
}

/// `out += L^T g` for lower-triangular `L`.
#[inline]
fn tri_mul_t_acc(l: &[f64], g: &[f64], out: &mut [f64]) {
    let d = g.len();
    for j in 0..d {
        let gj = g[j];
        if gj == 0.0 {
            continue;
        }
        for k in 0..=j {
            out[k] += l[j * d + k] * gj;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn log_kernels_forward(
    x: &[f64],
    means: &[f64],
    _raw: &[f64],
    view: &CholeskyView,
    n: usize,
    m: usize,
    d: usize,
    normalized: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    let mut diff = vec![0.0; d];
    let mut y = vec![0.0; d];
    for i in 0..m {
        let l = view.factor(i);
        let mu = &means[i * d..(i + 1) * d];
        let offset = if normalized { view.log_det(i) - 0.5 * d as f64 * LN_2PI } else { 0.0 };
        for r in 0..n {
            let xr = &x[r * d..(r + 1) * d];
            for k in 0..d {
                diff[k] = xr[k] - mu[k];
            }
            tri_mul(l, &diff, &mut y);
            let sq: f64 = y.iter().map(|v| v * v).sum();
            out[r * m + i] = -0.5 * sq + offset;
        }
    }
    out
}

/// Gradient of the raw factors from the gradient of dense `L`.
fn raw_grad_from_factor(gl: &[f64], l: &[f64], d: usize, diagonal: bool, graw: &mut [f64]) {
    for j in 0..d {
        graw[j * d + j] += gl[j * d + j] * l[j * d + j];
        if !diagonal {
            for k in 0..j {
                // L_jk = N_jk exp(s_k) feeds both N_jk and s_k
                graw[j * d + k] += gl[j * d + k] * l[k * d + k];
                graw[k * d + k] += gl[j * d + k] * l[j * d + k];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn log_kernels_backward(
    x: &[f64],
    means: &[f64],
    _raw: &[f64],
    view: &CholeskyView,
    g: &[f64],
    n: usize,
    m: usize,
    d: usize,
    normalized: bool,
    diagonal: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; n * d];
    let mut gm = vec![0.0; m * d];
    let mut graw = vec![0.0; m * d * d];
    let mut diff = vec![0.0; d];
    let mut y = vec![0.0; d];
    let mut gdiff = vec![0.0; d];
    let mut gl = vec![0.0; d * d];
    for i in 0..m {
        let l = view.factor(i);
        let mu = &means[i * d..(i + 1) * d];
        gl.iter_mut().for_each(|v| *v = 0.0);
        let mut gsum = 0.0;
        for r in 0..n {
            let gri = g[r * m + i];
            if gri == 0.0 {
                continue;
            }
            gsum += gri;
            let xr = &x[r * d..(r + 1) * d];
            for k in 0..d {
                diff[k] = xr[k] - mu[k];
            }
            tri_mul(l, &diff, &mut y);
            // d out / d y = -y
            y.iter_mut().for_each(|v| *v *= -gri);
            gdiff.iter_mut().for_each(|v| *v = 0.0);
            tri_mul_t_acc(l, &y, &mut gdiff);
            for k in 0..d {
                gx[r * d + k] += gdiff[k];
                gm[i * d + k] -= gdiff[k];
            }
            for j in 0..d {
                for k in 0..=j {
                    gl[j * d + k] += y[j] * diff[k];
                }
            }
        }
        let gr = &mut graw[i * d * d..(i + 1) * d * d];
        raw_grad_from_factor(&gl, l, d, diagonal, gr);
        if normalized {
            for j in 0..d {
                gr[j * d + j] += gsum;
            }
        }
    }
    (gx, gm, graw)
}

pub(crate) fn offsets_forward(x: &[f64], means: &[f64], view: &CholeskyView, n: usize, m: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n * d];
    let mut diff = vec![0.0; d];
    for i in 0..m {
        let l = view.factor(i);
        let mu = &means[i * d..(i + 1) * d];
        for r in 0..n {
            for k in 0..d {
                diff[k] = x[r * d + k] - mu[k];
            }
            let row = (i * n + r) * d;
            tri_mul(l, &diff, &mut out[row..row + d]);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn offsets_backward(
    x: &[f64],
    means: &[f64],
    _raw: &[f64],
    view: &CholeskyView,
    g: &[f64],
    n: usize,
    m: usize,
    d: usize,
    diagonal: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; n * d];
    let mut gm = vec![0.0; m * d];
    let mut graw = vec![0.0; m * d * d];
    let mut diff = vec![0.0; d];
    let mut gdiff = vec![0.0; d];
    let mut gl = vec![0.0; d * d];
    for i in 0..m {
        let l = view.factor(i);
        let mu = &means[i * d..(i + 1) * d];
        gl.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..n {
            let row = (i * n + r) * d;
            let gy = &g[row..row + d];
            for k in 0..d {
                diff[k] = x[r * d + k] - mu[k];
            }
            gdiff.iter_mut().for_each(|v| *v = 0.0);
            tri_mul_t_acc(l, gy, &mut gdiff);
            for k in 0..d {
                gx[r * d + k] += gdiff[k];
                gm[i * d + k] -= gdiff[k];
            }
            for j in 0..d {
                for k in 0..=j {
                    gl[j * d + k] += gy[j] * diff[k];
                }
            }
        }
        raw_grad_from_factor(&gl, l, d, diagonal, &mut graw[i * d * d..(i + 1) * d * d]);
    }
    (gx, gm, graw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_large_inputs() {
        let v = logsumexp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert!(logsumexp(&[1e8, -1e8]).is_finite());
    }
}
