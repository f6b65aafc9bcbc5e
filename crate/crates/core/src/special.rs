//! Special functions: log-gamma, digamma, unit-ball volume.

use std::f64::consts::PI;

/// Euler-Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

// Lanczos approximation, g = 7, n = 9 (Numerical Recipes / Godfrey coefficients).
const LANCZOS_G: f64 = 7.0;
#[allow(clippy::excessive_precision)]
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Gamma(x)` for `x > 0` (reflection for `x < 0.5`).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Gamma(x) Gamma(1 - x) = pi / sin(pi x)
        return (PI / (PI * x).sin()).abs().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS_COEF[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Digamma `psi(x)` for `x > 0`.
///
/// Recurrence `psi(x) = psi(x + 1) - 1/x` lifts the argument to at least 10,
/// then the asymptotic series
/// `ln x - 1/(2x) - sum B_2k / (2k x^2k)` is applied.
pub fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // B2/2 = 1/12, B4/4 = -1/120, B6/6 = 1/252, B8/8 = -1/240, B10/10 = 1/132, B12/12 = -691/32760
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * 691.0 / 32760.0)))));
    acc + x.ln() - 0.5 * inv - series
}

/// `ln V_d`, the log-volume of the Euclidean unit ball in `d` dimensions.
pub fn ln_unit_ball_volume(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    h * PI.ln() - ln_gamma(h + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-13);
        assert!(ln_gamma(2.0).abs() < 1e-13);
        assert!((ln_gamma(0.5) - PI.sqrt().ln()).abs() < 1e-13);
        // 10! = 3628800
        assert!((ln_gamma(11.0) - 3_628_800f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn digamma_matches_harmonic_numbers() {
        // psi(n + 1) = -gamma + H_n, with compensated summation of H_n.
        let (mut h, mut comp) = (0.0f64, 0.0f64);
        let mut worst: f64 = 0.0;
        for n in 1..=1_000_000u64 {
            let term = 1.0 / n as f64 - comp;
            let t = h + term;
            comp = (t - h) - term;
            h = t;
            let err = (digamma(n as f64 + 1.0) - (h - EULER_GAMMA)).abs();
            worst = worst.max(err);
        }
        assert!(worst < 1e-10, "worst error {worst:e}");
        let at_one = (digamma(1.0) + EULER_GAMMA).abs();
        assert!(at_one < 1e-14, "psi(1) error {at_one:e}");
    }

    #[test]
    fn unit_ball_volumes() {
        assert!((ln_unit_ball_volume(1) - 2f64.ln()).abs() < 1e-13);
        assert!((ln_unit_ball_volume(2) - PI.ln()).abs() < 1e-13);
        assert!((ln_unit_ball_volume(3) - (4.0 / 3.0 * PI).ln()).abs() < 1e-13);
    }
}
