//! Paired significance testing with a hand-rolled t-distribution tail.
//!
//! The two-sided p-value comes from the regularized incomplete beta function
//! evaluated by a modified Lentz continued fraction; a Monte-Carlo sign-flip
//! estimate is provided as an independent cross-check.

use rand::RngCore;

use crate::numkit::rng::{salts, stream};

use super::EvalError;

/// Lanczos approximation, g = 7, 9 coefficients.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection keeps the approximation in its stable region.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta, modified Lentz iteration.
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-14;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "shape parameters must be positive");
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * betacf(a, b, x) / a
    } else {
        1.0 - front * betacf(b, a, 1.0 - x) / b
    }
}

/// Two-sided tail mass of Student's t with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    inc_beta(df / 2.0, 0.5, df / (df + t * t))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TTestOutcome {
    pub t: Option<f64>,
    pub df: f64,
    pub p: Option<f64>,
    pub significant: bool,
    pub degenerate: bool,
}

/// Classical paired t-test on per-user metric sequences.
pub fn paired_t_test(a: &[f64], b: &[f64], alpha: f64) -> Result<TTestOutcome, EvalError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(EvalError::Protocol(format!(
            "paired test needs equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let df = n - 1.0;
    if var == 0.0 {
        return Ok(TTestOutcome { t: None, df, p: None, significant: false, degenerate: true });
    }
    let t = mean / (var / n).sqrt();
    let p = t_two_sided_p(t, df);
    Ok(TTestOutcome { t: Some(t), df, p: Some(p), significant: p < alpha, degenerate: false })
}

/// Monte-Carlo sign-flip estimate of the two-sided p-value for mean(a - b).
pub fn permutation_p(a: &[f64], b: &[f64], flips: usize, seed: u64) -> f64 {
    assert!(a.len() == b.len() && !a.is_empty());
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed = diffs.iter().sum::<f64>().abs() / diffs.len() as f64;
    let mut rng = stream(seed, salts::SHUFFLE, 0, 1);
    let mut hits = 0usize;
    for _ in 0..flips {
        let mut word = 0u64;
        let mut sum = 0.0;
        for (j, &d) in diffs.iter().enumerate() {
            if j % 64 == 0 {
                word = rng.next_u64();
            }
            let sign = if (word >> (j % 64)) & 1 == 1 { 1.0 } else { -1.0 };
            sum += sign * d;
        }
        if (sum / diffs.len() as f64).abs() >= observed - 1e-12 {
            hits += 1;
        }
    }
    hits as f64 / flips as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn ln_gamma_known_points() {
        let pi = std::f64::consts::PI;
        assert!((ln_gamma(0.5) - 0.5 * pi.ln()).abs() < 1e-12);
        assert!(ln_gamma(1.0).abs() < 1e-13);
        assert!((ln_gamma(5.0) - 24.0f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(10.0) - 362880.0f64.ln()).abs() < 1e-11);
    }

    #[test]
    fn inc_beta_closed_forms() {
        for &x in &[0.1, 0.25, 0.5, 0.7, 0.93] {
            assert!((inc_beta(1.0, 1.0, x) - x).abs() < 1e-12);
            let arcsin = 2.0 / std::f64::consts::PI * x.sqrt().asin();
            assert!((inc_beta(0.5, 0.5, x) - arcsin).abs() < 1e-10, "x={x}");
            let poly = x * x * (3.0 - 2.0 * x);
            assert!((inc_beta(2.0, 2.0, x) - poly).abs() < 1e-12);
            let sym = 1.0 - inc_beta(1.7, 3.2, 1.0 - x);
            assert!((inc_beta(3.2, 1.7, x) - sym).abs() < 1e-12);
        }
    }

    #[test]
    fn t_tail_matches_cauchy_and_df2_forms() {
        for &t in &[0.3f64, 1.0, 2.1, 5.0] {
            let cauchy = 1.0 - 2.0 / std::f64::consts::PI * t.atan();
            assert!((t_two_sided_p(t, 1.0) - cauchy).abs() < 1e-12, "t={t}");
            let df2 = 1.0 - t / (t * t + 2.0).sqrt();
            assert!((t_two_sided_p(t, 2.0) - df2).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn identical_sequences_are_degenerate() {
        let a = vec![0.3, 0.4, 0.5, 0.6];
        let out = paired_t_test(&a, &a, 0.05).unwrap();
        assert!(out.degenerate && !out.significant);
        assert!(out.t.is_none() && out.p.is_none());
    }

    #[test]
    fn consistent_advantage_is_significant() {
        let mut rng = crate::numkit::rng::stream(5, 96, 0, 0);
        let b: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
        let a: Vec<f64> =
            b.iter().map(|x| x + 0.1 + rng.gen_range(-0.005..0.005)).collect();
        let out = paired_t_test(&a, &b, 0.05).unwrap();
        assert!(out.significant, "p = {:?}", out.p);
        assert!(out.t.unwrap() > 0.0);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(matches!(
            paired_t_test(&[1.0, 2.0], &[1.0], 0.05),
            Err(EvalError::Protocol(_))
        ));
        assert!(matches!(paired_t_test(&[1.0], &[1.0], 0.05), Err(EvalError::Protocol(_))));
    }

    #[test]
    fn p_value_tracks_permutation_estimate() {
        let mut rng = crate::numkit::rng::stream(9, 95, 0, 0);
        for trial in 0..3 {
            let n = 20;
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let a: Vec<f64> = b.iter().map(|x| x + rng.gen_range(-0.12..0.18)).collect();
            let exact = paired_t_test(&a, &b, 0.05).unwrap().p.unwrap();
            let mc = permutation_p(&a, &b, 100_000, trial);
            assert!((exact - mc).abs() < 0.015, "trial {trial}: {exact} vs {mc}");
        }
    }
}
