//! Proportions, two-sample tests, multiple-comparison correction, rounding.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::StatsError;

/// 97.5th percentile of the standard normal.
pub const Z_95: f64 = 1.959964;

/// Wilson score interval for `k` successes out of `n`, clamped to [0, 1].
pub fn wilson_interval(k: u64, n: u64, z: f64) -> Result<(f64, f64), StatsError> {
    if n == 0 {
        return Err(StatsError::Empty);
    }
    if k > n {
        return Err(StatsError::BadCount { k, n });
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let lo = (center - half).clamp(0.0, 1.0).min(p);
    let hi = (center + half).clamp(0.0, 1.0).max(p);
    Ok((lo, hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    /// Both samples have zero variance; `t` is 0 or infinite and `p` is 1 or 0.
    pub degenerate: bool,
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Sample variance (n - 1 denominator).
pub fn variance(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    Some(xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64)
}

pub fn std_dev(xs: &[f64]) -> Option<f64> {
    variance(xs).map(f64::sqrt)
}

/// Two-sided Welch t-test of equal means.
pub fn welch_t_test(xs: &[f64], ys: &[f64]) -> Result<WelchResult, StatsError> {
    for s in [xs, ys] {
        if s.len() < 2 {
            return Err(StatsError::TooFew { needed: 2, got: s.len() });
        }
    }
    let (mx, my) = (mean(xs).unwrap(), mean(ys).unwrap());
    let vx = variance(xs).unwrap() / xs.len() as f64;
    let vy = variance(ys).unwrap() / ys.len() as f64;
    let se2 = vx + vy;
    if se2 == 0.0 {
        let df = (xs.len() + ys.len() - 2) as f64;
        return Ok(if mx == my {
            WelchResult { t: 0.0, df, p: 1.0, degenerate: true }
        } else {
            WelchResult {
                t: if mx > my { f64::INFINITY } else { f64::NEG_INFINITY },
                df,
                p: 0.0,
                degenerate: true,
            }
        });
    }
    let t = (mx - my) / se2.sqrt();
    let df = se2 * se2
        / (vx * vx / (xs.len() - 1) as f64 + vy * vy / (ys.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| StatsError::Dimension(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(WelchResult { t, df, p, degenerate: false })
}

/// Bonferroni adjustment: `min(1, m * p)`.
pub fn bonferroni(p_values: &[f64], m: usize) -> Result<Vec<f64>, StatsError> {
    if m < p_values.len() {
        return Err(StatsError::Dimension(format!(
            "m = {m} is smaller than the number of p-values ({})",
            p_values.len()
        )));
    }
    Ok(p_values.iter().map(|p| (p * m as f64).min(1.0)).collect())
}

/// Round half to even at `decimals` places.
pub fn round_half_even(x: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    let scaled = x * scale;
    // snap values within float noise of a tie onto the tie
    let snapped = if ((scaled - scaled.trunc()).abs() - 0.5).abs() < 1e-9 {
        scaled.trunc() + 0.5 * scaled.signum()
    } else {
        scaled
    };
    snapped.round_ties_even() / scale
}

/// Relative change of `treated` against `control`, in percent.
pub fn pct_change(control: f64, treated: f64) -> Option<f64> {
    (control != 0.0).then(|| (treated - control) / control * 100.0)
}

/// Conventional stars for an (already corrected) p-value.
pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wilson_edges() {
        let (lo, hi) = wilson_interval(0, 100, Z_95).unwrap();
        let z2 = Z_95 * Z_95;
        assert_eq!(lo, 0.0);
        assert!((hi - z2 / (100.0 + z2)).abs() < 1e-12);
        assert!((hi - 0.0370).abs() < 1e-4);
        let (lo2, hi2) = wilson_interval(100, 100, Z_95).unwrap();
        assert!((lo2 - (1.0 - hi)).abs() < 1e-12);
        assert_eq!(hi2, 1.0);
        let (lo, hi) = wilson_interval(50, 100, Z_95).unwrap();
        assert!(((lo + hi) / 2.0 - 0.5).abs() < 1e-12);
        assert!(matches!(wilson_interval(0, 0, Z_95), Err(StatsError::Empty)));
        assert!(wilson_interval(5, 4, Z_95).is_err());
    }

    #[test]
    fn welch_cases() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let r = welch_t_test(&xs, &xs).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        let r = welch_t_test(&[0.0; 4], &[1.0; 4]).unwrap();
        assert!(r.degenerate && r.p == 0.0);
        let r = welch_t_test(&[2.0; 3], &[2.0; 5]).unwrap();
        assert!(r.degenerate && r.p == 1.0 && r.t == 0.0);
        assert!(welch_t_test(&[1.0], &xs).is_err());
    }

    #[test]
    fn welch_matches_textbook() {
        // hand-worked: means 3 and 5, variances 2.5 and 10, n = 5 each
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ys = [1.0, 3.0, 5.0, 7.0, 9.0];
        let r = welch_t_test(&xs, &ys).unwrap();
        let t = -2.0 / (0.5f64 + 2.0).sqrt();
        let df = 2.5f64.powi(2) / (0.25 / 4.0 + 4.0 / 4.0);
        assert!((r.t - t).abs() < 1e-12);
        assert!((r.df - df).abs() < 1e-12);
        // two-sided p for t = -1.2649, df = 5.882 is about 0.2535
        assert!((r.p - 0.2535).abs() < 5e-4, "{}", r.p);
    }

    #[test]
    fn bonferroni_cases() {
        assert_eq!(bonferroni(&[0.01], 1).unwrap(), vec![0.01]);
        assert!((bonferroni(&[0.01], 10).unwrap()[0] - 0.1).abs() < 1e-15);
        assert_eq!(bonferroni(&[0.2], 10).unwrap(), vec![1.0]);
        assert!(bonferroni(&[0.1, 0.2], 1).is_err());
    }

    #[test]
    fn rounding() {
        assert_eq!(round_half_even(0.25, 1), 0.2);
        assert_eq!(round_half_even(0.35, 1), 0.4);
        assert_eq!(round_half_even(708.333, 1), 708.3);
        assert_eq!(round_half_even(-2.25, 1), -2.2);
        assert_eq!(round_half_even(4.05, 1), 4.0);
        let pct = pct_change(12.0 / 300.0, 97.0 / 300.0).unwrap();
        assert_eq!(round_half_even(pct, 0), 708.0);
        assert!((pct_change(0.04, 0.32).unwrap() - 700.0).abs() < 1e-9);
        assert_eq!(pct_change(0.0, 1.0), None);
    }

    proptest! {
        #[test]
        fn wilson_contains_phat(n in 1u64..2000, frac in 0.0f64..=1.0) {
            let k = (frac * n as f64).floor() as u64;
            let (lo, hi) = wilson_interval(k, n, Z_95).unwrap();
            let p = k as f64 / n as f64;
            prop_assert!(0.0 <= lo && lo <= p && p <= hi && hi <= 1.0);
        }

        #[test]
        fn wilson_narrows_with_n(k in 0u64..50, scale in 1u64..20) {
            let n = 50;
            let (a, b) = wilson_interval(k, n, Z_95).unwrap();
            let (c, d) = wilson_interval(k * (scale + 1), n * (scale + 1), Z_95).unwrap();
            prop_assert!(d - c < b - a);
        }

        #[test]
        fn bonferroni_never_decreases(p in 0.0f64..=1.0, m in 1usize..50) {
            prop_assert!(bonferroni(&[p], m).unwrap()[0] >= p);
        }
    }
}
