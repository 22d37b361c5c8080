//! Hypothesis tests used by the model comparison protocol.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

fn student_t_two_sided(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than 2 values.
pub fn sample_sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapiroWilk {
    pub w: f64,
    pub p: f64,
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

/// Shapiro-Wilk W and p-value (Royston's AS R94 approximation).
pub fn shapiro_wilk(samples: &[f64]) -> Result<ShapiroWilk> {
    let n = samples.len();
    if !(3..=5000).contains(&n) {
        return Err(Error::invalid(format!("Shapiro-Wilk needs 3 to 5000 samples, got {n}")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("Shapiro-Wilk samples must be finite"));
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let m0 = mean(&x);
    let ssq: f64 = x.iter().map(|v| (v - m0) * (v - m0)).sum();
    let range = x[n - 1] - x[0];
    if range <= 0.0 || ssq <= 0.0 {
        return Err(Error::invalid("Shapiro-Wilk sample has zero variance"));
    }

    let half = n / 2;
    let mut a = vec![0.0; half];
    if n == 3 {
        a[0] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        let norm = std_normal();
        let an25 = n as f64 + 0.25;
        let m: Vec<f64> = (1..=half)
            .map(|i| norm.inverse_cdf((i as f64 - 0.375) / an25))
            .collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / (n as f64).sqrt();
        const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
        const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
        let a1 = poly(&C1, rsn) - m[0] / ssumm2;
        let (first, fac) = if n > 5 {
            let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
            a[1] = a2;
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt();
            (2, fac)
        } else {
            (1, ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt())
        };
        a[0] = a1;
        for i in first..half {
            a[i] = -m[i] / fac;
        }
    }

    let b: f64 = (0..half).map(|i| a[i] * (x[n - 1 - i] - x[i])).sum();
    let w = (b * b / ssq).min(1.0);

    let p = if n == 3 {
        const PI6: f64 = 6.0 / std::f64::consts::PI;
        const STQR: f64 = std::f64::consts::FRAC_PI_3;
        (PI6 * (w.sqrt().asin() - STQR)).clamp(0.0, 1.0)
    } else {
        let nf = n as f64;
        let mut y = (1.0 - w).ln();
        let (mu, sigma) = if n <= 11 {
            let gamma = poly(&[-2.273, 0.459], nf);
            if y >= gamma {
                return Ok(ShapiroWilk { w, p: 1e-99 });
            }
            y = -(gamma - y).ln();
            (
                poly(&[0.5440, -0.39978, 0.025054, -6.714e-4], nf),
                poly(&[1.3822, -0.77857, 0.062767, -0.0020322], nf).exp(),
            )
        } else {
            let ln_n = nf.ln();
            (
                poly(&[-1.5861, -0.31082, -0.083751, 0.0038915], ln_n),
                poly(&[-0.4803, -0.082676, 0.0030302], ln_n).exp(),
            )
        };
        std_normal().sf((y - mu) / sigma)
    };
    Ok(ShapiroWilk { w, p })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Nonzero differences actually ranked.
    pub n: usize,
    pub p: f64,
    pub method: WilcoxonMethod,
}

/// Largest sample (after dropping zeros) handled by full enumeration.
pub const WILCOXON_EXACT_MAX: usize = 12;

/// Average ranks (1-based) of `v`, plus the tie group sizes.
fn average_ranks(v: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && v[idx[j]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

/// Two-sided Wilcoxon signed-rank test on `a - b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return Err(Error::invalid("all paired differences are zero"));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("paired differences must be finite"));
    }
    let n = d.len();
    let (ranks, ties) = average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let centre = total / 2.0;
    let (p, method) = if n <= WILCOXON_EXACT_MAX {
        // average ranks are multiples of 1/2, so doubled ranks are exact integers
        let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        let obs = (2.0 * w_plus).round() as i64;
        let centre2 = (n * (n + 1)) as i64 / 2;
        let dev = (obs - centre2).abs();
        let mut extreme = 0u64;
        for signs in 0u32..(1 << n) {
            let s: u64 = (0..n).filter(|&i| signs >> i & 1 == 1).map(|i| doubled[i]).sum();
            if (s as i64 - centre2).abs() >= dev {
                extreme += 1;
            }
        }
        (extreme as f64 / (1u64 << n) as f64, WilcoxonMethod::Exact)
    } else {
        let nf = n as f64;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        let diff = w_plus - centre;
        let z = (diff.abs() - 0.5).max(0.0) / var.sqrt();
        ((2.0 * std_normal().sf(z)).min(1.0), WilcoxonMethod::NormalApprox)
    };
    Ok(Wilcoxon {
        statistic: w_plus.min(w_minus),
        w_plus,
        w_minus,
        n,
        p,
        method,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedT {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Paired two-sided t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedT> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::invalid("paired t-test needs at least 2 pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let sd = sample_sd(&d);
    if !(sd > 0.0) {
        return Err(Error::DegenerateVariance("paired differences have zero variance".into()));
    }
    let n = d.len() as f64;
    let t = mean(&d) / (sd / n.sqrt());
    let df = n - 1.0;
    Ok(PairedT {
        t,
        df,
        p: student_t_two_sided(t, df),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub p_slope: f64,
    /// Residuals vanish; `p_slope` is then 1 for a flat line and 0 otherwise.
    pub exact_fit: bool,
}

/// Ordinary least squares with a two-sided t-test on the slope (df = n - 2).
pub fn slope_regression(x: &[f64], y: &[f64]) -> Result<SlopeFit> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("x has {} points, y has {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::invalid(format!("slope regression needs at least 3 points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("regression inputs must be finite"));
    }
    let n = x.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if !(sxx > 0.0) {
        return Err(Error::invalid("regression x values have zero variance"));
    }
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let scale = y.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    if syy <= 1e-28 * scale {
        return Ok(SlopeFit {
            slope: 0.0,
            intercept: my,
            p_slope: 1.0,
            exact_fit: true,
        });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    if sse <= 1e-24 * syy {
        return Ok(SlopeFit {
            slope,
            intercept,
            p_slope: 0.0,
            exact_fit: true,
        });
    }
    let se = (sse / (n - 2.0) / sxx).sqrt();
    Ok(SlopeFit {
        slope,
        intercept,
        p_slope: student_t_two_sided(slope / se, n - 2.0),
        exact_fit: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilcoxon_small_cases() {
        let w = wilcoxon_signed_rank(&[1.0, 2.0, 3.0], &[0.0; 3]).unwrap();
        assert_eq!((w.w_minus, w.p, w.method), (0.0, 0.25, WilcoxonMethod::Exact));
        let w = wilcoxon_signed_rank(&[1.0, 2.0, 5.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((w.n, w.p), (1, 1.0));
        let w = wilcoxon_signed_rank(&[-1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!((w.w_minus, w.p), (1.5, 1.0));
        assert!(wilcoxon_signed_rank(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn paired_t_small_case() {
        let r = paired_t_test(&[1.0, 2.0, 3.0], &[0.0; 3]).unwrap();
        assert!((r.t - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.df, 2.0);
        assert!(matches!(paired_t_test(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::DegenerateVariance(_))));
    }

    #[test]
    fn regression_degenerate_fits() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let f = slope_regression(&x, &[1.0, 3.0, 5.0, 7.0]).unwrap();
        assert!(f.exact_fit && (f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert_eq!(f.p_slope, 0.0);
        let f = slope_regression(&x, &[0.4; 4]).unwrap();
        assert_eq!((f.slope, f.p_slope), (0.0, 1.0));
        assert!(slope_regression(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(slope_regression(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn shapiro_wilk_rejects_degenerate() {
        assert!(shapiro_wilk(&[1.0, 1.0, 1.0]).is_err());
        assert!(shapiro_wilk(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        let (r, t) = average_ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(t, vec![2]);
    }
}
