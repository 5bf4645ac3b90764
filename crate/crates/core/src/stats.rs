//! Small numeric helpers: compensated summation, Gaussian/Student quantiles,
//! and empirical quantiles with an order-statistic standard error.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Kahan compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Compensated sum of a slice.
pub fn kahan_sum(xs: &[f64]) -> f64 {
    let mut acc = KahanSum::new();
    for &x in xs {
        acc.add(x);
    }
    acc.value()
}

/// `(1-p)`-quantile of the standard normal, i.e. `z_p` with `P(Z > z_p) = p`.
pub fn normal_upper_quantile(p: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) && p != 1.0 {
        return Err(Error::Parameter(format!(
            "normal quantile level must be in (0,1], got {p}"
        )));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(1.0 - p))
}

/// `(1-p)`-quantile of Student's t with `df` degrees of freedom, found by
/// bisection on the t CDF (the library's closed-form inversion loses
/// accuracy at large `df`).
pub fn t_upper_quantile(p: f64, df: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) && p != 1.0 {
        return Err(Error::Parameter(format!(
            "t quantile level must be in (0,1], got {p}"
        )));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    if !(df > 0.0) {
        return Err(Error::Parameter(format!(
            "degrees of freedom must be positive, got {df}"
        )));
    }
    let t = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Parameter(format!("invalid t distribution: {e}")))?;
    let target = 1.0 - p;
    if p > 0.5 {
        // negative quantile: reflect
        return Ok(-t_upper_quantile(1.0 - p, df)?);
    }
    let mut lo = 0.0f64;
    let mut hi = normal_upper_quantile(p)?.max(1.0);
    while t.cdf(hi) < target {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::Parameter(format!(
                "t quantile bracket failed at p={p}, df={df}"
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t.cdf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi.abs().max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Empirical `(1-gamma)`-quantile of `draws` together with an order-statistic
/// standard error derived from a binomial bracket around the quantile index.
///
/// Sorts a copy of the input; ties and short samples are handled by clamping
/// the index to the valid range.
pub fn quantile_with_se(draws: &[f64], gamma: f64) -> Result<(f64, f64)> {
    if draws.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    if !(0.0 < gamma && gamma < 1.0) {
        return Err(Error::Parameter(format!(
            "quantile level gamma must be in (0,1), got {gamma}"
        )));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN draws"));
    let m = sorted.len();
    let p = 1.0 - gamma;
    let k = ((p * m as f64).ceil() as usize).clamp(1, m) - 1;
    let value = sorted[k];

    // Binomial bracket: idx +/- 1.96 sqrt(m p (1-p)), SE from the spread.
    let half = 1.959963984540054 * (m as f64 * p * (1.0 - p)).sqrt();
    let lo = k.saturating_sub(half.ceil() as usize);
    let hi = (k + half.ceil() as usize).min(m - 1);
    let se = if hi > lo {
        (sorted[hi] - sorted[lo]) / (2.0 * 1.959963984540054)
    } else {
        0.0
    };
    Ok((value, se))
}

/// FNV-1a 64-bit hash, used for config digests and RNG purpose tags.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
