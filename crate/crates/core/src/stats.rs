//! Box statistics and number formatting shared by the profile tables and the
//! scenario reports.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("cannot summarize an empty column")]
    Empty,
    #[error("column contains a non-finite value")]
    NonFinite,
}

/// Quantile of already sorted data by linear interpolation between order
/// statistics: position `p·(n−1)` in zero-based ranks (Hyndman–Fan type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Median, quartiles and Tukey whiskers of one column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Smallest sample at or above `q1 − 1.5·IQR`.
    pub lo_whisker: f64,
    /// Largest sample at or below `q3 + 1.5·IQR`.
    pub hi_whisker: f64,
    pub count: usize,
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Result<Self, StatsError> {
        if values.is_empty() {
            return Err(StatsError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q1 = quantile_sorted(&v, 0.25);
        let median = quantile_sorted(&v, 0.5);
        let q3 = quantile_sorted(&v, 0.75);
        let iqr = q3 - q1;
        let lo_fence = q1 - 1.5 * iqr;
        let hi_fence = q3 + 1.5 * iqr;
        let lo_whisker = v.iter().copied().find(|&x| x >= lo_fence).unwrap_or(q1).min(q1);
        let hi_whisker = v.iter().rev().copied().find(|&x| x <= hi_fence).unwrap_or(q3).max(q3);
        Ok(BoxStats { median, q1, q3, lo_whisker, hi_whisker, count: v.len() })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Formats `x` with 9 significant digits, `%.9g` style: fixed notation for
/// decimal exponents in `[-4, 9)`, scientific otherwise, trailing zeros dropped.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_owned();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        let m = trim_zeros(mantissa.to_owned());
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_owned()
    } else {
        s
    }
}
