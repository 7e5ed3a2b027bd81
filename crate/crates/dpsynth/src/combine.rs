//! Combining rules for inference from m synthetic copies of a dataset.
//!
//! Each copy i yields a point estimate q_i and a within-dataset variance
//! estimate u_i. The combined point estimate is the mean of the q_i; the
//! variance estimators differ in how they account for between-copy spread.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::randkit::{quantile_normal, quantile_t};

/// Variance estimator applied to (q_bar, u_bar, b_m).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VarianceRule {
    /// T_p = b_m / m + u_bar, with t reference distribution.
    #[serde(rename = "tp")]
    Tp,
    /// T_s = u_bar (1 + 1/m), normal reference.
    #[serde(rename = "ts")]
    Ts,
    /// T_s for posterior-predictive synthesis: u_bar (1 + 2/m).
    #[serde(rename = "tsppd")]
    TsPpd,
    /// u_bar alone, ignoring the synthesis step entirely.
    #[serde(rename = "naive")]
    NaiveUbar,
}

impl VarianceRule {
    pub const ALL: [VarianceRule; 4] = [
        VarianceRule::Tp,
        VarianceRule::Ts,
        VarianceRule::TsPpd,
        VarianceRule::NaiveUbar,
    ];
}

impl FromStr for VarianceRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tp" => Ok(VarianceRule::Tp),
            "ts" => Ok(VarianceRule::Ts),
            "tsppd" => Ok(VarianceRule::TsPpd),
            "naive" => Ok(VarianceRule::NaiveUbar),
            other => Err(Error::Parse(format!("unknown variance rule `{other}`"))),
        }
    }
}

impl fmt::Display for VarianceRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            VarianceRule::Tp => "tp",
            VarianceRule::Ts => "ts",
            VarianceRule::TsPpd => "tsppd",
            VarianceRule::NaiveUbar => "naive",
        };
        f.write_str(s)
    }
}

/// Result of applying a combining rule to m (q_i, u_i) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedInference {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimand: Option<String>,
    pub m: usize,
    pub rule: VarianceRule,
    pub q_bar: f64,
    pub u_bar: f64,
    pub b_m: f64,
    pub variance: f64,
    /// Degrees of freedom for the reference distribution; `None` means
    /// normal (infinite df).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub df: Option<f64>,
    pub level: f64,
    pub ci: [f64; 2],
}

/// Mean of the per-copy point estimates.
pub fn combine_point(q: &[f64]) -> Result<f64> {
    if q.is_empty() {
        return Err(Error::InvalidArgument("combine_point needs m >= 1".into()));
    }
    Ok(q.iter().sum::<f64>() / q.len() as f64)
}

/// Mean of the per-copy variance estimates.
pub fn within_variance(u: &[f64]) -> Result<f64> {
    if u.is_empty() {
        return Err(Error::InvalidArgument("within_variance needs m >= 1".into()));
    }
    if u.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(
            "within_variance needs nonnegative u_i".into(),
        ));
    }
    Ok(u.iter().sum::<f64>() / u.len() as f64)
}

/// Sample variance of the point estimates, m - 1 denominator. Zero for m = 1.
pub fn between_variance(q: &[f64]) -> Result<f64> {
    let m = q.len();
    if m == 0 {
        return Err(Error::InvalidArgument("between_variance needs m >= 1".into()));
    }
    if m == 1 {
        return Ok(0.0);
    }
    let mean = q.iter().sum::<f64>() / m as f64;
    Ok(q.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64)
}

/// The chosen variance estimator, as a function of (u_bar, b_m, m).
pub fn pooled_variance(rule: VarianceRule, u_bar: f64, b_m: f64, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidArgument("pooled_variance needs m >= 1".into()));
    }
    if u_bar < 0.0 || b_m < 0.0 {
        return Err(Error::InvalidArgument(
            "pooled_variance needs nonnegative u_bar and b_m".into(),
        ));
    }
    let mf = m as f64;
    Ok(match rule {
        VarianceRule::Tp => b_m / mf + u_bar,
        VarianceRule::Ts => u_bar * (1.0 + 1.0 / mf),
        VarianceRule::TsPpd => u_bar * (1.0 + 2.0 / mf),
        VarianceRule::NaiveUbar => u_bar,
    })
}

/// Satterthwaite-style df for T_p: (m - 1)(1 + 1/r)^2 with r = b_m / (m u_bar).
/// `None` means the reference distribution is normal.
pub fn degrees_freedom(rule: VarianceRule, u_bar: f64, b_m: f64, m: usize) -> Result<Option<f64>> {
    if m == 0 {
        return Err(Error::InvalidArgument("degrees_freedom needs m >= 1".into()));
    }
    match rule {
        VarianceRule::Ts | VarianceRule::TsPpd | VarianceRule::NaiveUbar => Ok(None),
        VarianceRule::Tp => {
            if b_m == 0.0 && u_bar == 0.0 {
                return Err(Error::InvalidArgument(
                    "degrees of freedom undefined when b_m and u_bar are both zero".into(),
                ));
            }
            if b_m == 0.0 {
                // r = 0: no between-copy spread, treat as normal.
                return Ok(None);
            }
            if u_bar == 0.0 {
                // r infinite: df -> m - 1.
                return Ok(Some((m - 1) as f64));
            }
            let r = b_m / (m as f64 * u_bar);
            Ok(Some((m - 1) as f64 * (1.0 + 1.0 / r).powi(2)))
        }
    }
}

/// Two-sided interval q_bar +/- quantile * sqrt(variance). A t quantile with
/// the given df if `Some`, else a normal quantile.
pub fn confidence_interval(
    q_bar: f64,
    variance: f64,
    df: Option<f64>,
    level: f64,
) -> Result<[f64; 2]> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence level must be in (0, 1), got {level}"
        )));
    }
    if variance < 0.0 {
        return Err(Error::InvalidArgument(
            "confidence_interval needs nonnegative variance".into(),
        ));
    }
    let p = 1.0 - (1.0 - level) / 2.0;
    let crit = match df {
        Some(d) => quantile_t(p, d)?,
        None => quantile_normal(p)?,
    };
    let half = crit * variance.sqrt();
    Ok([q_bar - half, q_bar + half])
}

/// Full pipeline: (q_i, u_i) pairs to a combined estimate with interval.
pub fn combine(
    q: &[f64],
    u: &[f64],
    rule: VarianceRule,
    level: f64,
) -> Result<CombinedInference> {
    if q.len() != u.len() {
        return Err(Error::InvalidArgument(format!(
            "q and u lengths differ: {} vs {}",
            q.len(),
            u.len()
        )));
    }
    let m = q.len();
    let q_bar = combine_point(q)?;
    let u_bar = within_variance(u)?;
    let b_m = between_variance(q)?;
    let variance = pooled_variance(rule, u_bar, b_m, m)?;
    let df = degrees_freedom(rule, u_bar, b_m, m)?;
    let ci = confidence_interval(q_bar, variance, df, level)?;
    Ok(CombinedInference {
        estimand: None,
        m,
        rule,
        q_bar,
        u_bar,
        b_m,
        variance,
        df,
        level,
        ci,
    })
}
