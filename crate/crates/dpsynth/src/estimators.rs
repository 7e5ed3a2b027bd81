//! Per-dataset point estimates and their within-dataset variance estimates
//! for the three estimand families: means, proportions and least-squares
//! regression coefficients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tabular::{ColumnKind, Dataset};

/// A scalar quantity of interest evaluated on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Estimand {
    Mean {
        column: String,
    },
    Proportion {
        column: String,
        level: String,
    },
    /// Least-squares coefficient of `response ~ 1 + regressors`, selected by
    /// index with the intercept at 0.
    Ols {
        response: String,
        regressors: Vec<String>,
        coef_index: usize,
    },
}

impl Estimand {
    pub fn evaluate(&self, ds: &Dataset) -> Result<EstimateResult> {
        match self {
            Estimand::Mean { column } => estimate_mean(ds, column),
            Estimand::Proportion { column, level } => estimate_proportion(ds, column, level),
            Estimand::Ols {
                response,
                regressors,
                coef_index,
            } => estimate_ols(ds, response, regressors, *coef_index),
        }
    }
}

/// CLI syntax: `mean:y1`, `prop:y1=1`, `ols:y1~y2+y3#y2` (coefficient
/// selector after `#`; `#0` or omitted selects the intercept).
impl FromStr for Estimand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("estimand `{s}` missing `kind:` prefix")))?;
        match head {
            "mean" => Ok(Estimand::Mean {
                column: rest.to_string(),
            }),
            "prop" => {
                let (col, level) = rest
                    .split_once('=')
                    .ok_or_else(|| Error::Parse(format!("prop estimand `{s}` needs col=level")))?;
                Ok(Estimand::Proportion {
                    column: col.to_string(),
                    level: level.to_string(),
                })
            }
            "ols" => {
                let (formula, selector) = match rest.split_once('#') {
                    Some((f, sel)) => (f, Some(sel)),
                    None => (rest, None),
                };
                let (response, rhs) = formula
                    .split_once('~')
                    .ok_or_else(|| Error::Parse(format!("ols estimand `{s}` needs y~x1+x2")))?;
                let regressors: Vec<String> =
                    rhs.split('+').map(|r| r.trim().to_string()).collect();
                if regressors.iter().any(|r| r.is_empty()) {
                    return Err(Error::Parse(format!("ols estimand `{s}` has empty regressor")));
                }
                let coef_index = match selector {
                    None => 0,
                    Some(sel) => {
                        if let Ok(idx) = sel.parse::<usize>() {
                            idx
                        } else {
                            1 + regressors
                                .iter()
                                .position(|r| r == sel)
                                .ok_or_else(|| {
                                    Error::Parse(format!(
                                        "coefficient selector `{sel}` not among regressors"
                                    ))
                                })?
                        }
                    }
                };
                if coef_index > regressors.len() {
                    return Err(Error::Parse(format!(
                        "coefficient index {coef_index} out of range"
                    )));
                }
                Ok(Estimand::Ols {
                    response: response.trim().to_string(),
                    regressors,
                    coef_index,
                })
            }
            other => Err(Error::Parse(format!("unknown estimand kind `{other}`"))),
        }
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimand::Mean { column } => write!(f, "mean:{column}"),
            Estimand::Proportion { column, level } => write!(f, "prop:{column}={level}"),
            Estimand::Ols {
                response,
                regressors,
                coef_index,
            } => {
                let sel = if *coef_index == 0 {
                    "0".to_string()
                } else {
                    regressors[coef_index - 1].clone()
                };
                write!(f, "ols:{response}~{}#{sel}", regressors.join("+"))
            }
        }
    }
}

/// A point estimate together with its estimated variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    /// Point estimate.
    pub q: f64,
    /// Variance estimate of `q` (not of the data).
    pub u: f64,
    pub n_used: usize,
}

fn column_index(ds: &Dataset, name: &str) -> Result<usize> {
    ds.schema()
        .column_index(name)
        .ok_or_else(|| Error::InvalidArgument(format!("no column `{name}`")))
}

/// Sample mean with u = s^2 / n.
pub fn estimate_mean(ds: &Dataset, column: &str) -> Result<EstimateResult> {
    let ci = column_index(ds, column)?;
    let n = ds.n();
    if n < 2 {
        return Err(Error::InvalidArgument("estimate_mean needs n >= 2".into()));
    }
    let vals = ds.column_values(ci);
    let nf = n as f64;
    let mean = vals.iter().sum::<f64>() / nf;
    let s2 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
    Ok(EstimateResult {
        q: mean,
        u: s2 / nf,
        n_used: n,
    })
}

/// Sample proportion with the Wald variance p(1-p)/n.
pub fn estimate_proportion(ds: &Dataset, column: &str, level: &str) -> Result<EstimateResult> {
    let ci = column_index(ds, column)?;
    let target = match &ds.schema().columns[ci].kind {
        ColumnKind::Binary => match level {
            "0" => 0.0,
            "1" => 1.0,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "level `{other}` not valid for binary column `{column}`"
                )))
            }
        },
        ColumnKind::Categorical { levels } => levels
            .iter()
            .position(|l| l == level)
            .map(|i| i as f64)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("level `{level}` absent from column `{column}`"))
            })?,
        ColumnKind::Continuous { .. } => {
            return Err(Error::InvalidArgument(format!(
                "proportion needs a discrete column, `{column}` is continuous"
            )))
        }
    };
    let n = ds.n();
    let hits = ds
        .column_values(ci)
        .iter()
        .filter(|&&v| v == target)
        .count();
    let p = hits as f64 / n as f64;
    Ok(EstimateResult {
        q: p,
        u: p * (1.0 - p) / n as f64,
        n_used: n,
    })
}

/// Least-squares coefficient and its variance from sigma^2 (X'X)^-1, via QR.
pub fn estimate_ols(
    ds: &Dataset,
    response: &str,
    regressors: &[String],
    coef_index: usize,
) -> Result<EstimateResult> {
    let yi = column_index(ds, response)?;
    let xi: Vec<usize> = regressors
        .iter()
        .map(|r| column_index(ds, r))
        .collect::<Result<_>>()?;
    let n = ds.n();
    let k = xi.len() + 1; // intercept
    if coef_index >= k {
        return Err(Error::InvalidArgument(format!(
            "coefficient index {coef_index} out of range for {k} coefficients"
        )));
    }
    if n <= k {
        return Err(Error::InvalidArgument(format!(
            "ols needs n > {k}, got n = {n}"
        )));
    }

    let mut x = DMatrix::zeros(n, k);
    let mut y = DVector::zeros(n);
    for (r, row) in ds.rows().iter().enumerate() {
        x[(r, 0)] = 1.0;
        for (j, &c) in xi.iter().enumerate() {
            x[(r, j + 1)] = row[c];
        }
        y[r] = row[yi];
    }

    let qr = x.clone().qr();
    let r_mat = qr.r();
    let scale = r_mat
        .diagonal()
        .iter()
        .fold(0.0f64, |a, d| a.max(d.abs()));
    for i in 0..k {
        if r_mat[(i, i)].abs() < 1e-10 * scale.max(1.0) {
            return Err(Error::InvalidArgument(
                "design matrix is rank deficient".into(),
            ));
        }
    }
    let qty = qr.q().transpose() * &y;
    let beta = r_mat
        .clone()
        .solve_upper_triangular(&qty.rows(0, k).into_owned())
        .ok_or_else(|| Error::InvalidArgument("design matrix is rank deficient".into()))?;

    let resid = &y - &x * &beta;
    let rss = resid.dot(&resid);
    let sigma2 = rss / (n - k) as f64;

    // (X'X)^-1 = R^-1 R^-T; column j of R^-1 solves R v = e_j.
    let mut e = DVector::zeros(k);
    e[coef_index] = 1.0;
    // diag element jj of R^-1 R^-T equals || row j of R^-1 ||^2, i.e. solve
    // R^T w = e_j then take ||w||^2? R^-1 R^-T e_j needs w = R^-T e_j first.
    let w = r_mat
        .transpose()
        .solve_lower_triangular(&e)
        .ok_or_else(|| Error::InvalidArgument("design matrix is rank deficient".into()))?;
    let xtx_inv_jj = w.dot(&w);

    Ok(EstimateResult {
        q: beta[coef_index],
        u: (sigma2 * xtx_inv_jj).max(0.0),
        n_used: n,
    })
}
