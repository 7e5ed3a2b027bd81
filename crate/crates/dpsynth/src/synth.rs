//! Privatized generative models fitted on an original dataset, and sampling
//! of m-copy synthetic bundles from them.
//!
//! Three families: a perturbed joint histogram, a chain Bayesian network
//! with noisy conditional tables, and a (non-private) parametric Gaussian
//! with an optional posterior-predictive variant.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::dp::{
    eps_fmt, exponential_mechanism, laplace_mechanism, split_budget, BudgetLedger, Composition,
    NeighborSemantics, PrivacyBudget,
};
use crate::error::{Error, Result};
use crate::randkit::{cholesky, sample_mvn, CovMatrix, RngStream};
use crate::tabular::{ColumnKind, Dataset, Schema};

const MAX_JOINT_CELLS: usize = 1_000_000;
const MAX_PARENT_SUBSETS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SynthMethod {
    #[serde(rename = "histogram")]
    PerturbedHistogram,
    #[serde(rename = "bayesnet")]
    ChainBayesNet,
    #[serde(rename = "gaussian")]
    ParametricGaussian,
    #[serde(rename = "gaussian-ppd")]
    ParametricGaussianPpd,
}

impl SynthMethod {
    pub const ALL: [SynthMethod; 4] = [
        SynthMethod::PerturbedHistogram,
        SynthMethod::ChainBayesNet,
        SynthMethod::ParametricGaussian,
        SynthMethod::ParametricGaussianPpd,
    ];

    pub fn is_private(&self) -> bool {
        matches!(
            self,
            SynthMethod::PerturbedHistogram | SynthMethod::ChainBayesNet
        )
    }
}

impl FromStr for SynthMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "histogram" => Ok(SynthMethod::PerturbedHistogram),
            "bayesnet" => Ok(SynthMethod::ChainBayesNet),
            "gaussian" => Ok(SynthMethod::ParametricGaussian),
            "gaussian-ppd" => Ok(SynthMethod::ParametricGaussianPpd),
            other => Err(Error::Parse(format!("unknown synthesis method `{other}`"))),
        }
    }
}

impl fmt::Display for SynthMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SynthMethod::PerturbedHistogram => "histogram",
            SynthMethod::ChainBayesNet => "bayesnet",
            SynthMethod::ParametricGaussian => "gaussian",
            SynthMethod::ParametricGaussianPpd => "gaussian-ppd",
        };
        f.write_str(s)
    }
}

/// What to synthesize: which model, at what total budget, how many copies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRequest {
    pub method: SynthMethod,
    pub total_budget: PrivacyBudget,
    pub m: usize,
    pub bins_per_continuous: usize,
    pub bn_degree: usize,
    /// Synthetic sample size; `None` means the original n.
    pub out_n: Option<usize>,
    pub semantics: NeighborSemantics,
    /// Score sensitivity for the structure-selection exponential mechanism;
    /// `None` means the loose default bound computed from n.
    pub mi_sensitivity: Option<f64>,
}

impl SynthesisRequest {
    pub fn new(method: SynthMethod, total_budget: PrivacyBudget, m: usize) -> Self {
        SynthesisRequest {
            method,
            total_budget,
            m,
            bins_per_continuous: 20,
            bn_degree: 1,
            out_n: None,
            semantics: NeighborSemantics::default(),
            mi_sensitivity: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::InvalidArgument("m must be >= 1".into()));
        }
        if self.bins_per_continuous < 2 {
            return Err(Error::InvalidArgument(
                "bins_per_continuous must be >= 2".into(),
            ));
        }
        if let Some(s) = self.mi_sensitivity {
            if !(s > 0.0) {
                return Err(Error::InvalidArgument(
                    "mi_sensitivity must be positive".into(),
                ));
            }
        }
        if self.method.is_private() && self.total_budget.epsilon <= 0.0 {
            return Err(Error::InvalidArgument(
                "private synthesis needs epsilon > 0".into(),
            ));
        }
        if !self.method.is_private() && !self.total_budget.is_non_private() {
            return Err(Error::InvalidArgument(
                "gaussian methods are non-private baselines; use epsilon = inf".into(),
            ));
        }
        Ok(())
    }
}

/// Default mutual-information score sensitivity: a loose desk-scale bound.
pub fn default_mi_sensitivity(n: usize) -> f64 {
    let nf = n as f64;
    (nf.log2() / nf) * 2.0 + 2.0 / nf
}

/// One conditional distribution in the chain network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnNode {
    /// Indices of parent columns, all preceding this one in schema order.
    pub parents: Vec<usize>,
    /// One probability row per parent configuration (row-major over the
    /// parents' cardinalities), each of length = this column's cardinality.
    pub table: Vec<Vec<f64>>,
}

/// A fitted, privatized generative model. Holds no raw data rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SynthModel {
    Histogram {
        schema: Schema,
        bins: usize,
        cards: Vec<usize>,
        /// Joint probability over all cells, row-major in column order.
        probs: Vec<f64>,
    },
    ChainBayesNet {
        schema: Schema,
        bins: usize,
        cards: Vec<usize>,
        nodes: Vec<BnNode>,
    },
    Gaussian {
        schema: Schema,
        mean: Vec<f64>,
        cov: CovMatrix,
        n_fit: usize,
        ppd: bool,
    },
}

fn column_cardinalities(schema: &Schema, bins: usize) -> Vec<usize> {
    schema
        .columns
        .iter()
        .map(|c| c.kind.discrete_cardinality().unwrap_or(bins))
        .collect()
}

fn discretize(kind: &ColumnKind, v: f64, bins: usize) -> usize {
    match kind {
        ColumnKind::Continuous { range } => {
            let width = (range[1] - range[0]) / bins as f64;
            let b = ((v - range[0]) / width).floor() as isize;
            b.clamp(0, bins as isize - 1) as usize
        }
        ColumnKind::Binary | ColumnKind::Categorical { .. } => v as usize,
    }
}

fn undiscretize(kind: &ColumnKind, code: usize, bins: usize, rng: &mut ChaCha12Rng) -> f64 {
    match kind {
        ColumnKind::Continuous { range } => {
            let width = (range[1] - range[0]) / bins as f64;
            let v = range[0] + (code as f64 + rng.gen::<f64>()) * width;
            v.min(range[1])
        }
        ColumnKind::Binary | ColumnKind::Categorical { .. } => code as f64,
    }
}

fn strides(cards: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; cards.len()];
    for i in (0..cards.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * cards[i + 1];
    }
    s
}

fn clamp_normalize(row: &mut [f64]) {
    let mut total = 0.0;
    for v in row.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
        total += *v;
    }
    if total <= 0.0 {
        let u = 1.0 / row.len() as f64;
        row.iter_mut().for_each(|v| *v = u);
    } else {
        row.iter_mut().for_each(|v| *v /= total);
    }
}

fn sample_index(rng: &mut ChaCha12Rng, probs: &[f64]) -> usize {
    let mut u = rng.gen::<f64>();
    for (i, p) in probs.iter().enumerate() {
        u -= p;
        if u <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

impl SynthModel {
    pub fn method(&self) -> SynthMethod {
        match self {
            SynthModel::Histogram { .. } => SynthMethod::PerturbedHistogram,
            SynthModel::ChainBayesNet { .. } => SynthMethod::ChainBayesNet,
            SynthModel::Gaussian { ppd: false, .. } => SynthMethod::ParametricGaussian,
            SynthModel::Gaussian { ppd: true, .. } => SynthMethod::ParametricGaussianPpd,
        }
    }

    /// Draw `out_n` synthetic rows.
    pub fn sample(&self, rng: &mut ChaCha12Rng, out_n: usize) -> Result<Dataset> {
        if out_n == 0 {
            return Err(Error::InvalidArgument("out_n must be >= 1".into()));
        }
        match self {
            SynthModel::Histogram {
                schema,
                bins,
                cards,
                probs,
            } => {
                let st = strides(cards);
                let mut rows = Vec::with_capacity(out_n);
                for _ in 0..out_n {
                    let mut cell = sample_index(rng, probs);
                    let mut row = Vec::with_capacity(schema.len());
                    for (j, col) in schema.columns.iter().enumerate() {
                        let code = cell / st[j];
                        cell %= st[j];
                        row.push(undiscretize(&col.kind, code, *bins, rng));
                    }
                    rows.push(row);
                }
                Dataset::new(schema.clone(), rows)
            }
            SynthModel::ChainBayesNet {
                schema,
                bins,
                cards,
                nodes,
            } => {
                let mut rows = Vec::with_capacity(out_n);
                let mut codes = vec![0usize; schema.len()];
                for _ in 0..out_n {
                    let mut row = Vec::with_capacity(schema.len());
                    for (j, col) in schema.columns.iter().enumerate() {
                        let node = &nodes[j];
                        let mut cfg = 0usize;
                        for &p in &node.parents {
                            cfg = cfg * cards[p] + codes[p];
                        }
                        let code = sample_index(rng, &node.table[cfg]);
                        codes[j] = code;
                        row.push(undiscretize(&col.kind, code, *bins, rng));
                    }
                    rows.push(row);
                }
                Dataset::new(schema.clone(), rows)
            }
            SynthModel::Gaussian {
                schema,
                mean,
                cov,
                n_fit,
                ppd,
            } => {
                let rows = if *ppd {
                    let (mu, sigma) = draw_niw_posterior(rng, mean, cov, *n_fit)?;
                    sample_mvn(rng, &mu, &sigma, out_n)?
                } else {
                    sample_mvn(rng, mean, cov, out_n)?
                };
                let (ds, _clamped) = Dataset::new_clamping(schema.clone(), rows)?;
                Ok(ds)
            }
        }
    }
}

/// Noisy normalized joint contingency table over all columns.
pub fn fit_perturbed_histogram(
    ds: &Dataset,
    eps: PrivacyBudget,
    bins: usize,
    semantics: NeighborSemantics,
    stream: &RngStream,
    ledger: &mut BudgetLedger,
) -> Result<SynthModel> {
    if ds.n() == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let schema = ds.schema().clone();
    let cards = column_cardinalities(&schema, bins);
    let cells: usize = cards.iter().try_fold(1usize, |a, &c| {
        a.checked_mul(c).filter(|&t| t <= MAX_JOINT_CELLS)
    })
    .ok_or_else(|| {
        Error::InvalidArgument(format!(
            "joint histogram would exceed {MAX_JOINT_CELLS} cells"
        ))
    })?;

    let st = strides(&cards);
    let mut counts = vec![0.0f64; cells];
    for row in ds.rows() {
        let mut idx = 0usize;
        for (j, col) in schema.columns.iter().enumerate() {
            idx += discretize(&col.kind, row[j], bins) * st[j];
        }
        counts[idx] += 1.0;
    }

    let mut rng = stream.rng();
    let mut probs = laplace_mechanism(
        &mut rng,
        &counts,
        semantics.histogram_l1_sensitivity(),
        eps.epsilon,
    )?;
    clamp_normalize(&mut probs);
    charge_sentinel(ledger, "histogram", eps)?;

    Ok(SynthModel::Histogram {
        schema,
        bins,
        cards,
        probs,
    })
}

fn charge_sentinel(ledger: &mut BudgetLedger, label: &str, eps: PrivacyBudget) -> Result<()> {
    let spend = if eps.is_non_private() {
        PrivacyBudget::zero()
    } else {
        eps
    };
    ledger.charge(label, spend, Composition::Sequential)
}

/// Empirical mutual information, in bits, between column j's codes and the
/// joint configuration of the candidate parent columns.
fn mutual_information(codes: &[Vec<usize>], j: usize, parents: &[usize], cards: &[usize]) -> f64 {
    let n = codes.len() as f64;
    let cfgs: usize = parents.iter().map(|&p| cards[p]).product();
    let kj = cards[j];
    let mut joint = vec![0.0f64; cfgs * kj];
    let mut pj = vec![0.0f64; kj];
    let mut ps = vec![0.0f64; cfgs];
    for row in codes {
        let mut cfg = 0usize;
        for &p in parents {
            cfg = cfg * cards[p] + row[p];
        }
        joint[cfg * kj + row[j]] += 1.0;
        pj[row[j]] += 1.0;
        ps[cfg] += 1.0;
    }
    let mut mi = 0.0;
    for c in 0..cfgs {
        for x in 0..kj {
            let pxy = joint[c * kj + x] / n;
            if pxy > 0.0 {
                mi += pxy * (pxy / ((ps[c] / n) * (pj[x] / n))).log2();
            }
        }
    }
    mi.max(0.0)
}

/// All subsets of {0..j} with at most `degree` elements, empty set first.
fn parent_subsets(j: usize, degree: usize) -> Result<Vec<Vec<usize>>> {
    if j > 20 {
        return Err(Error::InvalidArgument(
            "too many candidate parent columns".into(),
        ));
    }
    let mut out: Vec<Vec<usize>> = Vec::new();
    for mask in 0..(1usize << j) {
        if (mask.count_ones() as usize) <= degree {
            out.push((0..j).filter(|&b| mask & (1 << b) != 0).collect());
        }
        if out.len() > MAX_PARENT_SUBSETS {
            return Err(Error::InvalidArgument(
                "too many candidate parent subsets; lower bn_degree".into(),
            ));
        }
    }
    out.sort_by_key(|s| s.len());
    Ok(out)
}

/// Chain Bayesian network: eps/2 on structure via the exponential mechanism
/// with mutual-information scores, eps/2 on noisy conditional tables. With
/// degree = 0 the structure step is skipped and all of eps goes to the
/// parameter step.
pub fn fit_chain_bayesnet(
    ds: &Dataset,
    eps: PrivacyBudget,
    bins: usize,
    degree: usize,
    semantics: NeighborSemantics,
    mi_sensitivity: Option<f64>,
    stream: &RngStream,
    ledger: &mut BudgetLedger,
) -> Result<SynthModel> {
    let n = ds.n();
    if n == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let schema = ds.schema().clone();
    let p = schema.len();
    let cards = column_cardinalities(&schema, bins);
    let codes: Vec<Vec<usize>> = ds
        .rows()
        .iter()
        .map(|row| {
            schema
                .columns
                .iter()
                .enumerate()
                .map(|(j, col)| discretize(&col.kind, row[j], bins))
                .collect()
        })
        .collect();

    let structured = degree > 0 && p > 1;
    let (eps_struct, eps_param) = if structured {
        (eps.epsilon / 2.0, eps.epsilon / 2.0)
    } else {
        (0.0, eps.epsilon)
    };

    let mut rng = stream.rng();
    let mut parents: Vec<Vec<usize>> = vec![vec![]];
    if structured {
        let sens = mi_sensitivity.unwrap_or_else(|| default_mi_sensitivity(n));
        let eps_each = eps_struct / (p - 1) as f64;
        for j in 1..p {
            let candidates = parent_subsets(j, degree)?;
            let scores: Vec<f64> = candidates
                .iter()
                .map(|s| mutual_information(&codes, j, s, &cards))
                .collect();
            let pick = exponential_mechanism(&mut rng, &scores, sens, eps_each)?;
            parents.push(candidates[pick].clone());
        }
        charge_sentinel(
            ledger,
            "structure",
            PrivacyBudget {
                epsilon: eps_struct,
                delta: eps.delta / 2.0,
            },
        )?;
    } else {
        parents.extend((1..p).map(|_| vec![]));
    }

    let eps_table = eps_param / p as f64;
    let delta_param = if structured { eps.delta / 2.0 } else { eps.delta };
    let mut nodes = Vec::with_capacity(p);
    for j in 0..p {
        let pars = &parents[j];
        let cfgs: usize = pars.iter().map(|&q| cards[q]).product();
        let kj = cards[j];
        if cfgs
            .checked_mul(kj)
            .filter(|&t| t <= MAX_JOINT_CELLS)
            .is_none()
        {
            return Err(Error::InvalidArgument(format!(
                "conditional table for column {j} would exceed {MAX_JOINT_CELLS} cells"
            )));
        }
        let mut counts = vec![0.0f64; cfgs * kj];
        for row in &codes {
            let mut cfg = 0usize;
            for &q in pars {
                cfg = cfg * cards[q] + row[q];
            }
            counts[cfg * kj + row[j]] += 1.0;
        }
        let noisy = laplace_mechanism(
            &mut rng,
            &counts,
            semantics.histogram_l1_sensitivity(),
            eps_table,
        )?;
        let mut table = Vec::with_capacity(cfgs);
        for c in 0..cfgs {
            let mut row = noisy[c * kj..(c + 1) * kj].to_vec();
            clamp_normalize(&mut row);
            table.push(row);
        }
        nodes.push(BnNode {
            parents: pars.clone(),
            table,
        });
    }
    charge_sentinel(
        ledger,
        "parameters",
        PrivacyBudget {
            epsilon: eps_param,
            delta: delta_param,
        },
    )?;

    Ok(SynthModel::ChainBayesNet {
        schema,
        bins,
        cards,
        nodes,
    })
}

/// Non-private Gaussian baseline: sample mean and covariance, optionally
/// sampled through the normal-inverse-Wishart posterior per copy.
pub fn fit_parametric_gaussian(ds: &Dataset, ppd: bool) -> Result<SynthModel> {
    let schema = ds.schema().clone();
    let p = schema.len();
    if schema
        .columns
        .iter()
        .any(|c| !matches!(c.kind, ColumnKind::Continuous { .. }))
    {
        return Err(Error::InvalidArgument(
            "parametric gaussian needs all-continuous columns".into(),
        ));
    }
    let n = ds.n();
    if n <= p + 2 {
        return Err(Error::InvalidArgument(format!(
            "parametric gaussian needs n > p + 2 = {}",
            p + 2
        )));
    }
    let nf = n as f64;
    let mut mean = vec![0.0f64; p];
    for row in ds.rows() {
        for j in 0..p {
            mean[j] += row[j];
        }
    }
    mean.iter_mut().for_each(|v| *v /= nf);
    let mut cov = vec![0.0f64; p * p];
    for row in ds.rows() {
        for i in 0..p {
            for j in 0..p {
                cov[i * p + j] += (row[i] - mean[i]) * (row[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= nf - 1.0);
    let cov = CovMatrix::new(p, cov)?;
    // CovMatrix::new already rejects singular matrices via its Cholesky check.
    Ok(SynthModel::Gaussian {
        schema,
        mean,
        cov,
        n_fit: n,
        ppd,
    })
}

/// One draw of (mu, Sigma) from the normal-inverse-Wishart posterior under
/// the noninformative prior: Sigma ~ IW(n - 1, S), mu | Sigma ~ N(ybar,
/// Sigma / n), with S the centered sum-of-squares matrix.
fn draw_niw_posterior(
    rng: &mut ChaCha12Rng,
    mean: &[f64],
    cov: &CovMatrix,
    n: usize,
) -> Result<(Vec<f64>, CovMatrix)> {
    let p = cov.dim();
    let nu = (n - 1) as f64;
    // S = (n - 1) * cov_hat; its Cholesky is sqrt(n - 1) times cov_hat's.
    let c_hat = cholesky(cov)?;
    let scale = nu.sqrt();
    let c: Vec<Vec<f64>> = c_hat
        .iter()
        .map(|r| r.iter().map(|v| v * scale).collect())
        .collect();

    // Bartlett factor A for Wishart(nu, I): lower triangular, diag
    // sqrt(chi2(nu - i)), subdiagonal standard normal. Then
    // Sigma = (C A^-T)(C A^-T)^T ~ IW(nu, C C^T).
    let mut a = vec![vec![0.0f64; p]; p];
    for i in 0..p {
        let chi = ChiSquared::new(nu - i as f64)
            .map_err(|e| Error::InvalidArgument(format!("chi-squared draw: {e}")))?;
        a[i][i] = chi.sample(rng).sqrt();
        for k in 0..i {
            a[i][k] = rng.sample(StandardNormal);
        }
    }
    // a_inv: forward substitution, column by column.
    let mut a_inv = vec![vec![0.0f64; p]; p];
    for j in 0..p {
        for i in j..p {
            let mut v = if i == j { 1.0 } else { 0.0 };
            for k in j..i {
                v -= a[i][k] * a_inv[k][j];
            }
            a_inv[i][j] = v / a[i][i];
        }
    }
    // X = C * A^-T, so X[i][k] = sum_t C[i][t] * a_inv[k][t].
    let mut x = vec![vec![0.0f64; p]; p];
    for i in 0..p {
        for k in 0..p {
            let mut v = 0.0;
            for t in 0..p {
                v += c[i][t] * a_inv[k][t];
            }
            x[i][k] = v;
        }
    }
    let mut sig = vec![0.0f64; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut v = 0.0;
            for k in 0..p {
                v += x[i][k] * x[j][k];
            }
            sig[i * p + j] = v;
            sig[j * p + i] = v;
        }
    }
    let sigma = CovMatrix::new(p, sig)?;

    // mu = ybar + chol(Sigma / n) z
    let l = cholesky(&sigma)?;
    let root_n = (n as f64).sqrt();
    let z: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
    let mut mu = mean.to_vec();
    for i in 0..p {
        for k in 0..=i {
            mu[i] += l[i][k] * z[k] / root_n;
        }
    }
    Ok((mu, sigma))
}

/// A bundle of m synthetic copies plus the budget actually charged.
#[derive(Debug)]
pub struct SynthBundle {
    pub datasets: Vec<Dataset>,
    pub per_copy: PrivacyBudget,
    pub request: SynthesisRequest,
}

/// Split the total budget over m copies, refit a fresh model per copy on its
/// own stream, and sample out_n rows from each.
pub fn generate_m_datasets(
    ds: &Dataset,
    req: &SynthesisRequest,
    stream: &RngStream,
    ledger: &mut BudgetLedger,
) -> Result<SynthBundle> {
    req.validate()?;
    let per = split_budget(req.total_budget, req.m)?;
    let out_n = req.out_n.unwrap_or_else(|| ds.n());
    let mut datasets = Vec::with_capacity(req.m);
    for i in 0..req.m {
        let copy = stream.substream(i as u64);
        let fit_stream = copy.substream(0);
        let mut sample_rng = copy.substream(1).rng();
        let model = match req.method {
            SynthMethod::PerturbedHistogram => fit_perturbed_histogram(
                ds,
                per,
                req.bins_per_continuous,
                req.semantics,
                &fit_stream,
                ledger,
            )?,
            SynthMethod::ChainBayesNet => fit_chain_bayesnet(
                ds,
                per,
                req.bins_per_continuous,
                req.bn_degree,
                req.semantics,
                req.mi_sensitivity,
                &fit_stream,
                ledger,
            )?,
            SynthMethod::ParametricGaussian => {
                let model = fit_parametric_gaussian(ds, false)?;
                charge_sentinel(ledger, "gaussian", per)?;
                model
            }
            SynthMethod::ParametricGaussianPpd => {
                let model = fit_parametric_gaussian(ds, true)?;
                charge_sentinel(ledger, "gaussian-ppd", per)?;
                model
            }
        };
        datasets.push(model.sample(&mut sample_rng, out_n)?);
    }
    Ok(SynthBundle {
        datasets,
        per_copy: per,
        request: req.clone(),
    })
}

#[derive(Debug, Serialize)]
struct BundleManifest<'a> {
    method: SynthMethod,
    m: usize,
    #[serde(with = "eps_fmt")]
    total_epsilon: f64,
    #[serde(with = "eps_fmt")]
    per_copy_epsilon: f64,
    out_n: usize,
    seed: u64,
    ledger: &'a BudgetLedger,
}

/// Write syn_1.csv .. syn_m.csv plus a manifest with the ledger audit.
pub fn write_bundle(
    dir: impl AsRef<Path>,
    bundle: &SynthBundle,
    seed: u64,
    ledger: &BudgetLedger,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, ds) in bundle.datasets.iter().enumerate() {
        crate::tabular::save_csv(ds, dir.join(format!("syn_{}.csv", i + 1)))?;
    }
    let manifest = BundleManifest {
        method: bundle.request.method,
        m: bundle.request.m,
        total_epsilon: bundle.request.total_budget.epsilon,
        per_copy_epsilon: bundle.per_copy.epsilon,
        out_n: bundle
            .request
            .out_n
            .unwrap_or_else(|| bundle.datasets[0].n()),
        seed,
        ledger,
    };
    let path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, body).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::Column;
    use approx::assert_abs_diff_eq;

    fn binary_schema(p: usize) -> Schema {
        Schema::new(
            (0..p)
                .map(|i| Column {
                    name: format!("y{}", i + 1),
                    kind: ColumnKind::Binary,
                })
                .collect(),
        )
        .unwrap()
    }

    fn inf() -> PrivacyBudget {
        PrivacyBudget::non_private()
    }

    fn ledger_inf() -> BudgetLedger {
        BudgetLedger::new(PrivacyBudget::non_private())
    }

    #[test]
    fn histogram_point_mass_no_noise() {
        let ds = Dataset::new(binary_schema(2), vec![vec![1.0, 0.0]; 1000]).unwrap();
        let mut ledger = ledger_inf();
        let model = fit_perturbed_histogram(
            &ds,
            inf(),
            20,
            NeighborSemantics::Replacement,
            &RngStream::new(1, 0),
            &mut ledger,
        )
        .unwrap();
        let SynthModel::Histogram { probs, cards, .. } = &model else {
            panic!("wrong variant")
        };
        assert_eq!(cards, &vec![2, 2]);
        // row (1, 0) has index 1*2 + 0 = 2
        assert_eq!(probs[2], 1.0);
        assert_eq!(probs.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn histogram_uniform_two_cells() {
        let mut rows = vec![vec![0.0]; 500];
        rows.extend(vec![vec![1.0]; 500]);
        let ds = Dataset::new(binary_schema(1), rows).unwrap();
        let mut ledger = ledger_inf();
        let model = fit_perturbed_histogram(
            &ds,
            inf(),
            20,
            NeighborSemantics::Replacement,
            &RngStream::new(1, 0),
            &mut ledger,
        )
        .unwrap();
        let SynthModel::Histogram { probs, .. } = &model else {
            panic!()
        };
        assert_eq!(probs, &vec![0.5, 0.5]);
    }

    #[test]
    fn histogram_noise_l1_scale() {
        // E|Laplace(b)| = b with b = 2 / 0.5 = 4 per cell; over many fits the
        // mean L1 distance between noisy and true probabilities approaches
        // k * b / n, shrunk somewhat by clamping and renormalization.
        let mut rng = RngStream::new(5, 0).rng();
        use rand::Rng as _;
        let n = 1000;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..3)
                    .map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let ds = Dataset::new(binary_schema(3), rows).unwrap();
        let mut truth = [0.0f64; 8];
        for row in ds.rows() {
            let idx = (row[0] as usize) * 4 + (row[1] as usize) * 2 + row[2] as usize;
            truth[idx] += 1.0 / n as f64;
        }
        let expect = 8.0 * 4.0 / n as f64;
        let mut acc = 0.0;
        let fits = 300;
        for s in 0..fits {
            let mut ledger = BudgetLedger::new(PrivacyBudget::pure(1000.0).unwrap());
            let model = fit_perturbed_histogram(
                &ds,
                PrivacyBudget::pure(0.5).unwrap(),
                20,
                NeighborSemantics::Replacement,
                &RngStream::new(6, s),
                &mut ledger,
            )
            .unwrap();
            let SynthModel::Histogram { probs, .. } = model else {
                panic!()
            };
            acc += probs
                .iter()
                .zip(truth.iter())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        }
        let got = acc / fits as f64;
        assert!(
            got > 0.3 * expect && got < 1.2 * expect,
            "mean L1 {got} vs pre-clamp expectation {expect}"
        );
    }

    #[test]
    fn histogram_cell_guard() {
        let schema = Schema::new(
            (0..2)
                .map(|i| Column {
                    name: format!("x{i}"),
                    kind: ColumnKind::continuous(0.0, 1.0),
                })
                .collect(),
        )
        .unwrap();
        let ds = Dataset::new(schema, vec![vec![0.5, 0.5]; 10]).unwrap();
        let mut ledger = ledger_inf();
        let err = fit_perturbed_histogram(
            &ds,
            inf(),
            1001,
            NeighborSemantics::Replacement,
            &RngStream::new(1, 0),
            &mut ledger,
        );
        assert!(err.is_err());
    }

    #[test]
    fn bayesnet_degree_zero_is_marginal_product() {
        let mut rng = RngStream::new(11, 0).rng();
        use rand::Rng as _;
        let n = 4000;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                vec![
                    if rng.gen::<f64>() < 0.7 { 1.0 } else { 0.0 },
                    if rng.gen::<f64>() < 0.3 { 1.0 } else { 0.0 },
                ]
            })
            .collect();
        let ds = Dataset::new(binary_schema(2), rows).unwrap();
        let mut ledger = ledger_inf();
        let model = fit_chain_bayesnet(
            &ds,
            inf(),
            20,
            0,
            NeighborSemantics::Replacement,
            None,
            &RngStream::new(12, 0),
            &mut ledger,
        )
        .unwrap();
        let mut sample_rng = RngStream::new(13, 0).rng();
        let syn = model.sample(&mut sample_rng, n).unwrap();
        let tol = 2.0 / (n as f64).sqrt();
        for j in 0..2 {
            let orig: f64 =
                ds.rows().iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let got: f64 =
                syn.rows().iter().map(|r| r[j]).sum::<f64>() / n as f64;
            assert!(
                (orig - got).abs() < 2.0 * tol,
                "marginal {j}: {orig} vs {got}"
            );
        }
        // ledger: single parameters entry under the sentinel, zero spend
        assert_eq!(ledger.entries.len(), 1);
        assert_eq!(ledger.entries[0].label, "parameters");
    }

    #[test]
    fn bayesnet_structure_finds_dependent_parent() {
        let mut rng = RngStream::new(21, 0).rng();
        use rand::Rng as _;
        let rows: Vec<Vec<f64>> = (0..500)
            .map(|_| {
                let a = if rng.gen::<bool>() { 1.0 } else { 0.0 };
                let c = if rng.gen::<bool>() { 1.0 } else { 0.0 };
                vec![a, a, c]
            })
            .collect();
        let ds = Dataset::new(binary_schema(3), rows).unwrap();
        let mut ledger = ledger_inf();
        let model = fit_chain_bayesnet(
            &ds,
            inf(),
            20,
            1,
            NeighborSemantics::Replacement,
            None,
            &RngStream::new(22, 0),
            &mut ledger,
        )
        .unwrap();
        let SynthModel::ChainBayesNet { nodes, .. } = &model else {
            panic!()
        };
        // y2 equals y1 always: MI argmax picks y1 (index 0) as its parent.
        assert_eq!(nodes[1].parents, vec![0]);
        // and the conditional table is deterministic
        assert_eq!(nodes[1].table[0][0], 1.0);
        assert_eq!(nodes[1].table[1][1], 1.0);
    }

    #[test]
    fn bayesnet_splits_budget_evenly() {
        let ds = Dataset::new(binary_schema(3), vec![vec![0.0, 1.0, 0.0]; 100]).unwrap();
        let mut ledger = BudgetLedger::new(PrivacyBudget::pure(1.0).unwrap());
        fit_chain_bayesnet(
            &ds,
            PrivacyBudget::pure(1.0).unwrap(),
            20,
            1,
            NeighborSemantics::Replacement,
            None,
            &RngStream::new(31, 0),
            &mut ledger,
        )
        .unwrap();
        assert_eq!(ledger.entries.len(), 2);
        assert_eq!(ledger.entries[0].label, "structure");
        assert_eq!(ledger.entries[0].spent.epsilon, 0.5);
        assert_eq!(ledger.entries[1].label, "parameters");
        assert_eq!(ledger.entries[1].spent.epsilon, 0.5);
        assert_abs_diff_eq!(ledger.spent().epsilon, 1.0, epsilon = 1e-15);
    }

    fn sim1_like(n: usize, seed: u64) -> Dataset {
        let cov = CovMatrix::new(
            3,
            vec![1.0, 0.8, 0.6, 0.8, 1.0, 0.25, 0.6, 0.25, 1.0],
        )
        .unwrap();
        let mut rng = RngStream::new(seed, 0).rng();
        let rows = sample_mvn(&mut rng, &[0.0; 3], &cov, n).unwrap();
        let schema = Schema::new(
            (0..3)
                .map(|i| Column {
                    name: format!("y{}", i + 1),
                    kind: ColumnKind::continuous(-6.0, 6.0),
                })
                .collect(),
        )
        .unwrap();
        Dataset::new_clamping(schema, rows).unwrap().0
    }

    #[test]
    fn gaussian_fit_recovers_covariance() {
        let ds = sim1_like(10_000, 41);
        let model = fit_parametric_gaussian(&ds, false).unwrap();
        let SynthModel::Gaussian { cov, mean, .. } = &model else {
            panic!()
        };
        assert!((cov.get(0, 1) - 0.8).abs() < 0.03, "cov12 {}", cov.get(0, 1));
        assert!(mean[0].abs() < 0.05);
    }

    #[test]
    fn gaussian_rejects_discrete_columns() {
        let ds = Dataset::new(binary_schema(2), vec![vec![0.0, 1.0]; 50]).unwrap();
        assert!(fit_parametric_gaussian(&ds, false).is_err());
    }

    #[test]
    fn gaussian_same_stream_identical_copies() {
        let ds = sim1_like(500, 42);
        let model = fit_parametric_gaussian(&ds, false).unwrap();
        let a = model.sample(&mut RngStream::new(7, 3).rng(), 200).unwrap();
        let b = model.sample(&mut RngStream::new(7, 3).rng(), 200).unwrap();
        assert_eq!(a.rows(), b.rows());
    }

    #[test]
    fn ppd_copies_have_distinct_parameter_draws() {
        let ds = sim1_like(500, 43);
        let model = fit_parametric_gaussian(&ds, true).unwrap();
        let a = model.sample(&mut RngStream::new(8, 1).rng(), 2000).unwrap();
        let b = model.sample(&mut RngStream::new(8, 2).rng(), 2000).unwrap();
        let mean = |d: &Dataset| d.rows().iter().map(|r| r[0]).sum::<f64>() / d.n() as f64;
        assert!((mean(&a) - mean(&b)).abs() > 1e-4);
    }

    #[test]
    fn ppd_posterior_means_unbiased() {
        // Averaged over many posterior draws, mu should track ybar and the
        // IW covariance mean nu * S^-1 scaling keeps Sigma near cov_hat.
        let ds = sim1_like(2000, 44);
        let model = fit_parametric_gaussian(&ds, true).unwrap();
        let SynthModel::Gaussian { mean, cov, n_fit, .. } = &model else {
            panic!()
        };
        let mut rng = RngStream::new(9, 0).rng();
        let draws = 2000;
        let mut mu_acc = 0.0;
        let mut sig_acc = 0.0;
        for _ in 0..draws {
            let (mu, sigma) = draw_niw_posterior(&mut rng, mean, cov, *n_fit).unwrap();
            mu_acc += mu[0];
            sig_acc += sigma.get(0, 1);
        }
        assert!((mu_acc / draws as f64 - mean[0]).abs() < 0.01);
        // E[IW(nu, S)] = S / (nu - p - 1) = cov_hat * (n-1)/(n-p-2)
        let expect = cov.get(0, 1) * 1999.0 / (2000.0 - 3.0 - 2.0);
        assert!(
            (sig_acc / draws as f64 - expect).abs() < 0.02,
            "posterior mean cov {} vs {expect}",
            sig_acc / draws as f64
        );
    }

    #[test]
    fn bundle_budget_exactness() {
        let ds = Dataset::new(binary_schema(2), vec![vec![0.0, 1.0]; 200]).unwrap();
        let req = SynthesisRequest::new(
            SynthMethod::PerturbedHistogram,
            PrivacyBudget::pure(2.5).unwrap(),
            5,
        );
        let mut ledger = BudgetLedger::new(PrivacyBudget::pure(2.5).unwrap());
        let bundle =
            generate_m_datasets(&ds, &req, &RngStream::new(50, 0), &mut ledger).unwrap();
        assert_eq!(bundle.datasets.len(), 5);
        assert_eq!(bundle.per_copy.epsilon, 0.5);
        assert!((ledger.spent().epsilon - 2.5).abs() < 1e-12);
        for d in &bundle.datasets {
            assert_eq!(d.n(), 200);
        }
    }

    #[test]
    fn bundle_over_budget_refused() {
        let ds = Dataset::new(binary_schema(2), vec![vec![0.0, 1.0]; 200]).unwrap();
        let req = SynthesisRequest::new(
            SynthMethod::PerturbedHistogram,
            PrivacyBudget::pure(2.5).unwrap(),
            5,
        );
        let mut ledger = BudgetLedger::new(PrivacyBudget::pure(1.0).unwrap());
        let err = generate_m_datasets(&ds, &req, &RngStream::new(50, 0), &mut ledger);
        assert!(matches!(err, Err(Error::OverBudget { .. })));
    }

    #[test]
    fn bundle_single_gaussian_copy() {
        let ds = sim1_like(300, 45);
        let mut req = SynthesisRequest::new(SynthMethod::ParametricGaussian, inf(), 1);
        req.out_n = Some(120);
        let mut ledger = ledger_inf();
        let bundle =
            generate_m_datasets(&ds, &req, &RngStream::new(51, 0), &mut ledger).unwrap();
        assert_eq!(bundle.datasets.len(), 1);
        assert_eq!(bundle.datasets[0].n(), 120);
        assert_eq!(ledger.spent().epsilon, 0.0);
    }

    #[test]
    fn bundle_reproducible() {
        let ds = Dataset::new(binary_schema(2), vec![vec![1.0, 0.0]; 300]).unwrap();
        let req = SynthesisRequest::new(
            SynthMethod::PerturbedHistogram,
            PrivacyBudget::pure(1.0).unwrap(),
            3,
        );
        let run = || {
            let mut ledger = BudgetLedger::new(PrivacyBudget::pure(1.0).unwrap());
            generate_m_datasets(&ds, &req, &RngStream::new(77, 0), &mut ledger).unwrap()
        };
        let a = run();
        let b = run();
        for (x, y) in a.datasets.iter().zip(b.datasets.iter()) {
            assert_eq!(x.rows(), y.rows());
        }
    }

    #[test]
    fn gaussian_request_with_finite_epsilon_rejected() {
        let req = SynthesisRequest::new(
            SynthMethod::ParametricGaussian,
            PrivacyBudget::pure(1.0).unwrap(),
            2,
        );
        assert!(req.validate().is_err());
    }

    #[test]
    fn monotone_noise_in_epsilon() {
        let mut rows = vec![vec![0.0, 0.0]; 400];
        rows.extend(vec![vec![1.0, 1.0]; 600]);
        let ds = Dataset::new(binary_schema(2), rows).unwrap();
        let truth = [0.4, 0.0, 0.0, 0.6];
        let grid = [0.05, 0.5, 5.0, 50.0];
        let mut dist = Vec::new();
        for (gi, &e) in grid.iter().enumerate() {
            let mut acc = 0.0;
            for s in 0..200u64 {
                let mut ledger = BudgetLedger::new(PrivacyBudget::pure(1e6).unwrap());
                let model = fit_perturbed_histogram(
                    &ds,
                    PrivacyBudget::pure(e).unwrap(),
                    20,
                    NeighborSemantics::Replacement,
                    &RngStream::new(90 + gi as u64, s),
                    &mut ledger,
                )
                .unwrap();
                let SynthModel::Histogram { probs, .. } = model else {
                    panic!()
                };
                acc += probs
                    .iter()
                    .zip(truth.iter())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
            }
            dist.push(acc / 200.0);
        }
        let inversions = dist.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(inversions <= 1, "L1 distortions not monotone: {dist:?}");
    }

    #[test]
    fn parent_subsets_enumeration() {
        let subs = parent_subsets(3, 2).unwrap();
        // {}, {0}, {1}, {2}, {0,1}, {0,2}, {1,2}
        assert_eq!(subs.len(), 7);
        assert!(subs.contains(&vec![]));
        assert!(subs.contains(&vec![0, 2]));
        assert_eq!(parent_subsets(0, 2).unwrap(), vec![Vec::<usize>::new()]);
        assert_eq!(parent_subsets(4, 0).unwrap().len(), 1);
    }

    #[test]
    fn mutual_information_basics() {
        // independent fair coins: MI ~ 0; identical columns: MI = 1 bit.
        let ind: Vec<Vec<usize>> = vec![
            vec![0, 0],
            vec![0, 1],
            vec![1, 0],
            vec![1, 1],
        ];
        let mi = mutual_information(&ind, 1, &[0], &[2, 2]);
        assert!(mi.abs() < 1e-12);
        let dep: Vec<Vec<usize>> = vec![vec![0, 0], vec![1, 1], vec![0, 0], vec![1, 1]];
        let mi = mutual_information(&dep, 1, &[0], &[2, 2]);
        assert_abs_diff_eq!(mi, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn write_bundle_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(binary_schema(2), vec![vec![1.0, 0.0]; 100]).unwrap();
        let req = SynthesisRequest::new(
            SynthMethod::PerturbedHistogram,
            PrivacyBudget::pure(1.0).unwrap(),
            2,
        );
        let mut ledger = BudgetLedger::new(PrivacyBudget::pure(1.0).unwrap());
        let bundle =
            generate_m_datasets(&ds, &req, &RngStream::new(3, 0), &mut ledger).unwrap();
        write_bundle(dir.path(), &bundle, 3, &ledger).unwrap();
        assert!(dir.path().join("syn_1.csv").exists());
        assert!(dir.path().join("syn_2.csv").exists());
        let manifest: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("manifest.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(manifest["method"], "histogram");
        assert_eq!(manifest["m"], 2);
        assert_eq!(manifest["per_copy_epsilon"], 0.5);
        assert_eq!(manifest["seed"], 3);
        assert!(manifest["ledger"]["entries"].is_array());
    }
}
