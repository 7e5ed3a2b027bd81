//! Monte Carlo experiment engine: the three simulation data generators, the
//! replication loop over (method, epsilon) arms, the evaluation metrics
//! (bias, relative bias, ratio bias, Monte Carlo variance, coverage) and the
//! report writer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::combine::{combine, CombinedInference, VarianceRule};
use crate::dp::{BudgetLedger, PrivacyBudget};
use crate::error::{Error, Result};
use crate::estimators::{Estimand, EstimateResult};
use crate::randkit::{
    latent_corr_for_binary, normal_cdf, quantile_normal, sample_mvn, CovMatrix, RngStream,
};
use crate::synth::{generate_m_datasets, SynthMethod, SynthesisRequest};
use crate::tabular::{Column, ColumnKind, Dataset, Schema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Simulation {
    #[serde(rename = "sim1")]
    Sim1,
    #[serde(rename = "sim2")]
    Sim2,
    #[serde(rename = "sim3")]
    Sim3,
}

impl FromStr for Simulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim1" => Ok(Simulation::Sim1),
            "sim2" => Ok(Simulation::Sim2),
            "sim3" => Ok(Simulation::Sim3),
            other => Err(Error::Parse(format!("unknown simulation `{other}`"))),
        }
    }
}

impl fmt::Display for Simulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Simulation::Sim1 => "sim1",
            Simulation::Sim2 => "sim2",
            Simulation::Sim3 => "sim3",
        })
    }
}

/// What "truth" the bias and coverage metrics are measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TruthConvention {
    /// Analytic model values (default).
    #[serde(rename = "analytic")]
    Analytic,
    /// Monte Carlo mean of the original-data estimates across replications.
    #[serde(rename = "original-mc")]
    OriginalMc,
}

impl Default for TruthConvention {
    fn default() -> Self {
        TruthConvention::Analytic
    }
}

pub const DEFAULT_EPSILON_GRID: [f64; 9] = [
    0.005,
    0.05,
    0.5,
    2.5,
    5.0,
    8.0,
    10.0,
    50.0,
    f64::INFINITY,
];

fn default_n() -> usize {
    2000
}
fn default_b() -> usize {
    500
}
fn default_m() -> usize {
    5
}
fn default_level() -> f64 {
    0.95
}
fn default_grid() -> Vec<f64> {
    DEFAULT_EPSILON_GRID.to_vec()
}
fn default_bins() -> usize {
    20
}
fn default_degree() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub simulation: Simulation,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(rename = "B", default = "default_b")]
    pub b_reps: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_grid")]
    pub epsilon_grid: Vec<f64>,
    pub methods: Vec<SynthMethod>,
    pub estimands: Vec<String>,
    pub rules: Vec<VarianceRule>,
    #[serde(default = "default_level")]
    pub level: f64,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_bins")]
    pub bins_per_continuous: usize,
    #[serde(default = "default_degree")]
    pub bn_degree: usize,
    #[serde(default)]
    pub truth_convention: TruthConvention,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&body)
    }

    pub fn validate(&self) -> Result<()> {
        if self.b_reps < 2 {
            return Err(Error::Config("B must be >= 2".into()));
        }
        if self.n < 10 {
            return Err(Error::Config("n must be >= 10".into()));
        }
        if self.m < 1 {
            return Err(Error::Config("m must be >= 1".into()));
        }
        if self.epsilon_grid.is_empty() {
            return Err(Error::Config("epsilon_grid must be nonempty".into()));
        }
        for &e in &self.epsilon_grid {
            if !(e > 0.0) {
                return Err(Error::Config(format!(
                    "epsilon_grid values must be > 0 or inf, got {e}"
                )));
            }
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must be nonempty".into()));
        }
        if self.estimands.is_empty() {
            return Err(Error::Config("estimands must be nonempty".into()));
        }
        if self.rules.is_empty() {
            return Err(Error::Config("rules must be nonempty".into()));
        }
        if !(0.0 < self.level && self.level < 1.0) {
            return Err(Error::Config("level must be in (0, 1)".into()));
        }
        for e in &self.estimands {
            e.parse::<Estimand>()?;
        }
        Ok(())
    }
}

fn continuous_schema(specs: &[(&str, f64, f64)]) -> Schema {
    Schema::new(
        specs
            .iter()
            .map(|(name, lo, hi)| Column {
                name: name.to_string(),
                kind: ColumnKind::continuous(*lo, *hi),
            })
            .collect(),
    )
    .unwrap()
}

/// Map from canonical estimand string to its analytic true value.
pub type Truths = BTreeMap<String, f64>;

pub fn analytic_truths(sim: Simulation) -> Truths {
    let mut t = Truths::new();
    match sim {
        Simulation::Sim1 => {
            t.insert("mean:y1".into(), 0.0);
            t.insert("mean:y2".into(), 0.0);
            t.insert("mean:y3".into(), 0.0);
            // normal equations for y1 ~ y2 + y3 with the stated covariances
            let det = 1.0 - 0.25 * 0.25;
            t.insert("ols:y1~y2+y3#0".into(), 0.0);
            t.insert("ols:y1~y2+y3#y2".into(), (0.8 - 0.6 * 0.25) / det);
            t.insert("ols:y1~y2+y3#y3".into(), (0.6 - 0.8 * 0.25) / det);
        }
        Simulation::Sim2 => {
            t.insert("mean:y1".into(), 4.0);
            t.insert("mean:y2".into(), 0.0);
            t.insert("mean:y3".into(), 1.0);
            t.insert("ols:y1~y2+y3#0".into(), 1.0);
            t.insert("ols:y1~y2+y3#y2".into(), 1.0);
            t.insert("ols:y1~y2+y3#y3".into(), 3.0);
        }
        Simulation::Sim3 => {
            t.insert("prop:y1=1".into(), 0.6);
            t.insert("prop:y2=1".into(), 0.6);
            t.insert("prop:y3=1".into(), 0.6);
        }
    }
    t
}

const SIM1_COV: [f64; 9] = [1.0, 0.8, 0.6, 0.8, 1.0, 0.25, 0.6, 0.25, 1.0];

/// Trivariate normal, means 0, unit variances, Cov(y1,y2)=0.8,
/// Cov(y1,y3)=0.6, Cov(y2,y3)=0.25.
pub fn gen_sim1(stream: &RngStream, n: usize) -> Result<(Dataset, Truths)> {
    if n < 10 {
        return Err(Error::InvalidArgument("gen_sim1 needs n >= 10".into()));
    }
    let cov = CovMatrix::new(3, SIM1_COV.to_vec())?;
    let mut rng = stream.rng();
    let rows = sample_mvn(&mut rng, &[0.0; 3], &cov, n)?;
    let schema = continuous_schema(&[("y1", -6.0, 6.0), ("y2", -6.0, 6.0), ("y3", -6.0, 6.0)]);
    let (ds, _) = Dataset::new_clamping(schema, rows)?;
    Ok((ds, analytic_truths(Simulation::Sim1)))
}

/// Y2 standard normal; Y3 = Exp(1) via the inverse CDF applied to a latent
/// normal with Cov(Y2, U3) = 0.25; Y1 = 1 + Y2 + 3 Y3 + gamma.
pub fn gen_sim2(stream: &RngStream, n: usize) -> Result<(Dataset, Truths)> {
    gen_sim2_with_gamma_sd(stream, n, 1.0)
}

pub fn gen_sim2_with_gamma_sd(
    stream: &RngStream,
    n: usize,
    gamma_sd: f64,
) -> Result<(Dataset, Truths)> {
    if n < 10 {
        return Err(Error::InvalidArgument("gen_sim2 needs n >= 10".into()));
    }
    let latent = CovMatrix::new(2, vec![1.0, 0.25, 0.25, 1.0])?;
    let mut rng = stream.rng();
    let pairs = sample_mvn(&mut rng, &[0.0; 2], &latent, n)?;
    use rand_distr::{Distribution, StandardNormal};
    let rows: Vec<Vec<f64>> = pairs
        .into_iter()
        .map(|pair| {
            let y2 = pair[0];
            // inverse exponential CDF on the uniformized latent normal
            let y3 = -(1.0 - normal_cdf(pair[1])).max(f64::MIN_POSITIVE).ln();
            let gamma: f64 = StandardNormal.sample(&mut rng);
            let y1 = 1.0 + y2 + 3.0 * y3 + gamma_sd * gamma;
            vec![y1, y2, y3]
        })
        .collect();
    let schema = continuous_schema(&[("y1", -10.0, 60.0), ("y2", -6.0, 6.0), ("y3", 0.0, 16.0)]);
    let (ds, _) = Dataset::new_clamping(schema, rows)?;
    Ok((ds, analytic_truths(Simulation::Sim2)))
}

/// Three Bernoulli(0.6) columns with binary correlations (0.6, 0.6, 0.2) via
/// a thresholded latent Gaussian.
pub fn gen_sim3(stream: &RngStream, n: usize) -> Result<(Dataset, Truths)> {
    let ds = gen_sim3_with(stream, n, 0.6, [0.6, 0.6, 0.2])?;
    Ok((ds, analytic_truths(Simulation::Sim3)))
}

/// Sim3 generator with configurable marginal probability and binary
/// correlations (rho12, rho13, rho23).
pub fn gen_sim3_with(stream: &RngStream, n: usize, p: f64, rhos: [f64; 3]) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::InvalidArgument("gen_sim3 needs n >= 10".into()));
    }
    let r12 = latent_corr_for_binary(p, p, rhos[0])?;
    let r13 = latent_corr_for_binary(p, p, rhos[1])?;
    let r23 = latent_corr_for_binary(p, p, rhos[2])?;
    let latent = nearest_pd_correlation(&[r12, r13, r23])?;
    let mut rng = stream.rng();
    let z = sample_mvn(&mut rng, &[0.0; 3], &latent, n)?;
    let threshold = quantile_normal(1.0 - p)?;
    let rows: Vec<Vec<f64>> = z
        .into_iter()
        .map(|r| r.iter().map(|&v| if v > threshold { 1.0 } else { 0.0 }).collect())
        .collect();
    let schema = Schema::new(
        (1..=3)
            .map(|i| Column {
                name: format!("y{i}"),
                kind: ColumnKind::Binary,
            })
            .collect(),
    )?;
    Dataset::new(schema, rows)
}

/// Build the 3x3 latent correlation matrix, projecting to the nearest
/// positive definite matrix by eigenvalue clipping if needed.
fn nearest_pd_correlation(offdiag: &[f64; 3]) -> Result<CovMatrix> {
    let data = vec![
        1.0, offdiag[0], offdiag[1], offdiag[0], 1.0, offdiag[2], offdiag[1], offdiag[2], 1.0,
    ];
    if let Ok(c) = CovMatrix::new(3, data.clone()) {
        return Ok(c);
    }
    let m = nalgebra::DMatrix::from_row_slice(3, 3, &data);
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < 1e-8 {
            *v = 1e-8;
        }
    }
    let rebuilt =
        &eig.eigenvectors * nalgebra::DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    // restore unit diagonal
    let mut out = vec![0.0f64; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = rebuilt[(i, j)] / (rebuilt[(i, i)] * rebuilt[(j, j)]).sqrt();
        }
    }
    for i in 0..3 {
        for j in 0..i {
            let avg = 0.5 * (out[i * 3 + j] + out[j * 3 + i]);
            out[i * 3 + j] = avg;
            out[j * 3 + i] = avg;
        }
    }
    CovMatrix::new(3, out)
}

pub fn generate(sim: Simulation, stream: &RngStream, n: usize) -> Result<(Dataset, Truths)> {
    match sim {
        Simulation::Sim1 => gen_sim1(stream, n),
        Simulation::Sim2 => gen_sim2(stream, n),
        Simulation::Sim3 => gen_sim3(stream, n),
    }
}

/// Mean(theta_hat - theta), or 100 * mean((theta_hat - theta) / theta).
pub fn metric_bias(estimates: &[f64], theta: f64, relative: bool) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::InvalidArgument("metric_bias needs B >= 1".into()));
    }
    if relative && theta == 0.0 {
        return Err(Error::InvalidArgument(
            "relative bias undefined for theta = 0".into(),
        ));
    }
    let mean_dev =
        estimates.iter().map(|&e| e - theta).sum::<f64>() / estimates.len() as f64;
    Ok(if relative {
        100.0 * mean_dev / theta
    } else {
        mean_dev
    })
}

/// Monte Carlo variance of the point estimates: (1/(B-1)) sum (e - mean)^2.
pub fn monte_carlo_variance(point_estimates: &[f64]) -> Result<f64> {
    if point_estimates.len() < 2 {
        return Err(Error::InvalidArgument(
            "monte_carlo_variance needs B >= 2".into(),
        ));
    }
    let b = point_estimates.len() as f64;
    let mean = point_estimates.iter().sum::<f64>() / b;
    Ok(point_estimates
        .iter()
        .map(|e| (e - mean) * (e - mean))
        .sum::<f64>()
        / (b - 1.0))
}

/// Ratio bias in percent: 100 * mean(variance estimates) / V_MC.
pub fn metric_rab(var_estimates: &[f64], point_estimates: &[f64]) -> Result<f64> {
    if var_estimates.len() != point_estimates.len() {
        return Err(Error::InvalidArgument(
            "metric_rab needs matching lengths".into(),
        ));
    }
    let v_mc = monte_carlo_variance(point_estimates)?;
    if v_mc == 0.0 {
        return Err(Error::InvalidArgument(
            "metric_rab undefined when V_MC = 0".into(),
        ));
    }
    let mean_v = var_estimates.iter().sum::<f64>() / var_estimates.len() as f64;
    Ok(100.0 * mean_v / v_mc)
}

/// Percentage of closed intervals containing theta.
pub fn metric_coverage(cis: &[[f64; 2]], theta: f64) -> Result<f64> {
    if cis.is_empty() {
        return Err(Error::InvalidArgument("metric_coverage needs B >= 1".into()));
    }
    let hits = cis
        .iter()
        .filter(|ci| ci[0] <= theta && theta <= ci[1])
        .count();
    Ok(100.0 * hits as f64 / cis.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub enum CellOutcome {
    Ok(Vec<CombinedInference>),
    Failed(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub method: SynthMethod,
    #[serde(with = "crate::dp::eps_fmt")]
    pub epsilon: f64,
    pub estimand: String,
    pub outcome: CellOutcome,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicationResult {
    pub b: usize,
    /// Original-data estimate per estimand.
    pub observed: BTreeMap<String, EstimateResult>,
    pub cells: Vec<CellResult>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RuleMetrics {
    pub rule: VarianceRule,
    pub mean_variance: f64,
    pub rab_pct: Option<f64>,
    pub coverage_pct: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsCell {
    pub method: SynthMethod,
    #[serde(with = "crate::dp::eps_fmt")]
    pub epsilon: f64,
    pub estimand: String,
    pub theta: f64,
    pub n_reps: usize,
    pub n_failed: usize,
    pub bias: f64,
    pub relative_bias_pct: Option<f64>,
    pub v_mc: f64,
    pub mean_u_bar: f64,
    pub mean_b_m_over_m: f64,
    pub rules: Vec<RuleMetrics>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsTable {
    pub simulation: Simulation,
    pub n: usize,
    #[serde(rename = "B")]
    pub b_reps: usize,
    pub m: usize,
    pub level: f64,
    pub cells: Vec<MetricsCell>,
}

#[derive(Debug)]
pub struct ExperimentOutput {
    pub table: MetricsTable,
    pub replications: Vec<ReplicationResult>,
    /// Ledger snapshots from the first replication, one per (method, eps) arm.
    pub arm_ledgers: Vec<(SynthMethod, f64, BudgetLedger)>,
}

fn arm_list(cfg: &ExperimentConfig) -> Vec<(SynthMethod, f64)> {
    let mut arms = Vec::new();
    for &method in &cfg.methods {
        for &eps in &cfg.epsilon_grid {
            // non-private baselines only run on the sentinel arm
            if !method.is_private() && eps.is_finite() {
                continue;
            }
            arms.push((method, eps));
        }
    }
    arms
}

fn budget_for(eps: f64) -> Result<PrivacyBudget> {
    if eps.is_infinite() {
        Ok(PrivacyBudget::non_private())
    } else {
        PrivacyBudget::pure(eps)
    }
}

fn run_replication(
    cfg: &ExperimentConfig,
    estimands: &[Estimand],
    arms: &[(SynthMethod, f64)],
    b: usize,
) -> Result<(ReplicationResult, Vec<(SynthMethod, f64, BudgetLedger)>)> {
    let rep = RngStream::new(cfg.seed, 1).substream(b as u64);
    let (ds, _) = generate(cfg.simulation, &rep.substream(0), cfg.n)?;

    let mut observed = BTreeMap::new();
    for (s, est) in cfg.estimands.iter().zip(estimands.iter()) {
        observed.insert(s.clone(), est.evaluate(&ds)?);
    }

    let mut cells = Vec::new();
    let mut ledgers = Vec::new();
    for (a, &(method, eps)) in arms.iter().enumerate() {
        let budget = budget_for(eps)?;
        let mut ledger = BudgetLedger::new(budget);
        let mut req = SynthesisRequest::new(method, budget, cfg.m);
        req.bins_per_continuous = cfg.bins_per_continuous;
        req.bn_degree = cfg.bn_degree;
        let bundle =
            generate_m_datasets(&ds, &req, &rep.substream(1 + a as u64), &mut ledger);
        match bundle {
            Err(e) => {
                for s in &cfg.estimands {
                    cells.push(CellResult {
                        method,
                        epsilon: eps,
                        estimand: s.clone(),
                        outcome: CellOutcome::Failed(e.to_string()),
                    });
                }
            }
            Ok(bundle) => {
                for (s, est) in cfg.estimands.iter().zip(estimands.iter()) {
                    let mut qs = Vec::with_capacity(cfg.m);
                    let mut us = Vec::with_capacity(cfg.m);
                    let mut failure = None;
                    for copy in &bundle.datasets {
                        match est.evaluate(copy) {
                            Ok(r) => {
                                qs.push(r.q);
                                us.push(r.u);
                            }
                            Err(e) => {
                                failure = Some(e.to_string());
                                break;
                            }
                        }
                    }
                    let outcome = if let Some(msg) = failure {
                        CellOutcome::Failed(msg)
                    } else {
                        let mut per_rule = Vec::with_capacity(cfg.rules.len());
                        let mut err = None;
                        for &rule in &cfg.rules {
                            match combine(&qs, &us, rule, cfg.level) {
                                Ok(mut c) => {
                                    c.estimand = Some(s.clone());
                                    per_rule.push(c);
                                }
                                Err(e) => {
                                    err = Some(e.to_string());
                                    break;
                                }
                            }
                        }
                        match err {
                            Some(msg) => CellOutcome::Failed(msg),
                            None => CellOutcome::Ok(per_rule),
                        }
                    };
                    cells.push(CellResult {
                        method,
                        epsilon: eps,
                        estimand: s.clone(),
                        outcome,
                    });
                }
                if b == 0 {
                    ledgers.push((method, eps, ledger));
                }
            }
        }
    }
    Ok((ReplicationResult { b, observed, cells }, ledgers))
}

/// Run the full replication loop and aggregate the metrics. Deterministic
/// given the config; replications run in parallel on the global thread pool.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let estimands: Vec<Estimand> = cfg
        .estimands
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_>>()?;
    let truths = analytic_truths(cfg.simulation);
    if cfg.truth_convention == TruthConvention::Analytic {
        for s in &cfg.estimands {
            if !truths.contains_key(s) {
                return Err(Error::Config(format!(
                    "no analytic truth for estimand `{s}` in {}; use truth_convention = \"original-mc\"",
                    cfg.simulation
                )));
            }
        }
    }
    let arms = arm_list(cfg);
    if arms.is_empty() {
        return Err(Error::Config(
            "no runnable (method, epsilon) arms; non-private methods need inf in the grid".into(),
        ));
    }

    let results: Vec<(ReplicationResult, Vec<(SynthMethod, f64, BudgetLedger)>)> = (0..cfg
        .b_reps)
        .into_par_iter()
        .map(|b| run_replication(cfg, &estimands, &arms, b))
        .collect::<Result<_>>()?;

    let mut replications = Vec::with_capacity(results.len());
    let mut arm_ledgers = Vec::new();
    for (rep, ledgers) in results {
        if rep.b == 0 {
            arm_ledgers = ledgers;
        }
        replications.push(rep);
    }

    // failure-rate gate per (method, eps)
    for &(method, eps) in &arms {
        let mut failed = 0usize;
        let mut total = 0usize;
        for rep in &replications {
            for cell in &rep.cells {
                if cell.method == method && cell.epsilon == eps {
                    total += 1;
                    if matches!(cell.outcome, CellOutcome::Failed(_)) {
                        failed += 1;
                    }
                }
            }
        }
        if total > 0 && failed as f64 > 0.10 * total as f64 {
            return Err(Error::InvalidArgument(format!(
                "arm ({method}, eps={eps}) failed in {failed}/{total} cells"
            )));
        }
    }

    let mut cells = Vec::new();
    for &(method, eps) in &arms {
        for s in &cfg.estimands {
            let mut per_rep: Vec<&Vec<CombinedInference>> = Vec::new();
            let mut n_failed = 0usize;
            for rep in &replications {
                for cell in &rep.cells {
                    if cell.method == method && cell.epsilon == eps && &cell.estimand == s {
                        match &cell.outcome {
                            CellOutcome::Ok(v) => per_rep.push(v),
                            CellOutcome::Failed(_) => n_failed += 1,
                        }
                    }
                }
            }
            if per_rep.len() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "arm ({method}, eps={eps}, {s}) has fewer than 2 successful replications"
                )));
            }
            let theta = match cfg.truth_convention {
                TruthConvention::Analytic => truths[s],
                TruthConvention::OriginalMc => {
                    let obs: Vec<f64> =
                        replications.iter().map(|r| r.observed[s].q).collect();
                    obs.iter().sum::<f64>() / obs.len() as f64
                }
            };
            let q_bars: Vec<f64> = per_rep.iter().map(|v| v[0].q_bar).collect();
            let u_bars: Vec<f64> = per_rep.iter().map(|v| v[0].u_bar).collect();
            let b_over_m: Vec<f64> =
                per_rep.iter().map(|v| v[0].b_m / v[0].m as f64).collect();
            let v_mc = monte_carlo_variance(&q_bars)?;
            let bias = metric_bias(&q_bars, theta, false)?;
            let relative_bias_pct = if theta != 0.0 {
                Some(metric_bias(&q_bars, theta, true)?)
            } else {
                None
            };
            let mut rules = Vec::with_capacity(cfg.rules.len());
            for (ri, &rule) in cfg.rules.iter().enumerate() {
                let vars: Vec<f64> = per_rep.iter().map(|v| v[ri].variance).collect();
                let cis: Vec<[f64; 2]> = per_rep.iter().map(|v| v[ri].ci).collect();
                let mean_variance = vars.iter().sum::<f64>() / vars.len() as f64;
                let rab_pct = if v_mc > 0.0 {
                    Some(100.0 * mean_variance / v_mc)
                } else {
                    None
                };
                rules.push(RuleMetrics {
                    rule,
                    mean_variance,
                    rab_pct,
                    coverage_pct: metric_coverage(&cis, theta)?,
                });
            }
            cells.push(MetricsCell {
                method,
                epsilon: eps,
                estimand: s.clone(),
                theta,
                n_reps: per_rep.len(),
                n_failed,
                bias,
                relative_bias_pct,
                v_mc,
                mean_u_bar: u_bars.iter().sum::<f64>() / u_bars.len() as f64,
                mean_b_m_over_m: b_over_m.iter().sum::<f64>() / b_over_m.len() as f64,
                rules,
            });
        }
    }

    Ok(ExperimentOutput {
        table: MetricsTable {
            simulation: cfg.simulation,
            n: cfg.n,
            b_reps: cfg.b_reps,
            m: cfg.m,
            level: cfg.level,
            cells,
        },
        replications,
        arm_ledgers,
    })
}

pub fn format_eps(eps: f64) -> String {
    if eps.is_infinite() {
        "inf".to_string()
    } else {
        format!("{eps}")
    }
}

fn format_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn slug(estimand: &str) -> String {
    estimand
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    config: ManifestConfig<'a>,
    arms: Vec<ManifestArm<'a>>,
    cells_failed_total: usize,
}

#[derive(Debug, Serialize)]
struct ManifestConfig<'a> {
    simulation: Simulation,
    n: usize,
    #[serde(rename = "B")]
    b_reps: usize,
    m: usize,
    epsilon_grid: Vec<String>,
    methods: &'a [SynthMethod],
    estimands: &'a [String],
    rules: &'a [VarianceRule],
    level: f64,
    seed: u64,
    bins_per_continuous: usize,
    bn_degree: usize,
    truth_convention: TruthConvention,
}

#[derive(Debug, Serialize)]
struct ManifestArm<'a> {
    method: SynthMethod,
    epsilon: String,
    ledger: &'a BudgetLedger,
}

/// Emit the report files: per-estimand RaB and coverage tables with rows =
/// (method, rule) and columns = the epsilon grid, per-estimand bias and V_MC
/// tables with rows = method, a long-format decomposition CSV, and a run
/// manifest JSON. Output is deterministic; wall time is deliberately kept
/// out of the manifest and reported on stderr by the CLI instead.
pub fn write_report(
    out: &ExperimentOutput,
    cfg: &ExperimentConfig,
    out_dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let table = &out.table;
    let arms = arm_list(cfg);
    let grid: Vec<f64> = {
        let mut seen = Vec::new();
        for &(_, e) in &arms {
            if !seen.contains(&e) {
                seen.push(e);
            }
        }
        seen
    };
    let cell = |method: SynthMethod, eps: f64, estimand: &str| -> Option<&MetricsCell> {
        table
            .cells
            .iter()
            .find(|c| c.method == method && c.epsilon == eps && c.estimand == estimand)
    };

    let mut files: Vec<(String, String)> = Vec::new();

    for s in &cfg.estimands {
        let sl = slug(s);

        let header = {
            let mut h = vec!["method".to_string(), "rule".to_string()];
            h.extend(grid.iter().map(|&e| format!("eps_{}", format_eps(e))));
            h.join(",")
        };
        let mut rab_rows = vec![header.clone()];
        let mut cov_rows = vec![header];
        for &method in &cfg.methods {
            for (ri, &rule) in cfg.rules.iter().enumerate() {
                let mut rab = vec![method.to_string(), rule.to_string()];
                let mut cov = vec![method.to_string(), rule.to_string()];
                for &e in &grid {
                    match cell(method, e, s) {
                        Some(c) => {
                            rab.push(format_opt(c.rules[ri].rab_pct));
                            cov.push(format!("{}", c.rules[ri].coverage_pct));
                        }
                        None => {
                            rab.push(String::new());
                            cov.push(String::new());
                        }
                    }
                }
                rab_rows.push(rab.join(","));
                cov_rows.push(cov.join(","));
            }
        }
        files.push((format!("rab_{sl}.csv"), rab_rows.join("\n") + "\n"));
        files.push((format!("coverage_{sl}.csv"), cov_rows.join("\n") + "\n"));

        let header = {
            let mut h = vec!["method".to_string()];
            h.extend(grid.iter().map(|&e| format!("eps_{}", format_eps(e))));
            h.join(",")
        };
        let mut bias_rows = vec![header.clone()];
        let mut vmc_rows = vec![header];
        for &method in &cfg.methods {
            let mut bias = vec![method.to_string()];
            let mut vmc = vec![method.to_string()];
            for &e in &grid {
                match cell(method, e, s) {
                    Some(c) => {
                        bias.push(format!("{}", c.bias));
                        vmc.push(format!("{}", c.v_mc));
                    }
                    None => {
                        bias.push(String::new());
                        vmc.push(String::new());
                    }
                }
            }
            bias_rows.push(bias.join(","));
            vmc_rows.push(vmc.join(","));
        }
        files.push((format!("bias_{sl}.csv"), bias_rows.join("\n") + "\n"));
        files.push((format!("vmc_{sl}.csv"), vmc_rows.join("\n") + "\n"));
    }

    // plot-ready long format for the T_p decomposition
    let mut decomp = vec!["estimand,method,epsilon,u_bar,b_m_over_m,v_mc".to_string()];
    for c in &table.cells {
        decomp.push(format!(
            "{},{},{},{},{},{}",
            c.estimand,
            c.method,
            format_eps(c.epsilon),
            c.mean_u_bar,
            c.mean_b_m_over_m,
            c.v_mc
        ));
    }
    files.push(("decomposition.csv".to_string(), decomp.join("\n") + "\n"));

    for (name, body) in &files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(path, e))?;
    }

    let manifest = RunManifest {
        config: ManifestConfig {
            simulation: cfg.simulation,
            n: cfg.n,
            b_reps: cfg.b_reps,
            m: cfg.m,
            epsilon_grid: cfg.epsilon_grid.iter().map(|&e| format_eps(e)).collect(),
            methods: &cfg.methods,
            estimands: &cfg.estimands,
            rules: &cfg.rules,
            level: cfg.level,
            seed: cfg.seed,
            bins_per_continuous: cfg.bins_per_continuous,
            bn_degree: cfg.bn_degree,
            truth_convention: cfg.truth_convention,
        },
        arms: out
            .arm_ledgers
            .iter()
            .map(|(m, e, l)| ManifestArm {
                method: *m,
                epsilon: format_eps(*e),
                ledger: l,
            })
            .collect(),
        cells_failed_total: table.cells.iter().map(|c| c.n_failed).sum(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(path, e))?;

    let path = dir.join("metrics.json");
    std::fs::write(&path, serde_json::to_string_pretty(table)?)
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}
