//! Privacy primitives: budget data model, the Laplace and exponential
//! mechanisms, and a ledger implementing sequential and parallel
//! composition accounting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::randkit::laplace;

/// Serialize epsilon as the string "inf" when infinite, since JSON has no
/// infinity literal.
pub mod eps_fmt {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Raw::Str(s) => s.parse().map_err(de::Error::custom),
        }
    }
}

/// An (epsilon, delta) privacy budget. `epsilon = inf` is the explicit
/// non-private sentinel: mechanisms bypass noise and charge nothing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    #[serde(with = "eps_fmt")]
    pub epsilon: f64,
    #[serde(default)]
    pub delta: f64,
}

/// Default delta when modeling approximate-DP budgets.
pub const DEFAULT_MODEL_DELTA: f64 = 1e-6;

impl PrivacyBudget {
    pub fn pure(epsilon: f64) -> Result<Self> {
        PrivacyBudget::new(epsilon, 0.0)
    }

    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if epsilon < 0.0 || epsilon.is_nan() {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be nonnegative, got {epsilon}"
            )));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::InvalidArgument(format!(
                "delta must lie in [0,1), got {delta}"
            )));
        }
        Ok(PrivacyBudget { epsilon, delta })
    }

    pub fn non_private() -> Self {
        PrivacyBudget {
            epsilon: f64::INFINITY,
            delta: 0.0,
        }
    }

    pub fn zero() -> Self {
        PrivacyBudget {
            epsilon: 0.0,
            delta: 0.0,
        }
    }

    pub fn is_non_private(&self) -> bool {
        self.epsilon.is_infinite()
    }
}

/// Which notion of neighboring datasets sensitivities are computed under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeighborSemantics {
    /// One record replaced (bounded DP). Histogram L1 sensitivity 2.
    #[default]
    Replacement,
    /// One record added or removed (unbounded DP). Histogram L1 sensitivity 1.
    AddRemove,
}

impl NeighborSemantics {
    pub fn histogram_l1_sensitivity(&self) -> f64 {
        match self {
            NeighborSemantics::Replacement => 2.0,
            NeighborSemantics::AddRemove => 1.0,
        }
    }
}

/// How a ledger entry composes with the others.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Composition {
    Sequential,
    /// Entries in the same group act on disjoint data; the group contributes
    /// its maximum spend.
    Parallel { group: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub label: String,
    pub spent: PrivacyBudget,
    pub composition: Composition,
}

/// Composition accountant: sequential entries sum, parallel groups
/// contribute their maximum, and the cumulative spend may never exceed the
/// declared total.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub total: PrivacyBudget,
    pub entries: Vec<LedgerEntry>,
}

impl BudgetLedger {
    pub fn new(total: PrivacyBudget) -> Self {
        BudgetLedger {
            total,
            entries: Vec::new(),
        }
    }

    /// Cumulative spend under the composition theorems.
    pub fn spent(&self) -> PrivacyBudget {
        let mut eps = 0.0;
        let mut delta = 0.0;
        let mut group_max: Vec<(&str, f64, f64)> = Vec::new();
        for e in &self.entries {
            match &e.composition {
                Composition::Sequential => {
                    eps += e.spent.epsilon;
                    delta += e.spent.delta;
                }
                Composition::Parallel { group } => {
                    match group_max.iter_mut().find(|(g, _, _)| g == group) {
                        Some((_, ge, gd)) => {
                            *ge = ge.max(e.spent.epsilon);
                            *gd = gd.max(e.spent.delta);
                        }
                        None => group_max.push((group, e.spent.epsilon, e.spent.delta)),
                    }
                }
            }
        }
        for (_, ge, gd) in group_max {
            eps += ge;
            delta += gd;
        }
        PrivacyBudget { epsilon: eps, delta }
    }

    pub fn remaining_epsilon(&self) -> f64 {
        self.total.epsilon - self.spent().epsilon
    }

    /// Record a spend, refusing any charge that would push the cumulative
    /// total over budget.
    pub fn charge(
        &mut self,
        label: impl Into<String>,
        spend: PrivacyBudget,
        composition: Composition,
    ) -> Result<()> {
        let label = label.into();
        if spend.epsilon < 0.0 || spend.delta < 0.0 {
            return Err(Error::InvalidArgument("negative budget charge".into()));
        }
        self.entries.push(LedgerEntry {
            label: label.clone(),
            spent: spend,
            composition,
        });
        let after = self.spent();
        // Tolerance only absorbs float roundoff in the sums.
        if after.epsilon > self.total.epsilon + 1e-12 || after.delta > self.total.delta + 1e-15 {
            self.entries.pop();
            return Err(Error::OverBudget {
                label,
                attempted: after.epsilon,
                total: self.total.epsilon,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-dataset budget when a total is split evenly across m synthetic
/// copies; m copies compose back to the total.
pub fn split_budget(total: PrivacyBudget, m: usize) -> Result<PrivacyBudget> {
    if m == 0 {
        return Err(Error::InvalidArgument("split_budget requires m >= 1".into()));
    }
    if total.is_non_private() {
        return Ok(PrivacyBudget::non_private());
    }
    Ok(PrivacyBudget {
        epsilon: total.epsilon / m as f64,
        delta: total.delta / m as f64,
    })
}

/// Laplace mechanism: add i.i.d. Laplace(l1_sensitivity / eps) noise to each
/// coordinate. `eps = inf` bypasses noise entirely.
pub fn laplace_mechanism(
    rng: &mut impl Rng,
    true_values: &[f64],
    l1_sensitivity: f64,
    eps: f64,
) -> Result<Vec<f64>> {
    if eps.is_infinite() {
        return Ok(true_values.to_vec());
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "laplace_mechanism requires eps > 0, got {eps}"
        )));
    }
    if !(l1_sensitivity > 0.0) {
        return Err(Error::InvalidArgument(
            "l1_sensitivity must be positive".into(),
        ));
    }
    let scale = l1_sensitivity / eps;
    Ok(true_values
        .iter()
        .map(|&v| v + laplace(rng, scale))
        .collect())
}

/// Exponential mechanism over indexed candidates: returns the index of the
/// selected candidate, sampled with probability proportional to
/// exp(eps * score / (2 * score_sensitivity)). `eps = inf` returns the
/// argmax, ties broken by lowest index.
pub fn exponential_mechanism(
    rng: &mut impl Rng,
    scores: &[f64],
    score_sensitivity: f64,
    eps: f64,
) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("empty candidate list".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("non-finite score".into()));
    }
    if eps.is_infinite() {
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        return Ok(best);
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "exponential_mechanism requires eps > 0, got {eps}"
        )));
    }
    if !(score_sensitivity > 0.0) {
        return Err(Error::InvalidArgument(
            "score_sensitivity must be positive".into(),
        ));
    }

    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores
        .iter()
        .map(|&s| (eps * (s - max) / (2.0 * score_sensitivity)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return Ok(i);
        }
    }
    Ok(weights.len() - 1)
}
