//! Differentially private synthetic tabular data with combining-rule
//! inference and Monte Carlo coverage experiments.
//!
//! The pipeline: fit a privatized generative model on an original dataset
//! ([`synth`]), sample m synthetic copies under a tracked privacy budget
//! ([`dp`]), estimate a quantity of interest on each copy ([`estimators`]),
//! pool the m results into one inference ([`combine`]), and measure whether
//! the pooled variance estimators deliver nominal coverage over repeated
//! replications ([`simlab`]).

pub mod combine;
pub mod dp;
pub mod error;
pub mod estimators;
pub mod randkit;
pub mod simlab;
pub mod synth;
pub mod tabular;

pub use combine::{combine, CombinedInference, VarianceRule};
pub use dp::{BudgetLedger, Composition, NeighborSemantics, PrivacyBudget};
pub use error::{Error, Result};
pub use estimators::{Estimand, EstimateResult};
pub use randkit::RngStream;
pub use synth::{generate_m_datasets, SynthMethod, SynthModel, SynthesisRequest};
pub use tabular::{Column, ColumnKind, Dataset, Schema};
