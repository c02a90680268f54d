//! Estimation of the average treatment effect on the treated (ATT) for
//! binary outcomes using a quasi-instrumental variable (QIV): a covariate
//! that only needs to be predictive of the outcome among the untreated.
//!
//! Identification rests on two stability conditions: the multiplicative
//! confounding ratio and the additive conditional ATT are both constant
//! across levels of the QIV. The crate provides
//!
//! - [`gop`]: the generalized odds product parameterization that makes the
//!   bounded-outcome likelihood variation independent, with closed-form
//!   cubic inversion;
//! - [`design`]: datasets, parameter vectors, and the tanh / exp / log-linear
//!   link models;
//! - [`glm`]: logistic regression for the instrument- and
//!   treatment-propensity nuisances;
//! - [`mle`]: bounded maximum likelihood estimation, the plug-in marginal
//!   ATT, a weak-identification diagnostic, and a likelihood-ratio test of
//!   the causal null;
//! - [`identify`]: nonparametric identification on discrete strata and
//!   relevance diagnostics;
//! - [`tr`]: the triply robust semiparametric estimator built on the
//!   efficient influence function, with doubly robust nuisance refits and
//!   a score-type test of the causal null;
//! - [`simgen`]: a seeded data-generating process and Monte Carlo harness
//!   covering four model-misspecification scenarios.
//!
//! Row-level reductions (likelihood sums, influence-function averages,
//! Monte Carlo replicates) run in parallel when the default `parallel`
//! feature is enabled; results are bit-identical to the sequential build.

pub mod design;
pub mod error;
pub mod glm;
pub mod gop;
pub mod identify;
pub mod linalg;
pub mod mle;
pub mod optim;
pub mod prob;
pub mod reduce;
pub mod simgen;
pub mod tr;

pub use error::{QivError, Result};
