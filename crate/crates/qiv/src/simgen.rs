//! Data-generating process and Monte Carlo harness.
//!
//! Units carry a binary covariate `X1 ~ Bernoulli(0.5)`, a continuous
//! covariate `X2 ~ N(0,1)`, and a decoy covariate `X2* ~ Uniform(-1,1)`
//! that is independent of everything else. The instrument and treatment
//! follow logistic models in `(X1, X2)`; the outcome follows the GOP
//! risk model with tanh / exp / log-linear links. Misspecification
//! scenarios swap `X2*` for `X2` in exactly one model block, so the same
//! simulated dataset serves every scenario.
//!
//! Replicates use counter-based seeding: replicate `r` draws from stream
//! `r` of a ChaCha12 generator keyed by the scenario seed, making each
//! replicate individually reproducible and the whole study order-independent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::design::{Dataset, ModelSpec};
use crate::error::{QivError, Result};
use crate::gop::{solve_p00, GopPoint};
use crate::mle::{fit_mle, marginal_att_plugin, AttEstimate, MleConfig};
use crate::prob::expit;
use crate::reduce::par_map_indexed;
use crate::tr::{fit_nuisances, tr_estimate, TrConfig};

/// True coefficient values for the data-generating process.
#[derive(Debug, Clone, Serialize)]
pub struct DgpCoefficients {
    /// gamma-link coefficients (intercept, X1, X2).
    pub beta: [f64; 3],
    /// alpha-link coefficients (intercept, X1, X2).
    pub theta: [f64; 3],
    pub omega0: f64,
    pub omega1: f64,
    /// GOP covariate loadings (X1, X2).
    pub eta: [f64; 2],
    /// Instrument model logit coefficients (intercept, X1, X2).
    pub z_model: [f64; 3],
    /// Treatment model logit coefficients (intercept, Z, X1, X2).
    pub a_model: [f64; 4],
    /// Marginal ATT implied by the defaults; used as the bias reference.
    pub true_att: f64,
}

impl Default for DgpCoefficients {
    fn default() -> Self {
        DgpCoefficients {
            beta: [0.3, 0.1, 0.1],
            theta: [0.4, 0.2, 0.1],
            omega0: -5.0,
            omega1: 3.5,
            eta: [1.5, 0.5],
            z_model: [-0.5, 0.2, -0.1],
            a_model: [-0.2, 0.1, -0.1, 0.05],
            true_att: 0.334,
        }
    }
}

impl DgpCoefficients {
    /// Defaults with the conditional ATT forced to zero (causal null with
    /// confounding still present).
    pub fn null_att() -> Self {
        DgpCoefficients {
            beta: [0.0, 0.0, 0.0],
            true_att: 0.0,
            ..Default::default()
        }
    }

    pub fn gamma_x(&self, x1: f64, x2: f64) -> f64 {
        (self.beta[0] + self.beta[1] * x1 + self.beta[2] * x2).tanh()
    }

    pub fn alpha_x(&self, x1: f64, x2: f64) -> f64 {
        (self.theta[0] + self.theta[1] * x1 + self.theta[2] * x2).exp()
    }

    pub fn gop_zx(&self, z: f64, x1: f64, x2: f64) -> f64 {
        (self.omega0 + self.omega1 * z + self.eta[0] * x1 + self.eta[1] * x2).exp()
    }

    pub fn pz_x(&self, x1: f64, x2: f64) -> f64 {
        expit(self.z_model[0] + self.z_model[1] * x1 + self.z_model[2] * x2)
    }

    pub fn pa_zx(&self, z: f64, x1: f64, x2: f64) -> f64 {
        expit(self.a_model[0] + self.a_model[1] * z + self.a_model[2] * x1 + self.a_model[3] * x2)
    }

    pub fn p00_zx(&self, z: f64, x1: f64, x2: f64) -> Result<f64> {
        let g = GopPoint::new(
            self.gamma_x(x1, x2),
            self.alpha_x(x1, x2),
            self.gop_zx(z, x1, x2),
        )?;
        solve_p00(&g)
    }

    /// Outcome risk `gamma(X) A + alpha(X)^A p00(Z, X)`.
    pub fn risk(&self, a: f64, z: f64, x1: f64, x2: f64) -> Result<f64> {
        let p00 = self.p00_zx(z, x1, x2)?;
        Ok(self.gamma_x(x1, x2) * a + self.alpha_x(x1, x2).powf(a) * p00)
    }
}

/// The four model-misspecification scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Every model block sees (X1, X2).
    AllCorrect,
    /// Outcome-side models correct; the instrument and treatment
    /// propensities see (X1, X2*).
    M1Correct,
    /// Confounding-ratio and propensity models correct; the conditional
    /// ATT model sees (X1, X2*).
    M2Correct,
    /// ATT, baseline-risk, and propensity models correct; the
    /// confounding-ratio model sees (X1, X2*).
    M3Correct,
}

impl Scenario {
    pub fn parse(s: &str) -> Result<Scenario> {
        match s {
            "all-correct" => Ok(Scenario::AllCorrect),
            "m1-correct" => Ok(Scenario::M1Correct),
            "m2-correct" => Ok(Scenario::M2Correct),
            "m3-correct" => Ok(Scenario::M3Correct),
            other => Err(QivError::Data(format!("unknown scenario `{other}`"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Scenario::AllCorrect => "all-correct",
            Scenario::M1Correct => "m1-correct",
            Scenario::M2Correct => "m2-correct",
            Scenario::M3Correct => "m3-correct",
        }
    }
}

/// One Monte Carlo study configuration.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub n: usize,
    pub seed: u64,
    pub reps: usize,
    pub dgp: DgpCoefficients,
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario, n: usize, seed: u64, reps: usize) -> Result<Self> {
        if n < 100 {
            return Err(QivError::Data(format!("n={n} below the minimum of 100")));
        }
        Ok(ScenarioSpec {
            scenario,
            n,
            seed,
            reps,
            dgp: DgpCoefficients::default(),
        })
    }
}

/// Covariate columns each model block should use under a scenario.
#[derive(Debug, Clone, Serialize)]
pub struct CovariateAssignment {
    pub gamma_cols: Vec<String>,
    pub alpha_cols: Vec<String>,
    pub gop_cols: Vec<String>,
    /// Columns for both propensity models P(Z|X) and P(A|Z,X).
    pub treat_cols: Vec<String>,
}

impl CovariateAssignment {
    /// Model spec for the outcome-side likelihood fit.
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            gamma_cols: self.gamma_cols.clone(),
            alpha_cols: self.alpha_cols.clone(),
            gop_cols: self.gop_cols.clone(),
            qiv_cols: Vec::new(),
            center: false,
        }
    }
}

/// Which covariates feed each model block under `scenario`: exactly one
/// side receives the decoy `X2*`.
pub fn apply_misspec(scenario: Scenario) -> CovariateAssignment {
    let good = || vec!["x1".to_string(), "x2".to_string()];
    let bad = || vec!["x1".to_string(), "x2star".to_string()];
    match scenario {
        Scenario::AllCorrect => CovariateAssignment {
            gamma_cols: good(),
            alpha_cols: good(),
            gop_cols: good(),
            treat_cols: good(),
        },
        Scenario::M1Correct => CovariateAssignment {
            gamma_cols: good(),
            alpha_cols: good(),
            gop_cols: good(),
            treat_cols: bad(),
        },
        Scenario::M2Correct => CovariateAssignment {
            gamma_cols: bad(),
            alpha_cols: good(),
            gop_cols: good(),
            treat_cols: good(),
        },
        Scenario::M3Correct => CovariateAssignment {
            gamma_cols: good(),
            alpha_cols: bad(),
            gop_cols: good(),
            treat_cols: good(),
        },
    }
}

fn replicate_rng(seed: u64, replicate: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// Draw one dataset from stream `replicate` of the scenario seed.
pub fn simulate_replicate(spec: &ScenarioSpec, replicate: u64) -> Result<Dataset> {
    let n = spec.n;
    let dgp = &spec.dgp;
    let mut rng = replicate_rng(spec.seed, replicate);
    let mut x1 = Vec::with_capacity(n);
    let mut x2 = Vec::with_capacity(n);
    let mut x2star = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let x1i = if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 };
        let x2i: f64 = rng.sample(StandardNormal);
        let x2si = rng.gen_range(-1.0..1.0);
        let zi = (rng.gen::<f64>() < dgp.pz_x(x1i, x2i)) as u8;
        let ai = (rng.gen::<f64>() < dgp.pa_zx(zi as f64, x1i, x2i)) as u8;
        let risk = dgp.risk(ai as f64, zi as f64, x1i, x2i)?;
        debug_assert!(risk > 0.0 && risk < 1.0);
        let yi = (rng.gen::<f64>() < risk) as u8;
        x1.push(x1i);
        x2.push(x2i);
        x2star.push(x2si);
        z.push(zi);
        a.push(ai);
        y.push(yi);
    }
    Dataset::new(
        y,
        a,
        vec![z],
        vec![x1, x2, x2star],
        vec!["z".into()],
        vec!["x1".into(), "x2".into(), "x2star".into()],
    )
}

/// Draw the dataset for stream 0; deterministic given the seed.
pub fn simulate_dataset(spec: &ScenarioSpec) -> Result<Dataset> {
    simulate_replicate(spec, 0)
}

/// Monte Carlo oracle for the true marginal ATT: the average of
/// `gamma(X)` over treated units in a large draw. No outcomes are needed.
pub fn true_att_oracle(dgp: &DgpCoefficients, n: usize, seed: u64) -> f64 {
    let chunk = 250_000usize;
    let chunks = n.div_ceil(chunk);
    let partials = par_map_indexed(chunks, |c| {
        let mut rng = replicate_rng(seed, c as u64);
        let lo = c * chunk;
        let hi = ((c + 1) * chunk).min(n);
        let mut sum = 0.0;
        let mut count = 0u64;
        for _ in lo..hi {
            let x1 = if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 };
            let x2: f64 = rng.sample(StandardNormal);
            let z = (rng.gen::<f64>() < dgp.pz_x(x1, x2)) as u8;
            if rng.gen::<f64>() < dgp.pa_zx(z as f64, x1, x2) {
                sum += dgp.gamma_x(x1, x2);
                count += 1;
            }
        }
        (sum, count)
    });
    let total: f64 = partials.iter().map(|(s, _)| s).sum();
    let count: u64 = partials.iter().map(|(_, c)| c).sum();
    total / count as f64
}

/// Estimators the Monte Carlo harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Mle,
    Tr,
}

/// One replicate-estimator outcome; failures are recorded, never dropped.
#[derive(Debug, Clone, Serialize)]
pub struct RepRecord {
    pub replicate: usize,
    pub estimator: Estimator,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub error: Option<String>,
}

/// Per-estimator Monte Carlo summary.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub n_ok: usize,
    pub failures: usize,
    pub mean: f64,
    /// Mean minus the DGP's true ATT.
    pub bias: f64,
    pub mc_sd: f64,
    pub mean_se: f64,
    /// Share of successful replicates whose interval covers the truth.
    pub coverage: f64,
}

/// Full Monte Carlo study output.
#[derive(Debug, Clone, Serialize)]
pub struct McSummary {
    pub scenario: Scenario,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub true_att: f64,
    pub level: f64,
    pub summaries: Vec<EstimatorSummary>,
    pub replicates: Vec<RepRecord>,
}

fn att_to_record(replicate: usize, estimator: Estimator, r: Result<AttEstimate>) -> RepRecord {
    match r {
        Ok(est) => RepRecord {
            replicate,
            estimator,
            estimate: Some(est.gamma_hat),
            se: Some(est.se),
            ci_low: Some(est.ci_low),
            ci_high: Some(est.ci_high),
            error: None,
        },
        Err(e) => RepRecord {
            replicate,
            estimator,
            estimate: None,
            se: None,
            ci_low: None,
            ci_high: None,
            error: Some(e.to_string()),
        },
    }
}

/// Run the Monte Carlo study: `spec.reps` replicates of size `spec.n`,
/// fitting each requested estimator under the scenario's covariate
/// assignment. Replicates run in parallel, each on its own seeded stream.
pub fn run_mc(spec: &ScenarioSpec, estimators: &[Estimator], level: f64) -> McSummary {
    let assignment = apply_misspec(spec.scenario);
    let per_rep: Vec<Vec<RepRecord>> = par_map_indexed(spec.reps, |r| {
        let mut out = Vec::with_capacity(estimators.len());
        let data = match simulate_replicate(spec, r as u64) {
            Ok(d) => d,
            Err(e) => {
                for &est in estimators {
                    out.push(att_to_record(r, est, Err(e.clone())));
                }
                return out;
            }
        };
        for &est in estimators {
            let record = match est {
                Estimator::Mle => att_to_record(
                    r,
                    est,
                    fit_mle(&data, &assignment.model_spec(), &MleConfig::default()).and_then(
                        |fit| marginal_att_plugin(&fit, &data, &assignment.model_spec(), level),
                    ),
                ),
                Estimator::Tr => att_to_record(
                    r,
                    est,
                    fit_nuisances(&data, &assignment, &TrConfig::default())
                        .and_then(|nf| tr_estimate(&data, &nf, level)),
                ),
            };
            out.push(record);
        }
        out
    });
    let replicates: Vec<RepRecord> = per_rep.into_iter().flatten().collect();

    let mut summaries = Vec::new();
    for &est in estimators {
        let ok: Vec<&RepRecord> = replicates
            .iter()
            .filter(|r| r.estimator == est && r.estimate.is_some())
            .collect();
        let failures = replicates
            .iter()
            .filter(|r| r.estimator == est && r.estimate.is_none())
            .count();
        let n_ok = ok.len();
        let mean = if n_ok > 0 {
            ok.iter().map(|r| r.estimate.unwrap()).sum::<f64>() / n_ok as f64
        } else {
            f64::NAN
        };
        let mc_sd = if n_ok > 1 {
            (ok.iter()
                .map(|r| (r.estimate.unwrap() - mean).powi(2))
                .sum::<f64>()
                / (n_ok - 1) as f64)
                .sqrt()
        } else {
            f64::NAN
        };
        let mean_se = if n_ok > 0 {
            ok.iter().map(|r| r.se.unwrap()).sum::<f64>() / n_ok as f64
        } else {
            f64::NAN
        };
        let coverage = if n_ok > 0 {
            ok.iter()
                .filter(|r| {
                    r.ci_low.unwrap() <= spec.dgp.true_att && spec.dgp.true_att <= r.ci_high.unwrap()
                })
                .count() as f64
                / n_ok as f64
        } else {
            f64::NAN
        };
        summaries.push(EstimatorSummary {
            estimator: est,
            n_ok,
            failures,
            mean,
            bias: mean - spec.dgp.true_att,
            mc_sd,
            mean_se,
            coverage,
        });
    }

    McSummary {
        scenario: spec.scenario,
        n: spec.n,
        reps: spec.reps,
        seed: spec.seed,
        true_att: spec.dgp.true_att,
        level,
        summaries,
        replicates,
    }
}
