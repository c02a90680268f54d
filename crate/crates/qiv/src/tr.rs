//! Triply robust semiparametric estimation of the marginal ATT.
//!
//! The estimator averages the efficient influence function's bracket term
//! and rescales by the treated share. It stays consistent when any one of
//! three nuisance blocks is correctly specified: (1) the outcome-side
//! models (baseline risk, conditional ATT, confounding ratio), (2) the
//! confounding ratio together with both propensities, or (3) the ATT and
//! baseline risk together with both propensities.
//!
//! Nuisances are fitted in one pass: logistic propensities, the GOP
//! likelihood for the outcome side, then doubly robust refits of the
//! confounding-ratio and ATT coefficients from their moment equations.
//! The composed outcome mean `e(a,z,x) = gamma(x) a + alpha(x)^a e0(z,x)`
//! always uses the current (refit) coefficient functions, which is what
//! makes the bracket's correction terms cancel when the propensity side
//! is the correct one.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::design::{build_design, Dataset, ModelSpec};
use crate::error::{QivError, Result};
use crate::glm::{fit_logistic, score_jacobian, score_rows, LogisticFit};
use crate::linalg::{cholesky, chol_solve, dot, inf_norm, lu_solve, Mat};
use crate::mle::{
    fit_mle, fit_mle_null, mean_hessian, score_row_matrix, AttEstimate, EstimatorKind, MleConfig,
    MleFit, TestReport,
};
use crate::prob::{chi2_sf, normal_quantile};
use crate::reduce::{pairwise_sum, pairwise_sum_vec};
use crate::simgen::CovariateAssignment;

/// Probability clamp applied by every probability-valued nuisance function.
pub const NUISANCE_CLAMP: f64 = 1e-10;
/// Joint treatment/instrument cell probabilities below this floor fail the
/// positivity check at fit time.
pub const POSITIVITY_FLOOR: f64 = 1e-3;
/// Denominator guard inside the influence function.
const EIF_GUARD: f64 = 1e-6;
/// Convergence tolerance (infinity norm, mean scale) for the refit moments.
const MOMENT_TOL: f64 = 1e-9;

/// Function of the full covariate row.
pub type XFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Function of the instrument value and the full covariate row.
pub type ZxFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
/// Function of treatment, instrument, and the full covariate row.
pub type AzxFn = Arc<dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync>;

/// Configuration for the triply robust pipeline.
#[derive(Debug, Clone)]
pub struct TrConfig {
    /// Run the doubly robust refits of alpha and gamma (default on).
    pub refit: bool,
    /// Index of the QIV column to use (the TR path is single-instrument).
    pub qiv: usize,
    pub positivity_floor: f64,
    /// Mean-center covariates in the outcome likelihood fit.
    pub center: bool,
    pub mle: MleConfig,
}

impl Default for TrConfig {
    fn default() -> Self {
        TrConfig {
            refit: true,
            qiv: 0,
            positivity_floor: POSITIVITY_FLOOR,
            center: false,
            mle: MleConfig::default(),
        }
    }
}

/// Fitted (or injected) nuisance functions for the influence-function
/// estimator. All probability-valued functions clamp into
/// `[NUISANCE_CLAMP, 1 - NUISANCE_CLAMP]`.
#[derive(Clone)]
pub struct NuisanceFits {
    /// P(Z=1 | X).
    pub pi_z: XFn,
    /// P(A=1 | Z=z, X).
    pub pi_a: ZxFn,
    /// E(Y | A=0, Z=z, X) — the baseline risk.
    pub e0: ZxFn,
    /// E(Y | A=a, Z=z, X).
    pub e: AzxFn,
    /// Confounding ratio alpha(X).
    pub alpha_fn: XFn,
    /// Conditional ATT gamma(X).
    pub gamma_fn: XFn,
    /// Empirical P(A=1).
    pub p_treated: f64,
    /// Which QIV column the fits condition on.
    pub qiv: usize,
    /// Where each component came from (fitted, refit, injected, ...).
    pub provenance: BTreeMap<String, String>,
    /// The outcome-side likelihood fit, when the pipeline produced one.
    pub mle: Option<MleFit>,
}

impl std::fmt::Debug for NuisanceFits {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NuisanceFits")
            .field("p_treated", &self.p_treated)
            .field("qiv", &self.qiv)
            .field("provenance", &self.provenance)
            .finish()
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(NUISANCE_CLAMP, 1.0 - NUISANCE_CLAMP)
}

/// Design matrix `[1, cols...]` from named covariate columns.
fn intercept_design(d: &Dataset, cols: &[String]) -> Result<Mat> {
    let n = d.n();
    let mut m = Mat::zeros(n, cols.len() + 1);
    for i in 0..n {
        m.set(i, 0, 1.0);
    }
    for (j, name) in cols.iter().enumerate() {
        let col = d.x_col_by_name(name)?;
        for i in 0..n {
            m.set(i, j + 1, col[i]);
        }
    }
    Ok(m)
}

/// Design `[1, z, cols...]` for the treatment propensity.
fn treatment_design(d: &Dataset, qiv: usize, cols: &[String]) -> Result<Mat> {
    let n = d.n();
    let mut m = Mat::zeros(n, cols.len() + 2);
    for i in 0..n {
        m.set(i, 0, 1.0);
        m.set(i, 1, d.z_col(qiv)[i] as f64);
    }
    for (j, name) in cols.iter().enumerate() {
        let col = d.x_col_by_name(name)?;
        for i in 0..n {
            m.set(i, j + 2, col[i]);
        }
    }
    Ok(m)
}

/// Fit the full nuisance pipeline for the triply robust estimator.
///
/// Order: logistic P(Z|X) and P(A|Z,X); GOP maximum likelihood for the
/// outcome side; doubly robust refit of the confounding-ratio
/// coefficients (using the likelihood's ATT function), then of the ATT
/// coefficients (using the refit confounding ratio). A refit that fails
/// to converge falls back to its likelihood estimate and is flagged in
/// `provenance`; a degenerate instrument surfaces as an error.
pub fn fit_nuisances(
    d: &Dataset,
    assignment: &CovariateAssignment,
    config: &TrConfig,
) -> Result<NuisanceFits> {
    let qiv = config.qiv;
    if qiv >= d.n_qiv() {
        return Err(QivError::Dimension(format!(
            "QIV index {qiv} out of range ({} columns)",
            d.n_qiv()
        )));
    }

    // propensity fits
    let z_design = intercept_design(d, &assignment.treat_cols)?;
    let z_fit = fit_logistic(d.z_col(qiv), &z_design)?;
    let a_design = treatment_design(d, qiv, &assignment.treat_cols)?;
    let a_fit = fit_logistic(d.a(), &a_design)?;

    // outcome-side likelihood
    let mut spec = assignment.model_spec();
    spec.qiv_cols = vec![d.z_names()[qiv].clone()];
    spec.center = config.center;
    let mle = fit_mle(d, &spec, &config.mle)?;

    let mut provenance = BTreeMap::new();
    provenance.insert("pi_z".into(), "logistic".into());
    provenance.insert("pi_a".into(), "logistic".into());
    provenance.insert("e0".into(), "gop-mle".into());
    provenance.insert(
        "mle_converged".into(),
        mle.converged.to_string(),
    );

    // closures over the fitted pieces
    let treat_idx: Vec<usize> = assignment
        .treat_cols
        .iter()
        .map(|name| {
            d.x_names()
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| QivError::UnknownColumn(name.clone()))
        })
        .collect::<Result<_>>()?;

    let zc = z_fit.coef.clone();
    let t_idx = treat_idx.clone();
    let pi_z: XFn = Arc::new(move |x: &[f64]| {
        let mut lin = zc[0];
        for (j, &idx) in t_idx.iter().enumerate() {
            lin += zc[j + 1] * x[idx];
        }
        clamp_prob(crate::prob::expit(lin))
    });

    let ac = a_fit.coef.clone();
    let t_idx = treat_idx.clone();
    let pi_a: ZxFn = Arc::new(move |z: f64, x: &[f64]| {
        let mut lin = ac[0] + ac[1] * z;
        for (j, &idx) in t_idx.iter().enumerate() {
            lin += ac[j + 2] * x[idx];
        }
        clamp_prob(crate::prob::expit(lin))
    });

    let mle_for_e0 = mle.clone();
    let e0: ZxFn = Arc::new(move |z: f64, x: &[f64]| {
        match mle_for_e0.p00_at(&[z], x) {
            Ok(p) => clamp_prob(p),
            Err(_) => f64::NAN,
        }
    });

    // alpha and gamma start at the likelihood estimates
    let mut theta = mle.phi_hat.theta.clone();
    let mut beta = mle.phi_hat.beta.clone();
    let mut alpha_src = "gop-mle";
    let mut gamma_src = "gop-mle";

    if config.refit {
        let theta_design = intercept_design(d, &assignment.alpha_cols)?;
        let beta_design = intercept_design(d, &assignment.gamma_cols)?;
        let gamma_mle: Vec<f64> = {
            let mut buf = Vec::new();
            (0..d.n())
                .map(|i| {
                    d.x_row_into(i, &mut buf);
                    mle.gamma_at(&buf)
                })
                .collect()
        };
        match dr_refit_alpha(d, qiv, &pi_z, &pi_a, &gamma_mle, &theta_design, &theta) {
            Ok(refit) => {
                theta = refit;
                alpha_src = "dr-refit";
            }
            Err(QivError::NonConvergence(msg)) => {
                provenance.insert("alpha_refit_fallback".into(), msg);
            }
            Err(e) => return Err(e),
        }
        // alpha function for the gamma refit uses the refit theta
        let alpha_interim = alpha_closure(&theta, d, &assignment.alpha_cols)?;
        match dr_refit_gamma(d, qiv, &pi_z, &pi_a, &e0, &alpha_interim, &beta_design, &beta) {
            Ok(refit) => {
                beta = refit;
                gamma_src = "dr-refit";
            }
            Err(QivError::NonConvergence(msg)) => {
                provenance.insert("gamma_refit_fallback".into(), msg);
            }
            Err(e) => return Err(e),
        }
    }
    provenance.insert("alpha".into(), alpha_src.into());
    provenance.insert("gamma".into(), gamma_src.into());

    let alpha_fn = alpha_closure(&theta, d, &assignment.alpha_cols)?;
    let gamma_fn = gamma_closure(&beta, d, &assignment.gamma_cols)?;

    // composed outcome mean, coherent with the current alpha/gamma slots
    let (g2, a2, e02) = (gamma_fn.clone(), alpha_fn.clone(), e0.clone());
    let e: AzxFn = Arc::new(move |a: f64, z: f64, x: &[f64]| {
        let base = e02(z, x);
        let v = g2(x) * a + a2(x).powf(a) * base;
        clamp_prob(v)
    });

    let nf = NuisanceFits {
        pi_z,
        pi_a,
        e0,
        e,
        alpha_fn,
        gamma_fn,
        p_treated: d.treated_share(),
        qiv,
        provenance,
        mle: Some(mle),
    };

    // positivity audit over all four (a, z) cells
    let mut violations = 0usize;
    let mut min_cell = f64::INFINITY;
    let mut buf = Vec::new();
    for i in 0..d.n() {
        d.x_row_into(i, &mut buf);
        let pz1 = (nf.pi_z)(&buf);
        for z in [0.0, 1.0] {
            let pa1 = (nf.pi_a)(z, &buf);
            let pz = if z == 1.0 { pz1 } else { 1.0 - pz1 };
            for pa in [pa1, 1.0 - pa1] {
                let cell = pa * pz;
                min_cell = min_cell.min(cell);
                if cell < config.positivity_floor {
                    violations += 1;
                }
            }
        }
    }
    if violations > 0 {
        return Err(QivError::Positivity(format!(
            "{violations} treatment/instrument cells below {} (min {:.2e})",
            config.positivity_floor, min_cell
        )));
    }

    Ok(nf)
}

fn alpha_closure(theta: &[f64], d: &Dataset, cols: &[String]) -> Result<XFn> {
    let idx: Vec<usize> = cols
        .iter()
        .map(|name| {
            d.x_names()
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| QivError::UnknownColumn(name.clone()))
        })
        .collect::<Result<_>>()?;
    let coef = theta.to_vec();
    Ok(Arc::new(move |x: &[f64]| {
        let mut lin = coef[0];
        for (j, &id) in idx.iter().enumerate() {
            lin += coef[j + 1] * x[id];
        }
        lin.exp()
    }))
}

fn gamma_closure(beta: &[f64], d: &Dataset, cols: &[String]) -> Result<XFn> {
    let idx: Vec<usize> = cols
        .iter()
        .map(|name| {
            d.x_names()
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| QivError::UnknownColumn(name.clone()))
        })
        .collect::<Result<_>>()?;
    let coef = beta.to_vec();
    Ok(Arc::new(move |x: &[f64]| {
        if coef.is_empty() {
            return 0.0;
        }
        let mut lin = coef[0];
        for (j, &id) in idx.iter().enumerate() {
            lin += coef[j + 1] * x[id];
        }
        lin.tanh()
    }))
}

/// Guard against a degenerate instrument: the moment system is
/// unidentified when `Z - P(Z=1|X)` is (numerically) identically zero.
fn check_instrument_variation(resid_sq_mean: f64) -> Result<()> {
    if resid_sq_mean < 1e-12 {
        return Err(QivError::Unidentified(
            "instrument residual Z - P(Z=1|X) is identically zero".into(),
        ));
    }
    Ok(())
}

/// Doubly robust refit of the confounding-ratio coefficients `theta`.
///
/// Solves the empirical moment
/// `mean[ h(X) (Z - piz(X)) { (Y(1-A) e^{theta'x} - YA)/P(A|Z,X) - gamma(X) } ] = 0`
/// by damped Newton, with `h(X)` the alpha-model design row. Consistent
/// when the propensities are correct regardless of the plugged `gamma`,
/// and at the truth when the outcome side is correct.
pub fn dr_refit_alpha(
    d: &Dataset,
    qiv: usize,
    pi_z: &XFn,
    pi_a: &ZxFn,
    gamma_plug: &[f64],
    theta_design: &Mat,
    theta_start: &[f64],
) -> Result<Vec<f64>> {
    let n = d.n();
    let p = theta_design.cols();
    if theta_start.len() != p {
        return Err(QivError::Dimension("theta start length".into()));
    }
    // per-row constants
    let mut resid = vec![0.0; n];
    let mut pa_obs = vec![0.0; n];
    let mut buf = Vec::new();
    let mut resid_sq = 0.0;
    for i in 0..n {
        d.x_row_into(i, &mut buf);
        let z = d.z_col(qiv)[i] as f64;
        let r = z - pi_z(&buf);
        resid[i] = r;
        resid_sq += r * r;
        let pa1 = pi_a(z, &buf);
        pa_obs[i] = if d.a()[i] == 1 { pa1 } else { 1.0 - pa1 };
    }
    check_instrument_variation(resid_sq / n as f64)?;

    let y = d.y();
    let a = d.a();
    let moment_and_jac = |theta: &[f64]| -> (Vec<f64>, Mat) {
        let mut m = vec![0.0; p];
        let mut jac = Mat::zeros(p, p);
        for i in 0..n {
            let h = theta_design.row(i);
            let r = resid[i];
            if r == 0.0 {
                continue;
            }
            let alpha = dot(h, theta).exp();
            let y01 = (y[i] as f64) * (1.0 - a[i] as f64);
            let y11 = (y[i] as f64) * (a[i] as f64);
            let inner = (y01 * alpha - y11) / pa_obs[i] - gamma_plug[i];
            let w = r / n as f64;
            let dw = w * y01 * alpha / pa_obs[i];
            for u in 0..p {
                m[u] += w * h[u] * inner;
                if dw != 0.0 {
                    for v in 0..p {
                        let x = jac.get(u, v) + dw * h[u] * h[v];
                        jac.set(u, v, x);
                    }
                }
            }
        }
        (m, jac)
    };

    newton_solve(theta_start, moment_and_jac, "alpha moment")
}

/// Doubly robust refit of the ATT coefficients `beta`.
///
/// Solves
/// `mean[ h(X) (Z - piz(X)) { (YA - tanh(beta'x) A)/(P(A|Z,X) e0(Z,X)) - alpha(X) } ] = 0`
/// with `h(X)` the gamma-model design row and `alpha` the (refit)
/// confounding-ratio function.
pub fn dr_refit_gamma(
    d: &Dataset,
    qiv: usize,
    pi_z: &XFn,
    pi_a: &ZxFn,
    e0: &ZxFn,
    alpha_fn: &XFn,
    beta_design: &Mat,
    beta_start: &[f64],
) -> Result<Vec<f64>> {
    let n = d.n();
    let p = beta_design.cols();
    if beta_start.len() != p {
        return Err(QivError::Dimension("beta start length".into()));
    }
    let mut resid = vec![0.0; n];
    let mut denom = vec![0.0; n];
    let mut alpha_plug = vec![0.0; n];
    let mut buf = Vec::new();
    let mut resid_sq = 0.0;
    for i in 0..n {
        d.x_row_into(i, &mut buf);
        let z = d.z_col(qiv)[i] as f64;
        let r = z - pi_z(&buf);
        resid[i] = r;
        resid_sq += r * r;
        let pa1 = pi_a(z, &buf);
        let pa = if d.a()[i] == 1 { pa1 } else { 1.0 - pa1 };
        let base = e0(z, &buf);
        if !base.is_finite() {
            return Err(QivError::Internal(format!(
                "baseline risk evaluation failed at row {i}"
            )));
        }
        denom[i] = pa * base;
        alpha_plug[i] = alpha_fn(&buf);
    }
    check_instrument_variation(resid_sq / n as f64)?;

    let y = d.y();
    let a = d.a();
    let moment_and_jac = |beta: &[f64]| -> (Vec<f64>, Mat) {
        let mut m = vec![0.0; p];
        let mut jac = Mat::zeros(p, p);
        for i in 0..n {
            if a[i] != 1 {
                // A = 0 rows contribute only through the alpha term
                let w = resid[i] / n as f64;
                let h = beta_design.row(i);
                for u in 0..p {
                    m[u] -= w * h[u] * alpha_plug[i];
                }
                continue;
            }
            let h = beta_design.row(i);
            let r = resid[i];
            let g = dot(h, beta).tanh();
            let inner = ((y[i] as f64) - g) / denom[i] - alpha_plug[i];
            let w = r / n as f64;
            let dg = -w * (1.0 - g * g) / denom[i];
            for u in 0..p {
                m[u] += w * h[u] * inner;
                for v in 0..p {
                    let x = jac.get(u, v) + dg * h[u] * h[v];
                    jac.set(u, v, x);
                }
            }
        }
        (m, jac)
    };

    newton_solve(beta_start, moment_and_jac, "gamma moment")
}

/// Damped Newton on a square moment system.
fn newton_solve<F>(start: &[f64], moment_and_jac: F, what: &str) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> (Vec<f64>, Mat),
{
    let p = start.len();
    let mut x = start.to_vec();
    let (mut m, mut jac) = moment_and_jac(&x);
    for _ in 0..50 {
        let norm = inf_norm(&m);
        if norm < MOMENT_TOL {
            return Ok(x);
        }
        let neg_m: Vec<f64> = m.iter().map(|v| -v).collect();
        let step = lu_solve(&jac, &neg_m).map_err(|_| {
            QivError::Unidentified(format!("singular Jacobian in {what} refit"))
        })?;
        let mut t = 1.0;
        let mut advanced = false;
        for _ in 0..30 {
            let cand: Vec<f64> = (0..p).map(|j| x[j] + t * step[j]).collect();
            let (mc, jc) = moment_and_jac(&cand);
            if inf_norm(&mc) < norm {
                x = cand;
                m = mc;
                jac = jc;
                advanced = true;
                break;
            }
            t *= 0.5;
        }
        if !advanced {
            return Err(QivError::NonConvergence(format!(
                "{what} refit stalled at norm {norm:.3e}"
            )));
        }
    }
    if inf_norm(&m) < MOMENT_TOL {
        Ok(x)
    } else {
        Err(QivError::NonConvergence(format!(
            "{what} refit: moment norm {:.3e} after iteration cap",
            inf_norm(&m)
        )))
    }
}

/// The influence-function bracket for unit `i` (before the treated-share
/// rescaling). Errors identify the failing denominator and unit.
fn bracket_at(d: &Dataset, i: usize, nf: &NuisanceFits, buf: &mut Vec<f64>) -> Result<f64> {
    d.x_row_into(i, buf);
    let x = buf.as_slice();
    let zi = d.z_col(nf.qiv)[i] as f64;
    let ai = d.a()[i] as f64;
    let yi = d.y()[i] as f64;

    let pz1 = (nf.pi_z)(x);
    let pz_obs = if zi == 1.0 { pz1 } else { 1.0 - pz1 };
    let pa1_zi = (nf.pi_a)(zi, x);
    let pa_obs = if ai == 1.0 { pa1_zi } else { 1.0 - pa1_zi };
    let paz = pa_obs * pz_obs;
    if pa_obs < EIF_GUARD {
        return Err(QivError::Positivity(format!(
            "P(A|Z,X) = {pa_obs:.2e} below guard at unit {i}"
        )));
    }
    if paz < EIF_GUARD {
        return Err(QivError::Positivity(format!(
            "P(A,Z|X) = {paz:.2e} below guard at unit {i}"
        )));
    }
    let e0_1 = (nf.e0)(1.0, x);
    let e0_0 = (nf.e0)(0.0, x);
    let de0 = e0_1 - e0_0;
    if !de0.is_finite() || de0.abs() < EIF_GUARD {
        return Err(QivError::WeakQiv(format!(
            "e0(1,X) - e0(0,X) = {de0:.2e} below guard at unit {i}"
        )));
    }

    let alpha = (nf.alpha_fn)(x);
    let gamma = (nf.gamma_fn)(x);
    let e_obs = (nf.e)(ai, zi, x);

    let t1 = pa1_zi * (yi * ai - yi * (1.0 - ai) * alpha) / pa_obs;
    let t2 = gamma * (ai - pa1_zi);
    let t3 = pa1_zi * (e_obs * ai - e_obs * (1.0 - ai) * alpha) / pa_obs - gamma * pa1_zi;
    let cond = pz1 * (nf.pi_a)(1.0, x) * e0_1 + (1.0 - pz1) * (nf.pi_a)(0.0, x) * e0_0;
    let sign = if (d.a()[i] + d.z_col(nf.qiv)[i]) % 2 == 0 {
        1.0
    } else {
        -1.0
    };
    let alpha_pow = if ai == 1.0 { 1.0 } else { alpha };
    let t4 = cond * (yi - e_obs) / de0 * sign / paz * alpha_pow;

    let b = t1 + t2 - t3 - t4;
    if !b.is_finite() {
        return Err(QivError::Internal(format!(
            "non-finite influence bracket at unit {i}"
        )));
    }
    Ok(b)
}

/// Efficient-influence-function value for unit `i` at reference `gamma_bar`.
pub fn eif_value(d: &Dataset, i: usize, nf: &NuisanceFits, gamma_bar: f64) -> Result<f64> {
    let mut buf = Vec::new();
    Ok(bracket_at(d, i, nf, &mut buf)? / nf.p_treated - gamma_bar)
}

/// Per-unit influence values with their mean and empirical variance.
#[derive(Debug, Clone)]
pub struct EifEvaluation {
    pub values: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

/// Evaluate the influence function at every unit.
pub fn eif_all(d: &Dataset, nf: &NuisanceFits, gamma_bar: f64) -> Result<EifEvaluation> {
    let n = d.n();
    let mut values = Vec::with_capacity(n);
    let mut buf = Vec::new();
    for i in 0..n {
        values.push(bracket_at(d, i, nf, &mut buf)? / nf.p_treated - gamma_bar);
    }
    let mean = crate::reduce::pairwise_sum(0, n, &|i| values[i]) / n as f64;
    let variance =
        crate::reduce::pairwise_sum(0, n, &|i| (values[i] - mean).powi(2)) / (n as f64 - 1.0);
    Ok(EifEvaluation {
        values,
        mean,
        variance,
    })
}

/// Triply robust estimate of the marginal ATT: the empirical mean of the
/// influence bracket divided by the treated share, with the influence
/// function's empirical standard deviation over sqrt(n) as standard error.
pub fn tr_estimate(d: &Dataset, nf: &NuisanceFits, level: f64) -> Result<AttEstimate> {
    if !(level > 0.0 && level < 1.0) {
        return Err(QivError::Domain(format!("confidence level {level}")));
    }
    let n = d.n();
    let mean_bracket = {
        let total = pairwise_sum(0, n, &|i| {
            let mut buf = Vec::new();
            match bracket_at(d, i, nf, &mut buf) {
                Ok(v) => v,
                Err(_) => f64::NAN,
            }
        });
        if total.is_nan() {
            let mut buf = Vec::new();
            for i in 0..n {
                bracket_at(d, i, nf, &mut buf)?;
            }
            return Err(QivError::Internal("non-finite influence sum".into()));
        }
        total / n as f64
    };
    let gamma_hat = mean_bracket / nf.p_treated;

    // psi_i = bracket_i / p_treated - gamma_hat has mean zero by construction
    let ssq = pairwise_sum(0, n, &|i| {
        let mut buf = Vec::new();
        let b = bracket_at(d, i, nf, &mut buf).unwrap_or(f64::NAN);
        (b / nf.p_treated - gamma_hat).powi(2)
    });
    let sd = (ssq / (n as f64 - 1.0)).sqrt();
    let se = sd / (n as f64).sqrt();
    let zq = normal_quantile(0.5 + level / 2.0);

    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("n".into(), n.to_string());
    diagnostics.insert("p_treated".into(), format!("{:.6}", nf.p_treated));
    for (k, v) in &nf.provenance {
        diagnostics.insert(format!("nuisance_{k}"), v.clone());
    }
    if nf.provenance.get("alpha").map(String::as_str) == Some("dr-refit")
        || nf.provenance.get("gamma").map(String::as_str) == Some("dr-refit")
    {
        diagnostics.insert(
            "se_caveat".into(),
            "SE treats nuisance estimation as first-order negligible (intersection model)".into(),
        );
    }
    if let Some(mle) = &nf.mle {
        diagnostics.insert("kappa_hat".into(), format!("{:.6}", mle.kappa_hat));
    }

    Ok(AttEstimate {
        gamma_hat,
        se,
        ci_low: gamma_hat - zq * se,
        ci_high: gamma_hat + zq * se,
        level,
        method: EstimatorKind::Tr,
        diagnostics,
    })
}

/// Null-constrained nuisances for the score-type test: logistic
/// propensities plus the outcome likelihood with `gamma(x)` forced to zero.
/// The confounding ratio entering the test moment comes from the null
/// likelihood, not a moment refit — refitting it with the same index
/// functions would zero the statistic identically.
#[derive(Debug)]
pub struct NullNuisances {
    pub z_fit: LogisticFit,
    pub a_fit: LogisticFit,
    pub mle_null: MleFit,
    z_design: Mat,
    a_design: Mat,
    qiv: usize,
    spec: ModelSpec,
}

/// Fit the null pipeline for [`dr_score_test`].
pub fn fit_null_nuisances(
    d: &Dataset,
    assignment: &CovariateAssignment,
    config: &TrConfig,
) -> Result<NullNuisances> {
    let qiv = config.qiv;
    let z_design = intercept_design(d, &assignment.treat_cols)?;
    let z_fit = fit_logistic(d.z_col(qiv), &z_design)?;
    let a_design = treatment_design(d, qiv, &assignment.treat_cols)?;
    let a_fit = fit_logistic(d.a(), &a_design)?;
    let mut spec = assignment.model_spec();
    spec.qiv_cols = vec![d.z_names()[qiv].clone()];
    let mle_null = fit_mle_null(d, &spec, &config.mle)?;
    if !mle_null.converged {
        return Err(QivError::NonConvergence("null outcome fit".into()));
    }
    Ok(NullNuisances {
        z_fit,
        a_fit,
        mle_null,
        z_design,
        a_design,
        qiv,
        spec,
    })
}

/// Doubly robust score-type test of the causal null, built from the
/// confounding-ratio moment with `gamma(X) == 0`.
///
/// The statistic is the quadratic form of the empirical moment vector
/// `mean[h(X) (Z - piz(X)) (Y(1-A) alpha(X) - YA)/P(A|Z,X)]` against its
/// estimating-equation-corrected covariance; the correction propagates
/// the sampling noise of the propensity coefficients and the null
/// likelihood fit through the moment, which is what makes the chi-square
/// reference valid. Degrees of freedom equal the dimension of `h`.
pub fn dr_score_test(d: &Dataset, nn: &NullNuisances, h: &Mat) -> Result<TestReport> {
    let n = d.n();
    let df = h.cols();
    if df == 0 {
        return Err(QivError::SingularCovariance("empty index function h".into()));
    }
    if h.rows() != n {
        return Err(QivError::Dimension("h rows != dataset rows".into()));
    }
    let qiv = nn.qiv;

    // per-row ingredients
    let y = d.y();
    let a = d.a();
    let mut resid = vec![0.0; n]; // Z - piz(X)
    let mut piz = vec![0.0; n];
    let mut p1 = vec![0.0; n]; // P(A=1|Z,X)
    let mut pa_obs = vec![0.0; n];
    let mut alpha_hat = vec![0.0; n];
    let mut buf = Vec::new();
    let mut resid_sq = 0.0;
    for i in 0..n {
        d.x_row_into(i, &mut buf);
        let z = d.z_col(qiv)[i] as f64;
        let pzi = nn.z_fit.predict(nn.z_design.row(i))?;
        piz[i] = pzi;
        resid[i] = z - pzi;
        resid_sq += resid[i] * resid[i];
        let p1i = nn.a_fit.predict(nn.a_design.row(i))?;
        p1[i] = p1i;
        pa_obs[i] = if a[i] == 1 { p1i } else { 1.0 - p1i };
        alpha_hat[i] = nn.mle_null.alpha_at(&buf);
    }
    check_instrument_variation(resid_sq / n as f64)?;

    let inner_num = |i: usize| -> f64 {
        (y[i] as f64) * (1.0 - a[i] as f64) * alpha_hat[i] - (y[i] as f64) * (a[i] as f64)
    };

    // moment rows and mean
    let mut m_rows = Mat::zeros(n, df);
    for i in 0..n {
        let base = resid[i] * inner_num(i) / pa_obs[i];
        let hr = h.row(i);
        for t in 0..df {
            m_rows.set(i, t, hr[t] * base);
        }
    }
    let m_bar: Vec<f64> = (0..df)
        .map(|t| pairwise_sum(0, n, &|i| m_rows.get(i, t)) / n as f64)
        .collect();

    // estimating-equation corrections: stack (z-glm, a-glm, null MLE)
    struct Block {
        k_mat: Mat, // df x p correction multiplier B J^{-1}
        u_rows: Mat,
    }
    let mut blocks: Vec<Block> = Vec::with_capacity(3);

    // block 1: piz coefficients
    {
        let pz_cols = nn.z_design.cols();
        let mut b = Mat::zeros(df, pz_cols);
        for i in 0..n {
            let w = -piz[i] * (1.0 - piz[i]) * inner_num(i) / pa_obs[i] / n as f64;
            let hr = h.row(i);
            let xr = nn.z_design.row(i);
            for t in 0..df {
                for c in 0..pz_cols {
                    let v = b.get(t, c) + w * hr[t] * xr[c];
                    b.set(t, c, v);
                }
            }
        }
        let j = score_jacobian(&nn.z_fit, &nn.z_design);
        let u = score_rows(&nn.z_fit, d.z_col(qiv), &nn.z_design);
        blocks.push(Block {
            k_mat: solve_correction(&b, &j)?,
            u_rows: u,
        });
    }
    // block 2: pia coefficients
    {
        let pa_cols = nn.a_design.cols();
        let mut b = Mat::zeros(df, pa_cols);
        for i in 0..n {
            let s = (2.0 * a[i] as f64 - 1.0) * p1[i] * (1.0 - p1[i]);
            let w = -resid[i] * inner_num(i) * s / (pa_obs[i] * pa_obs[i]) / n as f64;
            let hr = h.row(i);
            let xr = nn.a_design.row(i);
            for t in 0..df {
                for c in 0..pa_cols {
                    let v = b.get(t, c) + w * hr[t] * xr[c];
                    b.set(t, c, v);
                }
            }
        }
        let j = score_jacobian(&nn.a_fit, &nn.a_design);
        let u = score_rows(&nn.a_fit, d.a(), &nn.a_design);
        blocks.push(Block {
            k_mat: solve_correction(&b, &j)?,
            u_rows: u,
        });
    }
    // block 3: null-likelihood parameters (the moment touches only theta)
    {
        let designs = {
            let full = build_design(d, &nn.spec)?;
            let mut ds = full.clone();
            ds.beta_design = Mat::zeros(n, 0);
            ds.beta_names = Vec::new();
            ds
        };
        let k_null = nn.mle_null.phi_hat.len();
        let nt = nn.mle_null.phi_hat.theta.len();
        let mut b = Mat::zeros(df, k_null);
        for i in 0..n {
            // d inner / d theta = y(1-a) alpha x_theta / pa
            let w = resid[i] * (y[i] as f64) * (1.0 - a[i] as f64) * alpha_hat[i]
                / pa_obs[i]
                / n as f64;
            if w == 0.0 {
                continue;
            }
            let hr = h.row(i);
            let xt = designs.theta_design.row(i);
            for t in 0..df {
                for c in 0..nt {
                    let v = b.get(t, c) + w * hr[t] * xt[c];
                    b.set(t, c, v);
                }
            }
        }
        let j = mean_hessian(&nn.mle_null.phi_hat, d, &designs)?;
        let u = score_row_matrix(&nn.mle_null.phi_hat, d, &designs)?;
        blocks.push(Block {
            k_mat: solve_correction(&b, &j)?,
            u_rows: u,
        });
    }

    // corrected per-row moments and their covariance
    let corrected = |i: usize, t: usize| -> f64 {
        let mut v = m_rows.get(i, t);
        for blk in &blocks {
            let k_row = blk.k_mat.row(t);
            v -= dot(k_row, blk.u_rows.row(i));
        }
        v
    };
    let c_bar: Vec<f64> = (0..df)
        .map(|t| pairwise_sum(0, n, &|i| corrected(i, t)) / n as f64)
        .collect();
    let mut v_hat = Mat::zeros(df, df);
    let flat = pairwise_sum_vec(0, n, df * df, &|i, acc: &mut [f64]| {
        for t in 0..df {
            let ct = corrected(i, t) - c_bar[t];
            for s in 0..df {
                acc[t * df + s] += ct * (corrected(i, s) - c_bar[s]);
            }
        }
    });
    for t in 0..df {
        for s in 0..df {
            v_hat.set(t, s, flat[t * df + s] / n as f64);
        }
    }

    let l = cholesky(&v_hat)
        .map_err(|_| QivError::SingularCovariance("moment covariance".into()))?;
    let solved = chol_solve(&l, &m_bar);
    let statistic = (n as f64) * dot(&m_bar, &solved);
    if !statistic.is_finite() || statistic < 0.0 {
        return Err(QivError::Internal(format!(
            "score statistic {statistic} invalid"
        )));
    }

    let mut diagnostics = BTreeMap::new();
    diagnostics.insert(
        "moment_norm".into(),
        format!("{:.3e}", inf_norm(&m_bar)),
    );
    diagnostics.insert("df".into(), df.to_string());
    Ok(TestReport {
        statistic,
        df,
        p_value: chi2_sf(statistic, df),
        method: "dr-score".into(),
        diagnostics,
    })
}

/// Score test with the default index function: the gamma-model design.
pub fn dr_score_test_default(
    d: &Dataset,
    assignment: &CovariateAssignment,
    config: &TrConfig,
) -> Result<TestReport> {
    let nn = fit_null_nuisances(d, assignment, config)?;
    let h = intercept_design(d, &assignment.gamma_cols)?;
    dr_score_test(d, &nn, &h)
}

/// Solve `K J = B` for the correction multiplier `K` (J square).
fn solve_correction(b: &Mat, j: &Mat) -> Result<Mat> {
    let p = j.rows();
    let df = b.rows();
    // transpose J once; K row t solves J' x = B row t
    let mut jt = Mat::zeros(p, p);
    for r in 0..p {
        for c in 0..p {
            jt.set(r, c, j.get(c, r));
        }
    }
    let mut k = Mat::zeros(df, p);
    for t in 0..df {
        let x = lu_solve(&jt, b.row(t))
            .map_err(|_| QivError::SingularCovariance("estimating-equation Jacobian".into()))?;
        k.row_mut(t).copy_from_slice(&x);
    }
    Ok(k)
}

/// Build injected nuisances from closures (used for oracle checks where
/// the true data-generating functions are known).
#[allow(clippy::too_many_arguments)]
pub fn injected_nuisances(
    pi_z: XFn,
    pi_a: ZxFn,
    e0: ZxFn,
    alpha_fn: XFn,
    gamma_fn: XFn,
    p_treated: f64,
    qiv: usize,
) -> NuisanceFits {
    let (g2, a2, e02) = (gamma_fn.clone(), alpha_fn.clone(), e0.clone());
    let e: AzxFn = Arc::new(move |a: f64, z: f64, x: &[f64]| {
        clamp_prob(g2(x) * a + a2(x).powf(a) * e02(z, x))
    });
    let mut provenance = BTreeMap::new();
    for key in ["pi_z", "pi_a", "e0", "alpha", "gamma"] {
        provenance.insert(key.into(), "injected".into());
    }
    NuisanceFits {
        pi_z,
        pi_a,
        e0,
        e,
        alpha_fn,
        gamma_fn,
        p_treated,
        qiv,
        provenance,
        mle: None,
    }
}
