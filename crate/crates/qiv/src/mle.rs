//! Bounded maximum likelihood estimation under the GOP parameterization.
//!
//! The outcome law is `Y | A,Z,X ~ Bernoulli(gamma(X) A + alpha(X)^A p00(Z,X))`
//! with `p00` recovered from the links by the cubic solver, so every fitted
//! probability is automatically inside the unit interval and the ATT
//! estimate inside (-1, 1). Scores are analytic: the baseline-risk
//! derivative comes from implicit differentiation of the cubic. The
//! observed information is a central finite difference of the analytic
//! score; its minimum eigenvalue over the parameter count is the
//! weak-identification diagnostic `kappa_hat` (values at or below 10 flag
//! weak identification).

use std::collections::BTreeMap;

use serde::Serialize;

use crate::design::{
    build_design, check_full_rank, resolve_spec, Dataset, DesignSet, ModelSpec, ParamVector,
    ResolvedSpec,
};
use crate::error::{QivError, Result};
use crate::gop::{p00_partials, solve_p00, GopPoint};
use crate::linalg::{dot, inf_norm, quad_form, spd_inverse, sym_eigenvalues, Mat};
use crate::optim::{bfgs, nelder_mead};
use crate::prob::{chi2_sf, logit, normal_quantile};
use crate::reduce::{pairwise_sum, pairwise_sum_vec};

/// Likelihood clamp; fitted probabilities enter the log-likelihood
/// clamped into `[EPS_LIK, 1 - EPS_LIK]`.
pub const EPS_LIK: f64 = 1e-10;

/// Gradient infinity-norm (mean scale) below which a fit is converged.
const CONVERGED_GTOL: f64 = 1e-6;

/// Optimizer settings for [`fit_mle`].
#[derive(Debug, Clone)]
pub struct MleConfig {
    /// Target gradient infinity-norm on the mean log-likelihood.
    pub gtol: f64,
    /// BFGS iteration cap per attempt.
    pub max_iter: usize,
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig {
            gtol: 1e-8,
            max_iter: 300,
        }
    }
}

/// Which estimator produced an [`AttEstimate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Mle,
    Tr,
    Nonparametric,
}

/// A marginal ATT estimate with Wald interval and diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct AttEstimate {
    pub gamma_hat: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Confidence level of the interval.
    pub level: f64,
    pub method: EstimatorKind,
    pub diagnostics: BTreeMap<String, String>,
}

/// A test of the causal null hypothesis.
#[derive(Debug, Clone, Serialize)]
pub struct TestReport {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub method: String,
    pub diagnostics: BTreeMap<String, String>,
}

/// A fitted GOP maximum likelihood estimate.
#[derive(Debug, Clone)]
pub struct MleFit {
    pub phi_hat: ParamVector,
    /// Inverse observed information (sum scale); absent when the observed
    /// information was numerically singular.
    pub covariance: Option<Mat>,
    /// Maximized log-likelihood (sum over units).
    pub loglik: f64,
    /// Weak-identification diagnostic: minimum eigenvalue of the negative
    /// Hessian over the parameter count.
    pub kappa_hat: f64,
    pub converged: bool,
    pub iterations: usize,
    pub diagnostics: BTreeMap<String, String>,
    /// Column resolution used by the fit, for evaluating the fitted links
    /// at arbitrary points.
    pub resolved: ResolvedSpec,
    pub n: usize,
}

impl MleFit {
    /// Fitted conditional ATT at a full covariate row.
    pub fn gamma_at(&self, x_full: &[f64]) -> f64 {
        self.resolved.gamma.eval(&self.phi_hat.beta, x_full).tanh()
    }

    /// Fitted confounding ratio at a full covariate row.
    pub fn alpha_at(&self, x_full: &[f64]) -> f64 {
        self.resolved.alpha.eval(&self.phi_hat.theta, x_full).exp()
    }

    /// Fitted GOP at instrument values `z_row` and a full covariate row.
    pub fn gop_at(&self, z_row: &[f64], x_full: &[f64]) -> f64 {
        (self.phi_hat.omega0
            + dot(&self.phi_hat.omega, z_row)
            + self.resolved.gop.eval_no_intercept(&self.phi_hat.eta, x_full))
        .exp()
    }

    /// Fitted baseline risk `p00(z, x)`.
    pub fn p00_at(&self, z_row: &[f64], x_full: &[f64]) -> Result<f64> {
        let g = GopPoint::new(
            self.gamma_at(x_full),
            self.alpha_at(x_full),
            self.gop_at(z_row, x_full),
        )?;
        solve_p00(&g)
    }

    /// Fitted outcome risk `gamma(x) a + alpha(x)^a p00(z, x)`.
    pub fn risk_at(&self, a: u8, z_row: &[f64], x_full: &[f64]) -> Result<f64> {
        let p00 = self.p00_at(z_row, x_full)?;
        let gamma = self.gamma_at(x_full);
        let alpha = self.alpha_at(x_full);
        Ok(if a == 1 { gamma + alpha * p00 } else { p00 })
    }
}

/// Outcome risk `P(Y=1 | A=a, Z=z, X=x; phi)` with a shared covariate row
/// feeding all three links.
pub fn risk(phi: &ParamVector, a: u8, z_row: &[f64], x_row: &[f64]) -> Result<f64> {
    phi.validate()?;
    let g = crate::design::eval_links(phi, x_row, z_row)?;
    let p00 = solve_p00(&g)?;
    Ok(if a == 1 {
        g.gamma + g.alpha * p00
    } else {
        p00
    })
}

#[derive(Debug, Clone, Copy)]
struct RowEval {
    p: f64,
    gamma: f64,
    alpha: f64,
    gop: f64,
    p00: f64,
    dp00: [f64; 3],
}

/// Risk and baseline-risk partials at row `i`; `None` marks an infeasible
/// parameter region (implied risks do not exist).
fn eval_row(designs: &DesignSet, phi: &ParamVector, a: u8, i: usize, partials: bool) -> Result<RowEval> {
    let g = designs.links_at(phi, i)?;
    let p00 = solve_p00(&g)?;
    let dp00 = if partials {
        p00_partials(&g, p00)?
    } else {
        [0.0; 3]
    };
    let p = if a == 1 {
        g.gamma + g.alpha * p00
    } else {
        p00
    };
    Ok(RowEval {
        p,
        gamma: g.gamma,
        alpha: g.alpha,
        gop: g.gop,
        p00,
        dp00,
    })
}

/// Log-likelihood of `phi` (sum over units, clamped at [`EPS_LIK`]).
pub fn loglik(phi: &ParamVector, d: &Dataset, designs: &DesignSet) -> Result<f64> {
    phi.validate()?;
    let n = d.n();
    let y = d.y();
    let a = d.a();
    let total = pairwise_sum(0, n, &|i| match eval_row(designs, phi, a[i], i, false) {
        Ok(row) => {
            let p = row.p.clamp(EPS_LIK, 1.0 - EPS_LIK);
            if y[i] == 1 {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        }
        Err(_) => f64::NAN,
    });
    if total.is_nan() {
        // rescan sequentially for a precise error
        for i in 0..n {
            eval_row(designs, phi, a[i], i, false)?;
        }
        return Err(QivError::Internal("NaN log-likelihood".into()));
    }
    Ok(total)
}

/// Analytic score of the log-likelihood (sum over units), in the flat
/// parameter order `[beta, theta, omega0, omega, eta]`.
pub fn loglik_grad(phi: &ParamVector, d: &Dataset, designs: &DesignSet) -> Result<Vec<f64>> {
    phi.validate()?;
    let n = d.n();
    let k = phi.len();
    let g = pairwise_sum_vec(0, n, k, &|i, acc: &mut [f64]| {
        if !accumulate_row_score(designs, phi, d, i, acc, 1.0) {
            acc[0] = f64::NAN;
        }
    });
    if g.iter().any(|v| v.is_nan()) {
        for i in 0..n {
            eval_row(designs, phi, d.a()[i], i, true)?;
        }
        return Err(QivError::Internal("NaN score".into()));
    }
    Ok(g)
}

/// Adds `weight` times row `i`'s score contribution into `acc`.
/// Returns false when the row's implied risks do not exist.
fn accumulate_row_score(
    designs: &DesignSet,
    phi: &ParamVector,
    d: &Dataset,
    i: usize,
    acc: &mut [f64],
    weight: f64,
) -> bool {
    let a = d.a()[i];
    let y = d.y()[i] as f64;
    let row = match eval_row(designs, phi, a, i, true) {
        Ok(r) => r,
        Err(_) => return false,
    };
    if row.p <= EPS_LIK || row.p >= 1.0 - EPS_LIK {
        return true; // clamped likelihood is locally flat
    }
    let dll_dp = (y - row.p) / (row.p * (1.0 - row.p)) * weight;
    let af = a as f64;
    let alpha_pow = if a == 1 { row.alpha } else { 1.0 };
    let [dpg, dpa, dpgop] = row.dp00;

    let nb = phi.beta.len();
    let nt = phi.theta.len();
    let nm = phi.omega.len();

    // beta block: dp/dbeta_j = (a + alpha^a dp00/dgamma)(1-gamma^2) xb_j
    let cb = dll_dp * (af + alpha_pow * dpg) * (1.0 - row.gamma * row.gamma);
    let xb = designs.beta_design.row(i);
    for j in 0..nb {
        acc[j] += cb * xb[j];
    }
    // theta block: dp/dtheta_j = alpha (a p00 + alpha^a dp00/dalpha) xt_j
    let ct = dll_dp * row.alpha * (af * row.p00 + alpha_pow * dpa);
    let xt = designs.theta_design.row(i);
    for j in 0..nt {
        acc[nb + j] += ct * xt[j];
    }
    // GOP block: dp/dw = alpha^a dp00/dgop * gop * [1, z, x]
    let cg = dll_dp * alpha_pow * dpgop * row.gop;
    acc[nb + nt] += cg;
    let zr = designs.gop_z.row(i);
    for j in 0..nm {
        acc[nb + nt + 1 + j] += cg * zr[j];
    }
    let xg = designs.gop_x.row(i);
    for j in 0..xg.len() {
        acc[nb + nt + 1 + nm + j] += cg * xg[j];
    }
    true
}

/// Designs with the gamma block removed, for null fits with `gamma == 0`.
fn null_designs(designs: &DesignSet) -> DesignSet {
    let mut ds = designs.clone();
    ds.beta_design = Mat::zeros(designs.n(), 0);
    ds.beta_names = Vec::new();
    ds
}

fn rank_checks(designs: &DesignSet) -> Result<()> {
    if designs.beta_design.cols() > 0 {
        check_full_rank(&designs.beta_design, "gamma design")?;
    }
    check_full_rank(&designs.theta_design, "alpha design")?;
    // GOP design includes its intercept plus z and x blocks
    let n = designs.n();
    let mz = designs.gop_z.cols();
    let mx = designs.gop_x.cols();
    let mut full = Mat::zeros(n, 1 + mz + mx);
    for i in 0..n {
        full.set(i, 0, 1.0);
        for j in 0..mz {
            full.set(i, 1 + j, designs.gop_z.get(i, j));
        }
        for j in 0..mx {
            full.set(i, 1 + mz + j, designs.gop_x.get(i, j));
        }
    }
    check_full_rank(&full, "gop design")
}

/// Maximize the GOP likelihood for `spec` on `d`.
///
/// Attempts, in order: BFGS from the zero vector; BFGS from the zero
/// vector with the marginal-odds initialization `omega0 = 3 logit(mean y)`;
/// Nelder-Mead from the best point so far. The attempt trail is recorded
/// in `diagnostics`. Non-convergence is reported through the flag, not an
/// error; a singular observed information leaves `covariance` empty.
pub fn fit_mle(d: &Dataset, spec: &ModelSpec, config: &MleConfig) -> Result<MleFit> {
    let designs = build_design(d, spec)?;
    fit_mle_on_designs(d, spec, designs, config, None)
}

/// Like [`fit_mle`] but with an explicit warm start tried first.
pub fn fit_mle_from(
    d: &Dataset,
    spec: &ModelSpec,
    config: &MleConfig,
    start: &ParamVector,
) -> Result<MleFit> {
    let designs = build_design(d, spec)?;
    fit_mle_on_designs(d, spec, designs, config, Some(start.flatten()))
}

/// Null-model fit: `gamma(x)` fixed at zero (empty beta block).
pub fn fit_mle_null(d: &Dataset, spec: &ModelSpec, config: &MleConfig) -> Result<MleFit> {
    let designs = null_designs(&build_design(d, spec)?);
    fit_mle_on_designs(d, spec, designs, config, None)
}


fn fit_mle_on_designs(
    d: &Dataset,
    spec: &ModelSpec,
    designs: DesignSet,
    config: &MleConfig,
    warm_start: Option<Vec<f64>>,
) -> Result<MleFit> {
    rank_checks(&designs)?;
    let resolved = resolve_spec(d, spec)?;
    let n = d.n();
    let template = designs.zero_params();
    let k = template.len();

    let objective = |flat: &[f64]| -> f64 {
        let phi = template.unflatten_like(flat);
        match loglik(&phi, d, &designs) {
            Ok(v) => -v / n as f64,
            Err(_) => f64::INFINITY,
        }
    };
    let gradient = |flat: &[f64]| -> Vec<f64> {
        let phi = template.unflatten_like(flat);
        match loglik_grad(&phi, d, &designs) {
            Ok(g) => g.iter().map(|v| -v / n as f64).collect(),
            Err(_) => vec![f64::NAN; k],
        }
    };

    let mut diagnostics = BTreeMap::new();
    let start_zero = warm_start.unwrap_or_else(|| vec![0.0; k]);
    let mut best = bfgs(&start_zero, objective, gradient, config.gtol, config.max_iter);
    let mut attempts = vec![format!(
        "bfgs(start): f={:.6e} grad={:.2e} converged={}",
        best.f, best.grad_norm, best.converged
    )];

    if !best.converged {
        let ybar = (d.y().iter().map(|&v| v as f64).sum::<f64>() / n as f64)
            .clamp(1e-6, 1.0 - 1e-6);
        let mut start = vec![0.0; k];
        let omega0_pos = template.beta.len() + template.theta.len();
        start[omega0_pos] = 3.0 * logit(ybar);
        let second = bfgs(&start, objective, gradient, config.gtol, config.max_iter);
        attempts.push(format!(
            "bfgs(marginal-odds init): f={:.6e} grad={:.2e} converged={}",
            second.f, second.grad_norm, second.converged
        ));
        if second.f < best.f || (second.converged && !best.converged) {
            best = second;
        }
    }

    // Newton refinement from the best point: the weak-identification
    // direction leaves the likelihood nearly flat, where quasi-Newton
    // steps stall short of the gradient tolerance. One exact-curvature
    // step per iteration finishes the job.
    if !best.converged {
        match newton_refine(&template, d, &designs, &best.x, config.gtol) {
            Ok((x, grad_norm, steps)) => {
                let f = objective(&x);
                attempts.push(format!(
                    "newton refine: {steps} steps, grad={grad_norm:.2e}"
                ));
                if f <= best.f || grad_norm < best.grad_norm {
                    best.x = x;
                    best.f = f;
                    best.grad_norm = grad_norm;
                    best.converged = grad_norm < config.gtol;
                }
            }
            Err(e) => {
                attempts.push(format!("newton refine failed: {e}"));
            }
        }
    }

    if !best.converged {
        let nm = nelder_mead(&best.x, objective, 200 * k * k);
        // polish simplex output so the gradient criterion is meaningful
        let polished = bfgs(&nm.x, objective, gradient, config.gtol, config.max_iter);
        attempts.push(format!(
            "nelder-mead fallback: f={:.6e} then bfgs grad={:.2e}",
            nm.f, polished.grad_norm
        ));
        if polished.f <= best.f {
            best = polished;
        }
    }
    diagnostics.insert("optimizer_attempts".into(), attempts.join("; "));

    let phi_hat = template.unflatten_like(&best.x);
    let loglik_hat = loglik(&phi_hat, d, &designs)?;
    let converged = best.grad_norm < CONVERGED_GTOL;

    // observed information by central differences of the analytic score
    let mean_grad = |flat: &[f64]| -> Result<Vec<f64>> {
        let phi = template.unflatten_like(flat);
        Ok(loglik_grad(&phi, d, &designs)?
            .iter()
            .map(|v| v / n as f64)
            .collect())
    };
    let mut hessian = Mat::zeros(k, k);
    let mut hessian_ok = true;
    'outer: for j in 0..k {
        let h = 1e-5 * best.x[j].abs().max(1.0);
        let mut up = best.x.clone();
        let mut dn = best.x.clone();
        up[j] += h;
        dn[j] -= h;
        match (mean_grad(&up), mean_grad(&dn)) {
            (Ok(gu), Ok(gd)) => {
                for i in 0..k {
                    hessian.set(i, j, (gu[i] - gd[i]) / (2.0 * h));
                }
            }
            _ => {
                hessian_ok = false;
                break 'outer;
            }
        }
    }

    let (covariance, kappa_hat) = if hessian_ok {
        // negative Hessian of the summed log-likelihood, symmetrized
        let mut info = Mat::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                let v = -0.5 * (hessian.get(i, j) + hessian.get(j, i)) * n as f64;
                info.set(i, j, v);
            }
        }
        let eig = sym_eigenvalues(&info);
        let kappa = eig[0] / k as f64;
        match spd_inverse(&info) {
            Ok(cov) => (Some(cov), kappa),
            Err(_) => {
                diagnostics.insert(
                    "covariance".into(),
                    "observed information singular; covariance omitted".into(),
                );
                (None, kappa)
            }
        }
    } else {
        diagnostics.insert(
            "covariance".into(),
            "Hessian evaluation left the feasible region; covariance omitted".into(),
        );
        (None, f64::NAN)
    };

    Ok(MleFit {
        phi_hat,
        covariance,
        loglik: loglik_hat,
        kappa_hat,
        converged,
        iterations: best.iterations,
        diagnostics,
        resolved,
        n,
    })
}

/// Ridged Newton ascent on the mean log-likelihood from a near-optimal
/// start. Returns the refined point, its gradient infinity norm, and the
/// number of Newton steps taken.
fn newton_refine(
    template: &ParamVector,
    d: &Dataset,
    designs: &DesignSet,
    start: &[f64],
    gtol: f64,
) -> Result<(Vec<f64>, f64, usize)> {
    let n = d.n() as f64;
    let k = start.len();
    let mut x = start.to_vec();
    let mut f = -loglik(&template.unflatten_like(&x), d, designs)? / n;
    let mut steps = 0usize;
    for _ in 0..25 {
        let phi = template.unflatten_like(&x);
        let g: Vec<f64> = loglik_grad(&phi, d, designs)?
            .iter()
            .map(|v| -v / n)
            .collect();
        let gn = inf_norm(&g);
        if gn < gtol {
            return Ok((x, gn, steps));
        }
        let h = mean_hessian(&phi, d, designs)?; // of the log-likelihood
        // solve (-H + ridge I) s = -g, escalating the ridge until SPD
        let mut ridge = 0.0;
        let step = loop {
            let mut a = Mat::zeros(k, k);
            for i in 0..k {
                for j in 0..k {
                    a.set(i, j, -h.get(i, j) + if i == j { ridge } else { 0.0 });
                }
            }
            match crate::linalg::cholesky(&a) {
                Ok(l) => {
                    let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
                    break crate::linalg::chol_solve(&l, &neg_g);
                }
                Err(_) => {
                    ridge = if ridge == 0.0 { 1e-10 } else { ridge * 100.0 };
                    if ridge > 1.0 {
                        return Ok((x, gn, steps));
                    }
                }
            }
        };
        // backtracking on the mean negative log-likelihood
        let mut t = 1.0;
        let mut advanced = false;
        for _ in 0..40 {
            let cand: Vec<f64> = (0..k).map(|j| x[j] + t * step[j]).collect();
            let fc = match loglik(&template.unflatten_like(&cand), d, designs) {
                Ok(v) => -v / n,
                Err(_) => f64::INFINITY,
            };
            if fc.is_finite() && fc <= f + 1e-14 * (1.0 + f.abs()) {
                x = cand;
                f = fc;
                advanced = true;
                break;
            }
            t *= 0.5;
        }
        steps += 1;
        if !advanced {
            let phi = template.unflatten_like(&x);
            let g: Vec<f64> = loglik_grad(&phi, d, designs)?
                .iter()
                .map(|v| -v / n)
                .collect();
            return Ok((x, inf_norm(&g), steps));
        }
    }
    let phi = template.unflatten_like(&x);
    let g: Vec<f64> = loglik_grad(&phi, d, designs)?
        .iter()
        .map(|v| -v / n)
        .collect();
    Ok((x, inf_norm(&g), steps))
}

/// Plug-in marginal ATT: the average fitted `gamma(x)` over treated units,
/// with a delta-method standard error from the fit covariance.
pub fn marginal_att_plugin(
    fit: &MleFit,
    d: &Dataset,
    spec: &ModelSpec,
    level: f64,
) -> Result<AttEstimate> {
    if !(level > 0.0 && level < 1.0) {
        return Err(QivError::Domain(format!("confidence level {level}")));
    }
    let designs = build_design(d, spec)?;
    let a = d.a();
    let n1 = a.iter().filter(|&&v| v == 1).count();
    if n1 == 0 {
        return Err(QivError::NoTreatedUnits);
    }
    let nb = fit.phi_hat.beta.len();
    let mut gamma_sum = 0.0;
    let mut dbeta = vec![0.0; nb];
    for i in 0..d.n() {
        if a[i] != 1 {
            continue;
        }
        let xb = designs.beta_design.row(i);
        let g = dot(&fit.phi_hat.beta, xb).tanh();
        gamma_sum += g;
        let w = (1.0 - g * g) / n1 as f64;
        for j in 0..nb {
            dbeta[j] += w * xb[j];
        }
    }
    let gamma_hat = gamma_sum / n1 as f64;

    let k = fit.phi_hat.len();
    let se = match &fit.covariance {
        Some(cov) => {
            let mut grad = vec![0.0; k];
            grad[..nb].copy_from_slice(&dbeta);
            quad_form(cov, &grad).max(0.0).sqrt()
        }
        None => {
            return Err(QivError::SingularCovariance(
                "no covariance available for the plug-in ATT".into(),
            ))
        }
    };
    let zq = normal_quantile(0.5 + level / 2.0);
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("kappa_hat".into(), format!("{:.6}", fit.kappa_hat));
    diagnostics.insert("n_treated".into(), n1.to_string());
    if !fit.converged {
        diagnostics.insert("warning".into(), "MLE did not converge".into());
    }
    Ok(AttEstimate {
        gamma_hat,
        se,
        ci_low: gamma_hat - zq * se,
        ci_high: gamma_hat + zq * se,
        level,
        method: EstimatorKind::Mle,
        diagnostics,
    })
}

/// Likelihood-ratio test of the causal null `gamma(z,x) = 0`:
/// twice the log-likelihood gap between the full fit and the null fit
/// (beta block dropped), referred to chi-square with `dim(beta)` degrees
/// of freedom.
pub fn lr_test_null(d: &Dataset, spec: &ModelSpec, config: &MleConfig) -> Result<TestReport> {
    let null = fit_mle_null(d, spec, config)?;
    if !null.converged {
        return Err(QivError::NonConvergence("null model fit".into()));
    }
    // The full likelihood can be multimodal in small samples. The
    // chi-square reference describes the consistent root — the full-model
    // mode reached from the null solution — so the test fits the full
    // model warm-started there (taking a maximum over modes would
    // stochastically inflate the statistic). Every accepted optimizer
    // step improves the likelihood, so the statistic is nonnegative by
    // construction.
    let q_gamma = build_design(d, spec)?.beta_design.cols();
    let null_start = ParamVector {
        beta: vec![0.0; q_gamma],
        theta: null.phi_hat.theta.clone(),
        omega0: null.phi_hat.omega0,
        omega: null.phi_hat.omega.clone(),
        eta: null.phi_hat.eta.clone(),
    };
    let mut full = fit_mle_from(d, spec, config, &null_start)?;
    if !full.converged {
        // fall back to the standard start policy before giving up
        let retry = fit_mle(d, spec, config)?;
        if retry.converged {
            full = retry;
        } else {
            return Err(QivError::NonConvergence("full model fit".into()));
        }
    }
    let stat = 2.0 * (full.loglik - null.loglik);
    if stat < -1e-8 {
        return Err(QivError::Internal(format!(
            "null likelihood exceeds full likelihood by {:.3e}",
            -stat
        )));
    }
    let stat = stat.max(0.0);
    let df = full.phi_hat.beta.len();
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("loglik_full".into(), format!("{:.6}", full.loglik));
    diagnostics.insert("loglik_null".into(), format!("{:.6}", null.loglik));
    Ok(TestReport {
        statistic: stat,
        df,
        p_value: chi2_sf(stat, df),
        method: "likelihood-ratio".into(),
        diagnostics,
    })
}

/// Per-row score contributions at `phi` (n x k), used by the score test's
/// estimating-equation correction.
pub(crate) fn score_row_matrix(
    phi: &ParamVector,
    d: &Dataset,
    designs: &DesignSet,
) -> Result<Mat> {
    let n = d.n();
    let k = phi.len();
    let mut m = Mat::zeros(n, k);
    for i in 0..n {
        let mut acc = vec![0.0; k];
        if !accumulate_row_score(designs, phi, d, i, &mut acc, 1.0) {
            return Err(QivError::Internal(format!(
                "implied risks do not exist at row {i}"
            )));
        }
        m.row_mut(i).copy_from_slice(&acc);
    }
    Ok(m)
}

/// Mean Hessian of the log-likelihood at `phi` by central differences of
/// the analytic score, symmetrized.
pub(crate) fn mean_hessian(
    phi: &ParamVector,
    d: &Dataset,
    designs: &DesignSet,
) -> Result<Mat> {
    let n = d.n() as f64;
    let flat = phi.flatten();
    let k = flat.len();
    let mut h = Mat::zeros(k, k);
    for j in 0..k {
        let step = 1e-5 * flat[j].abs().max(1.0);
        let mut up = flat.clone();
        let mut dn = flat.clone();
        up[j] += step;
        dn[j] -= step;
        let gu = loglik_grad(&phi.unflatten_like(&up), d, designs)?;
        let gd = loglik_grad(&phi.unflatten_like(&dn), d, designs)?;
        for i in 0..k {
            h.set(i, j, (gu[i] - gd[i]) / (2.0 * step) / n);
        }
    }
    for i in 0..k {
        for j in 0..i {
            let v = 0.5 * (h.get(i, j) + h.get(j, i));
            h.set(i, j, v);
            h.set(j, i, v);
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = StdRng::seed_from_u64(seed);
        let x1: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let z: Vec<u8> = (0..n).map(|_| (rng.gen::<f64>() < 0.4) as u8).collect();
        let mut a: Vec<u8> = (0..n).map(|_| (rng.gen::<f64>() < 0.5) as u8).collect();
        a[0] = 1;
        let y: Vec<u8> = (0..n).map(|_| (rng.gen::<f64>() < 0.45) as u8).collect();
        Dataset::new(
            y,
            a,
            vec![z],
            vec![x1, x2],
            vec!["z".into()],
            vec!["x1".into(), "x2".into()],
        )
        .unwrap()
    }

    fn random_phi(rng: &mut StdRng, scale: f64) -> ParamVector {
        let mut phi = ParamVector::zeros(2, 2, 1, 2);
        for v in phi
            .beta
            .iter_mut()
            .chain(phi.theta.iter_mut())
            .chain(phi.omega.iter_mut())
            .chain(phi.eta.iter_mut())
        {
            *v = rng.gen_range(-scale..scale);
        }
        phi.omega0 = rng.gen_range(-scale..scale);
        phi
    }

    #[test]
    fn risk_identity_and_a0() {
        let phi = ParamVector::zeros(2, 2, 1, 2);
        let r = risk(&phi, 0, &[1.0], &[0.3, -0.2]).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
        let r = risk(&phi, 1, &[0.0], &[1.0, 2.0]).unwrap();
        assert!((r - 0.5).abs() < 1e-12);

        // a = 0 returns p00 itself
        let mut rng = StdRng::seed_from_u64(2);
        let phi = random_phi(&mut rng, 0.5);
        let x = [0.4, -0.1];
        let z = [1.0];
        let g = crate::design::eval_links(&phi, &x, &z).unwrap();
        let p00 = solve_p00(&g).unwrap();
        assert_eq!(risk(&phi, 0, &z, &x).unwrap(), p00);
    }

    #[test]
    fn risk_composes_gamma_alpha_p00() {
        // gamma = 0.1, alpha = 1.2, gop chosen so p00 = 0.5:
        // odds(0.7) odds(0.6) odds(0.5) = (7/3)(3/2)(1) = 3.5
        let g = GopPoint::new(0.1, 1.2, 3.5).unwrap();
        let p00 = crate::gop::solve_p00_bisection(&g).unwrap();
        assert!((p00 - 0.5).abs() < 1e-9);
        let mut phi = ParamVector::zeros(0, 0, 1, 0);
        phi.beta = vec![0.1_f64.atanh()];
        phi.theta = vec![1.2_f64.ln()];
        phi.omega0 = 3.5_f64.ln();
        let r = risk(&phi, 1, &[0.0], &[]).unwrap();
        assert!((r - 0.7).abs() < 1e-9);
    }

    #[test]
    fn loglik_at_zero_is_n_log_half() {
        let d = random_dataset(257, 4);
        let spec = ModelSpec::shared(&["x1", "x2"]);
        let designs = build_design(&d, &spec).unwrap();
        let phi = designs.zero_params();
        let ll = loglik(&phi, &d, &designs).unwrap();
        assert!((ll - 257.0 * 0.5_f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn loglik_invariant_to_row_permutation() {
        let d = random_dataset(512, 9);
        let spec = ModelSpec::shared(&["x1", "x2"]);
        let designs = build_design(&d, &spec).unwrap();
        let mut rng = StdRng::seed_from_u64(1);
        let phi = random_phi(&mut rng, 0.4);
        let ll = loglik(&phi, &d, &designs).unwrap();

        // reverse the rows
        let n = d.n();
        let rev = |v: &[u8]| -> Vec<u8> { v.iter().rev().copied().collect() };
        let revf = |v: &[f64]| -> Vec<f64> { v.iter().rev().copied().collect() };
        let d2 = Dataset::new(
            rev(d.y()),
            rev(d.a()),
            vec![rev(d.z_col(0))],
            vec![revf(d.x_col(0)), revf(d.x_col(1))],
            vec!["z".into()],
            vec!["x1".into(), "x2".into()],
        )
        .unwrap();
        let designs2 = build_design(&d2, &spec).unwrap();
        let ll2 = loglik(&phi, &d2, &designs2).unwrap();
        assert!((ll - ll2).abs() < 1e-9 * (1.0 + ll.abs()), "{ll} vs {ll2}");
        let _ = n;
    }

    #[test]
    fn gradient_doubles_exactly_on_duplicated_data() {
        let d = random_dataset(300, 12);
        let spec = ModelSpec::shared(&["x1", "x2"]);
        let designs = build_design(&d, &spec).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        let phi = random_phi(&mut rng, 0.3);
        let g1 = loglik_grad(&phi, &d, &designs).unwrap();

        let dup = |v: &[u8]| -> Vec<u8> { [v, v].concat() };
        let dupf = |v: &[f64]| -> Vec<f64> { [v, v].concat() };
        let d2 = Dataset::new(
            dup(d.y()),
            dup(d.a()),
            vec![dup(d.z_col(0))],
            vec![dupf(d.x_col(0)), dupf(d.x_col(1))],
            vec!["z".into()],
            vec!["x1".into(), "x2".into()],
        )
        .unwrap();
        let designs2 = build_design(&d2, &spec).unwrap();
        let g2 = loglik_grad(&phi, &d2, &designs2).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!((2.0 * a).to_bits(), b.to_bits());
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let d = random_dataset(200, 21);
        let spec = ModelSpec::shared(&["x1", "x2"]);
        let designs = build_design(&d, &spec).unwrap();
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..10 {
            let phi = random_phi(&mut rng, 0.5);
            if loglik(&phi, &d, &designs).is_err() {
                continue;
            }
            let g = loglik_grad(&phi, &d, &designs).unwrap();
            let flat = phi.flatten();
            for j in 0..flat.len() {
                let h = 1e-6 * flat[j].abs().max(1.0);
                let mut up = flat.clone();
                let mut dn = flat.clone();
                up[j] += h;
                dn[j] -= h;
                let lu = loglik(&phi.unflatten_like(&up), &d, &designs).unwrap();
                let ld = loglik(&phi.unflatten_like(&dn), &d, &designs).unwrap();
                let fd = (lu - ld) / (2.0 * h);
                let denom = fd.abs().max(1e-3);
                assert!(
                    ((g[j] - fd) / denom).abs() < 1e-5,
                    "component {j}: analytic {} fd {}",
                    g[j],
                    fd
                );
            }
        }
    }

    /// Identified data: the simulation DGP with an informative instrument.
    fn dgp_dataset(n: usize, seed: u64) -> Dataset {
        let spec =
            crate::simgen::ScenarioSpec::new(crate::simgen::Scenario::AllCorrect, n, seed, 1)
                .unwrap();
        crate::simgen::simulate_dataset(&spec).unwrap()
    }

    #[test]
    fn plugin_zero_beta_gives_zero() {
        let d = dgp_dataset(800, 31);
        let spec = ModelSpec::shared(&["x1", "x2"]);
        let fit = fit_mle(&d, &spec, &MleConfig::default()).unwrap();
        let mut fixed = fit.clone();
        fixed.phi_hat.beta = vec![0.0; fixed.phi_hat.beta.len()];
        let est = marginal_att_plugin(&fixed, &d, &spec, 0.95).unwrap();
        assert_eq!(est.gamma_hat, 0.0);
    }

    #[test]
    fn plugin_intercept_only_is_tanh_beta0() {
        let d = dgp_dataset(800, 32);
        let mut spec = ModelSpec::shared(&["x1", "x2"]);
        spec.gamma_cols = vec![];
        let fit = fit_mle(&d, &spec, &MleConfig::default()).unwrap();
        let est = marginal_att_plugin(&fit, &d, &spec, 0.95).unwrap();
        assert!((est.gamma_hat - fit.phi_hat.beta[0].tanh()).abs() < 1e-14);
        assert!(est.ci_low < est.gamma_hat && est.gamma_hat < est.ci_high);
    }

    #[test]
    fn plugin_always_inside_unit_interval() {
        let mut rng = StdRng::seed_from_u64(8);
        let d = dgp_dataset(400, 33);
        let spec = ModelSpec::shared(&["x1", "x2"]);
        let fit = fit_mle(&d, &spec, &MleConfig::default()).unwrap();
        for _ in 0..50 {
            let mut f2 = fit.clone();
            for v in f2.phi_hat.beta.iter_mut() {
                *v = rng.gen_range(-8.0..8.0);
            }
            let est = marginal_att_plugin(&f2, &d, &spec, 0.95).unwrap();
            assert!(est.gamma_hat > -1.0 && est.gamma_hat < 1.0);
        }
        // tanh saturates to exactly +-1.0 in f64 beyond |x| ~ 19; even then
        // the plug-in cannot escape the closed interval
        let mut f2 = fit.clone();
        for v in f2.phi_hat.beta.iter_mut() {
            *v = 50.0;
        }
        let est = marginal_att_plugin(&f2, &d, &spec, 0.95).unwrap();
        assert!(est.gamma_hat.abs() <= 1.0);
    }
}
