//! Generalized odds product (GOP) parameterization of a risk triple.
//!
//! The observed conditional risk model is additive in the treated arm and
//! multiplicative in the confounding term:
//!
//! ```text
//! P(Y=1 | A=a, Z, X) = gamma * a + alpha^a * p00(Z, X)
//! ```
//!
//! with `gamma` the conditional treatment effect on the treated (a risk
//! difference), `alpha` the multiplicative confounding ratio, and `p00`
//! the untreated baseline risk. Parameterizing the remaining degree of
//! freedom by the product of the three odds
//!
//! ```text
//! GOP = odds(p11) * odds(p01) * odds(p00),     odds(p) = p / (1 - p)
//! ```
//!
//! makes `(gamma, alpha, GOP)` variation independent, so likelihood
//! optimization can run unconstrained while every implied probability
//! stays inside the unit interval. Recovering `p00` from a
//! `(gamma, alpha, GOP)` point means solving a cubic with a unique root
//! in a known interval; this module provides the closed-form solution
//! (Cardano / trigonometric, per Abramowitz & Stegun §3.8.2) plus a
//! bisection fallback that doubles as an independent oracle in tests.

use crate::error::{QivError, Result};

/// Residual bound the selected root must satisfy on the raw cubic.
pub const RESIDUAL_TOL: f64 = 1e-10;
/// Interval-membership tolerance at the endpoints; roots this close are
/// nudged inward by the same amount before residual checks.
const ENDPOINT_TOL: f64 = 1e-12;
/// Discriminant window around zero in which both solution branches are
/// evaluated and the smaller-residual candidate wins.
const DELTA_BORDER: f64 = 1e-14;
/// Tolerance for clamping the arccosine argument on the trigonometric branch.
const ACOS_CLAMP_TOL: f64 = 1e-12;
/// Absolute width tolerance for the bisection fallback.
const BISECT_TOL: f64 = 1e-13;
const BISECT_MAX_ITER: usize = 200;

/// The probability triple `(p11, p01, p00)` at one `(z, x)` point:
/// treated-arm risk, counterfactual untreated risk among the treated,
/// and untreated baseline risk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskTriple {
    pub p11: f64,
    pub p01: f64,
    pub p00: f64,
}

impl RiskTriple {
    /// Build a validated triple; each component must lie strictly in (0,1).
    pub fn new(p11: f64, p01: f64, p00: f64) -> Result<Self> {
        let r = RiskTriple { p11, p01, p00 };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p11", self.p11), ("p01", self.p01), ("p00", self.p00)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(QivError::Domain(format!(
                    "risk {name}={v} must lie strictly in (0,1)"
                )));
            }
        }
        Ok(())
    }
}

/// The variation-independent triple `(gamma, alpha, GOP)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GopPoint {
    /// Conditional ATT, a risk difference in (-1, 1).
    pub gamma: f64,
    /// Multiplicative confounding ratio, positive.
    pub alpha: f64,
    /// Generalized odds product, positive.
    pub gop: f64,
}

impl GopPoint {
    /// Build a validated point. Besides the marginal ranges, the root
    /// interval must be nonempty, which for `gamma < 0` additionally
    /// requires `gamma + alpha > 0` (otherwise the treated-arm risk
    /// `gamma + alpha * p00` cannot be positive for any `p00` in (0,1)).
    pub fn new(gamma: f64, alpha: f64, gop: f64) -> Result<Self> {
        let g = GopPoint { gamma, alpha, gop };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > -1.0 && self.gamma < 1.0) || !self.gamma.is_finite() {
            return Err(QivError::Domain(format!(
                "gamma={} must lie in (-1,1)",
                self.gamma
            )));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(QivError::Domain(format!(
                "alpha={} must be positive",
                self.alpha
            )));
        }
        if !(self.gop > 0.0) || !self.gop.is_finite() {
            return Err(QivError::Domain(format!(
                "gop={} must be positive",
                self.gop
            )));
        }
        let (lo, hi) = self.root_interval();
        if !(lo < hi) {
            return Err(QivError::Domain(format!(
                "empty root interval ({lo}, {hi}): gamma={} requires alpha > {}",
                self.gamma, -self.gamma
            )));
        }
        Ok(())
    }

    /// Open interval guaranteed to contain the unique baseline-risk root:
    /// `(max(0, -gamma/alpha), min((1-gamma)/alpha, 1/alpha, 1))`.
    pub fn root_interval(&self) -> (f64, f64) {
        let lo = (-self.gamma / self.alpha).max(0.0);
        let hi = ((1.0 - self.gamma) / self.alpha)
            .min(1.0 / self.alpha)
            .min(1.0);
        (lo, hi)
    }
}

/// Coefficients of the baseline-risk cubic together with its depressed
/// form and discriminant.
#[derive(Debug, Clone, Copy)]
pub struct CubicCoeffs {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    /// Depressed-cubic linear coefficient.
    pub xi: f64,
    /// Depressed-cubic constant.
    pub zeta: f64,
    /// Discriminant `(zeta/2)^2 + (xi/3)^3`.
    pub delta: f64,
    /// Change-of-variable shift `b2 / (3 b1)`.
    pub shift: f64,
}

impl CubicCoeffs {
    /// Raw cubic value `b1 p^3 + b2 p^2 + b3 p + b4`.
    #[inline]
    pub fn eval(&self, p: f64) -> f64 {
        ((self.b1 * p + self.b2) * p + self.b3) * p + self.b4
    }

    /// Derivative `3 b1 p^2 + 2 b2 p + b3`.
    #[inline]
    pub fn eval_deriv(&self, p: f64) -> f64 {
        (3.0 * self.b1 * p + 2.0 * self.b2) * p + self.b3
    }
}

/// Forward map from a risk triple to the `(gamma, alpha, GOP)` point.
pub fn gop_forward(r: &RiskTriple) -> Result<GopPoint> {
    r.validate()?;
    let alpha = r.p01 / r.p00;
    let gamma = r.p11 - alpha * r.p00;
    let odds = |p: f64| p / (1.0 - p);
    let gop = odds(r.p11) * odds(r.p01) * odds(r.p00);
    GopPoint::new(gamma, alpha, gop)
}

/// Cubic coefficients for the baseline risk implied by `g`.
pub fn cubic_coeffs(g: &GopPoint) -> CubicCoeffs {
    let (gamma, alpha, gop) = (g.gamma, g.alpha, g.gop);
    let b1 = (1.0 + gop) * alpha * alpha;
    let b2 = alpha * gamma - gop * (alpha * alpha + 2.0 * alpha - alpha * gamma);
    let b3 = -gop * (alpha * gamma + gamma - 2.0 * alpha - 1.0);
    let b4 = gop * (gamma - 1.0);
    let xi = (3.0 * b1 * b3 - b2 * b2) / (3.0 * b1 * b1);
    let zeta =
        (2.0 * b2.powi(3) - 9.0 * b1 * b2 * b3 + 27.0 * b1 * b1 * b4) / (27.0 * b1.powi(3));
    let delta = (zeta / 2.0).powi(2) + (xi / 3.0).powi(3);
    let shift = b2 / (3.0 * b1);
    CubicCoeffs {
        b1,
        b2,
        b3,
        b4,
        xi,
        zeta,
        delta,
        shift,
    }
}

/// Which solution path produced the accepted root.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SolveBranch {
    Cardano,
    Trigonometric,
    Bisection,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct SolveInfo {
    pub p00: f64,
    #[cfg_attr(not(test), allow(dead_code))]
    pub branch: SolveBranch,
    pub residual: f64,
}

/// Baseline risk implied by `g`: the unique cubic root inside the
/// admissible interval, computed in closed form with a bisection fallback.
pub fn solve_p00(g: &GopPoint) -> Result<f64> {
    solve_p00_info(g).map(|info| info.p00)
}

pub(crate) fn solve_p00_info(g: &GopPoint) -> Result<SolveInfo> {
    g.validate()?;
    let c = cubic_coeffs(g);
    let (lo, hi) = g.root_interval();

    let mut candidates: Vec<(f64, SolveBranch)> = Vec::with_capacity(4);
    if c.delta >= 0.0 || c.delta > -DELTA_BORDER {
        // Cardano: the single real root (signed real cube roots only)
        let sq = c.delta.max(0.0).sqrt();
        let t = (-c.zeta / 2.0 + sq).cbrt() + (-c.zeta / 2.0 - sq).cbrt();
        candidates.push((t - c.shift, SolveBranch::Cardano));
    }
    if c.delta < 0.0 {
        // casus irreducibilis: three real roots via the trigonometric form
        if !(c.xi < 0.0) {
            return Err(QivError::Internal(format!(
                "negative discriminant {} with non-negative xi {}",
                c.delta, c.xi
            )));
        }
        let mut arg = (3.0 * c.zeta / (2.0 * c.xi)) * (-3.0 / c.xi).sqrt();
        if arg > 1.0 || arg < -1.0 {
            if arg.abs() - 1.0 > ACOS_CLAMP_TOL {
                return Err(QivError::Internal(format!(
                    "arccos argument {arg} outside [-1,1] beyond tolerance"
                )));
            }
            arg = arg.clamp(-1.0, 1.0);
        }
        let theta = arg.acos();
        let r = 2.0 * (-c.xi / 3.0).sqrt();
        for k in 0..3 {
            let t = r * ((theta + 2.0 * k as f64 * std::f64::consts::PI) / 3.0).cos();
            candidates.push((t - c.shift, SolveBranch::Trigonometric));
        }
    }

    // membership filter with endpoint tolerance: candidates within
    // ENDPOINT_TOL outside are nudged to the interval edge before
    // refinement, all others are discarded
    let mut best: Option<SolveInfo> = None;
    for (p_raw, branch) in candidates {
        if !(p_raw >= lo - ENDPOINT_TOL && p_raw <= hi + ENDPOINT_TOL) {
            continue;
        }
        let p = refine(&c, lo, hi, p_raw.clamp(lo, hi));
        let residual = c.eval(p).abs();
        if best.as_ref().map_or(true, |b| residual < b.residual) {
            best = Some(SolveInfo {
                p00: p,
                branch,
                residual,
            });
        }
    }

    if let Some(info) = best {
        if info.residual < RESIDUAL_TOL {
            return Ok(info);
        }
    }

    // closed form missed or had excessive residual: bisection fallback
    let p = bisect(&c, lo, hi)?;
    let p = refine(&c, lo, hi, p);
    let residual = c.eval(p).abs();
    if residual < RESIDUAL_TOL {
        Ok(SolveInfo {
            p00: p,
            branch: SolveBranch::Bisection,
            residual,
        })
    } else {
        Err(QivError::Internal(format!(
            "root residual {residual:.3e} exceeds tolerance at gamma={}, alpha={}, gop={}",
            g.gamma, g.alpha, g.gop
        )))
    }
}

/// Safeguarded Newton-bisection: converges the root to rounding level in
/// the parameter itself, not just the residual. Newton steps that leave
/// the current bracket fall back to its midpoint; the bracket endpoints
/// carry the guaranteed signs F(lo) < 0 < F(hi).
fn refine(c: &CubicCoeffs, lo: f64, hi: f64, p0: f64) -> f64 {
    let (mut a, mut b) = (lo, hi);
    let mut p = p0;
    for _ in 0..80 {
        let f = c.eval(p);
        if f == 0.0 {
            return p;
        }
        if f < 0.0 {
            a = p;
        } else {
            b = p;
        }
        let d = c.eval_deriv(p);
        let mut next = if d.is_finite() && d != 0.0 {
            p - f / d
        } else {
            0.5 * (a + b)
        };
        if !(next > a && next < b) {
            next = 0.5 * (a + b);
        }
        if (next - p).abs() <= f64::EPSILON * p.abs() {
            return next;
        }
        p = next;
        if b - a <= f64::EPSILON * b {
            break;
        }
    }
    p
}

/// Bisection root-finder over the admissible interval. The cubic is strictly
/// negative at the lower endpoint and strictly positive at the upper one
/// for every valid point, so a sign disagreement means numerical failure.
pub fn solve_p00_bisection(g: &GopPoint) -> Result<f64> {
    g.validate()?;
    let c = cubic_coeffs(g);
    let (lo, hi) = g.root_interval();
    bisect(&c, lo, hi)
}

fn bisect(c: &CubicCoeffs, lo: f64, hi: f64) -> Result<f64> {
    let f_lo = c.eval(lo);
    let f_hi = c.eval(hi);
    if !(f_lo < 0.0 && f_hi > 0.0) {
        return Err(QivError::Internal(format!(
            "no sign change over root interval: F({lo})={f_lo:.3e}, F({hi})={f_hi:.3e}"
        )));
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..BISECT_MAX_ITER {
        let mid = 0.5 * (a + b);
        if b - a <= BISECT_TOL {
            return Ok(mid);
        }
        let fm = c.eval(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm < 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

/// Inverse map: the risk triple implied by a `(gamma, alpha, GOP)` point.
pub fn implied_risks(g: &GopPoint) -> Result<RiskTriple> {
    let p00 = solve_p00(g)?;
    let p01 = g.alpha * p00;
    let p11 = g.gamma + g.alpha * p00;
    RiskTriple::new(p11, p01, p00)
}

/// Partial derivatives `(dp00/dgamma, dp00/dalpha, dp00/dgop)` by implicit
/// differentiation of the cubic at the root `p00`.
///
/// When the cubic derivative at the root is tiny (`|F_p| < 1e-12`), falls
/// back to one-sided finite differences of the solved root.
pub fn p00_partials(g: &GopPoint, p00: f64) -> Result<[f64; 3]> {
    let (gamma, alpha, gop) = (g.gamma, g.alpha, g.gop);
    let c = cubic_coeffs(g);
    let f_p = c.eval_deriv(p00);
    if f_p.abs() < 1e-12 {
        return p00_partials_fd(g, p00);
    }
    let p2 = p00 * p00;
    let p3 = p2 * p00;
    // derivatives of b1..b4 in gamma
    let f_gamma = alpha * (1.0 + gop) * p2 - gop * (alpha + 1.0) * p00 + gop;
    let f_alpha = 2.0 * alpha * (1.0 + gop) * p3
        + (gamma - gop * (2.0 * alpha + 2.0 - gamma)) * p2
        + gop * (2.0 - gamma) * p00;
    let f_gop = alpha * alpha * p3
        - (alpha * alpha + 2.0 * alpha - alpha * gamma) * p2
        - (alpha * gamma + gamma - 2.0 * alpha - 1.0) * p00
        + (gamma - 1.0);
    Ok([-f_gamma / f_p, -f_alpha / f_p, -f_gop / f_p])
}

fn p00_partials_fd(g: &GopPoint, p00: f64) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (idx, scale) in [(0, g.gamma), (1, g.alpha), (2, g.gop)] {
        let h = 1e-7 * scale.abs().max(1.0);
        let mut bumped = *g;
        match idx {
            0 => bumped.gamma += h,
            1 => bumped.alpha += h,
            _ => bumped.gop += h,
        }
        let p_b = solve_p00(&bumped)?;
        out[idx] = (p_b - p00) / h;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn forward_identity_point() {
        let r = RiskTriple::new(0.5, 0.5, 0.5).unwrap();
        let g = gop_forward(&r).unwrap();
        assert!((g.gamma - 0.0).abs() < 1e-15);
        assert!((g.alpha - 1.0).abs() < 1e-15);
        assert!((g.gop - 1.0).abs() < 1e-15);
    }

    #[test]
    fn forward_hand_arithmetic() {
        let r = RiskTriple::new(0.46, 0.36, 0.30).unwrap();
        let g = gop_forward(&r).unwrap();
        assert!((g.gamma - 0.10).abs() < 1e-12);
        assert!((g.alpha - 1.2).abs() < 1e-12);
        // independent multiplication of the three odds
        let expect = (0.46 / 0.54) * (0.36 / 0.64) * (0.30 / 0.70);
        assert!((g.gop - expect).abs() < 1e-12);
        assert!((g.gop - 0.205357).abs() < 1e-6);
    }

    #[test]
    fn forward_equal_risks_cube_odds() {
        let p = 2.0 / 3.0;
        let g = gop_forward(&RiskTriple::new(p, p, p).unwrap()).unwrap();
        assert!(g.gamma.abs() < 1e-12);
        assert!((g.alpha - 1.0).abs() < 1e-12);
        assert!((g.gop - 8.0).abs() < 1e-10);
    }

    #[test]
    fn forward_rejects_out_of_range() {
        assert!(RiskTriple::new(1.0, 0.5, 0.5).is_err());
        assert!(RiskTriple::new(0.5, 0.0, 0.5).is_err());
        assert!(RiskTriple::new(0.5, 0.5, -0.1).is_err());
    }

    #[test]
    fn coeffs_identity_point() {
        let g = GopPoint::new(0.0, 1.0, 1.0).unwrap();
        let c = cubic_coeffs(&g);
        assert_eq!(c.b1, 2.0);
        assert_eq!(c.b2, -3.0);
        assert_eq!(c.b3, 3.0);
        assert_eq!(c.b4, -1.0);
    }

    #[test]
    fn coeffs_leading_positive_everywhere() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..500 {
            let g = sample_valid_gop(&mut rng);
            assert!(cubic_coeffs(&g).b1 > 0.0);
        }
    }

    #[test]
    fn solve_identity_and_gop8() {
        let p = solve_p00(&GopPoint::new(0.0, 1.0, 1.0).unwrap()).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
        let p = solve_p00(&GopPoint::new(0.0, 1.0, 8.0).unwrap()).unwrap();
        assert!((p - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn solve_residual_on_example_point() {
        let g = GopPoint::new(0.1, 1.2, 1.0).unwrap();
        let info = solve_p00_info(&g).unwrap();
        assert!(info.residual < 1e-10);
        let oracle = solve_p00_bisection(&g).unwrap();
        assert!((info.p00 - oracle).abs() < 1e-9);
    }

    #[test]
    fn paper_upper_bound_gamma01_alpha12() {
        // gamma=0.1, alpha=1.2 caps the baseline risk at 0.9/1.2 = 0.75
        for i in 0..1000 {
            let loggop = -8.0 + 16.0 * (i as f64) / 999.0;
            let g = GopPoint::new(0.1, 1.2, loggop.exp()).unwrap();
            let p = solve_p00(&g).unwrap();
            assert!(p <= 0.75, "p00={p} at log gop {loggop}");
        }
    }

    #[test]
    fn both_branches_seen_and_agree_with_oracle() {
        let mut rng = StdRng::seed_from_u64(42);
        let mut cardano = 0usize;
        let mut trig = 0usize;
        for _ in 0..2000 {
            let g = sample_valid_gop(&mut rng);
            let info = solve_p00_info(&g).unwrap();
            match info.branch {
                SolveBranch::Cardano => cardano += 1,
                SolveBranch::Trigonometric => trig += 1,
                SolveBranch::Bisection => {}
            }
            let oracle = solve_p00_bisection(&g).unwrap();
            assert!(
                (info.p00 - oracle).abs() < 1e-9,
                "closed {} vs oracle {} at {:?}",
                info.p00,
                oracle,
                g
            );
            let (lo, hi) = g.root_interval();
            assert!(info.p00 > lo && info.p00 < hi);
            assert!(info.residual < 1e-10);
        }
        assert!(cardano > 0, "Cardano branch never exercised");
        assert!(trig > 0, "trigonometric branch never exercised");
    }

    #[test]
    fn roundtrip_identity_small() {
        let g = GopPoint::new(0.0, 1.0, 1.0).unwrap();
        let r = implied_risks(&g).unwrap();
        assert!((r.p11 - 0.5).abs() < 1e-12);
        assert!((r.p01 - 0.5).abs() < 1e-12);
        assert!((r.p00 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn roundtrip_random_sample() {
        // wide-domain draws can put the treated-arm risk within ~1e-9 of
        // 1, where the f64 triple representation caps the achievable
        // round-trip accuracy near 1e-7 relative; 1e-6 leaves headroom
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..1000 {
            let g = sample_valid_gop(&mut rng);
            let r = implied_risks(&g).unwrap();
            let back = gop_forward(&r).unwrap();
            assert!((back.gamma - g.gamma).abs() < 1e-6, "{g:?}");
            assert!((back.alpha - g.alpha).abs() < 1e-6 * g.alpha.max(1.0), "{g:?}");
            assert!((back.gop - g.gop).abs() < 1e-6 * g.gop.max(1.0), "{g:?}");
        }
    }

    #[test]
    fn treated_risk_respects_gamma_floor() {
        // with gamma = 0.2 the treated-arm risk must stay inside (0.2, 1)
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..500 {
            let alpha = rng.gen_range(0.05_f64..20.0);
            let gop = (rng.gen_range(-9.0_f64..9.0)).exp();
            let g = GopPoint::new(0.2, alpha, gop).unwrap();
            let r = implied_risks(&g).unwrap();
            assert!(r.p11 > 0.2 && r.p11 < 1.0, "p11={} at {g:?}", r.p11);
        }
    }

    #[test]
    fn empty_interval_rejected() {
        // gamma + alpha <= 0 leaves no admissible baseline risk
        assert!(GopPoint::new(-0.9, 0.5, 1.0).is_err());
        assert!(GopPoint::new(-0.5, 0.3, 2.0).is_err());
        // boundary is fine once alpha exceeds -gamma
        assert!(GopPoint::new(-0.5, 0.6, 2.0).is_ok());
    }

    #[test]
    fn partials_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..200 {
            let g = sample_valid_gop(&mut rng);
            let p = solve_p00(&g).unwrap();
            let d = p00_partials(&g, p).unwrap();
            for (idx, scale) in [(0, g.gamma), (1, g.alpha), (2, g.gop)] {
                let h = 1e-6 * scale.abs().max(1.0);
                let mut up = g;
                let mut dn = g;
                match idx {
                    0 => {
                        up.gamma += h;
                        dn.gamma -= h;
                    }
                    1 => {
                        up.alpha += h;
                        dn.alpha -= h;
                    }
                    _ => {
                        up.gop += h;
                        dn.gop -= h;
                    }
                }
                if up.validate().is_err() || dn.validate().is_err() {
                    continue;
                }
                let fd = (solve_p00(&up).unwrap() - solve_p00(&dn).unwrap()) / (2.0 * h);
                let denom = fd.abs().max(1e-4);
                assert!(
                    (d[idx] - fd).abs() / denom < 1e-4,
                    "partial {idx}: analytic {} vs fd {} at {g:?}",
                    d[idx],
                    fd
                );
            }
        }
    }

    /// Rejection-sample a valid point over the acceptance grid ranges.
    pub(crate) fn sample_valid_gop(rng: &mut StdRng) -> GopPoint {
        loop {
            let gamma = rng.gen_range(-0.99_f64..0.99);
            let alpha = rng.gen_range(0.05_f64..20.0);
            let log_gop = rng.gen_range((1e-4_f64).ln()..(1e4_f64).ln());
            if let Ok(g) = GopPoint::new(gamma, alpha, log_gop.exp()) {
                return g;
            }
        }
    }
}
