//! Nonparametric identification on discrete strata.
//!
//! Within a covariate stratum, the confounding ratio is identified as a
//! ratio of outcome-mean differences across instrument levels among
//! treated and untreated units,
//!
//! ```text
//! alpha(x) = [E(Y|A=1,Z=1,x) - E(Y|A=1,Z=0,x)] / [E(Y|A=0,Z=1,x) - E(Y|A=0,Z=0,x)]
//! gamma(x) =  E(Y|A=1,Z=z,x) - alpha(x) E(Y|A=0,Z=z,x)
//! ```
//!
//! and the additive confounding bias follows as
//! `delta(z,x) = (alpha(x) - 1) E(Y|A=0,Z=z,x)`. Covariate-adjusted
//! estimation with continuous covariates routes through the likelihood and
//! semiparametric estimators; this module serves discrete-`X` audits.

use crate::design::Dataset;
use crate::error::{QivError, Result};
use crate::prob::normal_two_sided_p;

/// Floor and multiplier for the relevance precondition: the untreated
/// outcome-mean difference across instrument levels must exceed
/// `K_SE` of its standard errors and the absolute floor.
#[derive(Debug, Clone)]
pub struct RelevanceRule {
    pub k_se: f64,
    pub floor: f64,
}

impl Default for RelevanceRule {
    fn default() -> Self {
        RelevanceRule {
            k_se: 2.0,
            floor: 1e-3,
        }
    }
}

/// Conditional outcome means and counts for the four `(a, z)` cells of a
/// stratum.
#[derive(Debug, Clone, Copy)]
pub struct StratumMeans {
    /// `e[a][z]` = mean outcome among `A=a, Z=z`.
    pub e: [[f64; 2]; 2],
    /// `counts[a][z]` = cell sizes; all four must be positive.
    pub counts: [[usize; 2]; 2],
}

impl StratumMeans {
    pub fn new(e: [[f64; 2]; 2], counts: [[usize; 2]; 2]) -> Result<Self> {
        for a in 0..2 {
            for z in 0..2 {
                if counts[a][z] == 0 {
                    return Err(QivError::EmptyCell(format!("cell (a={a}, z={z})")));
                }
                if !(0.0..=1.0).contains(&e[a][z]) {
                    return Err(QivError::Domain(format!(
                        "cell mean {} outside [0,1]",
                        e[a][z]
                    )));
                }
            }
        }
        Ok(StratumMeans { e, counts })
    }

    /// Tabulate the four cells for one stratum given by a row filter.
    pub fn from_rows(d: &Dataset, qiv: usize, rows: &[usize]) -> Result<Self> {
        let mut sums = [[0.0_f64; 2]; 2];
        let mut counts = [[0usize; 2]; 2];
        for &i in rows {
            let a = d.a()[i] as usize;
            let z = d.z_col(qiv)[i] as usize;
            sums[a][z] += d.y()[i] as f64;
            counts[a][z] += 1;
        }
        let mut e = [[0.0; 2]; 2];
        for a in 0..2 {
            for z in 0..2 {
                if counts[a][z] == 0 {
                    return Err(QivError::EmptyCell(format!("cell (a={a}, z={z})")));
                }
                e[a][z] = sums[a][z] / counts[a][z] as f64;
            }
        }
        Ok(StratumMeans { e, counts })
    }
}

/// Result of nonparametric identification on one stratum.
#[derive(Debug, Clone)]
pub struct NpIdentify {
    pub alpha_x: f64,
    /// Count-weighted average of the two `z`-specific evaluations.
    pub gamma_x: f64,
    /// `gamma(x)` evaluated at `z = 0` and `z = 1`.
    pub gamma_by_z: (f64, f64),
    /// Absolute discrepancy between the two evaluations.
    pub gamma_discrepancy: f64,
    pub warnings: Vec<String>,
}

/// Identify `(alpha(x), gamma(x))` from the four stratum cells.
///
/// Errors with a weak-QIV diagnosis when the untreated difference across
/// instrument levels fails the relevance rule. A negative `alpha(x)` or a
/// `gamma(x)` outside (-1, 1) is reported as a model-violation warning,
/// never silently clipped.
pub fn np_identify(s: &StratumMeans, rule: &RelevanceRule) -> Result<NpIdentify> {
    let denom = s.e[0][1] - s.e[0][0];
    let var = |a: usize, z: usize| s.e[a][z] * (1.0 - s.e[a][z]) / s.counts[a][z] as f64;
    let se_denom = (var(0, 1) + var(0, 0)).sqrt();
    let threshold = (rule.k_se * se_denom).max(rule.floor);
    if denom.abs() <= threshold {
        return Err(QivError::WeakQiv(format!(
            "untreated outcome difference {denom:.5} below threshold {threshold:.5}"
        )));
    }
    let numer = s.e[1][1] - s.e[1][0];
    let alpha_x = numer / denom;

    let gamma_z0 = s.e[1][0] - alpha_x * s.e[0][0];
    let gamma_z1 = s.e[1][1] - alpha_x * s.e[0][1];
    let w0 = s.counts[1][0] as f64;
    let w1 = s.counts[1][1] as f64;
    let gamma_x = (w0 * gamma_z0 + w1 * gamma_z1) / (w0 + w1);
    let gamma_discrepancy = (gamma_z0 - gamma_z1).abs();

    let mut warnings = Vec::new();
    if alpha_x <= 0.0 {
        warnings.push(format!(
            "alpha(x) = {alpha_x:.4} is not positive: multiplicative-stability model violated"
        ));
    }
    if !(gamma_x > -1.0 && gamma_x < 1.0) {
        warnings.push(format!("gamma(x) = {gamma_x:.4} outside (-1, 1)"));
    }
    // joint SE of the z = 0 vs z = 1 evaluations via the delta method over
    // the four independent cell means
    let dvar = alpha_x * alpha_x * (var(0, 0) + var(0, 1)) + var(1, 0) + var(1, 1);
    if gamma_discrepancy > 4.0 * dvar.sqrt() {
        warnings.push(format!(
            "z-specific gamma evaluations disagree by {gamma_discrepancy:.4}: additive-stability assumption suspect"
        ));
    }
    Ok(NpIdentify {
        alpha_x,
        gamma_x,
        gamma_by_z: (gamma_z0, gamma_z1),
        gamma_discrepancy,
        warnings,
    })
}

/// Additive confounding bias `delta(z,x) = (alpha(x) - 1) * E(Y|A=0,Z=z,x)`.
pub fn additive_bias(alpha_x: f64, e00: f64) -> Result<f64> {
    if !(alpha_x > 0.0) {
        return Err(QivError::Domain(format!("alpha_x={alpha_x} must be positive")));
    }
    if !(e00 > 0.0 && e00 < 1.0) {
        return Err(QivError::Domain(format!("e00={e00} must lie in (0,1)")));
    }
    Ok((alpha_x - 1.0) * e00)
}

/// Two-sample relevance statistic among the untreated: the difference of
/// mean outcomes between `Z=1` and `Z=0`, its large-sample standard error,
/// and the two-sided normal p-value.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RelevanceStat {
    pub difference: f64,
    pub se: f64,
    pub p_value: f64,
    pub n0: usize,
    pub n1: usize,
}

pub fn relevance_stat(d: &Dataset, qiv: usize) -> Result<RelevanceStat> {
    let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..d.n() {
        if d.a()[i] != 0 {
            continue;
        }
        if d.z_col(qiv)[i] == 1 {
            s1 += d.y()[i] as f64;
            n1 += 1;
        } else {
            s0 += d.y()[i] as f64;
            n0 += 1;
        }
    }
    if n0 == 0 || n1 == 0 {
        return Err(QivError::EmptyCell(format!(
            "untreated cells by instrument: n0={n0}, n1={n1}"
        )));
    }
    let m0 = s0 / n0 as f64;
    let m1 = s1 / n1 as f64;
    let difference = m1 - m0;
    let se = (m0 * (1.0 - m0) / n0 as f64 + m1 * (1.0 - m1) / n1 as f64).sqrt();
    let p_value = if se > 0.0 {
        normal_two_sided_p(difference / se)
    } else {
        1.0
    };
    Ok(RelevanceStat {
        difference,
        se,
        p_value,
        n0,
        n1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn big_counts() -> [[usize; 2]; 2] {
        [[1_000_000; 2]; 2]
    }

    #[test]
    fn exact_recovery_from_forward_construction() {
        // risks built from gamma = 0.1, alpha = 1.2, p00(0) = 0.3, p00(1) = 0.5
        let s = StratumMeans::new([[0.30, 0.50], [0.46, 0.70]], big_counts()).unwrap();
        let out = np_identify(&s, &RelevanceRule::default()).unwrap();
        assert!((out.alpha_x - 1.2).abs() < 1e-14);
        assert!((out.gamma_x - 0.1).abs() < 1e-14);
        assert!(out.gamma_discrepancy < 1e-14);
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn zero_numerator_gives_zero_alpha() {
        let s = StratumMeans::new([[0.30, 0.50], [0.45, 0.45]], big_counts()).unwrap();
        let out = np_identify(&s, &RelevanceRule::default()).unwrap();
        assert_eq!(out.alpha_x, 0.0);
        assert!(!out.warnings.is_empty()); // alpha = 0 is not a valid ratio
    }

    #[test]
    fn flat_cells_raise_weak_qiv() {
        let s = StratumMeans::new([[0.4, 0.4], [0.4, 0.4]], big_counts()).unwrap();
        assert!(matches!(
            np_identify(&s, &RelevanceRule::default()),
            Err(QivError::WeakQiv(_))
        ));
    }

    #[test]
    fn additive_bias_directions() {
        // vanishes at alpha = 1
        assert_eq!(additive_bias(1.0, 0.37).unwrap(), 0.0);
        assert!((additive_bias(1.2, 0.5).unwrap() - 0.1).abs() < 1e-15);
        assert!((additive_bias(0.8, 0.5).unwrap() + 0.1).abs() < 1e-15);
        assert!(additive_bias(-0.2, 0.5).is_err());
        assert!(additive_bias(1.2, 1.0).is_err());
    }

    #[test]
    fn empty_cell_detected() {
        assert!(matches!(
            StratumMeans::new([[0.3, 0.4], [0.5, 0.6]], [[10, 0], [5, 5]]),
            Err(QivError::EmptyCell(_))
        ));
    }

    #[test]
    fn relevance_stat_empty_cell() {
        let d = Dataset::new(
            vec![1, 0, 1],
            vec![1, 0, 0],
            vec![vec![0, 0, 0]], // no z = 1 among untreated
            vec![],
            vec!["z".into()],
            vec![],
        )
        .unwrap();
        assert!(matches!(relevance_stat(&d, 0), Err(QivError::EmptyCell(_))));
    }
}
