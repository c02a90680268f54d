//! Dataset representation, design-matrix construction, and the parametric
//! link models
//!
//! ```text
//! gamma(x; beta)  = tanh(beta' [1, x])
//! alpha(x; theta) = exp(theta' [1, x])
//! GOP(z, x)       = exp(omega0 + omega' z + eta' x)
//! ```
//!
//! The tanh and exp links enforce the marginal parameter ranges by
//! construction, so the likelihood can be maximized without constraints.

use crate::error::{QivError, Result};
use crate::gop::GopPoint;
use crate::linalg::{dot, Mat};

/// Observed units `(Y, A, Z, X)`: binary outcome, binary treatment, one or
/// more binary quasi-instruments, and real-valued covariates.
#[derive(Debug, Clone)]
pub struct Dataset {
    y: Vec<u8>,
    a: Vec<u8>,
    /// QIV columns, each of length `n`.
    z_cols: Vec<Vec<u8>>,
    /// Covariate columns, each of length `n`.
    x_cols: Vec<Vec<f64>>,
    z_names: Vec<String>,
    x_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        y: Vec<u8>,
        a: Vec<u8>,
        z_cols: Vec<Vec<u8>>,
        x_cols: Vec<Vec<f64>>,
        z_names: Vec<String>,
        x_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(QivError::Data("dataset has no rows".into()));
        }
        if a.len() != n {
            return Err(QivError::Dimension("treatment column length".into()));
        }
        if z_cols.is_empty() {
            return Err(QivError::Data("at least one QIV column required".into()));
        }
        if z_cols.len() != z_names.len() || x_cols.len() != x_names.len() {
            return Err(QivError::Dimension("column/name count mismatch".into()));
        }
        for col in &z_cols {
            if col.len() != n {
                return Err(QivError::Dimension("QIV column length".into()));
            }
        }
        for col in &x_cols {
            if col.len() != n {
                return Err(QivError::Dimension("covariate column length".into()));
            }
            if let Some(v) = col.iter().find(|v| !v.is_finite()) {
                return Err(QivError::Data(format!("non-finite covariate value {v}")));
            }
        }
        for (name, col) in [("y", &y), ("a", &a)] {
            if col.iter().any(|&v| v > 1) {
                return Err(QivError::Data(format!("column {name} must be binary")));
            }
        }
        for (col, name) in z_cols.iter().zip(&z_names) {
            if col.iter().any(|&v| v > 1) {
                return Err(QivError::Data(format!("QIV column {name} must be binary")));
            }
        }
        if !a.iter().any(|&v| v == 1) {
            return Err(QivError::NoTreatedUnits);
        }
        Ok(Dataset {
            y,
            a,
            z_cols,
            x_cols,
            z_names,
            x_names,
        })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.y.len()
    }

    #[inline]
    pub fn y(&self) -> &[u8] {
        &self.y
    }

    #[inline]
    pub fn a(&self) -> &[u8] {
        &self.a
    }

    pub fn n_qiv(&self) -> usize {
        self.z_cols.len()
    }

    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn z_col(&self, idx: usize) -> &[u8] {
        &self.z_cols[idx]
    }

    pub fn x_col(&self, idx: usize) -> &[f64] {
        &self.x_cols[idx]
    }

    /// Gather covariate row `i` (all columns) into `buf`.
    pub fn x_row_into(&self, i: usize, buf: &mut Vec<f64>) {
        buf.clear();
        for col in &self.x_cols {
            buf.push(col[i]);
        }
    }

    pub fn x_col_by_name(&self, name: &str) -> Result<&[f64]> {
        let idx = self
            .x_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| QivError::UnknownColumn(name.to_string()))?;
        Ok(&self.x_cols[idx])
    }

    pub fn z_col_by_name(&self, name: &str) -> Result<&[u8]> {
        let idx = self
            .z_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| QivError::UnknownColumn(name.to_string()))?;
        Ok(&self.z_cols[idx])
    }

    /// Fraction of treated units.
    pub fn treated_share(&self) -> f64 {
        self.a.iter().map(|&v| v as f64).sum::<f64>() / self.n() as f64
    }

    /// FNV-1a fingerprint over row count, column names, and raw values;
    /// stable across runs and platforms for provenance checks in reports.
    pub fn fingerprint(&self) -> u64 {
        const OFFSET: u64 = 0xcbf29ce484222325;
        const PRIME: u64 = 0x100000001b3;
        let mut h = OFFSET;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        eat(&(self.n() as u64).to_le_bytes());
        eat(self.y.as_slice());
        eat(self.a.as_slice());
        for (name, col) in self.z_names.iter().zip(&self.z_cols) {
            eat(name.as_bytes());
            eat(col.as_slice());
        }
        for (name, col) in self.x_names.iter().zip(&self.x_cols) {
            eat(name.as_bytes());
            for v in col {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// All likelihood parameters, unconstrained reals:
/// `beta` for the gamma link (intercept first), `theta` for the alpha link
/// (intercept first), `omega0`/`omega` for the GOP intercept and QIV
/// loadings, `eta` for the GOP covariate loadings.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub omega0: f64,
    pub omega: Vec<f64>,
    pub eta: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(q_gamma: usize, q_alpha: usize, m: usize, q_gop: usize) -> Self {
        ParamVector {
            beta: vec![0.0; q_gamma + 1],
            theta: vec![0.0; q_alpha + 1],
            omega0: 0.0,
            omega: vec![0.0; m],
            eta: vec![0.0; q_gop],
        }
    }

    /// Total parameter count.
    pub fn len(&self) -> usize {
        self.beta.len() + self.theta.len() + 1 + self.omega.len() + self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flatten in the fixed order `[beta, theta, omega0, omega, eta]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.theta);
        v.push(self.omega0);
        v.extend_from_slice(&self.omega);
        v.extend_from_slice(&self.eta);
        v
    }

    /// Rebuild from a flat vector with the dimensions of `self`.
    pub fn unflatten_like(&self, flat: &[f64]) -> ParamVector {
        assert_eq!(flat.len(), self.len());
        let (nb, nt, nm, ne) = (
            self.beta.len(),
            self.theta.len(),
            self.omega.len(),
            self.eta.len(),
        );
        let mut it = flat.iter().copied();
        let beta: Vec<f64> = (&mut it).take(nb).collect();
        let theta: Vec<f64> = (&mut it).take(nt).collect();
        let omega0 = it.next().unwrap();
        let omega: Vec<f64> = (&mut it).take(nm).collect();
        let eta: Vec<f64> = (&mut it).take(ne).collect();
        ParamVector {
            beta,
            theta,
            omega0,
            omega,
            eta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self
            .flatten()
            .iter()
            .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(QivError::Domain("non-finite parameter value".into()))
        }
    }
}

/// Model-formula selection: which covariate columns feed each link and
/// which QIV columns enter the GOP model. Intercepts are always included
/// in the beta and theta designs; `omega0` is the GOP intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub gamma_cols: Vec<String>,
    pub alpha_cols: Vec<String>,
    pub gop_cols: Vec<String>,
    /// QIV column names; empty means all QIV columns in dataset order.
    pub qiv_cols: Vec<String>,
    /// Mean-center covariates for optimizer conditioning. Recorded in
    /// reports; coefficients then refer to centered covariates.
    pub center: bool,
}

impl ModelSpec {
    /// Same covariate list for every link, all QIVs, no centering.
    pub fn shared(cols: &[&str]) -> Self {
        let v: Vec<String> = cols.iter().map(|s| s.to_string()).collect();
        ModelSpec {
            gamma_cols: v.clone(),
            alpha_cols: v.clone(),
            gop_cols: v,
            qiv_cols: Vec::new(),
            center: false,
        }
    }
}

/// Design matrices for each link, with deterministic column order.
#[derive(Debug, Clone)]
pub struct DesignSet {
    /// `n x (q_gamma + 1)`, intercept first.
    pub beta_design: Mat,
    /// `n x (q_alpha + 1)`, intercept first.
    pub theta_design: Mat,
    /// `n x m` QIV block of the GOP design.
    pub gop_z: Mat,
    /// `n x q_gop` covariate block of the GOP design.
    pub gop_x: Mat,
    pub beta_names: Vec<String>,
    pub theta_names: Vec<String>,
    pub gop_z_names: Vec<String>,
    pub gop_x_names: Vec<String>,
    /// Column means subtracted when centering was requested (empty otherwise).
    pub centering: Vec<(String, f64)>,
}

impl DesignSet {
    pub fn n(&self) -> usize {
        self.beta_design.rows()
    }

    /// Parameter layout implied by these designs. A zero-width beta design
    /// (null model) yields an empty beta block, pinning `gamma == 0`.
    pub fn zero_params(&self) -> ParamVector {
        ParamVector {
            beta: vec![0.0; self.beta_design.cols()],
            theta: vec![0.0; self.theta_design.cols()],
            omega0: 0.0,
            omega: vec![0.0; self.gop_z.cols()],
            eta: vec![0.0; self.gop_x.cols()],
        }
    }

    /// Link values at row `i`. Always yields finite `gamma` in (-1,1) and
    /// positive `alpha`, `gop`; the joint root-interval condition can still
    /// fail for extreme trial parameters, which surfaces as a domain error
    /// from `GopPoint::new`.
    pub fn links_at(&self, phi: &ParamVector, i: usize) -> Result<GopPoint> {
        let gamma = dot(&phi.beta, self.beta_design.row(i)).tanh();
        let alpha = dot(&phi.theta, self.theta_design.row(i)).exp();
        let log_gop =
            phi.omega0 + dot(&phi.omega, self.gop_z.row(i)) + dot(&phi.eta, self.gop_x.row(i));
        GopPoint::new(gamma, alpha, log_gop.exp())
    }
}

/// Build the per-link design matrices for `spec`, prepending intercept
/// columns to the beta and theta designs. Construction is deterministic:
/// the same dataset and spec yield bit-identical matrices.
pub fn build_design(d: &Dataset, spec: &ModelSpec) -> Result<DesignSet> {
    let n = d.n();
    let centered: std::collections::BTreeMap<String, (Vec<f64>, f64)> = if spec.center {
        let mut all: Vec<&String> = spec
            .gamma_cols
            .iter()
            .chain(&spec.alpha_cols)
            .chain(&spec.gop_cols)
            .collect();
        all.sort();
        all.dedup();
        let mut map = std::collections::BTreeMap::new();
        for name in all {
            let col = d.x_col_by_name(name)?;
            let mean = col.iter().sum::<f64>() / n as f64;
            map.insert(name.clone(), (col.iter().map(|v| v - mean).collect(), mean));
        }
        map
    } else {
        Default::default()
    };

    let fetch = |name: &String| -> Result<Vec<f64>> {
        if let Some((col, _)) = centered.get(name) {
            Ok(col.clone())
        } else {
            Ok(d.x_col_by_name(name)?.to_vec())
        }
    };

    let with_intercept = |cols: &[String]| -> Result<Mat> {
        let mut m = Mat::zeros(n, cols.len() + 1);
        for i in 0..n {
            m.set(i, 0, 1.0);
        }
        for (j, name) in cols.iter().enumerate() {
            let col = fetch(name)?;
            for i in 0..n {
                m.set(i, j + 1, col[i]);
            }
        }
        Ok(m)
    };

    let beta_design = with_intercept(&spec.gamma_cols)?;
    let theta_design = with_intercept(&spec.alpha_cols)?;

    let qiv_names: Vec<String> = if spec.qiv_cols.is_empty() {
        d.z_names().to_vec()
    } else {
        spec.qiv_cols.clone()
    };
    let mut gop_z = Mat::zeros(n, qiv_names.len());
    for (j, name) in qiv_names.iter().enumerate() {
        let col = d.z_col_by_name(name)?;
        for i in 0..n {
            gop_z.set(i, j, col[i] as f64);
        }
    }
    let mut gop_x = Mat::zeros(n, spec.gop_cols.len());
    for (j, name) in spec.gop_cols.iter().enumerate() {
        let col = fetch(name)?;
        for i in 0..n {
            gop_x.set(i, j, col[i]);
        }
    }

    let prefixed = |prefix: &str, cols: &[String]| -> Vec<String> {
        std::iter::once(format!("{prefix}(intercept)"))
            .chain(cols.iter().map(|c| format!("{prefix}{c}")))
            .collect()
    };

    Ok(DesignSet {
        beta_names: prefixed("gamma:", &spec.gamma_cols),
        theta_names: prefixed("alpha:", &spec.alpha_cols),
        gop_z_names: qiv_names.iter().map(|c| format!("gop:{c}")).collect(),
        gop_x_names: spec.gop_cols.iter().map(|c| format!("gop:{c}")).collect(),
        centering: centered
            .iter()
            .map(|(k, (_, m))| (k.clone(), *m))
            .collect(),
        beta_design,
        theta_design,
        gop_z,
        gop_x,
    })
}

/// One link's covariate selection resolved to dataset column indices, with
/// centering offsets (zero when centering is off).
#[derive(Debug, Clone)]
pub struct LinearPart {
    terms: Vec<(usize, f64)>,
}

impl LinearPart {
    /// `coef[0] + sum_j coef[j+1] * (x[idx_j] - center_j)`.
    pub fn eval(&self, coef_with_intercept: &[f64], x_full: &[f64]) -> f64 {
        let mut v = coef_with_intercept[0];
        for (j, (idx, center)) in self.terms.iter().enumerate() {
            v += coef_with_intercept[j + 1] * (x_full[*idx] - center);
        }
        v
    }

    /// `sum_j coef[j] * (x[idx_j] - center_j)` (for the GOP covariate block,
    /// whose intercept is `omega0`).
    pub fn eval_no_intercept(&self, coef: &[f64], x_full: &[f64]) -> f64 {
        let mut v = 0.0;
        for (j, (idx, center)) in self.terms.iter().enumerate() {
            v += coef[j] * (x_full[*idx] - center);
        }
        v
    }

    pub fn width(&self) -> usize {
        self.terms.len()
    }
}

/// Column resolution of a [`ModelSpec`] against a dataset, letting fitted
/// models evaluate their links at arbitrary `(z, x)` points.
#[derive(Debug, Clone)]
pub struct ResolvedSpec {
    pub gamma: LinearPart,
    pub alpha: LinearPart,
    pub gop: LinearPart,
    /// Indices of the QIV columns entering the GOP model, in order.
    pub qiv: Vec<usize>,
}

/// Resolve the column names in `spec` to dataset indices and centering
/// offsets. Uses the same centering convention as [`build_design`].
pub fn resolve_spec(d: &Dataset, spec: &ModelSpec) -> Result<ResolvedSpec> {
    let n = d.n() as f64;
    let part = |cols: &[String]| -> Result<LinearPart> {
        let mut terms = Vec::with_capacity(cols.len());
        for name in cols {
            let idx = d
                .x_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| QivError::UnknownColumn(name.clone()))?;
            let center = if spec.center {
                d.x_cols[idx].iter().sum::<f64>() / n
            } else {
                0.0
            };
            terms.push((idx, center));
        }
        Ok(LinearPart { terms })
    };
    let qiv_names: Vec<String> = if spec.qiv_cols.is_empty() {
        d.z_names.clone()
    } else {
        spec.qiv_cols.clone()
    };
    let mut qiv = Vec::with_capacity(qiv_names.len());
    for name in &qiv_names {
        let idx = d
            .z_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| QivError::UnknownColumn(name.clone()))?;
        qiv.push(idx);
    }
    Ok(ResolvedSpec {
        gamma: part(&spec.gamma_cols)?,
        alpha: part(&spec.alpha_cols)?,
        gop: part(&spec.gop_cols)?,
        qiv,
    })
}

/// Full-column-rank check: Cholesky of the Gram matrix with a relative
/// pivot floor. A pivot below `1e-10` of the largest diagonal marks the
/// design as collinear.
pub fn check_full_rank(m: &Mat, what: &str) -> Result<()> {
    let g = m.gram();
    let p = g.cols();
    let scale = (0..p).map(|j| g.get(j, j)).fold(0.0_f64, f64::max);
    let floor = 1e-10 * scale.max(1e-300);
    let mut l = Mat::zeros(p, p);
    for i in 0..p {
        for j in 0..=i {
            let mut sum = g.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if !(sum > floor) {
                    return Err(QivError::RankDeficient(what.to_string()));
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(())
}

/// Evaluate the three links at a shared covariate row (intercepts handled
/// internally): `gamma = tanh(beta'[1,x])`, `alpha = exp(theta'[1,x])`,
/// `gop = exp(omega0 + omega'z + eta'x)`.
pub fn eval_links(phi: &ParamVector, x_row: &[f64], z_row: &[f64]) -> Result<GopPoint> {
    if phi.beta.len() != x_row.len() + 1
        || phi.theta.len() != x_row.len() + 1
        || phi.omega.len() != z_row.len()
        || phi.eta.len() != x_row.len()
    {
        return Err(QivError::Dimension(format!(
            "eval_links: phi expects {} covariates and {} instruments",
            phi.eta.len(),
            phi.omega.len()
        )));
    }
    let lin = |coef: &[f64]| coef[0] + dot(&coef[1..], x_row);
    let gamma = lin(&phi.beta).tanh();
    let alpha = lin(&phi.theta).exp();
    let gop = (phi.omega0 + dot(&phi.omega, z_row) + dot(&phi.eta, x_row)).exp();
    GopPoint::new(gamma, alpha, gop)
}
