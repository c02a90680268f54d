//! Strict CSV ingestion and emission.
//!
//! Mandatory header, comma delimiter, UTF-8, no quoting of numeric fields.
//! Binary roles accept exactly `0` or `1`; covariates must parse as finite
//! reals; an empty cell is a hard error naming its location — no silent
//! coercion and no imputation.

use std::path::Path;

use qiv::design::Dataset;
use qiv::QivError;

#[derive(Debug, Clone)]
pub struct ColumnRoles {
    pub outcome: String,
    pub treatment: String,
    pub qiv: Vec<String>,
    pub covariates: Vec<String>,
}

impl ColumnRoles {
    /// Roles must be pairwise disjoint.
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = std::collections::BTreeSet::new();
        for name in std::iter::once(&self.outcome)
            .chain(std::iter::once(&self.treatment))
            .chain(&self.qiv)
            .chain(&self.covariates)
        {
            if !seen.insert(name.clone()) {
                return Err(format!("column `{name}` assigned to more than one role"));
            }
        }
        Ok(())
    }
}

pub fn load_csv(path: &Path, roles: &ColumnRoles) -> Result<Dataset, QivError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| QivError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| QivError::Data("empty file: header required".into()))?;
    let columns: Vec<&str> = header.split(',').map(|s| s.trim_end_matches('\r')).collect();

    let find = |name: &str| -> Result<usize, QivError> {
        columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| QivError::UnknownColumn(name.to_string()))
    };
    let outcome_idx = find(&roles.outcome)?;
    let treatment_idx = find(&roles.treatment)?;
    let qiv_idx: Vec<usize> = roles.qiv.iter().map(|n| find(n)).collect::<Result<_, _>>()?;
    let cov_idx: Vec<usize> = roles
        .covariates
        .iter()
        .map(|n| find(n))
        .collect::<Result<_, _>>()?;

    let parse_binary = |field: &str, row: usize, col: &str| -> Result<u8, QivError> {
        match field {
            "0" => Ok(0),
            "1" => Ok(1),
            "" => Err(QivError::Data(format!(
                "missing cell at row {row}, column {col}"
            ))),
            other => Err(QivError::Data(format!(
                "non-binary value `{other}` at row {row}, column {col}"
            ))),
        }
    };
    let parse_real = |field: &str, row: usize, col: &str| -> Result<f64, QivError> {
        if field.is_empty() {
            return Err(QivError::Data(format!(
                "missing cell at row {row}, column {col}"
            )));
        }
        let v: f64 = field.parse().map_err(|_| {
            QivError::Data(format!(
                "non-numeric value `{field}` at row {row}, column {col}"
            ))
        })?;
        if !v.is_finite() {
            return Err(QivError::Data(format!(
                "non-finite value at row {row}, column {col}"
            )));
        }
        Ok(v)
    };

    let mut y = Vec::new();
    let mut a = Vec::new();
    let mut z_cols: Vec<Vec<u8>> = vec![Vec::new(); qiv_idx.len()];
    let mut x_cols: Vec<Vec<f64>> = vec![Vec::new(); cov_idx.len()];
    for (lineno, line) in lines.enumerate() {
        let row = lineno + 2; // 1-based, after header
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(|s| s.trim_end_matches('\r')).collect();
        if fields.len() != columns.len() {
            return Err(QivError::Data(format!(
                "row {row} has {} fields, header has {}",
                fields.len(),
                columns.len()
            )));
        }
        y.push(parse_binary(fields[outcome_idx], row, &roles.outcome)?);
        a.push(parse_binary(fields[treatment_idx], row, &roles.treatment)?);
        for (k, &idx) in qiv_idx.iter().enumerate() {
            z_cols[k].push(parse_binary(fields[idx], row, &roles.qiv[k])?);
        }
        for (k, &idx) in cov_idx.iter().enumerate() {
            x_cols[k].push(parse_real(fields[idx], row, &roles.covariates[k])?);
        }
    }

    Dataset::new(
        y,
        a,
        z_cols,
        x_cols,
        roles.qiv.clone(),
        roles.covariates.clone(),
    )
}

/// Write a dataset with its column names; floats use shortest
/// round-trippable formatting so load-after-write is bit identical.
pub fn write_dataset_csv(d: &Dataset, path: &Path) -> std::io::Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header: Vec<String> = vec!["y".into(), "a".into()];
    header.extend(d.z_names().iter().cloned());
    header.extend(d.x_names().iter().cloned());
    writeln!(out, "{}", header.join(","))?;
    for i in 0..d.n() {
        let mut fields: Vec<String> = vec![d.y()[i].to_string(), d.a()[i].to_string()];
        for k in 0..d.n_qiv() {
            fields.push(d.z_col(k)[i].to_string());
        }
        for k in 0..d.x_names().len() {
            fields.push(format!("{}", d.x_col(k)[i]));
        }
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()
}
