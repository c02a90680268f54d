//! Command execution and structured report emission.
//!
//! Every run writes a `report.json` (stable schema, config echo, dataset
//! fingerprint, estimates, diagnostics, warnings) plus a flat
//! `plot_data.csv` with plot-ready rows. Reports are deterministic given
//! the same inputs and seed, up to the timestamp field.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use qiv::design::{Dataset, ModelSpec};
use qiv::identify::{np_identify, relevance_stat, RelevanceRule, StratumMeans};
use qiv::mle::{fit_mle, lr_test_null, marginal_att_plugin, MleConfig};
use qiv::simgen::{
    apply_misspec, run_mc, simulate_dataset, Estimator, Scenario, ScenarioSpec,
};
use qiv::tr::{dr_score_test_default, fit_nuisances, tr_estimate, TrConfig};
use qiv::QivError;

use crate::csv_io::{load_csv, write_dataset_csv, ColumnRoles};
use crate::{Command, DataArgs, OutputArgs};

pub enum CliError {
    Config(String),
    Io(String),
    Qiv(QivError),
}

impl From<QivError> for CliError {
    fn from(e: QivError) -> Self {
        CliError::Qiv(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

const SCHEMA_VERSION: u32 = 1;

fn roles_of(data: &DataArgs) -> Result<ColumnRoles, CliError> {
    let roles = ColumnRoles {
        outcome: data.outcome.clone(),
        treatment: data.treatment.clone(),
        qiv: data.qiv.clone(),
        covariates: data.covariates.clone(),
    };
    roles.validate().map_err(CliError::Config)?;
    Ok(roles)
}

fn check_level(level: f64) -> Result<(), CliError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "confidence level {level} must lie in (0,1)"
        )))
    }
}

fn dataset_block(d: &Dataset) -> Value {
    json!({
        "rows": d.n(),
        "fingerprint": format!("{:016x}", d.fingerprint()),
        "qiv_columns": d.z_names(),
        "covariate_columns": d.x_names(),
    })
}

#[derive(Serialize)]
struct ReportEnvelope {
    schema_version: u32,
    tool_version: &'static str,
    /// Unix seconds; excluded from determinism guarantees.
    timestamp: u64,
    command: String,
    config: Value,
    dataset: Value,
    results: Value,
    warnings: Vec<String>,
}

fn write_report(
    out_dir: &Path,
    command: &str,
    config: Value,
    dataset: Value,
    results: Value,
    warnings: Vec<String>,
) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(out_dir)?;
    let envelope = ReportEnvelope {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION"),
        timestamp: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        command: command.to_string(),
        config,
        dataset,
        results,
        warnings,
    };
    let path = out_dir.join("report.json");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    serde_json::to_writer_pretty(&mut f, &envelope)
        .map_err(|e| CliError::Io(e.to_string()))?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(path)
}

fn write_plot_table(out_dir: &Path, header: &str, rows: &[String]) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("plot_data.csv"))?);
    writeln!(f, "{header}")?;
    for row in rows {
        writeln!(f, "{row}")?;
    }
    f.flush()?;
    Ok(())
}

fn kappa_warnings(kappa: f64, warnings: &mut Vec<String>) {
    if kappa <= 10.0 {
        warnings.push(format!(
            "weak identification: kappa_hat = {kappa:.3} is at or below 10"
        ));
    }
}

fn spec_for(data: &DataArgs) -> ModelSpec {
    ModelSpec {
        gamma_cols: data.covariates.clone(),
        alpha_cols: data.covariates.clone(),
        gop_cols: data.covariates.clone(),
        qiv_cols: Vec::new(),
        center: data.center,
    }
}

fn config_echo(data: Option<&DataArgs>, output: &OutputArgs, extra: Value) -> Value {
    let mut obj = BTreeMap::new();
    if let Some(d) = data {
        obj.insert("input".to_string(), json!(d.input.display().to_string()));
        obj.insert("outcome".to_string(), json!(d.outcome));
        obj.insert("treatment".to_string(), json!(d.treatment));
        obj.insert("qiv".to_string(), json!(d.qiv));
        obj.insert("covariates".to_string(), json!(d.covariates));
        obj.insert("center".to_string(), json!(d.center));
    }
    obj.insert("out".to_string(), json!(output.out.display().to_string()));
    obj.insert("level".to_string(), json!(output.level));
    if let Value::Object(map) = extra {
        for (k, v) in map {
            obj.insert(k, v);
        }
    }
    json!(obj)
}

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::FitMle { data, output } => run_fit_mle(&data, &output),
        Command::FitTr { data, output } => run_fit_tr(&data, &output),
        Command::TestNull {
            data,
            output,
            method,
        } => run_test_null(&data, &output, &method),
        Command::Identify { data, output } => run_identify(&data, &output),
        Command::Simulate {
            output,
            scenario,
            n,
            seed,
        } => run_simulate(&output, &scenario, n, seed),
        Command::Mc {
            output,
            scenario,
            reps,
            n,
            seed,
            method,
        } => run_mc_cmd(&output, &scenario, reps, n, seed, &method),
    }
}

fn run_fit_mle(data: &DataArgs, output: &OutputArgs) -> Result<(), CliError> {
    check_level(output.level)?;
    let roles = roles_of(data)?;
    let d = load_csv(&data.input, &roles)?;
    let spec = spec_for(data);
    let fit = fit_mle(&d, &spec, &MleConfig::default())?;
    let est = marginal_att_plugin(&fit, &d, &spec, output.level)?;

    let mut warnings = Vec::new();
    kappa_warnings(fit.kappa_hat, &mut warnings);
    if !fit.converged {
        warnings.push("maximum likelihood fit did not converge".into());
    }

    let results = json!({
        "att": est,
        "kappa_hat": fit.kappa_hat,
        "converged": fit.converged,
        "loglik": fit.loglik,
        "coefficients": {
            "beta": fit.phi_hat.beta,
            "theta": fit.phi_hat.theta,
            "omega0": fit.phi_hat.omega0,
            "omega": fit.phi_hat.omega,
            "eta": fit.phi_hat.eta,
        },
        "diagnostics": fit.diagnostics,
    });

    // implied-risk grid at the treated-average link values, plot-ready
    let mut gsum = 0.0;
    let mut asum = 0.0;
    let mut n1 = 0.0;
    let mut buf = Vec::new();
    for i in 0..d.n() {
        if d.a()[i] == 1 {
            d.x_row_into(i, &mut buf);
            gsum += fit.gamma_at(&buf);
            asum += fit.alpha_at(&buf);
            n1 += 1.0;
        }
    }
    let (gbar, abar) = (gsum / n1, asum / n1);
    let mut rows = Vec::new();
    for i in 0..61 {
        let log_gop = -6.0 + 12.0 * (i as f64) / 60.0;
        if let Ok(g) = qiv::gop::GopPoint::new(gbar, abar, log_gop.exp()) {
            if let Ok(r) = qiv::gop::implied_risks(&g) {
                rows.push(format!("{log_gop},{},{},{}", r.p00, r.p01, r.p11));
            }
        }
    }
    write_plot_table(&output.out, "log_gop,p00,p01,p11", &rows)?;
    write_report(
        &output.out,
        "fit-mle",
        config_echo(Some(data), output, json!({})),
        dataset_block(&d),
        results,
        warnings,
    )?;
    Ok(())
}

fn run_fit_tr(data: &DataArgs, output: &OutputArgs) -> Result<(), CliError> {
    check_level(output.level)?;
    let roles = roles_of(data)?;
    let d = load_csv(&data.input, &roles)?;
    let assignment = qiv::simgen::CovariateAssignment {
        gamma_cols: data.covariates.clone(),
        alpha_cols: data.covariates.clone(),
        gop_cols: data.covariates.clone(),
        treat_cols: data.covariates.clone(),
    };

    // one analysis per instrument
    let mut sections = Vec::new();
    let mut warnings = Vec::new();
    let mut rows = Vec::new();
    for (idx, name) in d.z_names().to_vec().iter().enumerate() {
        let config = TrConfig {
            qiv: idx,
            center: data.center,
            ..TrConfig::default()
        };
        let rel = relevance_stat(&d, idx)?;
        let nf = fit_nuisances(&d, &assignment, &config)?;
        let est = tr_estimate(&d, &nf, output.level)?;
        if let Some(mle) = &nf.mle {
            kappa_warnings(mle.kappa_hat, &mut warnings);
        }
        rows.push(format!(
            "{name},{},{},{},{}",
            est.gamma_hat, est.se, est.ci_low, est.ci_high
        ));
        sections.push(json!({
            "qiv": name,
            "att": est,
            "relevance": rel,
            "provenance": nf.provenance,
        }));
    }
    write_plot_table(&output.out, "qiv,estimate,se,ci_low,ci_high", &rows)?;
    write_report(
        &output.out,
        "fit-tr",
        config_echo(Some(data), output, json!({})),
        dataset_block(&d),
        json!({ "per_qiv": sections }),
        warnings,
    )?;
    Ok(())
}

fn run_test_null(data: &DataArgs, output: &OutputArgs, method: &str) -> Result<(), CliError> {
    check_level(output.level)?;
    let roles = roles_of(data)?;
    let d = load_csv(&data.input, &roles)?;
    let spec = spec_for(data);
    let mut results = BTreeMap::new();
    if method == "mle" || method == "both" {
        let lr = lr_test_null(&d, &spec, &MleConfig::default())?;
        results.insert("likelihood_ratio".to_string(), json!(lr));
    }
    if method == "tr" || method == "both" {
        let assignment = qiv::simgen::CovariateAssignment {
            gamma_cols: data.covariates.clone(),
            alpha_cols: data.covariates.clone(),
            gop_cols: data.covariates.clone(),
            treat_cols: data.covariates.clone(),
        };
        let score = dr_score_test_default(&d, &assignment, &TrConfig::default())?;
        results.insert("dr_score".to_string(), json!(score));
    }
    let rows: Vec<String> = results
        .iter()
        .map(|(k, v)| {
            format!(
                "{k},{},{}",
                v["statistic"].as_f64().unwrap_or(f64::NAN),
                v["p_value"].as_f64().unwrap_or(f64::NAN)
            )
        })
        .collect();
    write_plot_table(&output.out, "test,statistic,p_value", &rows)?;
    write_report(
        &output.out,
        "test-null",
        config_echo(Some(data), output, json!({"method": method})),
        dataset_block(&d),
        json!(results),
        Vec::new(),
    )?;
    Ok(())
}

fn run_identify(data: &DataArgs, output: &OutputArgs) -> Result<(), CliError> {
    check_level(output.level)?;
    let roles = roles_of(data)?;
    let d = load_csv(&data.input, &roles)?;
    if d.n_qiv() != 1 {
        return Err(CliError::Config(
            "identify expects exactly one --qiv column".into(),
        ));
    }

    // strata = unique combinations of the (discrete) covariate values
    let mut strata: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for i in 0..d.n() {
        let key = if data.covariates.is_empty() {
            "(all)".to_string()
        } else {
            data.covariates
                .iter()
                .map(|c| format!("{c}={}", d.x_col_by_name(c).unwrap()[i]))
                .collect::<Vec<_>>()
                .join(",")
        };
        strata.entry(key).or_default().push(i);
    }
    if strata.len() > 64 {
        return Err(CliError::Config(format!(
            "{} strata from the selected covariates; identify serves discrete audits",
            strata.len()
        )));
    }

    let rule = RelevanceRule::default();
    let mut sections = Vec::new();
    let mut warnings = Vec::new();
    let mut weighted = 0.0;
    let mut weight = 0.0;
    let mut rows = Vec::new();
    for (key, idx) in &strata {
        let s = StratumMeans::from_rows(&d, 0, idx)?;
        let out = np_identify(&s, &rule)?;
        for w in &out.warnings {
            warnings.push(format!("stratum {key}: {w}"));
        }
        let treated = (s.counts[1][0] + s.counts[1][1]) as f64;
        weighted += treated * out.gamma_x;
        weight += treated;
        rows.push(format!("{key},{},{}", out.alpha_x, out.gamma_x));
        sections.push(json!({
            "stratum": key,
            "alpha_x": out.alpha_x,
            "gamma_x": out.gamma_x,
            "gamma_by_z": [out.gamma_by_z.0, out.gamma_by_z.1],
            "counts": s.counts,
        }));
    }
    let marginal = weighted / weight;
    write_plot_table(&output.out, "stratum,alpha_x,gamma_x", &rows)?;
    write_report(
        &output.out,
        "identify",
        config_echo(Some(data), output, json!({})),
        dataset_block(&d),
        json!({"marginal_gamma": marginal, "strata": sections}),
        warnings,
    )?;
    Ok(())
}

fn run_simulate(output: &OutputArgs, scenario: &str, n: usize, seed: u64) -> Result<(), CliError> {
    let scenario = Scenario::parse(scenario)?;
    let spec = ScenarioSpec::new(scenario, n, seed, 1)?;
    let d = simulate_dataset(&spec)?;
    std::fs::create_dir_all(&output.out)?;
    let path = output.out.join("dataset.csv");
    write_dataset_csv(&d, &path)?;
    let assignment = apply_misspec(scenario);
    write_report(
        &output.out,
        "simulate",
        config_echo(
            None,
            output,
            json!({"scenario": scenario.label(), "n": n, "seed": seed}),
        ),
        dataset_block(&d),
        json!({
            "dataset_path": path.display().to_string(),
            "true_att": spec.dgp.true_att,
            "covariate_assignment": assignment,
        }),
        Vec::new(),
    )?;
    Ok(())
}

fn run_mc_cmd(
    output: &OutputArgs,
    scenario: &str,
    reps: usize,
    n: usize,
    seed: u64,
    method: &str,
) -> Result<(), CliError> {
    check_level(output.level)?;
    let scenario = Scenario::parse(scenario)?;
    let spec = ScenarioSpec::new(scenario, n, seed, reps)?;
    let estimators: Vec<Estimator> = match method {
        "mle" => vec![Estimator::Mle],
        "tr" => vec![Estimator::Tr],
        _ => vec![Estimator::Mle, Estimator::Tr],
    };
    let summary = run_mc(&spec, &estimators, output.level);

    let rows: Vec<String> = summary
        .replicates
        .iter()
        .map(|r| {
            format!(
                "{},{:?},{},{},{},{},{}",
                r.replicate,
                r.estimator,
                r.estimate.map(|v| v.to_string()).unwrap_or_default(),
                r.se.map(|v| v.to_string()).unwrap_or_default(),
                r.ci_low.map(|v| v.to_string()).unwrap_or_default(),
                r.ci_high.map(|v| v.to_string()).unwrap_or_default(),
                r.error.clone().unwrap_or_default()
            )
        })
        .collect();
    write_plot_table(
        &output.out,
        "replicate,estimator,estimate,se,ci_low,ci_high,error",
        &rows,
    )?;
    write_report(
        &output.out,
        "mc",
        config_echo(
            None,
            output,
            json!({
                "scenario": scenario.label(), "n": n, "seed": seed,
                "reps": reps, "method": method,
            }),
        ),
        json!({"rows": n, "replicates": reps}),
        json!({
            "true_att": summary.true_att,
            "summaries": summary.summaries,
        }),
        Vec::new(),
    )?;
    Ok(())
}
