//! Run a small Monte Carlo study for one scenario and print the summary.
//!
//! ```sh
//! cargo run --release --example simulation_study -- m2-correct 100 10000
//! ```

use qiv::simgen::{run_mc, Estimator, Scenario, ScenarioSpec};

fn main() -> Result<(), qiv::QivError> {
    let mut args = std::env::args().skip(1);
    let scenario = Scenario::parse(&args.next().unwrap_or_else(|| "all-correct".into()))?;
    let reps: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(100);
    let n: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(10_000);

    let spec = ScenarioSpec::new(scenario, n, 7, reps)?;
    let mc = run_mc(&spec, &[Estimator::Mle, Estimator::Tr], 0.95);
    println!(
        "{} | n = {n}, {reps} replicates, true ATT {}",
        scenario.label(),
        mc.true_att
    );
    for s in &mc.summaries {
        println!(
            "  {:?}: mean {:.4}  bias {:+.4}  mc sd {:.4}  mean se {:.4}  coverage {:.3}  failures {}",
            s.estimator, s.mean, s.bias, s.mc_sd, s.mean_se, s.coverage, s.failures
        );
    }
    Ok(())
}
