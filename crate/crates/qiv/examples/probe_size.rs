//! Precise null-size measurement for the LR and score tests.
use qiv::mle::{lr_test_null, MleConfig};
use qiv::simgen::{apply_misspec, simulate_replicate, DgpCoefficients, Scenario, ScenarioSpec};
use qiv::tr::{dr_score_test_default, TrConfig};

fn main() {
    let reps: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let seed: u64 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(707);
    let with_score = std::env::args().nth(3).is_some();
    let mut spec = ScenarioSpec::new(Scenario::AllCorrect, 5_000, seed, reps).unwrap();
    spec.dgp = DgpCoefficients::null_att();
    let model = apply_misspec(Scenario::AllCorrect).model_spec();
    let assignment = apply_misspec(Scenario::AllCorrect);
    let out = qiv::reduce::par_map_indexed(reps, |r| {
        let d = simulate_replicate(&spec, r as u64).unwrap();
        let lr = lr_test_null(&d, &model, &MleConfig::default()).map(|t| t.p_value);
        let sc = if with_score {
            dr_score_test_default(&d, &assignment, &TrConfig::default()).map(|t| t.p_value)
        } else {
            Ok(1.0)
        };
        (lr, sc)
    });
    let lr_fail = out.iter().filter(|(a, _)| a.is_err()).count();
    let lr05 = out.iter().filter(|(a, _)| matches!(a, Ok(p) if *p < 0.05)).count();
    let lr01 = out.iter().filter(|(a, _)| matches!(a, Ok(p) if *p < 0.01)).count();
    println!(
        "seed {seed}: LR size@0.05 = {:.4} (@0.01 = {:.4}), failures {lr_fail}",
        lr05 as f64 / reps as f64,
        lr01 as f64 / reps as f64
    );
    if with_score {
        let sc05 = out.iter().filter(|(_, b)| matches!(b, Ok(p) if *p < 0.05)).count();
        println!("          score size@0.05 = {:.4}", sc05 as f64 / reps as f64);
    }
}
