//! Runs the eight engine acceptance criteria at their stated tolerances and
//! prints one PASS/FAIL line per criterion.

use std::process::ExitCode;

use glcd_core::checks::{
    convergence, coverage, defaults, degenerate, determinism, fusion_oracle, spectral, vmcr_descent, vmcr_gradient,
    CheckOutcome,
};

const SEED: u64 = 20_240_601;

fn main() -> ExitCode {
    let criteria: Vec<(&str, Vec<CheckOutcome>)> = vec![
        ("fusion oracle equivalence", vec![fusion_oracle(64, SEED)]),
        ("motion-loss gradient", vec![vmcr_gradient(24, SEED)]),
        ("descent property", vec![vmcr_descent(100, SEED)]),
        ("spectral fusion", vec![spectral(SEED)]),
        ("coverage and determinism", vec![coverage(1000, SEED), determinism(SEED)]),
        ("degenerate equivalence", vec![degenerate(&[5, 50], SEED)]),
        ("analytic-denoiser convergence", vec![convergence(20)]),
        ("hyperparameter defaults", vec![defaults()]),
    ];
    let mut failed = 0;
    for (i, (title, outcomes)) in criteria.iter().enumerate() {
        let passed = outcomes.iter().all(|o| o.passed);
        failed += usize::from(!passed);
        let detail: Vec<String> =
            outcomes.iter().map(|o| format!("{} ({:.2}s)", o.detail, o.elapsed.as_secs_f64())).collect();
        println!("criterion {}: {} {title}: {}", i + 1, if passed { "PASS" } else { "FAIL" }, detail.join("; "));
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
