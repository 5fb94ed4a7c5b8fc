//! Acceptance suite: one line per criterion, then the controls.
//!
//! Runs without the test harness so every line is printed. A5 cannot pass
//! at any measurement rate (the closed-form optimum never drops below
//! `(2N - 1)/4`, far above its 3.5 ceiling); it is run as written, reported,
//! and checked to fail for exactly that reason.

use std::f64::consts::PI;
use std::process::ExitCode;

use ion_feedback::moments::calibrate_gamma;
use ion_feedback::params::validate;
use ion_feedback::validation::{run_criterion, ValidationConfig, CALIBRATION_N, CALIBRATION_TARGET, CRITERIA};

const KNOWN_INFEASIBLE: &[&str] = &["A5"];

fn main() -> ExitCode {
    let cfg = ValidationConfig::default();
    let mut problems = Vec::new();

    for id in CRITERIA {
        let r = run_criterion(id, &cfg);
        println!("{r}");
        let expected = !KNOWN_INFEASIBLE.contains(&id);
        if r.passed != expected {
            problems.push(format!("{id}: passed = {}, expected {expected}", r.passed));
        }
    }

    // the infeasibility is structural, not statistical
    let mut raw = cfg.desk.clone();
    raw.n_doppler = CALIBRATION_N;
    let cal = calibrate_gamma(&validate(&raw).unwrap(), CALIBRATION_TARGET).unwrap();
    let floor = (2.0 * CALIBRATION_N - 1.0) / 4.0;
    let a5 = (cal.n_min - CALIBRATION_TARGET).abs() < 1e-6 && cal.n_min_scaled > floor && floor > 3.5;
    println!(
        "A5 analysis: n_min {:.3}, scaled {:.3} >= floor {floor:.2} > 3.5: {}",
        cal.n_min,
        cal.n_min_scaled,
        if a5 { "confirmed" } else { "NOT confirmed" }
    );
    if !a5 {
        problems.push("A5 analysis".into());
    }

    // negative control: a mis-signed loop phase must fail the shape check
    let wrong = ValidationConfig {
        damping_phase: PI / 2.0,
        ..cfg.clone()
    };
    let r = run_criterion("A4", &wrong);
    println!("control (phase +pi/2) {r}");
    if r.passed {
        problems.push("mis-signed phase passed A4".into());
    }

    // statistical tolerances hold at other seeds
    for seed in [cfg.seed + 1, cfg.seed + 2] {
        let r = run_criterion("A4", &ValidationConfig { seed, ..cfg.clone() });
        println!("control (seed {seed}) {r}");
        if !r.passed {
            problems.push(format!("A4 at seed {seed}"));
        }
    }

    if problems.is_empty() {
        println!("acceptance: all criteria as expected");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: unexpected outcomes: {}", problems.join("; "));
        ExitCode::FAILURE
    }
}
