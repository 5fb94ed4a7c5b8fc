use std::f64::consts::{PI, TAU};

use ion_feedback::circuit::{Circuit, FeedbackConfig, FeedbackMode};
use ion_feedback::fock::{default_dim, thermal_state};
use ion_feedback::gaussian::{GaussianEngine, GaussianState, DET_TOL};
use ion_feedback::params::{validate, PhysicalParams};
use ion_feedback::rng::NoiseStream;
use ion_feedback::spectra::welch_psd;
use ion_feedback::trajectory::Engine;
use proptest::prelude::*;

fn wrap(x: f64) -> f64 {
    (x + PI).rem_euclid(TAU) - PI
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // a tone through the sampled electronics comes out with the configured
    // gain and phase, and matches the analytic response
    #[test]
    fn tone_through_circuit(
        phase in -PI..PI,
        rel_bw in 0.05f64..0.3,
        order in prop::sample::select(vec![2usize, 4]),
        delay in 1usize..4,
        gain in 0.1f64..5.0,
    ) {
        let f0 = 40e3;
        let fs = 8.0 * f0;
        let cfg = FeedbackConfig {
            gain_electronic: gain,
            phase,
            bandwidth_hz: rel_bw * f0,
            delay_samples: delay,
            mode: FeedbackMode::Filter,
            calibration: 1.0,
            filter_order: order,
        };
        let mut c = Circuit::standalone(&cfg, f0, fs).unwrap();
        let w = TAU * f0 / fs;
        let settle = (40.0 * fs / cfg.bandwidth_hz) as usize;
        let m = 8 * 200;
        let (mut i, mut q) = (0.0, 0.0);
        for k in 0..settle + m {
            let y = c.process_sample((w * k as f64).cos());
            if k >= settle {
                i += y * (w * k as f64).cos();
                q -= y * (w * k as f64).sin();
            }
        }
        let (i, q) = (2.0 * i / m as f64, 2.0 * q / m as f64);
        let amp = i.hypot(q);
        prop_assert!((amp / gain - 1.0).abs() < 1e-3, "amp {amp} vs {gain}");
        prop_assert!(wrap(q.atan2(i) - phase).abs() < 1e-3, "phase {} vs {phase}", q.atan2(i));
        let h = c.response(f0);
        prop_assert!((h.norm() / gain - 1.0).abs() < 1e-9);
        prop_assert!(wrap(h.arg() - phase).abs() < 1e-9);
    }

    #[test]
    fn welch_keeps_power(seed in 0u64..1000, amp in 0.1f64..3.0, bin in 20usize..400) {
        let (fs, len) = (1e5, 1024);
        let f = bin as f64 * fs / len as f64;
        let mut rng = NoiseStream::new(seed, 0);
        let noise: Vec<f64> = (0..1 << 16).map(|_| rng.normal()).collect();
        let s = welch_psd(&noise, fs, len, 0.5).unwrap();
        let var = noise.iter().map(|x| x * x).sum::<f64>() / noise.len() as f64;
        prop_assert!((s.total_power() / var - 1.0).abs() < 0.01);

        let tone: Vec<f64> = (0..1 << 14).map(|k| amp * (TAU * f * k as f64 / fs).cos()).collect();
        let s = welch_psd(&tone, fs, len, 0.5).unwrap();
        let df = s.resolution();
        let near: f64 = s.psd[bin - 3..=bin + 3].iter().sum::<f64>() * df;
        prop_assert!((near / (amp * amp / 2.0) - 1.0).abs() < 1e-3);
    }

    // measurement, damping and random kicks never take the conditional
    // state out of the physical set
    #[test]
    fn gaussian_state_stays_physical(seed in 0u64..1000, n0 in 0.0f64..20.0, kick in 0.0f64..0.05, split in 0.0f64..1.0) {
        let p = validate(&PhysicalParams::desk()).unwrap();
        let dt = 1.0 / (320.0 * p.nu / TAU);
        let mut e = GaussianEngine::new(&p, split * p.gamma_meas, (1.0 - split) * p.gamma_meas, dt, GaussianState::thermal(n0));
        let mut rng = NoiseStream::new(seed, 1);
        let sq = dt.sqrt();
        for _ in 0..4000 {
            let k = kick * rng.normal();
            e.step(rng.wiener(sq), rng.wiener(sq), k).unwrap();
            let s = e.state();
            prop_assert!(s.det() >= 1.0 - DET_TOL);
            prop_assert!(e.occupation() >= -1e-12);
        }
    }
}

#[test]
fn default_truncation_holds_thermal_states() {
    for n in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 17.0, 30.0] {
        let d = default_dim(n);
        assert!(thermal_state(n, d).is_ok(), "n = {n}, dim {d}");
    }
}
