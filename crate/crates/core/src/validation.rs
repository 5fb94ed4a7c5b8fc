//! Acceptance criteria A1 to A9. Each criterion runs on its own, reports a
//! measured value against its tolerance and never aborts the others.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::circuit::{Circuit, FeedbackConfig, FeedbackMode};
use crate::error::{Error, Result};
use crate::moments::{
    calibrate_gamma, integrate_feedback_meq, n_ss, n_ss_with_rate, optimal_gain, optimal_gain_with_rate, MeqOptions,
};
use crate::params::{rad_to_hz, validate, LoopTimebase, PhysicalParams, ValidatedParams};
use crate::scenarios::{
    average_spectra, ensemble_spectra, gain_sweep, sideband_window, step_signs, GainSweep, SweepSettings,
};
use crate::spectra::{fit_lorentzian, normalize_in_range, squash_metric, SpectrumEstimate};
use crate::trajectory::{ensemble_occupation, EngineKind, RunSpec};

pub const CRITERIA: [&str; 9] = ["A1", "A2", "A3", "A4", "A5", "A6", "A7", "A8", "A9"];

/// Occupation the calibrated measurement rate brings the optimum down to,
/// starting from `N = 17`.
pub const CALIBRATION_N: f64 = 17.0;
pub const CALIBRATION_TARGET: f64 = 12.0;

/// Filter bandwidth used at the 1 MHz trap.
pub const LAB_BANDWIDTH_HZ: f64 = 30e3;

/// Knobs of the suite. Defaults reproduce the documented run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationConfig {
    pub seed: u64,
    /// Small-scale parameters (`N = 2`, `nu = 100 Gamma`, `gamma = Gamma`).
    pub desk: PhysicalParams,
    /// Loop phase of the damping branch as configured; a wrong sign here
    /// must show up in A4.
    pub damping_phase: f64,
    /// Bandpass width at small scale (Hz).
    pub bandwidth_hz: f64,
    pub filter_order: usize,
    pub delay_samples: usize,
    pub split: f64,
    /// Density-matrix ensemble for A2 and A8.
    pub ensemble: usize,
    /// Density-matrix ensemble per gain in A3.
    pub ensemble_feedback: usize,
    /// Gaussian trajectories per gain in A4.
    pub sweep_traj: usize,
    /// Gaussian trajectories per gain and their length (s) at lab scale.
    pub lab_traj: usize,
    pub lab_time_s: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            seed: 20240611,
            desk: PhysicalParams::desk(),
            damping_phase: -PI / 2.0,
            bandwidth_hz: 4000.0,
            filter_order: 2,
            delay_samples: 1,
            split: 0.5,
            ensemble: 200,
            ensemble_feedback: 100,
            sweep_traj: 24,
            lab_traj: 12,
            lab_time_s: 0.3,
        }
    }
}

/// Outcome of one criterion.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriterionReport {
    pub id: String,
    pub title: String,
    pub passed: bool,
    pub measured: String,
    pub tolerance: String,
    pub runtime_s: f64,
    pub details: serde_json::Value,
}

impl fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {}: {} (tolerance {}) [{:.1} s]",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.title,
            self.measured,
            self.tolerance,
            self.runtime_s
        )
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub criteria: Vec<CriterionReport>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        self.criteria.iter().map(|c| format!("{c}\n")).collect()
    }
}

struct Outcome {
    passed: bool,
    measured: String,
    tolerance: String,
    details: serde_json::Value,
}

fn title(id: &str) -> &'static str {
    match id {
        "A1" => "averaged equation vs closed form",
        "A2" => "laser-cooling fixed point",
        "A3" => "feedback cooling vs closed form",
        "A4" => "gain-curve shape",
        "A5" => "sub-Doppler depth and rate scaling",
        "A6" => "in-loop squashing",
        "A7" => "sideband width and shift",
        "A8" => "gaussian vs density-matrix engine",
        "A9" => "filter edges and loop phase",
        _ => "unknown",
    }
}

/// Runs criterion `id`. Errors become a failed report.
pub fn run_criterion(id: &str, cfg: &ValidationConfig) -> CriterionReport {
    let start = Instant::now();
    let res = match id {
        "A1" => a1(cfg),
        "A2" => a2(cfg),
        "A3" => a3(cfg),
        "A4" => a4(cfg),
        "A5" => a5(cfg),
        "A6" => a6(cfg),
        "A7" => a7(cfg),
        "A8" => a8(cfg),
        "A9" => a9(cfg),
        other => Err(Error::Config(format!("unknown criterion `{other}`"))),
    };
    let runtime_s = start.elapsed().as_secs_f64();
    let o = res.unwrap_or_else(|e| Outcome {
        passed: false,
        measured: format!("error: {e}"),
        tolerance: "-".into(),
        details: json!({ "error": e.to_string() }),
    });
    CriterionReport {
        id: id.to_string(),
        title: title(id).to_string(),
        passed: o.passed,
        measured: o.measured,
        tolerance: o.tolerance,
        runtime_s,
        details: o.details,
    }
}

/// Runs every criterion in order, logging each line as it completes.
pub fn run_all(cfg: &ValidationConfig) -> ValidationReport {
    let mut report = ValidationReport::default();
    for id in CRITERIA {
        let r = run_criterion(id, cfg);
        log::info!("{r}");
        report.criteria.push(r);
    }
    report
}

fn desk(cfg: &ValidationConfig) -> Result<ValidatedParams> {
    validate(&cfg.desk)
}

/// `raw` with `N = 17` and the mirror rate set so that the optimum of the
/// closed form sits at 12 for the in-loop rate `split * gamma`.
pub fn calibrated(raw: &PhysicalParams, split: f64) -> Result<ValidatedParams> {
    let mut r = raw.clone();
    r.n_doppler = CALIBRATION_N;
    let cal = calibrate_gamma(&validate(&r)?, CALIBRATION_TARGET)?;
    r.gamma_mirror_hz = cal.ratio * r.gamma_cool_hz / split;
    validate(&r)
}

fn timebase(p: &ValidatedParams, t: f64) -> Result<LoopTimebase> {
    LoopTimebase::from_trap(p, t)
}

fn a1(cfg: &ValidationConfig) -> Result<Outcome> {
    let mut raw = cfg.desk.clone();
    raw.n_doppler = 4.0;
    let p = validate(&raw)?;
    let dim = 72;
    let (g_opt, _) = optimal_gain(&p)?;
    let mut worst = 0.0_f64;
    let mut rows = Vec::new();
    for m in [0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0] {
        let g = m * g_opt;
        let s = integrate_feedback_meq(&p, g, 12.0 / p.gamma_cool, dim, &MeqOptions::default())?;
        let want = n_ss(&p, g)?;
        let got = s.final_occupation();
        let rel = (got / want - 1.0).abs();
        worst = worst.max(rel);
        rows.push(json!({ "gain": g, "n_meq": got, "n_closed": want, "rel": rel }));
    }
    Ok(Outcome {
        passed: worst <= 1e-3,
        measured: format!("worst relative error {worst:.2e} over 8 gains (N = 4, dim = {dim})"),
        tolerance: "<= 1e-3".into(),
        details: json!({ "points": rows }),
    })
}

fn a2(cfg: &ValidationConfig) -> Result<Outcome> {
    let p = desk(cfg)?;
    let tb = timebase(&p, 6.0 / p.gamma_cool)?;
    let stride = (tb.n_samples() / 10).max(1);
    let spec = RunSpec::new(p.clone(), FeedbackConfig::off(), tb, cfg.split, p.n_doppler)?;
    let ens = ensemble_occupation(
        EngineKind::Sme,
        &spec,
        cfg.seed,
        cfg.ensemble,
        stride,
        1.0 / p.gamma_cool,
    )?;
    let (m, se) = ens.steady_state();
    let z = (m - p.n_doppler).abs() / se;
    Ok(Outcome {
        passed: z <= 3.0,
        measured: format!(
            "<n> = {m:.4} +- {se:.4} vs N = {} ({z:.2} SE, {} trajectories)",
            p.n_doppler, cfg.ensemble
        ),
        tolerance: "3 SE".into(),
        details: json!({ "mean": m, "se": se, "z": z }),
    })
}

fn a3(cfg: &ValidationConfig) -> Result<Outcome> {
    let p = desk(cfg)?;
    let rate = cfg.split * p.gamma_meas;
    let (g_opt, _) = optimal_gain_with_rate(&p, rate)?;
    let tb = timebase(&p, 7.0 / p.gamma_cool)?;
    let stride = tb.n_samples();
    let mut worst = 0.0_f64;
    let mut rows = Vec::new();
    let mut text = Vec::new();
    for m in [0.5, 1.0, 2.0] {
        let g = m * g_opt;
        let fb = FeedbackConfig::ideal(g, -PI / 2.0, cfg.bandwidth_hz);
        let spec = RunSpec::new(p.clone(), fb, tb.clone(), cfg.split, p.n_doppler)?;
        let ens = ensemble_occupation(
            EngineKind::Sme,
            &spec,
            cfg.seed,
            cfg.ensemble_feedback,
            stride,
            2.0 / p.gamma_cool,
        )?;
        let (mean, se) = ens.steady_state();
        let want = n_ss_with_rate(&p, rate, g)?;
        let rel = (mean / want - 1.0).abs();
        worst = worst.max(rel);
        text.push(format!("{mean:.4}/{want:.4}"));
        rows.push(json!({ "gain": g, "n_sme": mean, "se": se, "n_closed": want, "rel": rel }));
    }
    Ok(Outcome {
        passed: worst <= 0.05,
        measured: format!(
            "worst relative error {:.2}% (sim/theory {})",
            100.0 * worst,
            text.join(", ")
        ),
        tolerance: "5%".into(),
        details: json!({ "g_opt": g_opt, "points": rows }),
    })
}

/// Damping-branch shape: significant steps fall then rise, with at least
/// one of each, and the lowest point is below 1 by three standard errors.
pub fn interior_minimum(sweep: &GainSweep, k: f64) -> (bool, usize) {
    let signs = step_signs(sweep, k);
    let nz: Vec<i8> = signs.iter().copied().filter(|s| *s != 0).collect();
    let turn = nz.iter().position(|s| *s > 0).unwrap_or(nz.len());
    let shape = turn > 0 && turn < nz.len() && nz[turn..].iter().all(|s| *s > 0);
    let pts = &sweep.points;
    let (kmin, low) = pts
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.area_norm.total_cmp(&b.1.area_norm))
        .map(|(i, q)| (i, q.area_norm + k * q.area_se))
        .unwrap_or((0, f64::NAN));
    let interior = kmin > 0 && kmin + 1 < pts.len();
    (shape && interior && low < 1.0, kmin)
}

/// No step falls by more than `k` standard errors.
pub fn non_decreasing(sweep: &GainSweep, k: f64) -> bool {
    step_signs(sweep, k).iter().all(|s| *s >= 0)
}

/// Sweep settings of the small-scale gain curves.
pub fn sweep_settings(p: &ValidatedParams, cfg: &ValidationConfig, phase: f64) -> SweepSettings {
    let nu = rad_to_hz(p.nu);
    SweepSettings {
        engine: EngineKind::Gaussian,
        mode: FeedbackMode::Filter,
        phase,
        bandwidth_hz: cfg.bandwidth_hz,
        delay_samples: cfg.delay_samples,
        filter_order: cfg.filter_order,
        split: cfg.split,
        n_traj: cfg.sweep_traj,
        t_total: 300.0 / p.gamma_cool,
        burn_in: 5.0 / p.gamma_cool,
        segment_len: 4096,
        window: sideband_window(nu, cfg.bandwidth_hz),
        n_initial: None,
    }
}

/// Gain multipliers of the optimum for the two branches. The position
/// branch stops short of where the bandpass phase slope destabilises the
/// loop.
pub const DAMPING_GRID: [f64; 7] = [0.0, 0.25, 0.5, 1.0, 1.5, 2.5, 4.0];
pub const SHIFT_GRID: [f64; 5] = [0.0, 0.25, 0.5, 1.0, 1.5];

fn a4(cfg: &ValidationConfig) -> Result<Outcome> {
    let p = calibrated(&cfg.desk, cfg.split)?;
    let (g_opt, _) = optimal_gain_with_rate(&p, cfg.split * p.gamma_meas)?;
    let sweep = |phase: f64, grid: &[f64]| -> Result<GainSweep> {
        let gains: Vec<f64> = grid.iter().map(|m| m * g_opt).collect();
        gain_sweep(&p, &gains, &sweep_settings(&p, cfg, phase), cfg.seed)
    };
    let damping = sweep(cfg.damping_phase, &DAMPING_GRID);
    let shift = sweep(PI, &SHIFT_GRID);
    let describe = |s: &Result<GainSweep>| match s {
        Ok(s) => format!(
            "[{}] signs {:?}",
            s.points
                .iter()
                .map(|q| format!("{:.3}", q.area_norm))
                .collect::<Vec<_>>()
                .join(" "),
            step_signs(s, 3.0)
        ),
        Err(e) => format!("error: {e}"),
    };
    let (ok_damp, kmin) = match &damping {
        Ok(s) => interior_minimum(s, 3.0),
        Err(_) => (false, 0),
    };
    let ok_shift = matches!(&shift, Ok(s) if non_decreasing(s, 3.0));
    Ok(Outcome {
        passed: ok_damp && ok_shift,
        measured: format!(
            "phase {:.3}: {} ({}); phase pi: {} ({})",
            cfg.damping_phase,
            describe(&damping),
            if ok_damp {
                "interior minimum"
            } else {
                "no interior minimum"
            },
            describe(&shift),
            if ok_shift { "non-decreasing" } else { "decreasing step" }
        ),
        tolerance: "step signs at 3 paired SE".into(),
        details: json!({
            "g_opt": g_opt,
            "damping": damping.as_ref().ok(),
            "shift": shift.as_ref().ok(),
            "min_index": kmin,
        }),
    })
}

fn a5(cfg: &ValidationConfig) -> Result<Outcome> {
    let mut raw = cfg.desk.clone();
    raw.n_doppler = CALIBRATION_N;
    let p = validate(&raw)?;
    let cal = calibrate_gamma(&p, CALIBRATION_TARGET)?;
    let depth = cal.n_min <= 0.71 * CALIBRATION_N;
    let scaled = (2.5..=3.5).contains(&cal.n_min_scaled);
    let floor = (2.0 * CALIBRATION_N - 1.0) / 4.0;
    Ok(Outcome {
        passed: depth && scaled,
        measured: format!(
            "gamma/Gamma = {:.4}: n_min = {:.3} ({}); x15: n_min = {:.3} ({}), closed-form floor for any rate {:.2}",
            cal.ratio,
            cal.n_min,
            if depth { "ok" } else { "too high" },
            cal.n_min_scaled,
            if scaled { "ok" } else { "outside" },
            floor
        ),
        tolerance: "n_min <= 0.71 N; scaled n_min in [2.5, 3.5]".into(),
        details: json!({ "calibration": cal, "floor": floor }),
    })
}

fn lab(cfg: &ValidationConfig) -> Result<ValidatedParams> {
    calibrated(&PhysicalParams::lab(400.0), cfg.split)
}

/// Averaged, shot-noise normalised spectra of both detectors.
fn lab_spectra(
    p: &ValidatedParams,
    cfg: &ValidationConfig,
    g: f64,
    phase: f64,
    exclude_hz: f64,
) -> Result<(SpectrumEstimate, SpectrumEstimate)> {
    let mut fb = FeedbackConfig::filter(g, phase, LAB_BANDWIDTH_HZ);
    fb.filter_order = cfg.filter_order;
    fb.delay_samples = cfg.delay_samples;
    let tb = timebase(p, cfg.lab_time_s)?;
    let spec = RunSpec::new(p.clone(), fb, tb, cfg.split, p.n_doppler)?;
    let runs = ensemble_spectra(
        EngineKind::Gaussian,
        &spec,
        cfg.seed,
        cfg.lab_traj,
        1 << 18,
        10.0 / p.gamma_cool,
    )?;
    let nu = rad_to_hz(p.nu);
    let keep = (nu - 60e3, nu + 60e3);
    let norm = |s: SpectrumEstimate| normalize_in_range(s, (nu - exclude_hz, nu + exclude_hz), keep);
    Ok((
        norm(average_spectra(runs.iter().map(|r| &r.in_loop))?)?,
        norm(average_spectra(runs.iter().map(|r| &r.out_loop))?)?,
    ))
}

fn a6(cfg: &ValidationConfig) -> Result<Outcome> {
    let p = lab(cfg)?;
    let (g_opt, _) = optimal_gain_with_rate(&p, cfg.split * p.gamma_meas)?;
    let nu = rad_to_hz(p.nu);
    let window = (nu - 2e3, nu + 2e3);
    let reference = (nu - 60e3, nu + 60e3);
    let mut rows = Vec::new();
    let mut out_clear = true;
    let mut squashed = false;
    let mut text = Vec::new();
    let grid = [0.0, 1.0, 5.0];
    for (k, m) in grid.iter().enumerate() {
        let (s_in, s_out) = lab_spectra(&p, cfg, m * g_opt, -PI / 2.0, 16e3)?;
        let q = squash_metric(&s_in, &s_out, window, reference, 3)?;
        out_clear &= q.out_loop_clear();
        if k + 1 == grid.len() {
            squashed = q.in_loop_squashed();
        }
        text.push(format!(
            "G={:.2}: in {:.3}+-{:.3}, out {:.3}+-{:.3}",
            m * g_opt,
            q.min_in,
            q.sigma_in,
            q.min_out,
            q.sigma_out
        ));
        rows.push(json!({ "gain": m * g_opt, "metric": q }));
    }
    Ok(Outcome {
        passed: squashed && out_clear,
        measured: text.join("; "),
        tolerance: "in-loop min < 1 - 3 sigma at top gain; out-of-loop min >= 1 - 3 sigma".into(),
        details: json!({ "points": rows }),
    })
}

fn a7(cfg: &ValidationConfig) -> Result<Outcome> {
    let p = lab(cfg)?;
    let rate = cfg.split * p.gamma_meas;
    let (g_opt, _) = optimal_gain_with_rate(&p, rate)?;
    let nu = rad_to_hz(p.nu);
    let fit_window = (nu - 5e3, nu + 5e3);
    let (_, off) = lab_spectra(&p, cfg, 0.0, -PI / 2.0, 8e3)?;
    let f0 = fit_lorentzian(&off, fit_window)?;
    let width = rad_to_hz(p.gamma_cool);
    let width_err = (f0.fwhm_hz / width - 1.0).abs();

    let g = 1.5 * g_opt;
    let (_, on) = lab_spectra(&p, cfg, g, PI, 8e3)?;
    let f1 = fit_lorentzian(&on, fit_window)?;
    let want = rad_to_hz(g * rate * p.eta / 2.0);
    let shift = f1.center_hz - f0.center_hz;
    let shift_err = (shift / want - 1.0).abs();
    Ok(Outcome {
        passed: width_err <= 0.1 && shift_err <= 0.1,
        measured: format!(
            "FWHM {:.1} Hz vs {width:.0} Hz ({:.1}%); shift {shift:.1} Hz vs {want:.1} Hz ({:.1}%)",
            f0.fwhm_hz,
            100.0 * width_err,
            100.0 * shift_err
        ),
        tolerance: "10% each".into(),
        details: json!({ "fit_off": f0, "fit_on": f1, "gain": g }),
    })
}

fn a8(cfg: &ValidationConfig) -> Result<Outcome> {
    let p = desk(cfg)?;
    let rate = cfg.split * p.gamma_meas;
    let (g_opt, _) = optimal_gain_with_rate(&p, rate)?;
    let tb = timebase(&p, 5.0 / p.gamma_cool)?;
    let stride = (tb.n_samples() / 10).max(1);
    let fb = FeedbackConfig::ideal(g_opt, -PI / 2.0, cfg.bandwidth_hz);
    let spec = RunSpec::new(p.clone(), fb, tb, cfg.split, 0.0)?;
    let t_end = spec.timebase.t_total;
    let sme = ensemble_occupation(EngineKind::Sme, &spec, cfg.seed, cfg.ensemble, stride, t_end)?;
    let gau = ensemble_occupation(EngineKind::Gaussian, &spec, cfg.seed, cfg.ensemble, stride, t_end)?;
    let mut worst = 0.0_f64;
    let mut rows = Vec::new();
    for k in 0..sme.times.len().min(gau.times.len()) {
        let se = sme.sem[k].hypot(gau.sem[k]);
        let z = (sme.mean[k] - gau.mean[k]).abs() / se;
        worst = worst.max(z);
        rows.push(json!({ "t": sme.times[k], "sme": sme.mean[k], "gaussian": gau.mean[k], "se": se }));
    }
    let n = rows.len();
    Ok(Outcome {
        passed: n >= 10 && worst <= 3.0,
        measured: format!("largest gap {worst:.3} SE over {n} checkpoints"),
        tolerance: "3 SE at 10 checkpoints".into(),
        details: json!({ "checkpoints": rows }),
    })
}

/// Frequency between `a` and `b` where `|h|` crosses `level`.
fn crossing(h: impl Fn(f64) -> f64, mut a: f64, mut b: f64, level: f64) -> f64 {
    let above_a = h(a) > level;
    for _ in 0..100 {
        let m = 0.5 * (a + b);
        if (h(m) > level) == above_a {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

fn a9(cfg: &ValidationConfig) -> Result<Outcome> {
    let p = desk(cfg)?;
    let nu = rad_to_hz(p.nu);
    let fs = timebase(&p, 1.0 / p.gamma_cool)?.sample_rate_hz();
    let b = cfg.bandwidth_hz;
    let mut fb = FeedbackConfig::filter(1.0, cfg.damping_phase, b);
    fb.filter_order = cfg.filter_order;
    fb.delay_samples = cfg.delay_samples;
    let bp = Circuit::standalone(&fb, nu, fs)?;
    let coeffs = bp.coefficients();
    let mag = |f: f64| coeffs.response(f, fs).norm();
    let peak = (0..=800)
        .map(|k| mag(nu - b + k as f64 * b / 400.0))
        .fold(0.0, f64::max);
    let level = peak / 2f64.sqrt();
    let lo = crossing(mag, (nu - 3.0 * b).max(1.0), nu, level);
    let hi = crossing(mag, nu, (nu + 3.0 * b).min(0.5 * fs), level);
    let edge_err = ((nu - lo) / (b / 2.0) - 1.0)
        .abs()
        .max(((hi - nu) / (b / 2.0) - 1.0).abs());

    let mut phase_err = 0.0_f64;
    for phase in [cfg.damping_phase, PI] {
        let mut c = fb.clone();
        c.phase = phase;
        let h = Circuit::in_loop(&c, nu, fs)?.loop_response(nu);
        let e = (h.arg() - phase + PI).rem_euclid(TAU) - PI;
        phase_err = phase_err.max(e.abs());
    }
    Ok(Outcome {
        passed: edge_err <= 0.02 && phase_err <= 0.02,
        measured: format!(
            "edges {lo:.1} / {hi:.1} Hz for {nu:.0} +- {:.0} Hz ({:.2}%); loop phase error {phase_err:.2e} rad",
            b / 2.0,
            100.0 * edge_err
        ),
        tolerance: "edges 2%; phase 0.02 rad".into(),
        details: json!({ "lo": lo, "hi": hi, "fs": fs, "phase_err": phase_err }),
    })
}
