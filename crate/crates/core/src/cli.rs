//! Command line: configuration loading, scenario runs and their manifests.
//!
//! `run <scenario> --config <path> --seed <u64> --engine {sme|gaussian} --out <dir>`
//!
//! The config is a flat JSON object; unknown keys are rejected. Any key can
//! be overridden from the environment as `IONFB_<KEY>` (e.g.
//! `IONFB_FB_PHASE_RAD=3.14159`), the value parsed as JSON when possible
//! and as a string otherwise.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::circuit::{FeedbackConfig, FeedbackMode, FILTER_CALIBRATION};
use crate::error::{Error, Result};
use crate::moments::{optimal_gain_with_rate, theory_csv, theory_sweep, Regime};
use crate::params::{rad_to_hz, validate, LoopTimebase, PhysicalParams, ValidatedParams, STEPS_PER_SAMPLE};
use crate::record::{git_describe, RunMetadata};
use crate::scenarios::{
    average_spectra, ensemble_spectra, gain_sweep, segment_len_for, sideband_window, SweepSettings,
};
use crate::spectra::{fit_lorentzian, normalize_in_range};
use crate::trajectory::{run_record, EngineKind, RunSpec};
use crate::validation::{run_all, ValidationConfig, DAMPING_GRID, SHIFT_GRID};

pub const ENV_PREFIX: &str = "IONFB_";

/// Everything a run reads from its config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub nu_hz: f64,
    pub gamma_cool_hz: f64,
    pub n_doppler: f64,
    pub gamma_mirror_hz: f64,
    pub eta: f64,
    pub epsilon: Option<f64>,
    pub seed: u64,
    /// Integration step; `1/(320 nu)` when absent.
    pub dt_sme_s: Option<f64>,
    /// Trajectory length; scenario default when absent.
    pub t_total_s: Option<f64>,
    /// Electronic gain.
    pub fb_gain: f64,
    pub fb_phase_rad: f64,
    pub fb_bandwidth_hz: f64,
    pub fb_delay_samples: usize,
    pub fb_mode: FeedbackMode,
    /// Theory gain per unit electronic gain; 1 for the ideal loop and 2 for
    /// the filter loop when absent.
    pub fb_calibration: Option<f64>,
    pub fb_filter_order: usize,
    /// Share of the mirror light on the in-loop detector.
    pub split: f64,
    /// Trajectories per ensemble.
    pub ensemble: usize,
    /// Theory gains for the spectra and sweep scenarios; multiples of the
    /// optimum when absent.
    pub gains: Option<Vec<f64>>,
    pub n_initial: Option<f64>,
    /// Spectral bin spacing; `Gamma / 5` when absent.
    pub resolution_hz: Option<f64>,
    pub ensemble_feedback: usize,
    pub sweep_traj: usize,
    pub lab_traj: usize,
    pub lab_time_s: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = PhysicalParams::desk();
        let v = ValidationConfig::default();
        Self {
            nu_hz: d.nu_hz,
            gamma_cool_hz: d.gamma_cool_hz,
            n_doppler: d.n_doppler,
            gamma_mirror_hz: d.gamma_mirror_hz,
            eta: d.eta,
            epsilon: d.epsilon,
            seed: v.seed,
            dt_sme_s: None,
            t_total_s: None,
            fb_gain: 0.0,
            fb_phase_rad: -PI / 2.0,
            fb_bandwidth_hz: v.bandwidth_hz,
            fb_delay_samples: v.delay_samples,
            fb_mode: FeedbackMode::Filter,
            fb_calibration: None,
            fb_filter_order: v.filter_order,
            split: v.split,
            ensemble: v.ensemble,
            gains: None,
            n_initial: None,
            resolution_hz: None,
            ensemble_feedback: v.ensemble_feedback,
            sweep_traj: v.sweep_traj,
            lab_traj: v.lab_traj,
            lab_time_s: v.lab_time_s,
        }
    }
}

impl RunConfig {
    pub fn physical(&self) -> PhysicalParams {
        PhysicalParams {
            nu_hz: self.nu_hz,
            gamma_cool_hz: self.gamma_cool_hz,
            n_doppler: self.n_doppler,
            gamma_mirror_hz: self.gamma_mirror_hz,
            eta: self.eta,
            epsilon: self.epsilon,
        }
    }

    pub fn params(&self) -> Result<ValidatedParams> {
        validate(&self.physical())
    }

    pub fn calibration(&self) -> f64 {
        self.fb_calibration.unwrap_or(match self.fb_mode {
            FeedbackMode::Filter => FILTER_CALIBRATION,
            FeedbackMode::IdealDemod => 1.0,
        })
    }

    /// Loop settings at electronic gain `fb_gain`.
    pub fn feedback(&self) -> FeedbackConfig {
        FeedbackConfig {
            gain_electronic: self.fb_gain,
            phase: self.fb_phase_rad,
            bandwidth_hz: self.fb_bandwidth_hz,
            delay_samples: self.fb_delay_samples,
            mode: self.fb_mode,
            calibration: self.calibration(),
            filter_order: self.fb_filter_order,
        }
    }

    pub fn timebase(&self, p: &ValidatedParams, default_t: f64) -> Result<LoopTimebase> {
        let t = self.t_total_s.unwrap_or(default_t);
        match self.dt_sme_s {
            Some(dt) => LoopTimebase::new(dt, STEPS_PER_SAMPLE, t, p),
            None => LoopTimebase::from_trap(p, t),
        }
    }

    pub fn validation(&self) -> ValidationConfig {
        ValidationConfig {
            seed: self.seed,
            desk: self.physical(),
            damping_phase: self.fb_phase_rad,
            bandwidth_hz: self.fb_bandwidth_hz,
            filter_order: self.fb_filter_order,
            delay_samples: self.fb_delay_samples,
            split: self.split,
            ensemble: self.ensemble,
            ensemble_feedback: self.ensemble_feedback,
            sweep_traj: self.sweep_traj,
            lab_traj: self.lab_traj,
            lab_time_s: self.lab_time_s,
        }
    }
}

/// Reads a config (defaults when `path` is `None`) and applies the
/// environment overrides in `env`.
pub fn load_config(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig> {
    let mut obj: Map<String, Value> = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            match serde_json::from_str(&text)? {
                Value::Object(m) => m,
                _ => return Err(Error::Config(format!("{}: top level is not an object", p.display()))),
            }
        }
        None => Map::new(),
    };
    for (k, v) in env {
        if let Some(key) = k.strip_prefix(ENV_PREFIX) {
            let value = serde_json::from_str(&v).unwrap_or(Value::String(v));
            obj.insert(key.to_ascii_lowercase(), value);
        }
    }
    serde_json::from_value(Value::Object(obj)).map_err(|e| Error::Config(e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Photocurrent spectra of both detectors at a few gains.
    Fig2,
    /// Gain sweep on the damping branch.
    Fig3a,
    /// Gain sweep on the position branch.
    Fig3b,
    /// The acceptance suite.
    Validate,
    /// One recorded trajectory at the configured loop settings.
    Trajectory,
}

impl Scenario {
    fn id(self) -> &'static str {
        match self {
            Self::Fig2 => "fig2",
            Self::Fig3a => "fig3a",
            Self::Fig3b => "fig3b",
            Self::Validate => "validate",
            Self::Trajectory => "trajectory",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ion-feedback", version, about = "Feedback cooling of a trapped ion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Runs a scenario and writes its outputs.
    Run {
        scenario: Scenario,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "gaussian")]
        engine: EngineKind,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

/// Record of a run, enough to repeat it exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario: Scenario,
    pub config: RunConfig,
    pub seed: u64,
    pub engine: EngineKind,
    pub outputs: Vec<String>,
    pub wall_clock_s: f64,
    pub steps: u64,
    pub crate_version: String,
    pub git: Option<String>,
}

/// What a finished run reports back.
#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    /// `false` when a validation criterion failed.
    pub success: bool,
}

struct Writer<'a> {
    dir: &'a Path,
    outputs: Vec<String>,
}

impl Writer<'_> {
    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.dir.join(name), contents)?;
        self.outputs.push(name.to_string());
        Ok(())
    }
}

/// Runs `scenario` with `cfg` into `out`; the manifest is written last.
pub fn run_scenario(scenario: Scenario, cfg: &RunConfig, engine: EngineKind, out: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let mut w = Writer {
        dir: out,
        outputs: Vec::new(),
    };
    let (steps, success) = match scenario {
        Scenario::Trajectory => (trajectory(cfg, engine, &mut w)?, true),
        Scenario::Fig2 => (spectra(cfg, engine, &mut w)?, true),
        Scenario::Fig3a => (sweep(cfg, engine, cfg.fb_phase_rad, &DAMPING_GRID, &mut w)?, true),
        Scenario::Fig3b => (sweep(cfg, engine, PI, &SHIFT_GRID, &mut w)?, true),
        Scenario::Validate => {
            let report = run_all(&cfg.validation());
            print!("{}", report.table());
            w.write("validation.json", &serde_json::to_string_pretty(&report)?)?;
            (0, report.all_passed())
        }
    };
    let manifest = RunManifest {
        scenario,
        config: cfg.clone(),
        seed: cfg.seed,
        engine,
        outputs: w.outputs,
        wall_clock_s: start.elapsed().as_secs_f64(),
        steps,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        git: git_describe(),
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(RunOutcome { manifest, success })
}

fn trajectory(cfg: &RunConfig, engine: EngineKind, w: &mut Writer) -> Result<u64> {
    let p = cfg.params()?;
    let tb = cfg.timebase(&p, 10.0 / p.gamma_cool)?;
    let steps = tb.n_steps() as u64;
    let spec = RunSpec::new(
        p.clone(),
        cfg.feedback(),
        tb,
        cfg.split,
        cfg.n_initial.unwrap_or(p.n_doppler),
    )?;
    let rec = run_record(engine, &spec, cfg.seed, 0)?;
    let stem = format!("trajectory_{}", engine.name());
    let meta = RunMetadata::new(cfg.seed, 0, engine.name(), serde_json::to_value(cfg)?);
    rec.write(w.dir, &stem, &meta)?;
    w.outputs.push(format!("{stem}.csv"));
    w.outputs.push(format!("{stem}.json"));
    Ok(steps)
}

/// Theory gains of a scenario: the configured list, or multiples of the
/// optimum at the loop rate.
fn gain_grid(cfg: &RunConfig, p: &ValidatedParams, multiples: &[f64]) -> Result<Vec<f64>> {
    if let Some(g) = &cfg.gains {
        return Ok(g.clone());
    }
    let (g_opt, _) = optimal_gain_with_rate(p, cfg.split * p.gamma_meas)?;
    Ok(multiples.iter().map(|m| m * g_opt).collect())
}

fn segment_len(cfg: &RunConfig, p: &ValidatedParams, fs: f64) -> usize {
    let res = cfg.resolution_hz.unwrap_or(rad_to_hz(p.gamma_cool) / 5.0);
    segment_len_for(fs, res)
}

fn spectra(cfg: &RunConfig, engine: EngineKind, w: &mut Writer) -> Result<u64> {
    let p = cfg.params()?;
    let nu = rad_to_hz(p.nu);
    let gains = gain_grid(cfg, &p, &[0.0, 1.0, 5.0])?;
    let tb = cfg.timebase(&p, 300.0 / p.gamma_cool)?;
    let len = segment_len(cfg, &p, tb.sample_rate_hz());
    let burn_in = 5.0 / p.gamma_cool;
    let window = sideband_window(nu, cfg.fb_bandwidth_hz);
    let keep = (nu - 1.5 * (nu - window.0), nu + 1.5 * (window.1 - nu));
    let half = (0.4 * nu).min(25.0 * rad_to_hz(p.gamma_cool));
    let fit_window = (nu - half, nu + half);
    let mut steps = 0;
    let mut summary = Vec::new();
    for (k, &g) in gains.iter().enumerate() {
        let mut fb = cfg.feedback();
        fb.gain_electronic = g / fb.calibration;
        let spec = RunSpec::new(
            p.clone(),
            fb,
            tb.clone(),
            cfg.split,
            cfg.n_initial.unwrap_or(p.n_doppler),
        )?;
        let runs = ensemble_spectra(engine, &spec, cfg.seed, cfg.ensemble, len, burn_in)?;
        steps += (tb.n_steps() * cfg.ensemble) as u64;
        let mut fits = Map::new();
        for (name, var) in [
            ("in", runs.iter().map(|r| r.var_in).sum::<f64>()),
            ("out", runs.iter().map(|r| r.var_out).sum::<f64>()),
        ] {
            let avg = average_spectra(runs.iter().map(|r| if name == "in" { &r.in_loop } else { &r.out_loop }))?;
            let parseval = avg.total_power() / (var / runs.len() as f64);
            let s = normalize_in_range(avg, window, keep)?;
            w.write(&format!("spectrum_{name}_g{k}.csv"), &s.to_csv())?;
            let fit = fit_lorentzian(&s, fit_window);
            fits.insert(
                name.into(),
                json!({
                    "floor": s.floor,
                    "segments": s.segments,
                    "parseval_ratio": parseval,
                    "fit": fit.as_ref().ok(),
                    "fit_error": fit.as_ref().err().map(|e| e.to_string()),
                }),
            );
        }
        let (n, _) = crate::trajectory::mean_sem(&runs.iter().map(|r| r.n_mean).collect::<Vec<_>>());
        summary.push(json!({ "index": k, "gain": g, "n_mean": n, "channels": fits }));
    }
    w.write("fits.json", &serde_json::to_string_pretty(&summary)?)?;
    Ok(steps)
}

fn sweep(cfg: &RunConfig, engine: EngineKind, phase: f64, multiples: &[f64], w: &mut Writer) -> Result<u64> {
    let on_branch = |a: f64| ((phase - a + PI).rem_euclid(2.0 * PI) - PI).abs() < 1e-6;
    if !on_branch(-PI / 2.0) && !on_branch(PI) {
        return Err(Error::InvalidParameter {
            name: "fb_phase_rad",
            reason: format!("gain sweeps run at -pi/2 or pi, not {phase}"),
        });
    }
    let p = cfg.params()?;
    let nu = rad_to_hz(p.nu);
    let gains = gain_grid(cfg, &p, multiples)?;
    let tb = cfg.timebase(&p, 300.0 / p.gamma_cool)?;
    let s = SweepSettings {
        engine,
        mode: cfg.fb_mode,
        phase,
        bandwidth_hz: cfg.fb_bandwidth_hz,
        delay_samples: cfg.fb_delay_samples,
        filter_order: cfg.fb_filter_order,
        split: cfg.split,
        n_traj: cfg.ensemble,
        t_total: tb.t_total,
        burn_in: 5.0 / p.gamma_cool,
        segment_len: segment_len(cfg, &p, tb.sample_rate_hz()),
        window: sideband_window(nu, cfg.fb_bandwidth_hz),
        n_initial: cfg.n_initial,
    };
    let result = gain_sweep(&p, &gains, &s, cfg.seed)?;
    w.write("sweep.csv", &result.to_csv())?;
    w.write("sweep.json", &serde_json::to_string_pretty(&result)?)?;
    let regime = if on_branch(PI) { Regime::Shift } else { Regime::Damping };
    let theory = theory_sweep(&p, cfg.split * p.gamma_meas, &gains, regime)?;
    w.write("theory.csv", &theory_csv(&theory))?;
    Ok((tb.n_steps() * cfg.ensemble * result.points.len()) as u64)
}

/// Machine-readable error report.
pub fn error_json(e: &Error) -> Value {
    let kind = format!("{e:?}");
    let kind = kind
        .split(|c: char| !c.is_alphanumeric())
        .next()
        .unwrap_or("Error")
        .to_string();
    json!({ "error": kind, "message": e.to_string() })
}

/// Entry point; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let Command::Run {
        scenario,
        config,
        seed,
        engine,
        out,
    } = cli.command;
    let result = load_config(config.as_deref(), std::env::vars()).and_then(|mut cfg| {
        if let Some(s) = seed {
            cfg.seed = s;
        }
        run_scenario(scenario, &cfg, engine, &out)
    });
    match result {
        Ok(o) => {
            log::info!(
                "{} finished in {:.1} s; outputs in {}",
                scenario.id(),
                o.manifest.wall_clock_s,
                out.display()
            );
            if o.success {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_are_the_desk_preset() {
        let c = load_config(None, env(&[])).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.physical(), PhysicalParams::desk());
        assert_eq!(c.feedback().theory_gain(), 0.0);
    }

    #[test]
    fn unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"nu_hz": 5e4, "colour": "blue"}"#).unwrap();
        assert!(matches!(load_config(Some(&path), env(&[])), Err(Error::Config(_))));
        fs::write(&path, r#"{"nu_hz": 5e4}"#).unwrap();
        assert_eq!(load_config(Some(&path), env(&[])).unwrap().nu_hz, 5e4);
        assert!(matches!(
            load_config(None, env(&[("IONFB_SHAPE", "1")])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn env_overrides() {
        let c = load_config(
            None,
            env(&[
                ("IONFB_FB_PHASE_RAD", "3.0"),
                ("IONFB_FB_MODE", "ideal-demod"),
                ("IONFB_GAINS", "[0, 1.5]"),
                ("OTHER_SEED", "5"),
            ]),
        )
        .unwrap();
        assert_eq!(c.fb_phase_rad, 3.0);
        assert_eq!(c.fb_mode, FeedbackMode::IdealDemod);
        assert_eq!(c.gains, Some(vec![0.0, 1.5]));
        assert_eq!(c.seed, RunConfig::default().seed);
        assert_eq!(c.calibration(), 1.0);
    }

    #[test]
    fn cli_parses() {
        let c = Cli::try_parse_from(["x", "run", "fig3a", "--seed", "3", "--engine", "sme", "--out", "o"]).unwrap();
        let Command::Run {
            scenario, seed, engine, ..
        } = c.command;
        assert_eq!((scenario, seed, engine), (Scenario::Fig3a, Some(3), EngineKind::Sme));
        assert!(Cli::try_parse_from(["x", "run", "fig9"]).is_err());
    }

    #[test]
    fn sweep_phase_precondition() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            fb_phase_rad: 0.3,
            ..RunConfig::default()
        };
        let e = run_scenario(Scenario::Fig3a, &cfg, EngineKind::Gaussian, dir.path()).unwrap_err();
        assert!(matches!(
            e,
            Error::InvalidParameter {
                name: "fb_phase_rad",
                ..
            }
        ));
        assert_eq!(error_json(&e)["error"], "InvalidParameter");
    }
}
