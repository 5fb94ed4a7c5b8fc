//! The causal measurement and feedback loop shared by both engines, and
//! ensemble drivers on top of it.
//!
//! Per engine step the loop draws the two detector increments, computes
//! the feedback drive from information available before the step, and
//! advances the engine. Per sample it forms the interval-averaged
//! photocurrents, feeds the electronics and emits one [`Sample`].

use std::f64::consts::{PI, SQRT_2};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{demod_quadrature, ideal_demod_feedback, Circuit, FeedbackConfig, FeedbackMode};
use crate::error::{Error, Result};
use crate::fock::{default_dim, thermal_state};
use crate::gaussian::{GaussianEngine, GaussianState};
use crate::params::{rad_to_hz, LoopTimebase, ValidatedParams};
use crate::record::{Sample, TrajectoryRecord};
use crate::rng::NoiseStream;
use crate::sme::{check_split, photocurrent_sample, SmeEngine};

/// A conditional-state integrator.
pub trait Engine {
    fn name(&self) -> &'static str;
    fn time(&self) -> f64;
    /// Lab-frame `(<z>, <p>)`.
    fn means(&self) -> (f64, f64);
    fn occupation(&self) -> f64;
    /// Advances one step with detector increments and a momentum kick
    /// `exp(-i kick z)`.
    fn step(&mut self, dw_in: f64, dw_out: f64, kick: f64) -> Result<()>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Sme,
    Gaussian,
}

impl EngineKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sme => "sme",
            Self::Gaussian => "gaussian",
        }
    }
}

impl std::str::FromStr for EngineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sme" => Ok(Self::Sme),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(Error::Config(format!("unknown engine `{other}`"))),
        }
    }
}

/// Everything one trajectory needs besides its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub params: ValidatedParams,
    pub feedback: FeedbackConfig,
    pub timebase: LoopTimebase,
    /// Fraction of the mirror light sent to the in-loop detector.
    pub split: f64,
    /// Occupation of the initial thermal state.
    pub n_initial: f64,
    /// Fock truncation for the density-matrix engine.
    pub dim: Option<usize>,
}

impl RunSpec {
    pub fn new(
        params: ValidatedParams,
        feedback: FeedbackConfig,
        timebase: LoopTimebase,
        split: f64,
        n_initial: f64,
    ) -> Result<Self> {
        check_split(split)?;
        feedback.validate(&params)?;
        if !(n_initial >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "n_initial",
                reason: format!("{n_initial} must be non-negative"),
            });
        }
        Ok(Self {
            params,
            feedback,
            timebase,
            split,
            n_initial,
            dim: None,
        })
    }

    /// In-loop and out-of-loop measurement rates (rad/s).
    pub fn rates(&self) -> (f64, f64) {
        let g = self.params.gamma_meas;
        (self.split * g, (1.0 - self.split) * g)
    }

    pub fn loop_rate(&self) -> f64 {
        self.rates().0
    }

    pub fn sme_dim(&self) -> usize {
        self.dim
            .unwrap_or_else(|| default_dim(self.params.n_doppler.max(self.n_initial)))
    }

    pub fn sme_engine(&self) -> Result<SmeEngine> {
        let rho = thermal_state(self.n_initial, self.sme_dim())?;
        let (ri, ro) = self.rates();
        Ok(SmeEngine::new(&self.params, ri, ro, self.timebase.dt_sme, rho))
    }

    pub fn gaussian_engine(&self) -> Result<GaussianEngine> {
        let (ri, ro) = self.rates();
        Ok(GaussianEngine::new(
            &self.params,
            ri,
            ro,
            self.timebase.dt_sme,
            GaussianState::thermal(self.n_initial),
        ))
    }
}

/// Feedback path state inside the loop.
enum Drive {
    Off,
    Ideal {
        g_tilde: f64,
        block_len: usize,
        pos: usize,
        acc: f64,
        norm: f64,
        xi: f64,
    },
    Filter {
        circuit: Box<Circuit>,
        value: f64,
    },
}

/// Occupation, in units of the thermal scale, taken as a loop runaway.
pub const RUNAWAY_FACTOR: f64 = 1e4;

/// Drives `engine` for the whole timebase, calling `sink` once per sample.
pub fn run_loop<E: Engine + ?Sized>(
    engine: &mut E,
    spec: &RunSpec,
    seed: u64,
    index: u64,
    sink: &mut dyn FnMut(&Sample),
) -> Result<()> {
    let tag = |e: Error| Error::Trajectory {
        index,
        source: Box::new(e),
    };
    let p = &spec.params;
    let fb = &spec.feedback;
    let tb = &spec.timebase;
    let (rate_in, rate_out) = spec.rates();
    let dt = tb.dt_sme;
    let sqrt_dt = dt.sqrt();
    let sps = tb.steps_per_sample;
    let dts = tb.dt_sample();
    let phase = fb.phase;

    let mut drive = if fb.is_off() {
        Drive::Off
    } else {
        match fb.mode {
            FeedbackMode::IdealDemod => {
                // Xi is the demodulated in-loop noise, held over half a trap
                // period and applied one block late
                let block_len = ((PI / (p.nu * dt)).round() as usize).max(1);
                let w = block_len as f64 * dt;
                Drive::Ideal {
                    g_tilde: fb.theory_gain(),
                    block_len,
                    pos: 0,
                    acc: 0.0,
                    norm: SQRT_2 / w,
                    xi: 0.0,
                }
            }
            FeedbackMode::Filter => Drive::Filter {
                circuit: Box::new(Circuit::in_loop(fb, rad_to_hz(p.nu), 1.0 / dts).map_err(tag)?),
                value: 0.0,
            },
        }
    };

    // far beyond anything a stable loop reaches from these parameters
    let runaway = RUNAWAY_FACTOR * (1.0 + p.n_doppler.max(spec.n_initial));
    let mut noise = NoiseStream::new(seed, index);
    for _ in 0..tb.n_samples() {
        let (mut w_in, mut w_out, mut z_acc, mut drive_acc) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..sps {
            let dwi = noise.wiener(sqrt_dt);
            let dwo = noise.wiener(sqrt_dt);
            let t = engine.time();
            let (z, pm) = engine.means();
            let force = match &mut drive {
                Drive::Off => 0.0,
                Drive::Ideal {
                    g_tilde,
                    block_len,
                    pos,
                    acc,
                    norm,
                    xi,
                } => {
                    let q = demod_quadrature(z, pm, p.nu, t, phase);
                    let f = *g_tilde * ideal_demod_feedback(q, *xi, rate_in, p.eta, p.nu, t);
                    *acc += (p.nu * t + phase).cos() * dwi;
                    *pos += 1;
                    if *pos == *block_len {
                        *xi = *acc * *norm;
                        *acc = 0.0;
                        *pos = 0;
                    }
                    f
                }
                Drive::Filter { value, .. } => *value,
            };
            engine.step(dwi, dwo, force * dt).map_err(tag)?;
            w_in += dwi;
            w_out += dwo;
            z_acc += z;
            drive_acc += force;
        }
        let z_bar = z_acc / sps as f64;
        let i_in = photocurrent_sample(z_bar, w_in, dts, rate_in, p.eta);
        let i_out = photocurrent_sample(z_bar, w_out, dts, rate_out, p.eta);
        if let Drive::Filter { circuit, value } = &mut drive {
            // electrode polarity: a positive circuit voltage pushes along -z
            *value = -circuit.process_sample(i_in);
        }
        let (z, pm) = engine.means();
        let n = engine.occupation();
        if !(n <= runaway) {
            return Err(tag(Error::NumericalInstability(format!(
                "occupation {n:.3e} at t = {:.4e} s: the loop is unstable",
                engine.time()
            ))));
        }
        sink(&Sample {
            t: engine.time(),
            i_in,
            i_out,
            v_fb: drive_acc / sps as f64,
            z_mean: z,
            p_mean: pm,
            n_mean: n,
        });
    }
    Ok(())
}

/// Runs one trajectory of the chosen engine into `sink`.
pub fn run_with_sink(
    kind: EngineKind,
    spec: &RunSpec,
    seed: u64,
    index: u64,
    sink: &mut dyn FnMut(&Sample),
) -> Result<()> {
    match kind {
        EngineKind::Sme => {
            let mut e = spec.sme_engine()?;
            run_loop(&mut e, spec, seed, index, sink)
        }
        EngineKind::Gaussian => {
            let mut e = spec.gaussian_engine()?;
            run_loop(&mut e, spec, seed, index, sink)
        }
    }
}

pub fn run_record(kind: EngineKind, spec: &RunSpec, seed: u64, index: u64) -> Result<TrajectoryRecord> {
    let mut rec = TrajectoryRecord::with_capacity(spec.timebase.n_samples());
    run_with_sink(kind, spec, seed, index, &mut |s| rec.push(s))?;
    Ok(rec)
}

/// Occupation statistics of an ensemble.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OccupationEnsemble {
    /// Checkpoint times (s).
    pub times: Vec<f64>,
    /// Ensemble mean of `<n>` at each checkpoint.
    pub mean: Vec<f64>,
    /// Standard error of that mean.
    pub sem: Vec<f64>,
    /// Per-trajectory time average of `<n>` after the burn-in.
    pub time_averages: Vec<f64>,
}

impl OccupationEnsemble {
    /// Mean and standard error of the per-trajectory time averages.
    pub fn steady_state(&self) -> (f64, f64) {
        mean_sem(&self.time_averages)
    }
}

pub fn mean_sem(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, f64::NAN);
    }
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Runs `n_traj` trajectories in parallel. Checkpoints are taken every
/// `stride` samples; time averages use samples with `t >= burn_in`.
pub fn ensemble_occupation(
    kind: EngineKind,
    spec: &RunSpec,
    seed: u64,
    n_traj: usize,
    stride: usize,
    burn_in: f64,
) -> Result<OccupationEnsemble> {
    let stride = stride.max(1);
    let per: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..n_traj as u64)
        .into_par_iter()
        .map(|i| {
            let (mut times, mut ns) = (Vec::new(), Vec::new());
            let (mut sum, mut cnt, mut k) = (0.0, 0usize, 0usize);
            run_with_sink(kind, spec, seed, i, &mut |s| {
                k += 1;
                if k % stride == 0 {
                    times.push(s.t);
                    ns.push(s.n_mean);
                }
                if s.t >= burn_in {
                    sum += s.n_mean;
                    cnt += 1;
                }
            })?;
            Ok((times, ns, if cnt > 0 { sum / cnt as f64 } else { f64::NAN }))
        })
        .collect::<Result<_>>()?;

    let mut out = OccupationEnsemble::default();
    if let Some((t0, _, _)) = per.first() {
        out.times = t0.clone();
        for j in 0..t0.len() {
            let col: Vec<f64> = per.iter().map(|(_, n, _)| n[j]).collect();
            let (m, s) = mean_sem(&col);
            out.mean.push(m);
            out.sem.push(s);
        }
    }
    out.time_averages = per.into_iter().map(|(_, _, a)| a).collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{validate, PhysicalParams};

    fn spec(g: f64, mode: FeedbackMode) -> RunSpec {
        let p = validate(&PhysicalParams::desk()).unwrap();
        let tb = LoopTimebase::from_trap(&p, 2e-3).unwrap();
        let fb = match mode {
            FeedbackMode::IdealDemod => FeedbackConfig::ideal(g, -PI / 2.0, 4e3),
            FeedbackMode::Filter => FeedbackConfig::filter(g, -PI / 2.0, 4e3),
        };
        RunSpec::new(p, fb, tb, 0.5, 2.0).unwrap()
    }

    #[test]
    fn same_seed_same_record() {
        for kind in [EngineKind::Sme, EngineKind::Gaussian] {
            for mode in [FeedbackMode::IdealDemod, FeedbackMode::Filter] {
                let s = spec(0.5, mode);
                let a = run_record(kind, &s, 11, 3).unwrap();
                let b = run_record(kind, &s, 11, 3).unwrap();
                assert_eq!(a, b);
                assert!(a.is_consistent());
                assert_eq!(a.len(), s.timebase.n_samples());
                let c = run_record(kind, &s, 11, 4).unwrap();
                assert_ne!(a.i_in, c.i_in);
            }
        }
    }

    #[test]
    fn split_rejected() {
        let s = spec(0.0, FeedbackMode::IdealDemod);
        assert!(matches!(
            RunSpec::new(s.params.clone(), s.feedback.clone(), s.timebase.clone(), 1.0, 2.0),
            Err(Error::SplitOutOfRange(_))
        ));
    }

    #[test]
    fn errors_carry_index() {
        let mut s = spec(0.0, FeedbackMode::IdealDemod);
        s.dim = Some(8);
        s.n_initial = 0.0;
        let err = run_record(EngineKind::Sme, &s, 1, 7).unwrap_err();
        match err {
            Error::Trajectory { index, source } => {
                assert_eq!(index, 7);
                assert!(matches!(*source, Error::TruncationBreach { .. }));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shot_noise_shares_increment() {
        // with the loop open the in-loop current minus its signal part is
        // exactly the scaled increment sum, so regenerate it from the stream
        let s = spec(0.0, FeedbackMode::IdealDemod);
        let rec = run_record(EngineKind::Gaussian, &s, 5, 0).unwrap();
        let (ri, _) = s.rates();
        let mut noise = NoiseStream::new(5, 0);
        let sd = s.timebase.dt_sme.sqrt();
        let sps = s.timebase.steps_per_sample;
        let dts = s.timebase.dt_sample();
        let mut prod = 0.0;
        let mut sq = 0.0;
        let mut engine = s.gaussian_engine().unwrap();
        for k in 0..rec.len() {
            let (mut w, mut zs) = (0.0, 0.0);
            for _ in 0..sps {
                let a = noise.wiener(sd);
                let b = noise.wiener(sd);
                zs += engine.means().0;
                engine.step(a, b, 0.0).unwrap();
                w += a;
            }
            let resid = rec.i_in[k] - ri * s.params.eta * zs / sps as f64;
            prod += resid * w / dts;
            sq += (w / dts).powi(2);
        }
        let ratio = prod / sq;
        assert!((ratio - (ri / 2.0).sqrt()).abs() < 1e-9 * ratio, "{ratio}");
    }
}
