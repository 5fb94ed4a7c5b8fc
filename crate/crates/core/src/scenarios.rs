//! Ensemble experiments built from the loop: photocurrent spectra per
//! trajectory and gain sweeps of the out-of-loop sideband.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{FeedbackConfig, FeedbackMode};
use crate::error::{Error, Result};
use crate::moments::{frequency_shift_with_rate, n_ss_with_rate};
use crate::params::{rad_to_hz, LoopTimebase, ValidatedParams};
use crate::spectra::{SpectrumEstimate, WelchAccumulator};
use crate::trajectory::{mean_sem, run_with_sink, EngineKind, RunSpec};

/// Spectra of both detectors for one trajectory.
#[derive(Clone, Debug)]
pub struct TrajectorySpectra {
    pub in_loop: SpectrumEstimate,
    pub out_loop: SpectrumEstimate,
    /// Time average of `<n>` over the analysed part.
    pub n_mean: f64,
    /// Variance of the recorded in-loop and out-of-loop series.
    pub var_in: f64,
    pub var_out: f64,
}

/// Smallest power of two giving a bin spacing of at most `resolution_hz`.
pub fn segment_len_for(fs: f64, resolution_hz: f64) -> usize {
    ((fs / resolution_hz).ceil() as usize).next_power_of_two().max(8)
}

struct Moments {
    n: usize,
    sum: f64,
    sum2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum2 += x * x;
    }

    fn variance(&self) -> f64 {
        let n = self.n as f64;
        let m = self.sum / n;
        (self.sum2 / n - m * m).max(0.0)
    }
}

/// Runs one trajectory and estimates both photocurrent spectra from the
/// samples with `t >= burn_in`.
pub fn trajectory_spectra(
    kind: EngineKind,
    spec: &RunSpec,
    seed: u64,
    index: u64,
    segment_len: usize,
    burn_in: f64,
) -> Result<TrajectorySpectra> {
    let fs = spec.timebase.sample_rate_hz();
    let mut acc_in = WelchAccumulator::new(fs, segment_len, 0.5)?;
    let mut acc_out = WelchAccumulator::new(fs, segment_len, 0.5)?;
    let (mut n_sum, mut n_cnt) = (0.0, 0usize);
    let mut m_in = Moments {
        n: 0,
        sum: 0.0,
        sum2: 0.0,
    };
    let mut m_out = Moments {
        n: 0,
        sum: 0.0,
        sum2: 0.0,
    };
    run_with_sink(kind, spec, seed, index, &mut |s| {
        if s.t >= burn_in {
            acc_in.push(s.i_in);
            acc_out.push(s.i_out);
            m_in.push(s.i_in);
            m_out.push(s.i_out);
            n_sum += s.n_mean;
            n_cnt += 1;
        }
    })?;
    Ok(TrajectorySpectra {
        in_loop: acc_in.finish()?,
        out_loop: acc_out.finish()?,
        n_mean: n_sum / n_cnt.max(1) as f64,
        var_in: m_in.variance(),
        var_out: m_out.variance(),
    })
}

/// [`trajectory_spectra`] for trajectories `0..n_traj`, in index order.
pub fn ensemble_spectra(
    kind: EngineKind,
    spec: &RunSpec,
    seed: u64,
    n_traj: usize,
    segment_len: usize,
    burn_in: f64,
) -> Result<Vec<TrajectorySpectra>> {
    (0..n_traj as u64)
        .into_par_iter()
        .map(|i| trajectory_spectra(kind, spec, seed, i, segment_len, burn_in))
        .collect()
}

/// Segment-weighted average of spectra sharing one frequency grid.
pub fn average_spectra<'a>(items: impl IntoIterator<Item = &'a SpectrumEstimate>) -> Result<SpectrumEstimate> {
    let mut it = items.into_iter();
    let first = it.next().ok_or(Error::InvalidParameter {
        name: "spectra",
        reason: "nothing to average".into(),
    })?;
    let mut psd: Vec<f64> = first.psd.iter().map(|v| v * first.segments as f64).collect();
    let mut segments = first.segments;
    for s in it {
        if s.freq_hz.len() != first.freq_hz.len() {
            return Err(Error::DimensionMismatch {
                left: s.freq_hz.len(),
                right: first.freq_hz.len(),
            });
        }
        for (a, v) in psd.iter_mut().zip(&s.psd) {
            *a += v * s.segments as f64;
        }
        segments += s.segments;
    }
    psd.iter_mut().for_each(|v| *v /= segments as f64);
    Ok(SpectrumEstimate {
        freq_hz: first.freq_hz.clone(),
        psd,
        floor: f64::NAN,
        normalized: Vec::new(),
        segments,
    })
}

/// Window around the trap line used for sideband areas: four filter
/// bandwidths either side, at most 40% of the trap frequency.
pub fn sideband_window(nu_hz: f64, bandwidth_hz: f64) -> (f64, f64) {
    let half = (4.0 * bandwidth_hz).min(0.4 * nu_hz);
    (nu_hz - half, nu_hz + half)
}

/// `sum (psd / floor - 1) df` over `window`, in Hz.
pub fn excess_area(s: &SpectrumEstimate, floor: f64, window: (f64, f64)) -> f64 {
    let df = s.resolution();
    s.psd[s.band(window.0, window.1)]
        .iter()
        .map(|v| v / floor - 1.0)
        .sum::<f64>()
        * df
}

/// Settings of a gain sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSettings {
    pub engine: EngineKind,
    pub mode: FeedbackMode,
    pub phase: f64,
    pub bandwidth_hz: f64,
    pub delay_samples: usize,
    pub filter_order: usize,
    pub split: f64,
    pub n_traj: usize,
    pub t_total: f64,
    pub burn_in: f64,
    pub segment_len: usize,
    /// Sideband window (Hz) the area is taken over.
    pub window: (f64, f64),
    /// Initial thermal occupation; the Doppler value when `None`.
    pub n_initial: Option<f64>,
}

impl SweepSettings {
    pub fn feedback(&self, g_tilde: f64) -> FeedbackConfig {
        let mut fb = match self.mode {
            FeedbackMode::Filter => FeedbackConfig::filter(g_tilde, self.phase, self.bandwidth_hz),
            FeedbackMode::IdealDemod => FeedbackConfig::ideal(g_tilde, self.phase, self.bandwidth_hz),
        };
        fb.delay_samples = self.delay_samples;
        fb.filter_order = self.filter_order;
        fb
    }

    pub fn run_spec(&self, p: &ValidatedParams, g_tilde: f64) -> Result<RunSpec> {
        let tb = LoopTimebase::from_trap(p, self.t_total)?;
        RunSpec::new(
            p.clone(),
            self.feedback(g_tilde),
            tb,
            self.split,
            self.n_initial.unwrap_or(p.n_doppler),
        )
    }
}

/// One gain of a sweep. Areas are normalised to the zero-gain area.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub gain: f64,
    pub area_norm: f64,
    /// Standard error of `area_norm - 1`, paired with the zero-gain runs.
    pub area_se: f64,
    /// Paired standard error of the step from the previous gain.
    pub step_se: f64,
    pub n_mean: f64,
    pub n_sem: f64,
    /// Closed-form occupation at the loop rate; `NaN` off the damping branch.
    pub n_ss_theory: f64,
    /// Predicted line shift from the in-phase part of the loop.
    pub freq_shift_hz: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GainSweep {
    pub phase: f64,
    pub points: Vec<SweepPoint>,
}

impl GainSweep {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("gain,area_norm,n_mean,n_ss_theory,area_se,n_sem,freq_shift_hz\n");
        for q in &self.points {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                q.gain, q.area_norm, q.n_mean, q.n_ss_theory, q.area_se, q.n_sem, q.freq_shift_hz
            ));
        }
        s
    }
}

/// Out-of-loop sideband area and occupation against gain.
///
/// Every gain reuses the same trajectory seeds, so neighbouring points share
/// their noise and the paired differences are much tighter than the points.
/// A zero-gain reference is added when the grid lacks one.
pub fn gain_sweep(p: &ValidatedParams, gains: &[f64], s: &SweepSettings, seed: u64) -> Result<GainSweep> {
    let mut grid: Vec<f64> = gains.to_vec();
    if !grid.contains(&0.0) {
        grid.push(0.0);
    }
    grid.sort_by(|a, b| a.total_cmp(b));
    grid.dedup();

    let loop_rate = s.split * p.gamma_meas;
    // closed form only exists for a force following the momentum
    let damping = (s.phase.sin() + 1.0).abs() < 1e-6;
    let floor = (1.0 - s.split) * p.gamma_meas;
    // per gain, per trajectory: (area, time-averaged n)
    let mut table: Vec<Vec<(f64, f64)>> = Vec::with_capacity(grid.len());
    for &g in &grid {
        let spec = s.run_spec(p, g)?;
        let runs = ensemble_spectra(s.engine, &spec, seed, s.n_traj, s.segment_len, s.burn_in)?;
        table.push(
            runs.iter()
                .map(|r| (excess_area(&r.out_loop, floor, s.window), r.n_mean))
                .collect(),
        );
    }
    let a0: Vec<f64> = table[0].iter().map(|v| v.0).collect();
    let (a0_mean, _) = mean_sem(&a0);
    if !(a0_mean > 0.0) {
        return Err(Error::NumericalInstability(format!(
            "zero-gain sideband area {a0_mean} is not positive"
        )));
    }

    let mut points = Vec::with_capacity(grid.len());
    for (k, &g) in grid.iter().enumerate() {
        let a: Vec<f64> = table[k].iter().map(|v| v.0 / a0_mean).collect();
        let n: Vec<f64> = table[k].iter().map(|v| v.1).collect();
        let (area_norm, _) = mean_sem(&a);
        let rel0: Vec<f64> = table[k]
            .iter()
            .zip(&table[0])
            .map(|(x, y)| (x.0 - y.0) / a0_mean)
            .collect();
        let step_se = if k == 0 {
            0.0
        } else {
            let d: Vec<f64> = table[k]
                .iter()
                .zip(&table[k - 1])
                .map(|(x, y)| (x.0 - y.0) / a0_mean)
                .collect();
            mean_sem(&d).1
        };
        let (n_mean, n_sem) = mean_sem(&n);
        points.push(SweepPoint {
            gain: g,
            area_norm,
            area_se: if k == 0 { 0.0 } else { mean_sem(&rel0).1 },
            step_se,
            n_mean,
            n_sem,
            n_ss_theory: if damping {
                n_ss_with_rate(p, loop_rate, g).unwrap_or(f64::NAN)
            } else {
                f64::NAN
            },
            freq_shift_hz: -s.phase.cos() * rad_to_hz(frequency_shift_with_rate(p, loop_rate, g)),
        });
    }
    Ok(GainSweep { phase: s.phase, points })
}

/// Sign of each step of a sweep: `+1` or `-1` when it exceeds `k` paired
/// standard errors, `0` otherwise.
pub fn step_signs(sweep: &GainSweep, k: f64) -> Vec<i8> {
    sweep
        .points
        .windows(2)
        .map(|w| {
            let d = w[1].area_norm - w[0].area_norm;
            let tol = k * w[1].step_se;
            if d > tol {
                1
            } else if d < -tol {
                -1
            } else {
                0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(psd: Vec<f64>, segments: usize) -> SpectrumEstimate {
        SpectrumEstimate {
            freq_hz: (0..psd.len()).map(|k| k as f64).collect(),
            psd,
            floor: f64::NAN,
            normalized: Vec::new(),
            segments,
        }
    }

    #[test]
    fn averaging_weights_segments() {
        let a = est(vec![1.0, 1.0, 1.0], 1);
        let b = est(vec![4.0, 4.0, 4.0], 3);
        let m = average_spectra([&a, &b]).unwrap();
        assert_eq!(m.psd, vec![3.25; 3]);
        assert_eq!(m.segments, 4);
        assert!(average_spectra(std::iter::empty()).is_err());
        assert!(average_spectra([&a, &est(vec![1.0; 4], 1)]).is_err());
    }

    #[test]
    fn area_of_flat_floor_is_zero() {
        let s = est(vec![2.0; 100], 4);
        assert_eq!(excess_area(&s, 2.0, (10.0, 20.0)), 0.0);
        assert!((excess_area(&s, 1.0, (10.0, 19.0)) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn segment_lengths() {
        assert_eq!(segment_len_for(320e3, 100.0), 4096);
        assert_eq!(segment_len_for(8e6, 40.0), 262144);
    }
}
