//! Feedback electronics: bandpass at the trap frequency, quadrature phase
//! shifter, amplifier and loop delay. Also the demodulated closed form of
//! the feedback current used by the ideal loop.

use std::collections::VecDeque;
use std::f64::consts::{PI, TAU};

use log::warn;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{rad_to_hz, ValidatedParams};

/// Theory gain per unit electronic gain for the filter loop.
///
/// The ideal demodulated force acts on one rotating quadrature only, the
/// filtered force on both, so the same damping needs half the gain.
pub const FILTER_CALIBRATION: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedbackMode {
    /// Sampled photocurrent through the emulated electronics.
    Filter,
    /// Closed-form demodulated current.
    IdealDemod,
}

impl std::str::FromStr for FeedbackMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "filter" => Ok(Self::Filter),
            "ideal-demod" | "ideal" => Ok(Self::IdealDemod),
            other => Err(Error::Config(format!("unknown feedback mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackConfig {
    /// Amplifier setting.
    pub gain_electronic: f64,
    /// Loop phase at the trap frequency (rad). `-pi/2` damps.
    pub phase: f64,
    pub bandwidth_hz: f64,
    pub delay_samples: usize,
    pub mode: FeedbackMode,
    /// Theory gain per unit electronic gain.
    pub calibration: f64,
    /// Bandpass order, 2 or 4.
    pub filter_order: usize,
}

impl FeedbackConfig {
    pub fn off() -> Self {
        Self::ideal(0.0, -PI / 2.0, 1.0)
    }

    /// Ideal demodulated loop with theory gain `g_tilde`.
    pub fn ideal(g_tilde: f64, phase: f64, bandwidth_hz: f64) -> Self {
        Self {
            gain_electronic: g_tilde,
            phase,
            bandwidth_hz,
            delay_samples: 1,
            mode: FeedbackMode::IdealDemod,
            calibration: 1.0,
            filter_order: 2,
        }
    }

    /// Filter loop tuned to give theory gain `g_tilde`.
    pub fn filter(g_tilde: f64, phase: f64, bandwidth_hz: f64) -> Self {
        Self {
            gain_electronic: g_tilde / FILTER_CALIBRATION,
            phase,
            bandwidth_hz,
            delay_samples: 1,
            mode: FeedbackMode::Filter,
            calibration: FILTER_CALIBRATION,
            filter_order: 2,
        }
    }

    /// Gain entering the averaged theory.
    pub fn theory_gain(&self) -> f64 {
        self.calibration * self.gain_electronic
    }

    pub fn is_off(&self) -> bool {
        self.gain_electronic == 0.0
    }

    pub fn validate(&self, p: &ValidatedParams) -> Result<()> {
        if !(self.bandwidth_hz > 0.0) {
            return Err(Error::InvalidParameter {
                name: "fb_bandwidth_hz",
                reason: format!("{} must be positive", self.bandwidth_hz),
            });
        }
        if self.delay_samples < 1 {
            return Err(Error::InvalidParameter {
                name: "fb_delay_samples",
                reason: "the loop needs at least one sample of delay".into(),
            });
        }
        if !(self.gain_electronic >= 0.0) || !self.gain_electronic.is_finite() {
            return Err(Error::NegativeGain(self.gain_electronic));
        }
        if !self.phase.is_finite() {
            return Err(Error::InvalidParameter {
                name: "fb_phase_rad",
                reason: "must be finite".into(),
            });
        }
        if self.filter_order != 2 && self.filter_order != 4 {
            return Err(Error::InvalidParameter {
                name: "fb_filter_order",
                reason: format!("{} is not 2 or 4", self.filter_order),
            });
        }
        let wb = TAU * self.bandwidth_hz;
        if !(p.gamma_cool * 5.0 <= wb && wb * 5.0 <= p.nu) {
            warn!(
                "bandwidth {:.0} Hz is not well inside (Gamma, nu) = ({:.0}, {:.0}) Hz",
                self.bandwidth_hz,
                rad_to_hz(p.gamma_cool),
                rad_to_hz(p.nu)
            );
        }
        Ok(())
    }
}

/// Demodulated feedback current.
///
/// `quad` is the rotating-frame quadrature picked by the loop phase (the
/// momentum for `-pi/2`), `xi` the band-limited unit white noise and
/// `rate` the in-loop measurement rate.
pub fn ideal_demod_feedback(quad: f64, xi: f64, rate: f64, eta: f64, nu: f64, t: f64) -> f64 {
    (rate * eta * quad + (rate / 2.0).sqrt() * xi) * (nu * t).cos()
}

/// Rotating-frame quadrature selected by `phase` from lab-frame means.
pub fn demod_quadrature(z: f64, p: f64, nu: f64, t: f64, phase: f64) -> f64 {
    let (s, c) = (nu * t).sin_cos();
    let zr = z * c - p * s;
    let pr = z * s + p * c;
    zr * phase.cos() - pr * phase.sin()
}

/// One second-order section, `b1 = 0`, normalised so `a0 = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn response(&self, w: f64) -> C64 {
        let z1 = C64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        (self.b0 + self.b2 * z2) / (1.0 + self.a1 * z1 + self.a2 * z2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterCoefficients {
    pub sections: Vec<Biquad>,
}

impl FilterCoefficients {
    /// Response at `f_hz` for sample rate `fs`.
    pub fn response(&self, f_hz: f64, fs: f64) -> C64 {
        let w = TAU * f_hz / fs;
        self.sections.iter().map(|s| s.response(w)).product()
    }
}

/// Second-order bandpass with its -3 dB edges at `center +- bandwidth/2`
/// (bilinear transform, both edges prewarped). The peak sits at the
/// geometric mean of the warped edges, a little below `center`; the
/// [`Circuit`] takes out the residual phase and gain at `center`.
pub fn design_bandpass(center_hz: f64, bandwidth_hz: f64, fs: f64) -> Result<FilterCoefficients> {
    design_bandpass_order(center_hz, bandwidth_hz, fs, 2)
}

/// As [`design_bandpass`]; order 4 cascades two identical sections, each
/// widened so the cascade keeps the same -3 dB edges.
pub fn design_bandpass_order(center_hz: f64, bandwidth_hz: f64, fs: f64, order: usize) -> Result<FilterCoefficients> {
    if !(fs > 4.0 * center_hz) {
        return Err(Error::SampleRateTooLow { fs, center: center_hz });
    }
    if !(bandwidth_hz > 0.0) || bandwidth_hz >= 2.0 * center_hz {
        return Err(Error::InvalidParameter {
            name: "bandwidth_hz",
            reason: format!("{bandwidth_hz} Hz outside (0, 2 x center)"),
        });
    }
    // a section with |H|^2 = 1/(1 + x^2) is down 3 dB in a cascade of two
    // at x^2 = sqrt 2 - 1
    let (n, widen) = match order {
        2 => (1, 1.0),
        4 => (2, 1.0 / (2f64.sqrt() - 1.0).sqrt()),
        _ => {
            return Err(Error::InvalidParameter {
                name: "order",
                reason: format!("{order} is not 2 or 4"),
            })
        }
    };
    let warp = |f: f64| (PI * f / fs).tan();
    let lo = warp(center_hz - bandwidth_hz / 2.0);
    let hi = warp(center_hz + bandwidth_hz / 2.0);
    let w2 = lo * hi;
    let bwa = (hi - lo) * widen;
    let a0 = 1.0 + bwa + w2;
    let s = Biquad {
        b0: bwa / a0,
        b2: -bwa / a0,
        a1: (2.0 * w2 - 2.0) / a0,
        a2: (1.0 - bwa + w2) / a0,
    };
    Ok(FilterCoefficients { sections: vec![s; n] })
}

/// Mutable registers of the electronics.
#[derive(Clone, Debug, Default)]
pub struct FilterState {
    regs: Vec<[f64; 2]>,
    prev: f64,
    delay: VecDeque<f64>,
}

impl FilterState {
    pub fn reset(&mut self) {
        for r in &mut self.regs {
            *r = [0.0; 2];
        }
        self.prev = 0.0;
        for d in &mut self.delay {
            *d = 0.0;
        }
    }
}

/// Bandpass, phase shifter, amplifier and delay line.
#[derive(Clone, Debug)]
pub struct Circuit {
    coeffs: FilterCoefficients,
    state: FilterState,
    fs: f64,
    cos_w0: f64,
    sin_w0: f64,
    cos_psi: f64,
    sin_psi: f64,
    psi: f64,
    gain: f64,
    delay: usize,
}

impl Circuit {
    /// Electronics for a tone at `center_hz` sampled at `fs`.
    ///
    /// `loop_lag_samples` is the extra lag of the surrounding loop (sample
    /// averaging plus zero-order hold contribute one sample together); the
    /// phase shifter absorbs it together with the delay line, and
    /// `loop_gain_loss` is divided out of the amplifier gain.
    pub fn new(
        cfg: &FeedbackConfig,
        center_hz: f64,
        fs: f64,
        loop_lag_samples: f64,
        loop_gain_loss: f64,
    ) -> Result<Self> {
        let coeffs = design_bandpass_order(center_hz, cfg.bandwidth_hz, fs, cfg.filter_order)?;
        if cfg.delay_samples < 1 {
            return Err(Error::InvalidParameter {
                name: "fb_delay_samples",
                reason: "the loop needs at least one sample of delay".into(),
            });
        }
        let w0 = TAU * center_hz / fs;
        let h0 = coeffs.response(center_hz, fs);
        let psi = cfg.phase + w0 * (cfg.delay_samples as f64 + loop_lag_samples) - h0.arg();
        let n = coeffs.sections.len();
        Ok(Self {
            coeffs,
            state: FilterState {
                regs: vec![[0.0; 2]; n],
                prev: 0.0,
                delay: VecDeque::from(vec![0.0; cfg.delay_samples]),
            },
            fs,
            cos_w0: w0.cos(),
            sin_w0: w0.sin(),
            cos_psi: psi.cos(),
            sin_psi: psi.sin(),
            psi,
            gain: cfg.gain_electronic / (loop_gain_loss * h0.norm()),
            delay: cfg.delay_samples,
        })
    }

    /// Standalone electronics: the configured phase is realised between the
    /// input and output sample streams.
    pub fn standalone(cfg: &FeedbackConfig, center_hz: f64, fs: f64) -> Result<Self> {
        Self::new(cfg, center_hz, fs, 0.0, 1.0)
    }

    /// Electronics embedded in the sampled loop: input samples are interval
    /// averages and the output is held for one interval.
    pub fn in_loop(cfg: &FeedbackConfig, center_hz: f64, fs: f64) -> Result<Self> {
        let x = PI * center_hz / fs;
        let sinc = x.sin() / x;
        Self::new(cfg, center_hz, fs, 1.0, sinc * sinc)
    }

    pub fn coefficients(&self) -> &FilterCoefficients {
        &self.coeffs
    }

    pub fn reset(&mut self) {
        self.state.reset();
    }

    /// Feeds one sample and returns the output, which depends only on
    /// inputs at least `delay_samples` old.
    pub fn process_sample(&mut self, x: f64) -> f64 {
        let mut y = x;
        for (s, r) in self.coeffs.sections.iter().zip(self.state.regs.iter_mut()) {
            // transposed direct form II
            let out = s.b0 * y + r[0];
            r[0] = r[1] - s.a1 * out;
            r[1] = s.b2 * y - s.a2 * out;
            y = out;
        }
        let q = (self.state.prev - y * self.cos_w0) / self.sin_w0;
        self.state.prev = y;
        let shifted = self.gain * (y * self.cos_psi - q * self.sin_psi);
        self.state.delay.push_back(shifted);
        self.state.delay.pop_front().unwrap_or(0.0)
    }

    /// Transfer function of the sampled chain at `f_hz`.
    pub fn response(&self, f_hz: f64) -> C64 {
        let w = TAU * f_hz / self.fs;
        let z1 = C64::from_polar(1.0, -w);
        let shifter = self.cos_psi + (self.cos_w0 - z1) * (self.sin_psi / self.sin_w0);
        self.coeffs.response(f_hz, self.fs) * shifter * z1.powi(self.delay as i32) * self.gain
    }

    /// Response including interval averaging at the input and zero-order
    /// hold at the output, as seen by a continuous-time signal.
    pub fn loop_response(&self, f_hz: f64) -> C64 {
        let x = PI * f_hz / self.fs;
        let sinc = if x == 0.0 { 1.0 } else { x.sin() / x };
        self.response(f_hz) * C64::from_polar(sinc * sinc, -2.0 * x)
    }

    pub fn shifter_phase(&self) -> f64 {
        self.psi
    }
}

/// Sideband widths measured with and without feedback at one electronic
/// gain setting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainReference {
    pub gain_electronic: f64,
    pub fwhm_off_hz: f64,
    pub fwhm_on_hz: f64,
}

/// Theory gain per unit electronic gain, from the width increase at a
/// reference setting. `loop_rate` is the in-loop measurement rate (rad/s).
///
/// On the damping branch the width grows by `G_tilde * gamma * eta`.
pub fn calibrate_gain(reference: Option<&GainReference>, p: &ValidatedParams, loop_rate: f64) -> Result<f64> {
    let r = reference.ok_or(Error::ReferenceMissing)?;
    if !(r.gain_electronic > 0.0) {
        return Err(Error::InvalidParameter {
            name: "gain_electronic",
            reason: "reference gain must be positive".into(),
        });
    }
    if !(loop_rate > 0.0) {
        return Err(Error::NonpositiveRate {
            name: "loop_rate",
            value: loop_rate,
        });
    }
    let extra = TAU * (r.fwhm_on_hz - r.fwhm_off_hz);
    Ok(extra / (loop_rate * p.eta * r.gain_electronic))
}
