//! Physical parameters, unit conversion and validity checks.
//!
//! Inputs are in Hz. [`validate`] converts every rate to rad/s once, so the
//! engines never see ordinary frequencies.

use std::f64::consts::TAU;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lamb-Dicke factor above which a warning is logged.
pub const LAMB_DICKE_WARN: f64 = 0.5;
/// Lamb-Dicke factor at which parameters are rejected.
pub const LAMB_DICKE_MAX: f64 = 1.0;
/// Minimum trap/cooling ratio for spectral scenarios.
pub const MIN_SEPARATION: f64 = 20.0;

pub fn hz_to_rad(f: f64) -> f64 {
    f * TAU
}

pub fn rad_to_hz(w: f64) -> f64 {
    w / TAU
}

/// Raw parameters as they appear in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    /// Trap frequency (Hz).
    pub nu_hz: f64,
    /// Laser cooling rate, the sideband FWHM (Hz).
    pub gamma_cool_hz: f64,
    /// Doppler-limit occupation.
    pub n_doppler: f64,
    /// Scattering rate into the mirror mode (Hz).
    pub gamma_mirror_hz: f64,
    pub eta: f64,
    /// Mirror solid-angle fraction. Only used to rescale the mirror rate.
    pub epsilon: Option<f64>,
}

impl PhysicalParams {
    /// Trap and cooling settings of the experiment, with the mirror rate left
    /// to the caller.
    pub fn lab(gamma_mirror_hz: f64) -> Self {
        Self {
            nu_hz: 1.0e6,
            gamma_cool_hz: 400.0,
            n_doppler: 17.0,
            gamma_mirror_hz,
            eta: 0.07,
            epsilon: None,
        }
    }

    /// Small-scale preset: `N = 2`, `nu = 100 Gamma`, `gamma = Gamma`.
    pub fn desk() -> Self {
        Self {
            nu_hz: 40.0e3,
            gamma_cool_hz: 400.0,
            n_doppler: 2.0,
            gamma_mirror_hz: 400.0,
            eta: 0.07,
            epsilon: None,
        }
    }
}

/// Parameters in angular units with derived ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidatedParams {
    /// Trap frequency (rad/s).
    pub nu: f64,
    /// Laser cooling rate (rad/s).
    pub gamma_cool: f64,
    pub n_doppler: f64,
    /// Measurement rate into the mirror mode (rad/s).
    pub gamma_meas: f64,
    pub eta: f64,
    pub epsilon: Option<f64>,
    /// `Gamma / nu`
    pub cool_over_nu: f64,
    /// `gamma / Gamma`
    pub meas_over_cool: f64,
}

impl ValidatedParams {
    pub fn lamb_dicke_factor(&self) -> f64 {
        self.eta * (self.n_doppler + 1.0).sqrt()
    }

    /// Back to config units.
    pub fn to_physical(&self) -> PhysicalParams {
        PhysicalParams {
            nu_hz: rad_to_hz(self.nu),
            gamma_cool_hz: rad_to_hz(self.gamma_cool),
            n_doppler: self.n_doppler,
            gamma_mirror_hz: rad_to_hz(self.gamma_meas),
            eta: self.eta,
            epsilon: self.epsilon,
        }
    }

    /// Same parameters with the measurement rate replaced.
    pub fn with_gamma_meas(&self, gamma_meas: f64) -> Result<Self> {
        let mut p = self.to_physical();
        p.gamma_mirror_hz = rad_to_hz(gamma_meas);
        validate(&p)
    }

    /// Rescales the measurement rate in proportion to a new solid-angle
    /// fraction. Requires `epsilon` to be set.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        let old = self.epsilon.ok_or_else(|| Error::InvalidParameter {
            name: "epsilon",
            reason: "no reference solid-angle fraction to scale from".into(),
        })?;
        let mut p = self.to_physical();
        p.gamma_mirror_hz *= epsilon / old;
        p.epsilon = Some(epsilon);
        validate(&p)
    }

    /// Warns when the trap frequency is too close to the cooling rate for
    /// a resolved sideband.
    pub fn check_separation(&self) -> bool {
        let ok = self.nu >= MIN_SEPARATION * self.gamma_cool;
        if !ok {
            warn!(
                "nu/Gamma = {:.1} is below {MIN_SEPARATION}; sideband not well resolved",
                self.nu / self.gamma_cool
            );
        }
        ok
    }
}

/// Checks invariants and converts to angular units.
///
/// A zero mirror rate is accepted: it switches the measurement off.
pub fn validate(p: &PhysicalParams) -> Result<ValidatedParams> {
    positive("nu_hz", p.nu_hz)?;
    positive("gamma_cool_hz", p.gamma_cool_hz)?;
    if !(p.gamma_mirror_hz >= 0.0) || !p.gamma_mirror_hz.is_finite() {
        return Err(Error::NonpositiveRate {
            name: "gamma_mirror_hz",
            value: p.gamma_mirror_hz,
        });
    }
    if !(p.n_doppler >= 0.0) || !p.n_doppler.is_finite() {
        return Err(Error::InvalidParameter {
            name: "n_doppler",
            reason: format!("{} must be finite and non-negative", p.n_doppler),
        });
    }
    if !(p.eta > 0.0 && p.eta < 1.0) {
        return Err(Error::InvalidParameter {
            name: "eta",
            reason: format!("{} outside (0, 1)", p.eta),
        });
    }
    if let Some(e) = p.epsilon {
        if !(e > 0.0 && e <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "epsilon",
                reason: format!("{e} outside (0, 1]"),
            });
        }
    }
    let ld = p.eta * (p.n_doppler + 1.0).sqrt();
    if ld >= LAMB_DICKE_MAX {
        return Err(Error::LambDickeViolation { value: ld });
    }
    if ld >= LAMB_DICKE_WARN {
        warn!("eta*sqrt(N+1) = {ld:.3}: outside the deep Lamb-Dicke regime");
    }
    let nu = hz_to_rad(p.nu_hz);
    let gamma_cool = hz_to_rad(p.gamma_cool_hz);
    let gamma_meas = hz_to_rad(p.gamma_mirror_hz);
    Ok(ValidatedParams {
        nu,
        gamma_cool,
        n_doppler: p.n_doppler,
        gamma_meas,
        eta: p.eta,
        epsilon: p.epsilon,
        cool_over_nu: gamma_cool / nu,
        meas_over_cool: gamma_meas / gamma_cool,
    })
}

fn positive(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonpositiveRate { name, value })
    }
}

/// Lowers the trap frequency to `ratio * Gamma`, keeping `N`, `eta`,
/// `Gamma` and `gamma / Gamma` untouched.
pub fn scale_for_desk(p: &ValidatedParams, ratio_nu_cool: f64) -> Result<ValidatedParams> {
    if !(ratio_nu_cool >= MIN_SEPARATION) {
        return Err(Error::RatioTooSmall {
            ratio: ratio_nu_cool,
            min: MIN_SEPARATION,
        });
    }
    if ratio_nu_cool == p.nu / p.gamma_cool {
        return Ok(p.clone());
    }
    let mut out = p.clone();
    out.nu = ratio_nu_cool * p.gamma_cool;
    out.cool_over_nu = 1.0 / ratio_nu_cool;
    Ok(out)
}

/// Integration and sampling grid of one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopTimebase {
    /// Engine step (s).
    pub dt_sme: f64,
    /// Integer number of engine steps per photocurrent sample.
    pub steps_per_sample: usize,
    /// Trajectory duration (s).
    pub t_total: f64,
}

/// Steps per trap period used when the timebase is derived from the trap
/// frequency. Satisfies `dt <= 1/(50 nu)` in angular units.
pub const STEPS_PER_PERIOD: usize = 320;
/// Engine steps per photocurrent sample (sample rate `8 nu`).
pub const STEPS_PER_SAMPLE: usize = 40;

impl LoopTimebase {
    pub fn new(dt_sme: f64, steps_per_sample: usize, t_total: f64, p: &ValidatedParams) -> Result<Self> {
        if !(dt_sme > 0.0) {
            return Err(Error::InvalidParameter {
                name: "dt_sme_s",
                reason: format!("{dt_sme} must be positive"),
            });
        }
        // small slack so that T/320 style grids are accepted despite rounding
        if dt_sme > (1.0 + 1e-9) / (50.0 * p.nu) {
            return Err(Error::InvalidParameter {
                name: "dt_sme_s",
                reason: format!("{dt_sme:.3e} s exceeds 1/(50 nu) = {:.3e} s", 1.0 / (50.0 * p.nu)),
            });
        }
        if steps_per_sample == 0 {
            return Err(Error::InvalidParameter {
                name: "steps_per_sample",
                reason: "must be at least 1".into(),
            });
        }
        if !(t_total > 0.0) {
            return Err(Error::InvalidParameter {
                name: "t_total_s",
                reason: format!("{t_total} must be positive"),
            });
        }
        Ok(Self {
            dt_sme,
            steps_per_sample,
            t_total,
        })
    }

    /// Default grid tied to the trap period.
    pub fn from_trap(p: &ValidatedParams, t_total: f64) -> Result<Self> {
        let period = TAU / p.nu;
        Self::new(period / STEPS_PER_PERIOD as f64, STEPS_PER_SAMPLE, t_total, p)
    }

    pub fn dt_sample(&self) -> f64 {
        self.dt_sme * self.steps_per_sample as f64
    }

    pub fn sample_rate_hz(&self) -> f64 {
        1.0 / self.dt_sample()
    }

    pub fn n_samples(&self) -> usize {
        (self.t_total / self.dt_sample()).round() as usize
    }

    pub fn n_steps(&self) -> usize {
        self.n_samples() * self.steps_per_sample
    }

    /// Whether the run is long enough to reach steady state.
    pub fn is_steady_state_length(&self, p: &ValidatedParams) -> bool {
        self.t_total >= 10.0 / p.gamma_cool
    }
}
