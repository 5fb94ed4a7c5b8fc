//! Conditional Gaussian engine.
//!
//! The trap Hamiltonian is quadratic, laser cooling is linear in the ladder
//! operators, the measurement is of a quadrature and the feedback is a
//! c-number force. A Gaussian conditional state therefore stays Gaussian,
//! and its two means and three covariances carry the full state. The means
//! follow the conditional SDE, the covariance a deterministic Riccati flow.

use crate::error::{Error, Result};
use crate::params::ValidatedParams;
use crate::record::TrajectoryRecord;
use crate::sme::innovation_coefficient;
use crate::trajectory::{run_loop, Engine, RunSpec};

/// Slack on the uncertainty bound `Vzz Vpp - Vzp^2 >= 1`.
pub const DET_TOL: f64 = 1e-6;

/// Lab-frame means of `z`, `p` and their symmetrised central moments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianState {
    pub z: f64,
    pub p: f64,
    pub vzz: f64,
    pub vzp: f64,
    pub vpp: f64,
    pub t: f64,
}

impl GaussianState {
    /// Thermal state of occupation `n`.
    pub fn thermal(n: f64) -> Self {
        let v = 2.0 * n + 1.0;
        Self {
            z: 0.0,
            p: 0.0,
            vzz: v,
            vzp: 0.0,
            vpp: v,
            t: 0.0,
        }
    }

    pub fn det(&self) -> f64 {
        self.vzz * self.vpp - self.vzp * self.vzp
    }

    /// `<a^dagger a>`
    pub fn occupation(&self) -> f64 {
        (self.vzz + self.vpp + self.z * self.z + self.p * self.p - 2.0) / 4.0
    }

    pub fn check(&self) -> Result<()> {
        if !(self.vzz > 0.0 && self.vpp > 0.0) || self.det() < 1.0 - DET_TOL || !self.det().is_finite() {
            return Err(Error::NumericalInstability(format!(
                "covariance left the physical set at t = {:.4e} s: Vzz = {:.6}, Vzp = {:.6}, Vpp = {:.6}",
                self.t, self.vzz, self.vzp, self.vpp
            )));
        }
        Ok(())
    }
}

/// Step coefficients shared by every step of a run.
#[derive(Clone, Copy, Debug)]
struct Coeffs {
    dt: f64,
    cos: f64,
    sin: f64,
    damp: f64,
    diffusion: f64,
    k_in: f64,
    k_out: f64,
    k2: f64,
}

impl Coeffs {
    fn new(p: &ValidatedParams, rate_in: f64, rate_out: f64, dt: f64) -> Self {
        let k_in = innovation_coefficient(rate_in, p.eta);
        let k_out = innovation_coefficient(rate_out, p.eta);
        let (sin, cos) = (p.nu * dt).sin_cos();
        Self {
            dt,
            cos,
            sin,
            damp: p.gamma_cool,
            diffusion: p.gamma_cool * (2.0 * p.n_doppler + 1.0),
            k_in,
            k_out,
            k2: k_in * k_in + k_out * k_out,
        }
    }
}

fn advance(g: &mut GaussianState, c: &Coeffs, dw_in: f64, dw_out: f64, kick: f64) {
    // free rotation, exact
    let (cs, sn) = (c.cos, c.sin);
    let (z, p) = (cs * g.z + sn * g.p, -sn * g.z + cs * g.p);
    let vzz = cs * cs * g.vzz + 2.0 * cs * sn * g.vzp + sn * sn * g.vpp;
    let vpp = sn * sn * g.vzz - 2.0 * cs * sn * g.vzp + cs * cs * g.vpp;
    let vzp = cs * sn * (g.vpp - g.vzz) + (cs * cs - sn * sn) * g.vzp;

    let dt = c.dt;
    let relax = 1.0 - 0.5 * c.damp * dt;
    let kdw = c.k_in * dw_in + c.k_out * dw_out;
    g.z = z * relax + 2.0 * kdw * vzz;
    g.p = p * relax + 2.0 * kdw * vzp - 2.0 * kick;

    let r = 4.0 * c.k2 * dt;
    g.vzz = vzz + (c.diffusion - c.damp * vzz) * dt - r * vzz * vzz;
    g.vzp = vzp - c.damp * vzp * dt - r * vzz * vzp;
    g.vpp = vpp + (c.diffusion - c.damp * vpp) * dt - r * vzp * vzp;
    g.t += dt;
}

/// One step with a single detector of rate `gamma` and feedback current
/// `i_fb` through theory gain `g_tilde`.
pub fn gaussian_step(
    g: &GaussianState,
    dw: f64,
    i_fb: f64,
    p: &ValidatedParams,
    g_tilde: f64,
    dt: f64,
) -> Result<GaussianState> {
    let c = Coeffs::new(p, p.gamma_meas, 0.0, dt);
    let mut out = *g;
    advance(&mut out, &c, dw, 0.0, g_tilde * i_fb * dt);
    out.check()?;
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct GaussianEngine {
    state: GaussianState,
    coeffs: Coeffs,
}

impl GaussianEngine {
    pub fn new(p: &ValidatedParams, rate_in: f64, rate_out: f64, dt: f64, initial: GaussianState) -> Self {
        Self {
            state: initial,
            coeffs: Coeffs::new(p, rate_in, rate_out, dt),
        }
    }

    pub fn state(&self) -> &GaussianState {
        &self.state
    }
}

impl Engine for GaussianEngine {
    fn name(&self) -> &'static str {
        "gaussian"
    }

    fn time(&self) -> f64 {
        self.state.t
    }

    fn means(&self) -> (f64, f64) {
        (self.state.z, self.state.p)
    }

    fn occupation(&self) -> f64 {
        self.state.occupation()
    }

    #[inline]
    fn step(&mut self, dw_in: f64, dw_out: f64, kick: f64) -> Result<()> {
        advance(&mut self.state, &self.coeffs, dw_in, dw_out, kick);
        // the determinant only shrinks through the Riccati term; checking it
        // every step is cheap next to the random draws
        if self.state.det() < 1.0 - DET_TOL || !self.state.vzz.is_finite() {
            self.state.check()?;
        }
        Ok(())
    }
}

/// Runs one Gaussian trajectory and records every sample.
pub fn run_trajectory_gaussian(spec: &RunSpec, seed: u64, index: u64) -> Result<TrajectoryRecord> {
    let mut engine = spec.gaussian_engine()?;
    let mut rec = TrajectoryRecord::with_capacity(spec.timebase.n_samples());
    run_loop(&mut engine, spec, seed, index, &mut |s| rec.push(s))?;
    Ok(rec)
}
