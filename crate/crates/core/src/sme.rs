//! Conditional stochastic master equation for the ion motion under
//! homodyne position measurement with feedback.
//!
//! The trap rotation is applied exactly in the number basis; everything
//! else (laser cooling, innovation, feedback kick) is an Euler-Maruyama
//! step. Plain Euler on the rotation would pump amplitude by about
//! `(1 + (nu dt)^2)^(1/2)` per step, which over the millions of steps of a
//! steady-state run is not a small error.

use log::warn;
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::fock::{ladder, quadratures, DensityMatrix, Operator};
use crate::params::ValidatedParams;
use crate::record::TrajectoryRecord;
use crate::trajectory::{run_loop, Engine, RunSpec};

/// Population of the top Fock level that aborts a run.
pub const TOP_POP_LIMIT: f64 = 1e-4;
/// Eigenvalue below which a run is aborted.
pub const MIN_EIG_ABORT: f64 = -1e-4;
/// Eigenvalue below which a warning is logged.
pub const MIN_EIG_WARN: f64 = -1e-8;
/// Steps between eigenvalue checks.
pub const EIG_CHECK_EVERY: u64 = 4096;

/// Innovation strength of a channel with measurement rate `rate`.
///
/// `sqrt(rate) * eta` is the value for which the photocurrent, the
/// feedback current built from it and the averaged feedback master
/// equation are mutually consistent.
pub fn innovation_coefficient(rate: f64, eta: f64) -> f64 {
    (rate * eta * eta).sqrt()
}

/// Filtered state with its clock.
#[derive(Clone, Debug)]
pub struct ConditionedState {
    pub rho: DensityMatrix,
    pub t: f64,
    pub top_pop: f64,
}

fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// `-i nu [a^dagger a, rho] + L0 rho`, dense.
pub fn drift_term(rho: &DensityMatrix, p: &ValidatedParams) -> Result<Operator> {
    let d = rho.dim();
    let mut out = Operator::from_fn(d, |m, n| {
        rho.op()[(m, n)] * C64::new(0.0, -p.nu * (m as f64 - n as f64))
    })?;
    let sq = ladder::Roots::new(d);
    ladder::add_thermal_dissipator(
        d,
        &sq,
        p.gamma_cool * (p.n_doppler + 1.0),
        p.gamma_cool * p.n_doppler,
        rho.op().as_slice(),
        1.0,
        out.as_mut_slice(),
    );
    Ok(out)
}

/// `k (z rho + rho z - 2 <z> rho)` with `k` the innovation coefficient of
/// the full measurement rate.
pub fn innovation_term(rho: &DensityMatrix, p: &ValidatedParams) -> Result<Operator> {
    let k = innovation_coefficient(p.gamma_meas, p.eta);
    measurement_operator(rho).map(|h| h.scale(c(k)))
}

/// `z rho + rho z - 2 <z> rho`.
pub fn measurement_operator(rho: &DensityMatrix) -> Result<Operator> {
    let (z, _) = quadratures(rho.dim())?;
    let zm = rho.expect(&z)?.re;
    z.anticommutator(rho.op())?.sub(&rho.op().scale(c(2.0 * zm)))
}

/// `-i G_tilde I_fb [z, rho]`.
pub fn feedback_term(rho: &DensityMatrix, i_fb: f64, g_tilde: f64) -> Result<Operator> {
    let (z, _) = quadratures(rho.dim())?;
    Ok(z.commutator(rho.op())?.scale(C64::new(0.0, -g_tilde * i_fb)))
}

/// Photocurrent sample: `rate eta <z> + sqrt(rate/2) dW/dt`.
pub fn photocurrent_sample(z_mean: f64, dw: f64, dt: f64, rate: f64, eta: f64) -> f64 {
    rate * eta * z_mean + (rate / 2.0).sqrt() * dw / dt
}

/// Out-of-loop detector sample with its share `1 - split` of the light.
pub fn out_loop_sample(z_mean: f64, dw_out: f64, dt: f64, p: &ValidatedParams, split: f64) -> Result<f64> {
    check_split(split)?;
    Ok(photocurrent_sample(
        z_mean,
        dw_out,
        dt,
        (1.0 - split) * p.gamma_meas,
        p.eta,
    ))
}

pub fn check_split(split: f64) -> Result<()> {
    if split > 0.0 && split < 1.0 {
        Ok(())
    } else {
        Err(Error::SplitOutOfRange(split))
    }
}

/// Density-matrix engine.
#[derive(Clone, Debug)]
pub struct SmeEngine {
    state: ConditionedState,
    dim: usize,
    dt: f64,
    down: f64,
    up: f64,
    k_in: f64,
    k_out: f64,
    roots: ladder::Roots,
    rotation: Vec<C64>,
    x: Vec<C64>,
    y: Vec<C64>,
    comm: Vec<C64>,
    drho: Vec<C64>,
    steps: u64,
    eig_every: u64,
    warned: bool,
}

impl SmeEngine {
    /// `rate_in`/`rate_out` are the measurement rates of the two detectors.
    pub fn new(p: &ValidatedParams, rate_in: f64, rate_out: f64, dt: f64, initial: DensityMatrix) -> Self {
        let d = initial.dim();
        // exp(-i nu (m - n) dt), indexed by m - n + d - 1
        let rotation = (0..2 * d - 1)
            .map(|k| C64::from_polar(1.0, -p.nu * dt * (k as f64 - (d - 1) as f64)))
            .collect();
        let top_pop = initial.top_population();
        Self {
            state: ConditionedState {
                rho: initial,
                t: 0.0,
                top_pop,
            },
            dim: d,
            dt,
            down: p.gamma_cool * (p.n_doppler + 1.0),
            up: p.gamma_cool * p.n_doppler,
            k_in: innovation_coefficient(rate_in, p.eta),
            k_out: innovation_coefficient(rate_out, p.eta),
            roots: ladder::Roots::new(d),
            rotation,
            x: vec![c(0.0); d * d],
            y: vec![c(0.0); d * d],
            comm: vec![c(0.0); d * d],
            drho: vec![c(0.0); d * d],
            steps: 0,
            eig_every: EIG_CHECK_EVERY,
            warned: false,
        }
    }

    pub fn state(&self) -> &ConditionedState {
        &self.state
    }

    pub fn set_eigen_check_interval(&mut self, every: u64) {
        self.eig_every = every.max(1);
    }

    /// Checks positivity now.
    pub fn check_positivity(&mut self) -> Result<f64> {
        let min_eig = self.state.rho.min_eigenvalue();
        if min_eig < MIN_EIG_ABORT {
            return Err(Error::PositivityBreach {
                t: self.state.t,
                min_eig,
            });
        }
        if min_eig < MIN_EIG_WARN && !self.warned {
            warn!("t = {:.4e} s: minimum eigenvalue {min_eig:.3e}", self.state.t);
            self.warned = true;
        }
        Ok(min_eig)
    }
}

impl Engine for SmeEngine {
    fn name(&self) -> &'static str {
        "sme"
    }

    fn time(&self) -> f64 {
        self.state.t
    }

    fn means(&self) -> (f64, f64) {
        let r = self.state.rho.op().as_slice();
        (
            ladder::z_mean(self.dim, &self.roots, r),
            ladder::p_mean(self.dim, &self.roots, r),
        )
    }

    fn occupation(&self) -> f64 {
        ladder::n_mean(self.dim, self.state.rho.op().as_slice())
    }

    fn step(&mut self, dw_in: f64, dw_out: f64, kick: f64) -> Result<()> {
        let d = self.dim;
        let dt = self.dt;
        let rho = self.state.rho.op_mut().as_mut_slice();

        for m in 0..d {
            let rot = &self.rotation[m..m + d];
            for (r, f) in rho[m * d..(m + 1) * d].iter_mut().zip(rot.iter().rev()) {
                *r *= f;
            }
        }

        let sq = &self.roots;
        let zm = ladder::z_mean(d, sq, rho);
        ladder::z_left(d, sq, rho, &mut self.x);
        self.drho.iter_mut().for_each(|v| *v = c(0.0));
        ladder::add_thermal_dissipator(d, sq, self.down, self.up, rho, dt, &mut self.drho);

        let kdw = self.k_in * dw_in + self.k_out * dw_out;
        if kdw != 0.0 {
            for m in 0..d {
                for n in 0..d {
                    let h = self.x[m * d + n] + self.x[n * d + m].conj() - rho[m * d + n] * (2.0 * zm);
                    self.drho[m * d + n] += h * kdw;
                }
            }
        }
        if kick != 0.0 {
            // exp(-i kick z) rho exp(i kick z) to second order
            for m in 0..d {
                for n in 0..d {
                    self.comm[m * d + n] = self.x[m * d + n] - self.x[n * d + m].conj();
                }
            }
            ladder::z_left(d, sq, &self.comm, &mut self.y);
            let a = C64::new(0.0, -kick);
            let b = -0.5 * kick * kick;
            for m in 0..d {
                for n in 0..d {
                    let dd = self.y[m * d + n] + self.y[n * d + m].conj();
                    self.drho[m * d + n] += self.comm[m * d + n] * a + dd * b;
                }
            }
        }

        for (r, dr) in rho.iter_mut().zip(&self.drho) {
            *r += dr;
        }
        self.state.rho.op_mut().hermitize();
        let tr = self.state.rho.op().trace().re;
        if !tr.is_finite() || (tr - 1.0).abs() > 1e-6 {
            return Err(Error::NumericalInstability(format!(
                "trace drifted to {tr} in one step at t = {:.4e} s",
                self.state.t
            )));
        }
        self.state.rho.renormalize();
        self.state.t += dt;
        self.steps += 1;

        let top = self.state.rho.top_population();
        self.state.top_pop = top;
        if top >= TOP_POP_LIMIT {
            return Err(Error::TruncationBreach {
                t: self.state.t,
                top_pop: top,
            });
        }
        if self.steps.is_multiple_of(self.eig_every) {
            self.check_positivity()?;
        }
        Ok(())
    }
}

/// Runs one density-matrix trajectory and records every sample.
pub fn run_trajectory(spec: &RunSpec, seed: u64, index: u64) -> Result<TrajectoryRecord> {
    let mut engine = spec.sme_engine()?;
    let mut rec = TrajectoryRecord::with_capacity(spec.timebase.n_samples());
    run_loop(&mut engine, spec, seed, index, &mut |s| rec.push(s))?;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{annihilation, thermal_state};
    use crate::params::{validate, PhysicalParams};

    fn desk() -> ValidatedParams {
        validate(&PhysicalParams::desk()).unwrap()
    }

    #[test]
    fn drift_examples() {
        let p = desk();
        let th = thermal_state(p.n_doppler, 40).unwrap();
        let dr = drift_term(&th, &p).unwrap();
        let dn: f64 = (0..40).map(|n| n as f64 * dr[(n, n)].re).sum();
        assert!(dn.abs() < 1e-8 * p.gamma_cool, "{dn}");
        assert!(dr.trace().norm() < 1e-10 * p.gamma_cool);

        let mut p0 = p.clone();
        p0.n_doppler = 0.0;
        let vac = DensityMatrix::fock(8, 0).unwrap();
        assert!(drift_term(&vac, &p0).unwrap().max_abs() < 1e-12);

        let one = DensityMatrix::fock(8, 1).unwrap();
        let dr = drift_term(&one, &p0).unwrap();
        let dn: f64 = (0..8).map(|n| n as f64 * dr[(n, n)].re).sum();
        assert!((dn + p0.gamma_cool).abs() < 1e-9 * p0.gamma_cool);
    }

    #[test]
    fn innovation_examples() {
        let p = desk();
        let k = innovation_coefficient(p.gamma_meas, p.eta);
        let vac = DensityMatrix::fock(6, 0).unwrap();
        let h = innovation_term(&vac, &p).unwrap();
        let (z, _) = quadratures(6).unwrap();
        let want = z.anticommutator(vac.op()).unwrap().scale(c(k));
        assert!(h.sub(&want).unwrap().max_abs() < 1e-12);
        assert!(h.trace().norm() < 1e-10);

        // displaced state with <z> = 1: coherent amplitude 1/2
        let d = 30;
        let alpha: f64 = 0.5;
        let mut psi = vec![0.0; d];
        let mut w = (-alpha * alpha / 2.0).exp();
        for (n, v) in psi.iter_mut().enumerate() {
            *v = w;
            w *= alpha / ((n + 1) as f64).sqrt();
        }
        let rho = DensityMatrix::new(Operator::from_fn(d, |m, n| c(psi[m] * psi[n])).unwrap()).unwrap();
        let (z, _) = quadratures(d).unwrap();
        assert!((rho.expect(&z).unwrap().re - 1.0).abs() < 1e-10);
        let h = innovation_term(&rho, &p).unwrap();
        let want = z
            .anticommutator(rho.op())
            .unwrap()
            .sub(&rho.op().scale(c(2.0)))
            .unwrap()
            .scale(c(k));
        assert!(h.sub(&want).unwrap().max_abs() < 1e-9);
        assert!(h.trace().norm() < 1e-10);
    }

    #[test]
    fn feedback_examples() {
        let vac = DensityMatrix::fock(5, 0).unwrap();
        assert_eq!(feedback_term(&vac, 0.0, 3.0).unwrap().max_abs(), 0.0);
        assert_eq!(feedback_term(&vac, 2.0, 0.0).unwrap().max_abs(), 0.0);
        let f = feedback_term(&vac, 1.0, 1.0).unwrap();
        for m in 0..5 {
            for n in 0..5 {
                let v = f[(m, n)].norm();
                if (m, n) == (0, 1) || (m, n) == (1, 0) {
                    assert!((v - 1.0).abs() < 1e-14);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
        assert!(f.hermiticity_error() < 1e-14);
    }

    #[test]
    fn photocurrent_examples() {
        assert_eq!(photocurrent_sample(1.3, 0.2, 1e-3, 0.0, 0.07), 0.0);
        let p = desk();
        assert!(matches!(
            out_loop_sample(0.0, 0.0, 1.0, &p, 1.0),
            Err(Error::SplitOutOfRange(_))
        ));
    }

    #[test]
    fn engine_matches_dense_operators() {
        let p = desk();
        let d = 12;
        let small = crate::fock::tests_support::random_density(5, 3);
        let rho = DensityMatrix::new(
            Operator::from_fn(d, |m, n| if m < 5 && n < 5 { small.op()[(m, n)] } else { c(0.0) }).unwrap(),
        )
        .unwrap();
        let dt = 1e-7;
        let mut e = SmeEngine::new(&p, 0.5 * p.gamma_meas, 0.5 * p.gamma_meas, dt, rho.clone());
        let (dwi, dwo, kick) = (2e-4, -1e-4, 3e-3);
        e.step(dwi, dwo, kick).unwrap();

        // reference: rotation exactly, rest by dense operators
        let rot = Operator::from_fn(d, |m, n| {
            rho.op()[(m, n)] * C64::from_polar(1.0, -p.nu * dt * (m as f64 - n as f64))
        })
        .unwrap();
        let r = DensityMatrix::new(rot).unwrap();
        let mut pl = p.clone();
        pl.nu = 0.0;
        let kin = innovation_coefficient(0.5 * p.gamma_meas, p.eta);
        let kout = innovation_coefficient(0.5 * p.gamma_meas, p.eta);
        let (z, _) = quadratures(d).unwrap();
        let comm = z.commutator(r.op()).unwrap();
        let dd = z.commutator(&comm).unwrap();
        let want = r
            .op()
            .add(&drift_term(&r, &pl).unwrap().scale(c(dt)))
            .unwrap()
            .add(&measurement_operator(&r).unwrap().scale(c(kin * dwi + kout * dwo)))
            .unwrap()
            .add(&comm.scale(C64::new(0.0, -kick)))
            .unwrap()
            .sub(&dd.scale(c(0.5 * kick * kick)))
            .unwrap();
        let tr = want.trace().re;
        let want = want.scale(c(1.0 / tr));
        let got = e.state().rho.op();
        assert!(got.sub(&want).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn kick_displaces_momentum() {
        let p = desk();
        let mut p0 = p.clone();
        p0.gamma_cool = 1e-30;
        let mut e = SmeEngine::new(&p0, 0.0, 0.0, 1e-12, DensityMatrix::fock(30, 0).unwrap());
        for _ in 0..100 {
            e.step(0.0, 0.0, 0.005).unwrap();
        }
        let (_, pm) = e.means();
        assert!((pm + 1.0).abs() < 1e-3, "{pm}");
    }

    #[test]
    fn truncation_breach_reported() {
        let p = desk();
        let th = thermal_state(2.0, 36).unwrap();
        let mut e = SmeEngine::new(&p, 0.0, 0.0, 1e-7, th);
        let mut err = None;
        for _ in 0..200 {
            if let Err(x) = e.step(0.0, 0.0, 0.3) {
                err = Some(x);
                break;
            }
        }
        assert!(matches!(err, Some(Error::TruncationBreach { .. })), "{err:?}");
    }

    #[test]
    fn no_measurement_relaxation() {
        let p = desk();
        let a = annihilation(4).unwrap();
        assert_eq!(a.dim(), 4);
        let d = 36;
        let dt = 1.0 / (p.gamma_cool * 2000.0);
        let mut pp = p.clone();
        pp.nu = 50.0 * p.gamma_cool;
        let mut e = SmeEngine::new(&pp, 0.0, 0.0, dt, DensityMatrix::fock(d, 0).unwrap());
        for k in 1..=2000 {
            e.step(0.0, 0.0, 0.0).unwrap();
            if k % 500 == 0 {
                let t = e.time();
                let want = p.n_doppler * (1.0 - (-p.gamma_cool * t).exp());
                assert!(
                    (e.occupation() - want).abs() < 0.01 * want,
                    "{} vs {want}",
                    e.occupation()
                );
            }
        }
    }
}
