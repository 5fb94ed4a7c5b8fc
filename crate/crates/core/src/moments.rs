//! Averaged feedback theory: the record-averaged master equation, its
//! closed-form steady state, the optimal gain and the calibration of the
//! measurement rate.
//!
//! Everything here lives in the frame rotating at the trap frequency.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{ladder, thermal_state, DensityMatrix, Operator};
use crate::params::ValidatedParams;

/// Branch of the loop phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Phase `-pi/2`: the force follows the momentum.
    Damping,
    /// Phase `pi`: the force follows the position.
    Shift,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteadyStatePrediction {
    pub n_ss: f64,
    pub gain: f64,
    pub regime: Regime,
    pub freq_shift_rad: f64,
}

/// Closed-form steady occupation on the damping branch for measurement
/// rate `rate`.
pub fn n_ss_with_rate(p: &ValidatedParams, rate: f64, g: f64) -> Result<f64> {
    if !(g >= 0.0) {
        return Err(Error::NegativeGain(g));
    }
    let n = p.n_doppler;
    let r = rate / p.gamma_cool;
    let den = 1.0 + 2.0 * p.eta * r * g;
    let num = n + p.eta * r * g * (2.0 * n - 1.0) / 2.0 + r * g * g / 8.0;
    let out = num / den;
    if !(out >= 0.0) {
        return Err(Error::Unphysical(format!(
            "steady occupation {out:.4} < 0 at gain {g} (N = {n} is below 1/2)"
        )));
    }
    Ok(out)
}

/// Steady occupation at theory gain `g` with the full measurement rate.
pub fn n_ss(p: &ValidatedParams, g: f64) -> Result<f64> {
    n_ss_with_rate(p, p.gamma_meas, g)
}

/// Gain minimising the steady occupation, and that minimum.
pub fn optimal_gain_with_rate(p: &ValidatedParams, rate: f64) -> Result<(f64, f64)> {
    let r = rate / p.gamma_cool;
    if r <= 0.0 {
        return Ok((0.0, p.n_doppler));
    }
    let n = p.n_doppler;
    let a = p.eta * r * (2.0 * n - 1.0) / 2.0;
    let b = r / 8.0;
    let c = 2.0 * p.eta * r;
    // root of b c G^2 + 2 b G + a - c N = 0, written to avoid cancellation
    let s = c * n - a;
    let g = if s <= 0.0 {
        0.0
    } else {
        s / (b + (b * b + b * c * s).sqrt())
    };
    Ok((g, n_ss_with_rate(p, rate, g)?))
}

pub fn optimal_gain(p: &ValidatedParams) -> Result<(f64, f64)> {
    optimal_gain_with_rate(p, p.gamma_meas)
}

/// Line shift on the position branch (rad/s).
pub fn frequency_shift(p: &ValidatedParams, g: f64) -> f64 {
    frequency_shift_with_rate(p, p.gamma_meas, g)
}

pub fn frequency_shift_with_rate(p: &ValidatedParams, rate: f64, g: f64) -> f64 {
    g * rate * p.eta / 2.0
}

pub fn predict(p: &ValidatedParams, g: f64, regime: Regime) -> Result<SteadyStatePrediction> {
    Ok(match regime {
        Regime::Damping => SteadyStatePrediction {
            n_ss: n_ss(p, g)?,
            gain: g,
            regime,
            freq_shift_rad: 0.0,
        },
        Regime::Shift => SteadyStatePrediction {
            n_ss: f64::NAN,
            gain: g,
            regime,
            freq_shift_rad: frequency_shift(p, g),
        },
    })
}

/// One row of a theory sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryPoint {
    pub gain: f64,
    /// Closed form; `NaN` on the shift branch, which has none.
    pub n_ss_analytic: f64,
    /// Relaxed averaged equation.
    pub n_ss_meq: f64,
    pub freq_shift_hz: f64,
}

/// Largest Fock dimension a theory sweep integrates; the cost grows with
/// the cube of the dimension.
pub const THEORY_DIM_CAP: usize = 96;

/// Closed form and relaxed averaged equation side by side over `gains`.
/// Rows needing more than [`THEORY_DIM_CAP`] levels get `n_ss_meq = NaN`.
pub fn theory_sweep(p: &ValidatedParams, rate: f64, gains: &[f64], regime: Regime) -> Result<Vec<TheoryPoint>> {
    let r = rate / p.gamma_cool;
    let shift_hz = |g: f64| match regime {
        Regime::Damping => 0.0,
        Regime::Shift => crate::params::rad_to_hz(frequency_shift_with_rate(p, rate, g)),
    };
    gains
        .iter()
        .map(|&g| {
            let analytic = match regime {
                Regime::Damping => n_ss_with_rate(p, rate, g)?,
                Regime::Shift => f64::NAN,
            };
            // heating alone bounds the occupation from above
            let bound = p.n_doppler + r * g * g / 8.0 + 1.0;
            let dim = crate::fock::default_dim(bound);
            if dim > THEORY_DIM_CAP {
                log::warn!("gain {g}: averaged equation needs dim {dim} > {THEORY_DIM_CAP}; n_ss_meq left NaN");
                return Ok(TheoryPoint {
                    gain: g,
                    n_ss_analytic: analytic,
                    n_ss_meq: f64::NAN,
                    freq_shift_hz: shift_hz(g),
                });
            }
            let relax = 1.0 + 2.0 * p.eta * r * g;
            let t_max = match regime {
                Regime::Damping => 20.0 / (p.gamma_cool * relax),
                Regime::Shift => 20.0 / p.gamma_cool,
            };
            let opts = MeqOptions {
                regime,
                n_initial: None,
                initial: None,
                n_points: 2,
            };
            let meq = integrate_feedback_meq_with_rate(p, rate, g, t_max, dim, &opts)?;
            Ok(TheoryPoint {
                gain: g,
                n_ss_analytic: analytic,
                n_ss_meq: meq.final_occupation(),
                freq_shift_hz: shift_hz(g),
            })
        })
        .collect()
}

pub fn theory_csv(points: &[TheoryPoint]) -> String {
    let mut out = String::from("gain,n_ss_analytic,n_ss_meq,freq_shift_hz\n");
    for t in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            t.gain, t.n_ss_analytic, t.n_ss_meq, t.freq_shift_hz
        ));
    }
    out
}

/// Time series from the averaged equation.
#[derive(Clone, Debug)]
pub struct MeqSeries {
    pub times: Vec<f64>,
    pub n: Vec<f64>,
    pub state: DensityMatrix,
    pub dt: f64,
}

impl MeqSeries {
    pub fn final_occupation(&self) -> f64 {
        *self.n.last().unwrap_or(&f64::NAN)
    }
}

/// Options for [`integrate_feedback_meq`].
#[derive(Clone, Debug)]
pub struct MeqOptions {
    pub regime: Regime,
    /// Initial thermal occupation; the Doppler value when `None`.
    pub n_initial: Option<f64>,
    /// Initial state overriding `n_initial`.
    pub initial: Option<DensityMatrix>,
    /// Number of recorded points.
    pub n_points: usize,
}

impl Default for MeqOptions {
    fn default() -> Self {
        Self {
            regime: Regime::Damping,
            n_initial: None,
            initial: None,
            n_points: 200,
        }
    }
}

struct Rhs {
    d: usize,
    sq: ladder::Roots,
    down: f64,
    up: f64,
    damp: f64,
    diff: f64,
    regime: Regime,
    a: Vec<num_complex::Complex64>,
    b: Vec<num_complex::Complex64>,
}

impl Rhs {
    /// `out = L mu`
    fn eval(&mut self, mu: &[num_complex::Complex64], out: &mut [num_complex::Complex64]) {
        use num_complex::Complex64 as C64;
        let d = self.d;
        out.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        ladder::add_thermal_dissipator(d, &self.sq, self.down, self.up, mu, 1.0, out);
        if self.damp == 0.0 && self.diff == 0.0 {
            return;
        }
        // S = q mu + mu q with q the fed-back quadrature
        match self.regime {
            Regime::Damping => ladder::p_left(d, &self.sq, mu, &mut self.a),
            Regime::Shift => {
                ladder::z_left(d, &self.sq, mu, &mut self.a);
                self.a.iter_mut().for_each(|v| *v = -*v);
            }
        }
        for m in 0..d {
            for n in 0..d {
                self.b[m * d + n] = self.a[m * d + n] + self.a[n * d + m].conj();
            }
        }
        // [z, S] = zS - (zS)^dagger for Hermitian S
        ladder::z_left(d, &self.sq, &self.b, &mut self.a);
        let k = C64::new(0.0, -self.damp);
        for m in 0..d {
            for n in 0..d {
                out[m * d + n] += (self.a[m * d + n] - self.a[n * d + m].conj()) * k;
            }
        }
        if self.diff != 0.0 {
            // [z, [z, mu]] = Y + Y^dagger with Y = z [z, mu]
            ladder::z_left(d, &self.sq, mu, &mut self.a);
            for m in 0..d {
                for n in 0..d {
                    self.b[m * d + n] = self.a[m * d + n] - self.a[n * d + m].conj();
                }
            }
            ladder::z_left(d, &self.sq, &self.b, &mut self.a);
            for m in 0..d {
                for n in 0..d {
                    out[m * d + n] -= (self.a[m * d + n] + self.a[n * d + m].conj()) * self.diff;
                }
            }
        }
    }
}

/// RK4 integration of the averaged feedback master equation
///
/// `d mu/dt = L0 mu - i (g gamma eta / 4) [z, q mu + mu q] - (g^2 gamma / 16) [z, [z, mu]]`
///
/// with `q = p` on the damping branch and `q = -z` on the shift branch.
/// On a non-finite or exploding state the step is halved, at most three
/// times.
pub fn integrate_feedback_meq(
    p: &ValidatedParams,
    g: f64,
    t_max: f64,
    dim: usize,
    opts: &MeqOptions,
) -> Result<MeqSeries> {
    integrate_feedback_meq_with_rate(p, p.gamma_meas, g, t_max, dim, opts)
}

pub fn integrate_feedback_meq_with_rate(
    p: &ValidatedParams,
    rate: f64,
    g: f64,
    t_max: f64,
    dim: usize,
    opts: &MeqOptions,
) -> Result<MeqSeries> {
    if !(g >= 0.0) {
        return Err(Error::NegativeGain(g));
    }
    let init = match &opts.initial {
        Some(s) => {
            if s.dim() != dim {
                return Err(Error::DimensionMismatch {
                    left: s.dim(),
                    right: dim,
                });
            }
            s.clone()
        }
        None => thermal_state(opts.n_initial.unwrap_or(p.n_doppler), dim)?,
    };
    // the steady state must fit as well
    thermal_state(p.n_doppler, dim)?;

    let gam = p.gamma_cool;
    let damp = g * rate * p.eta / 4.0;
    let diff = g * g * rate / 16.0;
    let d = dim as f64;
    // spectral radius estimate: diagonal decay of L0 plus the two feedback
    // terms on the widest Fock coherences
    let radius = gam * (2.0 * p.n_doppler + 1.0) * d + 8.0 * damp * d + 16.0 * diff * d;
    let mut dt = (0.01 / gam).min(0.5 / radius);
    if g > 0.0 && rate > 0.0 {
        dt = dt.min(0.1 / (g * rate));
    }

    let mut last_err = None;
    for _ in 0..4 {
        match rk4_run(p, rate, g, t_max, &init, dt, opts, damp, diff) {
            Ok(s) => return Ok(s),
            Err(e @ Error::NumericalInstability(_)) => {
                last_err = Some(e);
                dt /= 2.0;
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::NumericalInstability("RK4 failed".into())))
}

#[allow(clippy::too_many_arguments)]
fn rk4_run(
    p: &ValidatedParams,
    _rate: f64,
    _g: f64,
    t_max: f64,
    init: &DensityMatrix,
    dt: f64,
    opts: &MeqOptions,
    damp: f64,
    diff: f64,
) -> Result<MeqSeries> {
    use num_complex::Complex64 as C64;
    let dim = init.dim();
    let n2 = dim * dim;
    let zero = C64::new(0.0, 0.0);
    let mut rhs = Rhs {
        d: dim,
        sq: ladder::Roots::new(dim),
        down: p.gamma_cool * (p.n_doppler + 1.0),
        up: p.gamma_cool * p.n_doppler,
        damp,
        diff,
        regime: opts.regime,
        a: vec![zero; n2],
        b: vec![zero; n2],
    };
    let steps = (t_max / dt).ceil().max(1.0) as usize;
    let dt = t_max / steps as f64;
    let every = (steps / opts.n_points.max(1)).max(1);

    let mut mu: Vec<C64> = init.op().as_slice().to_vec();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (
        vec![zero; n2],
        vec![zero; n2],
        vec![zero; n2],
        vec![zero; n2],
        vec![zero; n2],
    );
    let mut times = vec![0.0];
    let mut ns = vec![ladder::n_mean(dim, &mu)];
    let bound = 10.0 * (dim as f64);

    for s in 1..=steps {
        rhs.eval(&mu, &mut k1);
        for i in 0..n2 {
            tmp[i] = mu[i] + k1[i] * (0.5 * dt);
        }
        rhs.eval(&tmp, &mut k2);
        for i in 0..n2 {
            tmp[i] = mu[i] + k2[i] * (0.5 * dt);
        }
        rhs.eval(&tmp, &mut k3);
        for i in 0..n2 {
            tmp[i] = mu[i] + k3[i] * dt;
        }
        rhs.eval(&tmp, &mut k4);
        for i in 0..n2 {
            mu[i] += (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (dt / 6.0);
        }
        if s % every == 0 || s == steps {
            let n = ladder::n_mean(dim, &mu);
            if !n.is_finite() || n.abs() > bound {
                return Err(Error::NumericalInstability(format!(
                    "averaged equation diverged at t = {:.4e} s with dt = {dt:.3e} s",
                    s as f64 * dt
                )));
            }
            let top = mu[n2 - 1].re;
            if top >= 1e-4 {
                return Err(Error::TruncationBreach {
                    t: s as f64 * dt,
                    top_pop: top,
                });
            }
            times.push(s as f64 * dt);
            ns.push(n);
        }
    }
    let mut op = Operator::zeros(dim)?;
    op.as_mut_slice().copy_from_slice(&mu);
    op.hermitize();
    let state = DensityMatrix::new(op)?;
    Ok(MeqSeries {
        times,
        n: ns,
        state,
        dt,
    })
}

/// Outcome of [`calibrate_gamma`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaCalibration {
    /// Measurement rate (rad/s).
    pub gamma: f64,
    /// `gamma / Gamma`
    pub ratio: f64,
    pub g_opt: f64,
    pub n_min: f64,
    /// Minimum after scaling the rate by 15.
    pub n_min_scaled: f64,
    pub g_opt_scaled: f64,
}

/// Factor between the two solid-angle fractions compared in the
/// consistency display (1% and 15%).
pub const EPSILON_SCALE: f64 = 15.0;

/// Finds the measurement rate for which the optimal steady occupation is
/// `n_to`, with `N`, `eta` and `Gamma` taken from `p`.
pub fn calibrate_gamma(p: &ValidatedParams, n_to: f64) -> Result<GammaCalibration> {
    let n = p.n_doppler;
    let floor = (2.0 * n - 1.0) / 4.0;
    let at = |r: f64| optimal_gain_with_rate(p, r * p.gamma_cool).map(|x| x.1);
    let finish = |r: f64| -> Result<GammaCalibration> {
        let gamma = r * p.gamma_cool;
        let (g_opt, n_min) = optimal_gain_with_rate(p, gamma)?;
        let (g_opt_scaled, n_min_scaled) = optimal_gain_with_rate(p, EPSILON_SCALE * gamma)?;
        Ok(GammaCalibration {
            gamma,
            ratio: r,
            g_opt,
            n_min,
            n_min_scaled,
            g_opt_scaled,
        })
    };
    if n_to == n {
        return finish(0.0);
    }
    if !(n_to < n && n_to > floor) {
        return Err(Error::CalibrationInfeasible(format!(
            "target {n_to} outside ({floor}, {n}] reachable for N = {n}"
        )));
    }
    let mut hi = 1.0;
    while at(hi)? > n_to {
        hi *= 2.0;
        if hi > 1e15 {
            return Err(Error::CalibrationInfeasible(format!("no rate reaches {n_to}")));
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-10 * hi {
        let mid = 0.5 * (lo + hi);
        if at(mid)? > n_to {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    finish(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{validate, PhysicalParams};
    use proptest::prelude::*;

    fn params(n: f64, eta: f64, ratio: f64) -> ValidatedParams {
        let mut raw = PhysicalParams::lab(400.0 * ratio);
        raw.n_doppler = n;
        raw.eta = eta;
        validate(&raw).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let p = params(17.0, 0.07, 1.0);
        assert_eq!(n_ss(&p, 0.0).unwrap(), 17.0);
        let want = (17.0 + 0.07 * 33.0 / 2.0 + 1.0 / 8.0) / (1.0 + 0.14);
        assert!((n_ss(&p, 1.0).unwrap() - want).abs() < 1e-12);
        assert!(matches!(n_ss(&p, -1.0), Err(Error::NegativeGain(_))));
        // growth is eventually linear
        let slope = |g: f64| n_ss(&p, g).unwrap() / g;
        let (s1, s2) = (slope(1e6), slope(2e6));
        assert!((s1 / s2 - 1.0).abs() < 1e-4);
        assert!((s2 - 1.0 / (16.0 * 0.07)).abs() < 1e-3);
    }

    #[test]
    fn optimum_examples() {
        let p = params(17.0, 1e-9, 1.0);
        let (g, n) = optimal_gain(&p).unwrap();
        assert!(g < 1e-6 && (n - 17.0).abs() < 1e-6);
        let p = params(2.0, 0.07, 1.0);
        let (g, n) = optimal_gain(&p).unwrap();
        assert!((g - 0.66870).abs() < 1e-4, "{g}");
        assert!((n - 1.94411).abs() < 1e-4, "{n}");
        let mut p0 = p.clone();
        p0.gamma_meas = 0.0;
        assert_eq!(optimal_gain(&p0).unwrap(), (0.0, 2.0));
    }

    #[test]
    fn shift_examples() {
        let p = params(17.0, 0.07, 3.0);
        assert_eq!(frequency_shift(&p, 0.0), 0.0);
        assert_eq!(frequency_shift(&p, 2.0), 2.0 * frequency_shift(&p, 1.0));
        let pr = predict(&p, 1.5, Regime::Shift).unwrap();
        assert_eq!(pr.freq_shift_rad, 1.5 * p.gamma_meas * 0.07 / 2.0);
    }

    #[test]
    fn meq_relaxation() {
        let p = params(2.0, 0.07, 1.0);
        let fixed = integrate_feedback_meq(&p, 0.0, 3.0 / p.gamma_cool, 36, &MeqOptions::default()).unwrap();
        assert!(fixed.n.iter().all(|n| (n - fixed.n[0]).abs() < 1e-9));

        let opts = MeqOptions {
            n_initial: Some(0.0),
            ..MeqOptions::default()
        };
        let s = integrate_feedback_meq(&p, 0.0, 3.0 / p.gamma_cool, 36, &opts).unwrap();
        for (t, n) in s.times.iter().zip(&s.n) {
            let want = 2.0 * (1.0 - (-p.gamma_cool * t).exp());
            assert!((n - want).abs() < 1e-4, "t={t}: {n} vs {want}");
        }
    }

    #[test]
    fn meq_matches_closed_form() {
        let p = params(2.0, 0.07, 1.0);
        for g in [0.3, 0.67, 2.0] {
            let s = integrate_feedback_meq(&p, g, 15.0 / p.gamma_cool, 36, &MeqOptions::default()).unwrap();
            let want = n_ss(&p, g).unwrap();
            let got = s.final_occupation();
            assert!((got / want - 1.0).abs() < 1e-3, "g={g}: {got} vs {want}");
        }
    }

    #[test]
    fn theory_sweep_rows() {
        let p = params(2.0, 0.07, 1.0);
        let rows = theory_sweep(&p, p.gamma_meas, &[0.0, 0.67, 2.0], Regime::Damping).unwrap();
        for t in &rows {
            assert!((t.n_ss_meq / t.n_ss_analytic - 1.0).abs() < 1e-3, "{t:?}");
            assert_eq!(t.freq_shift_hz, 0.0);
        }
        let shift = theory_sweep(&p, p.gamma_meas, &[1.0], Regime::Shift).unwrap();
        assert!(shift[0].n_ss_analytic.is_nan() && shift[0].n_ss_meq > 2.0);
        let csv = theory_csv(&shift);
        assert!(csv.starts_with("gain,n_ss_analytic,n_ss_meq,freq_shift_hz\n"));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn shift_branch_heats() {
        let p = params(2.0, 0.07, 1.0);
        let opts = MeqOptions {
            regime: Regime::Shift,
            ..MeqOptions::default()
        };
        let mut last = 0.0;
        for g in [0.0, 0.5, 1.0, 2.0] {
            let n = integrate_feedback_meq(&p, g, 12.0 / p.gamma_cool, 40, &opts)
                .unwrap()
                .final_occupation();
            assert!(n >= last - 1e-9, "g={g}: {n} < {last}");
            last = n;
        }
    }

    #[test]
    fn calibration() {
        let p = params(17.0, 0.07, 1.0);
        let c = calibrate_gamma(&p, 12.0).unwrap();
        assert!((c.ratio - 4000.0 / 441.0).abs() < 1e-6 * c.ratio, "{}", c.ratio);
        assert!((c.n_min - 12.0).abs() < 1e-7);
        let zero = calibrate_gamma(&p, 17.0).unwrap();
        assert_eq!(zero.gamma, 0.0);
        assert!(matches!(calibrate_gamma(&p, 8.0), Err(Error::CalibrationInfeasible(_))));
    }

    proptest! {
        #[test]
        fn interior_minimum_below_doppler(n in 1.0f64..30.0, eta in 0.01f64..0.15, r in 0.05f64..50.0) {
            let p = params(n, eta, r);
            let (g, nmin) = optimal_gain(&p).unwrap();
            prop_assert!(g > 0.0);
            prop_assert!(nmin < n);
            let eps = 1e-4 * g;
            prop_assert!(n_ss(&p, g - eps).unwrap() >= nmin - 1e-12);
            prop_assert!(n_ss(&p, g + eps).unwrap() >= nmin - 1e-12);
            // decreasing before, increasing after
            prop_assert!(n_ss(&p, 0.5 * g).unwrap() > nmin);
            prop_assert!(n_ss(&p, 0.5 * g).unwrap() < n);
            prop_assert!(n_ss(&p, 2.0 * g).unwrap() > nmin);
            prop_assert!(n_ss(&p, 10.0 * g).unwrap() > n_ss(&p, 2.0 * g).unwrap());
        }
    }
}
