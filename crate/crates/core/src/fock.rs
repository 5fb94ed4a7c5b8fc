//! Truncated Fock-space operator algebra.
//!
//! Operators are dense row-major complex matrices. The hot paths of the
//! stochastic engine do not go through the generic matrix product; they use
//! the banded ladder kernels in [`ladder`], which touch each entry of a
//! density matrix a constant number of times.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

/// Thermal tail population allowed beyond the truncation.
pub const THERMAL_TAIL_LIMIT: f64 = 1e-6;
/// Default trace tolerance of a density matrix after renormalisation.
pub const DEFAULT_TRACE_TOL: f64 = 1e-9;
/// Hermiticity tolerance for Hermitian-flagged operators.
pub const HERMITIAN_TOL: f64 = 1e-12;

/// Default truncation for a thermal occupation `n`: `ceil(12 (n + 1))`,
/// raised where needed so the thermal tail stays below
/// [`THERMAL_TAIL_LIMIT`] (the plain rule misses it from about `n = 5`).
pub fn default_dim(n: f64) -> usize {
    let n = n.max(0.0);
    let rule = ((12.0 * (n + 1.0)).ceil() as usize).max(2);
    if n == 0.0 {
        return rule;
    }
    let tail = (THERMAL_TAIL_LIMIT.ln() / (n / (n + 1.0)).ln()).floor() as usize + 1;
    rule.max(tail)
}

/// Dense complex `dim x dim` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Operator {
    dim: usize,
    data: Vec<C64>,
}

impl Operator {
    pub fn zeros(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self {
            dim,
            data: vec![C64::new(0.0, 0.0); dim * dim],
        })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        let mut op = Self::zeros(dim)?;
        for n in 0..dim {
            op[(n, n)] = C64::new(1.0, 0.0);
        }
        Ok(op)
    }

    pub fn from_fn(dim: usize, f: impl Fn(usize, usize) -> C64) -> Result<Self> {
        check_dim(dim)?;
        let mut data = Vec::with_capacity(dim * dim);
        for m in 0..dim {
            for n in 0..dim {
                data.push(f(m, n));
            }
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn adjoint(&self) -> Self {
        let d = self.dim;
        let mut out = self.clone();
        for m in 0..d {
            for n in 0..d {
                out.data[m * d + n] = self.data[n * d + m].conj();
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        same_dim(self.dim, other.dim)?;
        let d = self.dim;
        let mut out = Self::zeros(d)?;
        for m in 0..d {
            for k in 0..d {
                let a = self.data[m * d + k];
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                let row = &other.data[k * d..(k + 1) * d];
                let dst = &mut out.data[m * d..(m + 1) * d];
                for (o, b) in dst.iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: C64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(C64, C64) -> C64) -> Result<Self> {
        same_dim(self.dim, other.dim)?;
        Ok(Self {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    /// `[self, other]`
    pub fn commutator(&self, other: &Self) -> Result<Self> {
        self.matmul(other)?.sub(&other.matmul(self)?)
    }

    /// `{self, other}`
    pub fn anticommutator(&self, other: &Self) -> Result<Self> {
        self.matmul(other)?.add(&other.matmul(self)?)
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim).map(|n| self.data[n * self.dim + n]).sum()
    }

    /// `max |M - M^dagger|` over all entries.
    pub fn hermiticity_error(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0_f64;
        for m in 0..d {
            for n in m..d {
                worst = worst.max((self.data[m * d + n] - self.data[n * d + m].conj()).norm());
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.norm()).fold(0.0, f64::max)
    }

    /// Replaces the operator by `(M + M^dagger) / 2`.
    pub fn hermitize(&mut self) {
        let d = self.dim;
        for m in 0..d {
            let diag = &mut self.data[m * d + m];
            *diag = C64::new(diag.re, 0.0);
            for n in (m + 1)..d {
                let avg = (self.data[m * d + n] + self.data[n * d + m].conj()) * 0.5;
                self.data[m * d + n] = avg;
                self.data[n * d + m] = avg.conj();
            }
        }
    }

    /// Eigenvalues of the Hermitian part, ascending.
    pub fn hermitian_eigenvalues(&self) -> Vec<f64> {
        let d = self.dim;
        let m = DMatrix::from_fn(d, d, |r, c| self.data[r * d + c]);
        let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }
}

impl std::ops::Index<(usize, usize)> for Operator {
    type Output = C64;
    fn index(&self, (m, n): (usize, usize)) -> &C64 {
        &self.data[m * self.dim + n]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Operator {
    fn index_mut(&mut self, (m, n): (usize, usize)) -> &mut C64 {
        &mut self.data[m * self.dim + n]
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim < 2 {
        Err(Error::InvalidDimension(dim))
    } else {
        Ok(())
    }
}

fn same_dim(left: usize, right: usize) -> Result<()> {
    if left != right {
        Err(Error::DimensionMismatch { left, right })
    } else {
        Ok(())
    }
}

/// Destruction operator `a`: `a[n-1, n] = sqrt(n)`.
pub fn annihilation(dim: usize) -> Result<Operator> {
    Operator::from_fn(dim, |m, n| {
        if n == m + 1 {
            C64::new((n as f64).sqrt(), 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

pub fn creation(dim: usize) -> Result<Operator> {
    Ok(annihilation(dim)?.adjoint())
}

pub fn number(dim: usize) -> Result<Operator> {
    Operator::from_fn(dim, |m, n| {
        if m == n {
            C64::new(m as f64, 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

/// Position and momentum quadratures `(a + a^dagger, i (a^dagger - a))`.
///
/// With this normalisation `[z, p] = 2i` away from the truncation edge.
pub fn quadratures(dim: usize) -> Result<(Operator, Operator)> {
    let a = annihilation(dim)?;
    let ad = a.adjoint();
    let z = a.add(&ad)?;
    let p = ad.sub(&a)?.scale(C64::new(0.0, 1.0));
    Ok((z, p))
}

/// `D[c] rho = c rho c^dagger - (c^dagger c rho + rho c^dagger c) / 2`.
pub fn dissipator_apply(c: &Operator, rho: &DensityMatrix) -> Result<Operator> {
    let r = rho.op();
    same_dim(c.dim(), r.dim())?;
    let cd = c.adjoint();
    let jump = c.matmul(r)?.matmul(&cd)?;
    let cdc = cd.matmul(c)?;
    let anti = cdc.anticommutator(r)?;
    jump.sub(&anti.scale(C64::new(0.5, 0.0)))
}

/// Density matrix with trace, Hermiticity and positivity monitoring.
#[derive(Clone, Debug)]
pub struct DensityMatrix {
    op: Operator,
    trace_tol: f64,
}

impl DensityMatrix {
    /// Wraps an operator, checking trace and Hermiticity.
    pub fn new(op: Operator) -> Result<Self> {
        let herm = op.hermiticity_error();
        if herm > 1e-10 {
            return Err(Error::InvalidParameter {
                name: "rho",
                reason: format!("not Hermitian (error {herm:.3e})"),
            });
        }
        let tr = op.trace();
        if (tr.re - 1.0).abs() > 1e-6 || tr.im.abs() > 1e-6 {
            return Err(Error::InvalidParameter {
                name: "rho",
                reason: format!("trace {tr} is not 1"),
            });
        }
        let mut dm = Self {
            op,
            trace_tol: DEFAULT_TRACE_TOL,
        };
        dm.op.hermitize();
        dm.renormalize();
        Ok(dm)
    }

    /// Pure Fock state `|n><n|`.
    pub fn fock(dim: usize, n: usize) -> Result<Self> {
        if n >= dim {
            return Err(Error::InvalidParameter {
                name: "n",
                reason: format!("level {n} outside dimension {dim}"),
            });
        }
        let mut op = Operator::zeros(dim)?;
        op[(n, n)] = C64::new(1.0, 0.0);
        Ok(Self {
            op,
            trace_tol: DEFAULT_TRACE_TOL,
        })
    }

    pub fn op(&self) -> &Operator {
        &self.op
    }

    pub fn op_mut(&mut self) -> &mut Operator {
        &mut self.op
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    pub fn trace_tol(&self) -> f64 {
        self.trace_tol
    }

    pub fn renormalize(&mut self) {
        let tr = self.op.trace().re;
        if tr != 0.0 && tr != 1.0 {
            let s = 1.0 / tr;
            for x in self.op.as_mut_slice() {
                *x *= s;
            }
        }
    }

    pub fn expect(&self, o: &Operator) -> Result<C64> {
        same_dim(o.dim(), self.dim())?;
        let d = self.dim();
        let (a, r) = (o.as_slice(), self.op.as_slice());
        let mut acc = C64::new(0.0, 0.0);
        for m in 0..d {
            for n in 0..d {
                acc += a[m * d + n] * r[n * d + m];
            }
        }
        Ok(acc)
    }

    pub fn mean_number(&self) -> f64 {
        (0..self.dim()).map(|n| n as f64 * self.op[(n, n)].re).sum()
    }

    /// Population of the highest retained Fock level.
    pub fn top_population(&self) -> f64 {
        let d = self.dim();
        self.op[(d - 1, d - 1)].re
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.op.hermitian_eigenvalues()[0]
    }
}

/// Truncated thermal state with mean occupation `n_mean`.
///
/// Fails when the population beyond `dim` would exceed
/// [`THERMAL_TAIL_LIMIT`].
pub fn thermal_state(n_mean: f64, dim: usize) -> Result<DensityMatrix> {
    check_dim(dim)?;
    if !(n_mean >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "n_mean",
            reason: format!("{n_mean} must be non-negative"),
        });
    }
    let ratio = n_mean / (n_mean + 1.0);
    let tail = ratio.powi(dim as i32);
    if tail >= THERMAL_TAIL_LIMIT {
        return Err(Error::TruncationTooSmall {
            dim,
            tail,
            limit: THERMAL_TAIL_LIMIT,
        });
    }
    let mut op = Operator::zeros(dim)?;
    let mut w = 1.0;
    let mut total = 0.0;
    for n in 0..dim {
        op[(n, n)] = C64::new(w, 0.0);
        total += w;
        w *= ratio;
    }
    for n in 0..dim {
        op[(n, n)] /= total;
    }
    Ok(DensityMatrix {
        op,
        trace_tol: DEFAULT_TRACE_TOL,
    })
}

/// Banded kernels for the ladder operators acting on row-major `d x d`
/// buffers. Truncation follows the matrices built by [`annihilation`].
pub mod ladder {
    use num_complex::Complex64 as C64;

    /// Precomputed `sqrt(n)` for `n = 0..=d`.
    #[derive(Clone, Debug)]
    pub struct Roots(Vec<f64>);

    impl Roots {
        pub fn new(d: usize) -> Self {
            Self((0..=d).map(|n| (n as f64).sqrt()).collect())
        }
        #[inline]
        pub fn get(&self, n: usize) -> f64 {
            self.0[n]
        }
    }

    /// `out = z rho` with `z = a + a^dagger`.
    pub fn z_left(d: usize, sq: &Roots, rho: &[C64], out: &mut [C64]) {
        for m in 0..d {
            let dst = &mut out[m * d..(m + 1) * d];
            if m > 0 && m + 1 < d {
                let (lo, hi) = (sq.get(m), sq.get(m + 1));
                let below = &rho[(m - 1) * d..m * d];
                let above = &rho[(m + 1) * d..(m + 2) * d];
                for ((o, b), a) in dst.iter_mut().zip(below).zip(above) {
                    *o = b * lo + a * hi;
                }
            } else if m > 0 {
                let lo = sq.get(m);
                let below = &rho[(m - 1) * d..m * d];
                for (o, b) in dst.iter_mut().zip(below) {
                    *o = b * lo;
                }
            } else {
                let hi = sq.get(1);
                let above = &rho[d..2 * d];
                for (o, a) in dst.iter_mut().zip(above) {
                    *o = a * hi;
                }
            }
        }
    }

    /// `out = p rho` with `p = i (a^dagger - a)`.
    pub fn p_left(d: usize, sq: &Roots, rho: &[C64], out: &mut [C64]) {
        let i = C64::new(0.0, 1.0);
        for m in 0..d {
            for n in 0..d {
                let mut acc = C64::new(0.0, 0.0);
                if m > 0 {
                    acc += rho[(m - 1) * d + n] * sq.get(m);
                }
                if m + 1 < d {
                    acc -= rho[(m + 1) * d + n] * sq.get(m + 1);
                }
                out[m * d + n] = acc * i;
            }
        }
    }

    /// `Tr(z rho)` for Hermitian `rho`.
    pub fn z_mean(d: usize, sq: &Roots, rho: &[C64]) -> f64 {
        2.0 * (0..d - 1).map(|n| sq.get(n + 1) * rho[n * d + n + 1].re).sum::<f64>()
    }

    /// `Tr(p rho)` for Hermitian `rho`, `p = i (a^dagger - a)`.
    pub fn p_mean(d: usize, sq: &Roots, rho: &[C64]) -> f64 {
        -2.0 * (0..d - 1).map(|n| sq.get(n + 1) * rho[n * d + n + 1].im).sum::<f64>()
    }

    pub fn n_mean(d: usize, rho: &[C64]) -> f64 {
        (0..d).map(|n| n as f64 * rho[n * d + n].re).sum()
    }

    /// Adds `scale * L0 rho` to `out`, where
    /// `L0 = down D[a] + up D[a^dagger]`.
    pub fn add_thermal_dissipator(d: usize, sq: &Roots, down: f64, up: f64, rho: &[C64], scale: f64, out: &mut [C64]) {
        // diagonal of a a^dagger after truncation: n + 1, except 0 at the top
        let aad = |n: usize| if n + 1 < d { (n + 1) as f64 } else { 0.0 };
        let decay: Vec<f64> = (0..d).map(|n| -0.5 * scale * (down * n as f64 + up * aad(n))).collect();
        let s = &sq.0;
        for m in 0..d {
            let row = &rho[m * d..(m + 1) * d];
            let dst = &mut out[m * d..(m + 1) * d];
            for ((o, r), g) in dst.iter_mut().zip(row).zip(&decay) {
                *o += r * (decay[m] + g);
            }
            if m + 1 < d {
                let next = &rho[(m + 1) * d + 1..(m + 2) * d];
                let f = down * scale * s[m + 1];
                for ((o, r), q) in dst[..d - 1].iter_mut().zip(next).zip(&s[1..d]) {
                    *o += r * (f * q);
                }
            }
            if m > 0 {
                let prev = &rho[(m - 1) * d..m * d - 1];
                let f = up * scale * s[m];
                for ((o, r), q) in dst[1..].iter_mut().zip(prev).zip(&s[1..d]) {
                    *o += r * (f * q);
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    /// Random full-rank density matrix `G G^dagger / Tr`.
    pub fn random_density(d: usize, seed: u64) -> DensityMatrix {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let vals: Vec<C64> = (0..d * d).map(|_| C64::new(next(), next())).collect();
        let g = Operator::from_fn(d, |r, k| vals[r * d + k]).unwrap();
        let mut m = g.matmul(&g.adjoint()).unwrap();
        let tr = m.trace().re;
        m = m.scale(C64::new(1.0 / tr, 0.0));
        DensityMatrix::new(m).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::random_density;
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn annihilation_small() {
        let a = annihilation(2).unwrap();
        assert_eq!(a.as_slice(), &[c(0.0), c(1.0), c(0.0), c(0.0)]);
        let a4 = annihilation(4).unwrap();
        assert!((a4[(2, 3)].re - 3f64.sqrt()).abs() < 1e-15);
        assert!(matches!(annihilation(1), Err(Error::InvalidDimension(1))));
    }

    #[test]
    fn number_eigenstate() {
        let a = annihilation(40).unwrap();
        let n = a.adjoint().matmul(&a).unwrap();
        let rho = DensityMatrix::fock(40, 5).unwrap();
        assert!((rho.expect(&n).unwrap().re - 5.0).abs() < 1e-12);
        let applied = n.matmul(rho.op()).unwrap();
        assert!((applied[(5, 5)].re - 5.0).abs() < 1e-12);
    }

    #[test]
    fn quadrature_basics() {
        let (z, p) = quadratures(2).unwrap();
        assert_eq!(z.as_slice(), &[c(0.0), c(1.0), c(1.0), c(0.0)]);
        assert!(z.hermiticity_error() < HERMITIAN_TOL);
        assert!(p.hermiticity_error() < HERMITIAN_TOL);
        for dim in [2, 5, 17] {
            let (z, p) = quadratures(dim).unwrap();
            let comm = z.commutator(&p).unwrap();
            for n in 0..dim - 1 {
                assert!((comm[(n, n)] - C64::new(0.0, 2.0)).norm() < 1e-12);
            }
        }
        let th = thermal_state(2.0, 40).unwrap();
        let (z, _) = quadratures(40).unwrap();
        assert!(th.expect(&z).unwrap().norm() < 1e-15);
    }

    #[test]
    fn ladder_identity_truncation_aware() {
        let a = annihilation(9).unwrap();
        let ad = a.adjoint();
        let comm = ad.matmul(&a).unwrap().sub(&a.matmul(&ad).unwrap()).unwrap();
        for m in 0..8 {
            for n in 0..8 {
                let want = if m == n { -1.0 } else { 0.0 };
                assert!((comm[(m, n)] - c(want)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn dissipator_examples() {
        let a = annihilation(6).unwrap();
        let vac = DensityMatrix::fock(6, 0).unwrap();
        assert!(dissipator_apply(&a, &vac).unwrap().max_abs() < 1e-15);

        let one = DensityMatrix::fock(6, 1).unwrap();
        let out = dissipator_apply(&a, &one).unwrap();
        let mut want = Operator::zeros(6).unwrap();
        want[(0, 0)] = c(1.0);
        want[(1, 1)] = c(-1.0);
        assert!(out.sub(&want).unwrap().max_abs() < 1e-14);

        let a60 = annihilation(60).unwrap();
        let th = thermal_state(3.0, 60).unwrap();
        assert!(dissipator_apply(&a60, &th).unwrap().trace().norm() < 1e-10);

        let a5 = annihilation(5).unwrap();
        assert!(matches!(
            dissipator_apply(&a5, &th),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn thermal_examples() {
        let vac = thermal_state(0.0, 10).unwrap();
        assert_eq!(vac.op()[(0, 0)], c(1.0));
        assert!((vac.op().trace().re - 1.0).abs() < 1e-15);

        let th = thermal_state(17.0, 256).unwrap();
        let n = th.mean_number();
        assert!((16.99..=17.01).contains(&n), "{n}");

        let th2 = thermal_state(2.0, 40).unwrap();
        let ratio = th2.op()[(1, 1)].re / th2.op()[(0, 0)].re;
        assert!((ratio - 2.0 / 3.0).abs() < 1e-14);

        assert!(matches!(thermal_state(17.0, 40), Err(Error::TruncationTooSmall { .. })));
        // default rule always satisfies the tail check
        for n in [0.0, 0.5, 2.0, 5.0, 17.0] {
            let th = thermal_state(n, default_dim(n)).unwrap();
            assert!((th.mean_number() - n).abs() <= 1e-4 * n.max(1e-12));
        }
    }

    #[test]
    fn banded_kernels_match_dense() {
        let d = 7;
        let rho = random_density(d, 11);
        let (z, p) = quadratures(d).unwrap();
        let sq = ladder::Roots::new(d);
        let mut out = vec![C64::new(0.0, 0.0); d * d];
        ladder::z_left(d, &sq, rho.op().as_slice(), &mut out);
        let dense = z.matmul(rho.op()).unwrap();
        for (a, b) in out.iter().zip(dense.as_slice()) {
            assert!((a - b).norm() < 1e-13);
        }
        let zm = ladder::z_mean(d, &sq, rho.op().as_slice());
        assert!((zm - rho.expect(&z).unwrap().re).abs() < 1e-13);
        ladder::p_left(d, &sq, rho.op().as_slice(), &mut out);
        let dense = p.matmul(rho.op()).unwrap();
        for (a, b) in out.iter().zip(dense.as_slice()) {
            assert!((a - b).norm() < 1e-13);
        }
        let pm = ladder::p_mean(d, &sq, rho.op().as_slice());
        assert!((pm - rho.expect(&p).unwrap().re).abs() < 1e-13);

        let (down, up) = (1.3, 0.4);
        let a = annihilation(d).unwrap();
        let want = dissipator_apply(&a, &rho)
            .unwrap()
            .scale(c(down))
            .add(&dissipator_apply(&a.adjoint(), &rho).unwrap().scale(c(up)))
            .unwrap();
        let mut got = vec![C64::new(0.0, 0.0); d * d];
        ladder::add_thermal_dissipator(d, &sq, down, up, rho.op().as_slice(), 1.0, &mut got);
        for (a, b) in got.iter().zip(want.as_slice()) {
            assert!((a - b).norm() < 1e-13);
        }
    }

    proptest! {
        #[test]
        fn dissipator_preserves_trace_and_hermiticity(seed in 0u64..10_000, dim in 2usize..12) {
            let rho = random_density(dim, seed);
            let a = annihilation(dim).unwrap();
            for c_op in [a.clone(), a.adjoint()] {
                let out = dissipator_apply(&c_op, &rho).unwrap();
                prop_assert!(out.trace().norm() < 1e-10);
                prop_assert!(out.hermiticity_error() < HERMITIAN_TOL);
            }
        }
    }
}
