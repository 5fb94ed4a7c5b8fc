//! Power spectra of photocurrent records: Welch estimation, shot-noise
//! normalisation, Lorentzian sideband fits and the in-loop squashing test.
//!
//! PSDs are one-sided, so white noise with two-sided density `S` shows a
//! flat level `2 S`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{Matrix4, Vector4};
use rustfft::{num_complex::Complex64 as C64, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Welch estimate of a one-sided PSD.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEstimate {
    pub freq_hz: Vec<f64>,
    pub psd: Vec<f64>,
    /// Shot-noise level; `NaN` until normalised.
    pub floor: f64,
    /// `psd / floor`; empty until normalised.
    pub normalized: Vec<f64>,
    /// Number of averaged segments.
    pub segments: usize,
}

impl SpectrumEstimate {
    pub fn resolution(&self) -> f64 {
        if self.freq_hz.len() > 1 {
            self.freq_hz[1] - self.freq_hz[0]
        } else {
            f64::NAN
        }
    }

    /// Indices with `lo <= f <= hi`.
    pub fn band(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let a = self.freq_hz.partition_point(|f| *f < lo);
        let b = self.freq_hz.partition_point(|f| *f <= hi);
        a..b.max(a)
    }

    /// Total power, `sum(psd) * df`.
    pub fn total_power(&self) -> f64 {
        self.psd.iter().sum::<f64>() * self.resolution()
    }

    /// Sets the floor directly, e.g. to the analytic shot-noise level.
    pub fn with_floor(mut self, floor: f64) -> Self {
        self.normalized = self.psd.iter().map(|v| v / floor).collect();
        self.floor = floor;
        self
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("freq_hz,psd,normalized\n");
        for k in 0..self.freq_hz.len() {
            let nv = self.normalized.get(k).copied().unwrap_or(f64::NAN);
            let _ = writeln!(s, "{},{:e},{:e}", self.freq_hz[k], self.psd[k], nv);
        }
        s
    }
}

/// Streaming Welch estimator: Hann window, constant detrend.
pub struct WelchAccumulator {
    fs: f64,
    len: usize,
    hop: usize,
    window: Vec<f64>,
    win_power: f64,
    fft: Arc<dyn Fft<f64>>,
    ring: Vec<f64>,
    filled: usize,
    since: usize,
    scratch: Vec<C64>,
    fft_scratch: Vec<C64>,
    sum: Vec<f64>,
    segments: usize,
}

impl WelchAccumulator {
    pub fn new(fs: f64, segment_len: usize, overlap: f64) -> Result<Self> {
        if !segment_len.is_power_of_two() || segment_len < 8 {
            return Err(Error::InvalidParameter {
                name: "segment_len",
                reason: format!("{segment_len} is not a power of two >= 8"),
            });
        }
        if !(0.0..=0.9).contains(&overlap) {
            return Err(Error::InvalidParameter {
                name: "overlap",
                reason: format!("{overlap} outside [0, 0.9]"),
            });
        }
        if !(fs > 0.0) {
            return Err(Error::NonpositiveRate { name: "fs", value: fs });
        }
        let hop = ((segment_len as f64 * (1.0 - overlap)).round() as usize).clamp(1, segment_len);
        let window: Vec<f64> = (0..segment_len)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / segment_len as f64).cos())
            .collect();
        let win_power = window.iter().map(|w| w * w).sum();
        let fft = FftPlanner::new().plan_fft_forward(segment_len);
        let fft_scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        Ok(Self {
            fs,
            len: segment_len,
            hop,
            window,
            win_power,
            fft,
            ring: vec![0.0; segment_len],
            filled: 0,
            since: 0,
            scratch: vec![C64::new(0.0, 0.0); segment_len],
            fft_scratch,
            sum: vec![0.0; segment_len / 2 + 1],
            segments: 0,
        })
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    /// Samples needed for `k` segments.
    pub fn samples_for(&self, k: usize) -> usize {
        self.len + self.hop * k.saturating_sub(1)
    }

    pub fn push(&mut self, x: f64) {
        self.ring[self.filled % self.len] = x;
        self.filled += 1;
        if self.filled >= self.len {
            if self.filled == self.len || self.since + 1 == self.hop {
                self.since = 0;
                self.segment();
            } else {
                self.since += 1;
            }
        }
    }

    fn segment(&mut self) {
        let start = self.filled % self.len;
        let mean = self.ring.iter().sum::<f64>() / self.len as f64;
        for n in 0..self.len {
            let v = self.ring[(start + n) % self.len] - mean;
            self.scratch[n] = C64::new(v * self.window[n], 0.0);
        }
        self.fft.process_with_scratch(&mut self.scratch, &mut self.fft_scratch);
        for (k, s) in self.sum.iter_mut().enumerate() {
            *s += self.scratch[k].norm_sqr();
        }
        self.segments += 1;
    }

    pub fn finish(&self) -> Result<SpectrumEstimate> {
        if self.segments < 4 {
            return Err(Error::SeriesTooShort {
                len: self.filled,
                needed: self.samples_for(4),
            });
        }
        let scale = 1.0 / (self.fs * self.win_power * self.segments as f64);
        let half = self.len / 2;
        let psd = self
            .sum
            .iter()
            .enumerate()
            .map(|(k, s)| {
                if k == 0 || k == half {
                    s * scale
                } else {
                    2.0 * s * scale
                }
            })
            .collect();
        let freq_hz = (0..=half).map(|k| k as f64 * self.fs / self.len as f64).collect();
        Ok(SpectrumEstimate {
            freq_hz,
            psd,
            floor: f64::NAN,
            normalized: Vec::new(),
            segments: self.segments,
        })
    }
}

/// Batch Welch estimate; identical to streaming the series through a
/// [`WelchAccumulator`].
pub fn welch_psd(series: &[f64], fs: f64, segment_len: usize, overlap: f64) -> Result<SpectrumEstimate> {
    let mut acc = WelchAccumulator::new(fs, segment_len, overlap)?;
    for x in series {
        acc.push(*x);
    }
    acc.finish()
}

/// Median-of-the-rest shot-noise floor. `exclude` is the sideband band and
/// `keep` the part of the spectrum considered at all.
pub fn normalize_to_shotnoise(s: SpectrumEstimate, exclude: (f64, f64)) -> Result<SpectrumEstimate> {
    let (lo, hi) = (s.freq_hz[0], *s.freq_hz.last().unwrap_or(&0.0));
    normalize_in_range(s, exclude, (lo, hi))
}

/// As [`normalize_to_shotnoise`], using only bins inside `keep`.
pub fn normalize_in_range(s: SpectrumEstimate, exclude: (f64, f64), keep: (f64, f64)) -> Result<SpectrumEstimate> {
    // DC and Nyquist bins carry half the weight and the detrend; skip them
    let last = s.freq_hz.len().saturating_sub(1);
    let considered: Vec<usize> = (1..last)
        .filter(|&k| s.freq_hz[k] >= keep.0 && s.freq_hz[k] <= keep.1)
        .collect();
    let mut rest: Vec<f64> = considered
        .iter()
        .filter(|&&k| s.freq_hz[k] < exclude.0 || s.freq_hz[k] > exclude.1)
        .map(|&k| s.psd[k])
        .collect();
    let total = considered.len();
    if rest.len() * 4 < total || rest.is_empty() {
        return Err(Error::ExclusionTooWide {
            kept: rest.len(),
            total,
        });
    }
    rest.sort_by(|a, b| a.total_cmp(b));
    let m = rest.len();
    let median = if m % 2 == 1 {
        rest[m / 2]
    } else {
        0.5 * (rest[m / 2 - 1] + rest[m / 2])
    };
    // the median of an averaged periodogram sits below its mean
    let dof = equivalent_dof(s.segments);
    let floor = median / median_over_mean(dof);
    Ok(s.with_floor(floor))
}

/// Degrees of freedom of a Hann/50% Welch average of `k` segments.
fn equivalent_dof(k: usize) -> f64 {
    // overlap correlation of Hann at 50% is 1/6 for the squared window
    let k = k as f64;
    2.0 * k / (1.0 + 2.0 * (1.0 / 6.0f64).powi(2) * (k - 1.0) / k)
}

/// Median / mean of a chi-square with `dof` degrees of freedom.
fn median_over_mean(dof: f64) -> f64 {
    let a = 2.0 / (9.0 * dof);
    (1.0 - a).powi(3)
}

/// Lorentzian sideband fitted on the normalised spectrum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidebandFit {
    pub center_hz: f64,
    pub fwhm_hz: f64,
    /// Integral of `normalized - 1` over the window (Hz).
    pub area: f64,
    pub offset: f64,
    /// Peak height above the offset; negative for a dip.
    pub amplitude: f64,
    pub fit_rmse: f64,
    pub iterations: usize,
}

fn lorentz(f: f64, q: &Vector4<f64>) -> f64 {
    let h = 0.5 * q[3];
    q[0] + q[1] * h * h / ((f - q[2]).powi(2) + h * h)
}

/// Fits `offset + amplitude / (1 + ((f - center) / (fwhm/2))^2)` by
/// Levenberg-Marquardt on the normalised PSD inside `window`.
pub fn fit_lorentzian(s: &SpectrumEstimate, window: (f64, f64)) -> Result<SidebandFit> {
    let y_all = if s.normalized.is_empty() { &s.psd } else { &s.normalized };
    let r = s.band(window.0, window.1);
    let (f, y): (Vec<f64>, Vec<f64>) = r.clone().map(|k| (s.freq_hz[k], y_all[k])).unzip();
    if f.len() < 20 {
        return Err(Error::FitFailed {
            iterations: 0,
            rmse: f64::NAN,
            reason: format!("only {} bins in the window", f.len()),
        });
    }
    let df = s.resolution();
    let area = y.iter().map(|v| v - 1.0).sum::<f64>() * df;

    // start: offset from the window edges, peak from the largest deviation
    let edge = (f.len() / 10).max(2);
    let mut edges: Vec<f64> = y[..edge].iter().chain(&y[y.len() - edge..]).copied().collect();
    edges.sort_by(|a, b| a.total_cmp(b));
    let off0 = edges[edges.len() / 2];
    let (kmax, _) = y
        .iter()
        .enumerate()
        .map(|(k, v)| (k, (v - off0).abs()))
        .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a });
    let amp0 = y[kmax] - off0;
    let half = off0 + amp0 / 2.0;
    let above = y
        .iter()
        .filter(|v| if amp0 > 0.0 { **v > half } else { **v < half })
        .count();
    let w0 = (above as f64 * df).max(2.0 * df);
    let mut q = Vector4::new(off0, amp0, f[kmax], w0);

    let cost = |q: &Vector4<f64>| -> f64 { f.iter().zip(&y).map(|(fi, yi)| (yi - lorentz(*fi, q)).powi(2)).sum() };
    let mut c = cost(&q);
    let mut lambda = 1e-3;
    let mut it = 0;
    let max_it = 500;
    while it < max_it {
        it += 1;
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        let h = 0.5 * q[3];
        for (fi, yi) in f.iter().zip(&y) {
            let x = fi - q[2];
            let den = x * x + h * h;
            let l = h * h / den;
            let j = Vector4::new(
                1.0,
                l,
                q[1] * 2.0 * x * h * h / (den * den),
                q[1] * h * x * x / (den * den),
            );
            let res = yi - (q[0] + q[1] * l);
            jtj += j * j.transpose();
            jtr += j * res;
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj;
            for d in 0..4 {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-300);
            }
            let Some(step) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let mut qn = q + step;
            qn[3] = qn[3].abs().max(1e-3 * df);
            let cn = cost(&qn);
            if cn.is_finite() && cn < c {
                let rel = (c - cn) / c.max(1e-300);
                q = qn;
                c = cn;
                lambda = (lambda / 3.0).max(1e-12);
                improved = true;
                if rel < 1e-12 {
                    it = max_it + 1;
                }
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    let rmse = (c / f.len() as f64).sqrt();
    if !q.iter().all(|v| v.is_finite()) || q[2] < window.0 || q[2] > window.1 {
        return Err(Error::FitFailed {
            iterations: it.min(max_it),
            rmse,
            reason: format!("center {:.3} Hz outside the window", q[2]),
        });
    }
    Ok(SidebandFit {
        center_hz: q[2],
        fwhm_hz: q[3].abs(),
        area,
        offset: q[0],
        amplitude: q[1],
        fit_rmse: rmse,
        iterations: it.min(max_it),
    })
}

/// Moving average over `2 half + 1` bins (shrinking at the ends).
pub fn smooth(x: &[f64], half: usize) -> Vec<f64> {
    let n = x.len();
    let mut pre = vec![0.0; n + 1];
    for i in 0..n {
        pre[i + 1] = pre[i] + x[i];
    }
    (0..n)
        .map(|i| {
            let a = i.saturating_sub(half);
            let b = (i + half + 1).min(n);
            (pre[b] - pre[a]) / (b - a) as f64
        })
        .collect()
}

/// Outcome of the squashing test on a pair of normalised spectra.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SquashMetric {
    pub min_in: f64,
    pub min_out: f64,
    /// Estimator standard deviation of the smoothed normalised PSD.
    pub sigma_in: f64,
    pub sigma_out: f64,
}

impl SquashMetric {
    pub fn in_loop_squashed(&self) -> bool {
        self.min_in < 1.0 - 3.0 * self.sigma_in
    }

    pub fn out_loop_clear(&self) -> bool {
        self.min_out >= 1.0 - 3.0 * self.sigma_out
    }

    pub fn squashing(&self) -> bool {
        self.in_loop_squashed() && self.out_loop_clear()
    }
}

/// Minimum of each smoothed normalised spectrum inside `window`, with the
/// estimator spread taken from the bins inside `reference` but outside
/// `window`.
pub fn squash_metric(
    s_in: &SpectrumEstimate,
    s_out: &SpectrumEstimate,
    window: (f64, f64),
    reference: (f64, f64),
    smooth_half: usize,
) -> Result<SquashMetric> {
    let one = |s: &SpectrumEstimate| -> Result<(f64, f64)> {
        if s.normalized.is_empty() {
            return Err(Error::InvalidParameter {
                name: "spectrum",
                reason: "not normalised".into(),
            });
        }
        let sm = smooth(&s.normalized, smooth_half);
        let w = s.band(window.0, window.1);
        let min = sm[w.clone()].iter().copied().fold(f64::INFINITY, f64::min);
        let rest: Vec<f64> = s
            .band(reference.0, reference.1)
            .filter(|k| !w.contains(k))
            // keep smoothing kernels clear of the window
            .filter(|k| *k + smooth_half < w.start || *k > w.end + smooth_half)
            .map(|k| sm[k])
            .collect();
        if rest.len() < 8 {
            return Err(Error::ExclusionTooWide {
                kept: rest.len(),
                total: s.band(reference.0, reference.1).len(),
            });
        }
        let m = rest.iter().sum::<f64>() / rest.len() as f64;
        let var = rest.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (rest.len() - 1) as f64;
        Ok((min, var.sqrt()))
    };
    let (min_in, sigma_in) = one(s_in)?;
    let (min_out, sigma_out) = one(s_out)?;
    Ok(SquashMetric {
        min_in,
        min_out,
        sigma_in,
        sigma_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NoiseStream;

    fn white(n: usize, sd: f64, seed: u64) -> Vec<f64> {
        let mut s = NoiseStream::new(seed, 0);
        (0..n).map(|_| sd * s.normal()).collect()
    }

    #[test]
    fn white_noise_level() {
        let fs = 1000.0;
        let sigma2: f64 = 3.0;
        // per-sample variance sigma^2 fs / 2 maps to level sigma^2
        let x = white(256 * 120, (sigma2 * fs / 2.0).sqrt(), 1);
        let s = welch_psd(&x, fs, 256, 0.5).unwrap();
        assert!(s.segments >= 100);
        let inner = &s.psd[1..s.psd.len() - 1];
        let mean = inner.iter().sum::<f64>() / inner.len() as f64;
        assert!((mean / sigma2 - 1.0).abs() < 0.02, "{mean}");
        // Parseval
        let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!((s.total_power() / var - 1.0).abs() < 0.01);
        let n = normalize_to_shotnoise(s, (100.0, 120.0)).unwrap();
        assert!((n.floor / sigma2 - 1.0).abs() < 0.03);
    }

    #[test]
    fn sinusoid_power() {
        let fs = 1024.0;
        let a = 2.5;
        let f0 = 64.0; // bin centre for L = 256
        let x: Vec<f64> = (0..256 * 20)
            .map(|n| a * (2.0 * PI * f0 * n as f64 / fs).cos())
            .collect();
        let s = welch_psd(&x, fs, 256, 0.5).unwrap();
        let p: f64 = s.band(f0 - 20.0, f0 + 20.0).map(|k| s.psd[k]).sum::<f64>() * s.resolution();
        assert!((p / (a * a / 2.0) - 1.0).abs() < 0.01, "{p}");
    }

    #[test]
    fn streaming_equals_batch() {
        let x = white(5000, 1.0, 4);
        let b = welch_psd(&x, 10.0, 512, 0.5).unwrap();
        let mut acc = WelchAccumulator::new(10.0, 512, 0.5).unwrap();
        x.iter().for_each(|v| acc.push(*v));
        let s = acc.finish().unwrap();
        assert_eq!((s.psd, s.freq_hz, s.segments), (b.psd, b.freq_hz, b.segments));
        assert!(matches!(
            welch_psd(&x[..1000], 10.0, 512, 0.5),
            Err(Error::SeriesTooShort { .. })
        ));
        assert!(welch_psd(&x, 10.0, 500, 0.5).is_err());
    }

    #[test]
    fn floor_noise_scales_with_segments() {
        let spread = |k: usize| {
            let x = white(128 * (k + 1) / 2 + 128, 1.0, k as u64);
            let s = welch_psd(&x, 1.0, 128, 0.5).unwrap();
            let inner = &s.psd[2..s.psd.len() - 2];
            let m = inner.iter().sum::<f64>() / inner.len() as f64;
            let sd = (inner.iter().map(|v| (v - m).powi(2)).sum::<f64>() / inner.len() as f64).sqrt();
            (sd / m, s.segments)
        };
        let (a, ka) = spread(40);
        let (b, kb) = spread(640);
        let want = ((kb as f64) / (ka as f64)).sqrt();
        assert!(((a / b) / want - 1.0).abs() < 0.2, "{a} {b} {want}");
    }

    #[test]
    fn exclusion_too_wide() {
        let x = white(4096, 1.0, 2);
        let s = welch_psd(&x, 100.0, 256, 0.5).unwrap();
        assert!(matches!(
            normalize_to_shotnoise(s, (1.0, 45.0)),
            Err(Error::ExclusionTooWide { .. })
        ));
    }

    fn synthetic(center: f64, fwhm: f64, amp: f64, noise: f64, seed: u64) -> SpectrumEstimate {
        let df = 5.0;
        let freq: Vec<f64> = (0..800).map(|k| k as f64 * df).collect();
        let mut s = NoiseStream::new(seed, 1);
        let q = Vector4::new(1.0, amp, center, fwhm);
        let psd: Vec<f64> = freq
            .iter()
            .map(|f| lorentz(*f, &q) * (1.0 + noise * s.normal()))
            .collect();
        SpectrumEstimate {
            freq_hz: freq,
            psd,
            floor: f64::NAN,
            normalized: Vec::new(),
            segments: 100,
        }
        .with_floor(1.0)
    }

    #[test]
    fn lorentzian_recovered() {
        for (amp, seed) in [(5.0, 1), (-0.4, 2)] {
            let s = synthetic(2000.0, 120.0, amp, 0.01, seed);
            let fit = fit_lorentzian(&s, (1000.0, 3000.0)).unwrap();
            assert!((fit.center_hz - 2000.0).abs() < 0.02 * 120.0);
            assert!((fit.fwhm_hz / 120.0 - 1.0).abs() < 0.02, "{fit:?}");
            assert!((fit.amplitude / amp - 1.0).abs() < 0.02, "{fit:?}");
            let true_area = amp * PI * 60.0;
            assert!((fit.area / true_area - 1.0).abs() < 0.1, "{fit:?}");
        }
        let s = synthetic(2000.0, 120.0, 5.0, 0.01, 3);
        assert!(fit_lorentzian(&s, (2000.0, 2050.0)).is_err());
    }

    #[test]
    fn squash_detection() {
        let flat = synthetic(2000.0, 100.0, 0.0, 0.02, 5);
        let dip = synthetic(2000.0, 100.0, -0.5, 0.02, 6);
        let m = squash_metric(&dip, &flat, (1900.0, 2100.0), (500.0, 3500.0), 2).unwrap();
        assert!(m.squashing(), "{m:?}");
        let m = squash_metric(&flat, &flat, (1900.0, 2100.0), (500.0, 3500.0), 2).unwrap();
        assert!(!m.in_loop_squashed(), "{m:?}");
    }
}
