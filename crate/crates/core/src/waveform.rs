//! Known source waveforms and received-signal synthesis.
//!
//! A waveform is a periodic trigonometric polynomial
//! `s(t) = Σ_{|k|≤K} c_k exp(i2πkt/T_p)`, so a delayed copy can be sampled
//! exactly at any fractional delay. The period is chosen longer than the
//! observation window plus the delay horizon, which keeps distinct delays
//! distinguishable inside the window.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};

use crate::channel::ChannelRealization;
use crate::error::{Error, Result};
use crate::geometry::Scenario;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Sampling parameters shared by every sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalConfig {
    /// Two-sided baseband extent, hertz.
    pub bandwidth: f64,
    pub sample_rate: f64,
    pub num_samples: usize,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self { bandwidth: 10e6, sample_rate: 20e6, num_samples: 100 }
    }
}

impl SignalConfig {
    pub fn observation_time(&self) -> f64 {
        self.num_samples as f64 / self.sample_rate
    }

    /// Waveform period `N/f_s + τ_max`, rounded up to a whole number of samples.
    pub fn period_for(&self, tau_max: f64) -> f64 {
        let extra = (tau_max * self.sample_rate - 1e-9).ceil().max(0.0);
        (self.num_samples as f64 + extra) / self.sample_rate
    }

    /// Ranging resolution `c/B`.
    pub fn ranging_resolution(&self, c: f64) -> f64 {
        c / self.bandwidth
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) || !(self.sample_rate > 0.0) || self.num_samples == 0 {
            return Err(Error::InvalidParameter("bandwidth, sample rate and sample count must be positive".into()));
        }
        if self.sample_rate < 2.0 * self.bandwidth * (1.0 - 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "sample rate {} Hz violates Nyquist for bandwidth {} Hz",
                self.sample_rate, self.bandwidth
            )));
        }
        Ok(())
    }
}

/// Bandlimited periodic waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    /// `c_k` for `k = -K..=K`, stored at index `k + K`.
    pub fourier_coeffs: Vec<Complex64>,
    pub period: f64,
    pub bandwidth: f64,
    pub unit_power: bool,
}

impl Waveform {
    pub fn k_max(&self) -> usize {
        (self.fourier_coeffs.len() - 1) / 2
    }

    pub fn coeff(&self, k: i64) -> Complex64 {
        let kk = self.k_max() as i64;
        if k.abs() > kk {
            ZERO
        } else {
            self.fourier_coeffs[(k + kk) as usize]
        }
    }

    /// Mean power over one period (Parseval).
    pub fn mean_power(&self) -> f64 {
        self.fourier_coeffs.iter().map(|c| c.norm_sqr()).sum()
    }

    /// `s(t)` from the Fourier series.
    pub fn value(&self, t: f64) -> Complex64 {
        let kk = self.k_max() as i64;
        (-kk..=kk)
            .map(|k| self.coeff(k) * Complex64::cis(2.0 * PI * k as f64 * t / self.period))
            .sum()
    }

    /// Same waveform delayed by `tau` (phase ramp on the coefficients).
    pub fn delayed(&self, tau: f64) -> Waveform {
        let kk = self.k_max() as i64;
        let fourier_coeffs = (-kk..=kk)
            .map(|k| self.coeff(k) * Complex64::cis(-2.0 * PI * k as f64 * tau / self.period))
            .collect();
        Waveform { fourier_coeffs, ..self.clone() }
    }
}

/// Draws `c_k`, `|k| ≤ floor(B·T_p/2)`, i.i.d. circular complex Gaussian and
/// normalizes them to unit mean power.
pub fn generate_waveform(seed: u64, bandwidth: f64, period: f64) -> Waveform {
    assert!(bandwidth > 0.0 && period > 0.0, "bandwidth and period must be positive");
    let k_max = (bandwidth * period / 2.0 + 1e-9).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coeffs: Vec<Complex64> = (0..2 * k_max + 1)
        .map(|_| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            Complex64::new(re, im)
        })
        .collect();
    let power: f64 = coeffs.iter().map(|c| c.norm_sqr()).sum();
    let scale = 1.0 / power.sqrt();
    coeffs.iter_mut().for_each(|c| *c *= scale);
    Waveform { fourier_coeffs: coeffs, period, bandwidth, unit_power: true }
}

/// `[s(0 − τ), …, s((N−1)/f_s − τ)]` evaluated exactly from the series.
pub fn sample_delayed(w: &Waveform, tau: f64, fs: f64, n: usize) -> Result<Vec<Complex64>> {
    if !(tau >= 0.0) {
        return Err(Error::DelayOutOfRange { delay: tau, tau_max: w.period });
    }
    let window = n as f64 / fs;
    if window + tau > w.period * (1.0 + 1e-12) {
        return Err(Error::WrapViolation { window, tau_max: tau, period: w.period });
    }
    let kk = w.k_max() as i64;
    let mut out = vec![ZERO; n];
    for k in -kk..=kk {
        let ck = w.coeff(k);
        let step = Complex64::cis(2.0 * PI * k as f64 / (fs * w.period));
        let mut phase = ck * Complex64::cis(-2.0 * PI * k as f64 * tau / w.period);
        for v in out.iter_mut() {
            *v += phase;
            phase *= step;
        }
    }
    Ok(out)
}

/// Fast sampler of delayed copies of one waveform on a fixed sampling grid.
///
/// When `f_s·T_p` is an integer `M` the samples are an inverse DFT of length
/// `M` of the phase-ramped coefficients; otherwise a precomputed
/// `N x (2K+1)` basis is used.
#[derive(Clone)]
pub struct DelaySampler {
    waveform: Waveform,
    fs: f64,
    n: usize,
    engine: SamplerEngine,
}

#[derive(Clone)]
enum SamplerEngine {
    Fft { fft: Arc<dyn Fft<f64>>, m: usize },
    Basis(Vec<Complex64>),
}

impl std::fmt::Debug for DelaySampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DelaySampler").field("fs", &self.fs).field("n", &self.n).finish()
    }
}

impl DelaySampler {
    pub fn new(waveform: &Waveform, fs: f64, n: usize) -> Self {
        let m_real = fs * waveform.period;
        let m = m_real.round();
        let engine = if (m_real - m).abs() < 1e-6 && m as usize >= n {
            let m = m as usize;
            SamplerEngine::Fft { fft: FftPlanner::new().plan_fft_inverse(m), m }
        } else {
            let kk = waveform.k_max() as i64;
            let mut basis = Vec::with_capacity(n * (2 * kk as usize + 1));
            for k in -kk..=kk {
                for t in 0..n {
                    basis.push(Complex64::cis(2.0 * PI * k as f64 * t as f64 / m_real));
                }
            }
            SamplerEngine::Basis(basis)
        };
        Self { waveform: waveform.clone(), fs, n, engine }
    }

    pub fn waveform(&self) -> &Waveform {
        &self.waveform
    }

    pub fn num_samples(&self) -> usize {
        self.n
    }

    pub fn column(&self, tau: f64) -> Vec<Complex64> {
        let mut out = vec![ZERO; self.n];
        self.column_into(tau, &mut out);
        out
    }

    pub fn column_into(&self, tau: f64, out: &mut [Complex64]) {
        let w = &self.waveform;
        let kk = w.k_max() as i64;
        let ramp = |k: i64| w.coeff(k) * Complex64::cis(-2.0 * PI * k as f64 * tau / w.period);
        match &self.engine {
            SamplerEngine::Fft { fft, m } => {
                let mut buf = vec![ZERO; *m];
                for k in -kk..=kk {
                    buf[k.rem_euclid(*m as i64) as usize] += ramp(k);
                }
                fft.process(&mut buf);
                out.copy_from_slice(&buf[..self.n]);
            }
            SamplerEngine::Basis(basis) => {
                out.iter_mut().for_each(|v| *v = ZERO);
                for (i, k) in (-kk..=kk).enumerate() {
                    let d = ramp(k);
                    let row = &basis[i * self.n..(i + 1) * self.n];
                    for (v, b) in out.iter_mut().zip(row) {
                        *v += d * b;
                    }
                }
            }
        }
    }
}

/// Evaluates `s(τ)^H r` and `‖s(τ)‖²` at arbitrary delays without forming
/// `s(τ)`: both are trigonometric polynomials in `τ`.
#[derive(Debug, Clone)]
pub struct Correlator {
    period: f64,
    k_max: i64,
    /// `conj(c_k)·Σ_n r_n exp(−i2πkn/(f_s T_p))`, index `k + K`.
    corr_coeffs: Vec<Complex64>,
    /// Coefficients of `‖s(τ)‖²` for `m = −2K..=2K`, index `m + 2K`.
    norm_coeffs: Vec<Complex64>,
}

impl Correlator {
    pub fn new(w: &Waveform, fs: f64, r: &[Complex64]) -> Self {
        let kk = w.k_max() as i64;
        let m_real = fs * w.period;
        let corr_coeffs = (-kk..=kk)
            .map(|k| {
                let step = Complex64::cis(-2.0 * PI * k as f64 / m_real);
                let mut ph = Complex64::new(1.0, 0.0);
                let mut acc = ZERO;
                for v in r {
                    acc += v * ph;
                    ph *= step;
                }
                w.coeff(k).conj() * acc
            })
            .collect();
        let n = r.len();
        let norm_coeffs = (-2 * kk..=2 * kk)
            .map(|m| {
                // H_m = Σ_{k−k'=m} c_k conj(c_k'), E_m = Σ_n exp(i2πmn/M)
                let mut h = ZERO;
                for k in (-kk).max(m - kk)..=kk.min(m + kk) {
                    h += w.coeff(k) * w.coeff(k - m).conj();
                }
                let step = Complex64::cis(2.0 * PI * m as f64 / m_real);
                let mut ph = Complex64::new(1.0, 0.0);
                let mut e = ZERO;
                for _ in 0..n {
                    e += ph;
                    ph *= step;
                }
                h * e
            })
            .collect();
        Self { period: w.period, k_max: kk, corr_coeffs, norm_coeffs }
    }

    /// `s(τ)^H r`.
    pub fn correlation(&self, tau: f64) -> Complex64 {
        let z = Complex64::cis(2.0 * PI * tau / self.period);
        let mut ph = Complex64::cis(-2.0 * PI * self.k_max as f64 * tau / self.period);
        let mut acc = ZERO;
        for c in &self.corr_coeffs {
            acc += c * ph;
            ph *= z;
        }
        acc
    }

    /// `‖s(τ)‖²`. The coefficients of `m` and `−m` are conjugates, so only
    /// `m ≥ 0` is summed.
    pub fn energy(&self, tau: f64) -> f64 {
        let kk2 = 2 * self.k_max as usize;
        let z = Complex64::cis(-2.0 * PI * tau / self.period);
        let mut ph = z;
        let mut acc = 0.0;
        for c in &self.norm_coeffs[kk2 + 1..] {
            acc += c.re * ph.re - c.im * ph.im;
            ph *= z;
        }
        self.norm_coeffs[kk2].re + 2.0 * acc
    }

    /// `|s(τ)^H r|² / ‖s(τ)‖²`.
    pub fn normalized_power(&self, tau: f64) -> f64 {
        let e = self.energy(tau);
        if e > 0.0 {
            self.correlation(tau).norm_sqr() / e
        } else {
            0.0
        }
    }
}

/// `N x L` matrix of received samples, one column per sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMatrix {
    pub samples: DMatrix<Complex64>,
    pub sample_rate: f64,
}

impl SignalMatrix {
    pub fn zeros(n: usize, l: usize, sample_rate: f64) -> Self {
        Self { samples: DMatrix::from_element(n, l, ZERO), sample_rate }
    }

    pub fn num_samples(&self) -> usize {
        self.samples.nrows()
    }

    pub fn num_sensors(&self) -> usize {
        self.samples.ncols()
    }

    pub fn column(&self, l: usize) -> &[Complex64] {
        let n = self.num_samples();
        &self.samples.as_slice()[l * n..(l + 1) * n]
    }

    pub fn column_mut(&mut self, l: usize) -> &mut [Complex64] {
        let n = self.num_samples();
        &mut self.samples.as_mut_slice()[l * n..(l + 1) * n]
    }

    /// `Σ_l ‖r_l‖²`.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn scale(&mut self, factor: Complex64) {
        self.samples.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Draws `n` i.i.d. circular complex Gaussian samples with `E|w|² = sigma_w²`.
pub fn complex_noise<R: rand::Rng>(rng: &mut R, sigma_w: f64, n: usize) -> Vec<Complex64> {
    let s = sigma_w / 2f64.sqrt();
    (0..n)
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(s * re, s * im)
        })
        .collect()
}

/// Sum of LOS and NLOS arrivals per sensor plus white noise of per-sample
/// variance `sigma_w²`. Blocked LOS paths contribute nothing.
pub fn synthesize_received(
    scn: &Scenario,
    waveforms: &[Waveform],
    ch: &ChannelRealization,
    sigma_w: f64,
    signal: &SignalConfig,
    seed: u64,
) -> Result<SignalMatrix> {
    signal.validate()?;
    let (n, fs) = (signal.num_samples, signal.sample_rate);
    let l_count = scn.num_sensors();
    if waveforms.len() != scn.num_sources() || ch.num_sources() != scn.num_sources() {
        return Err(Error::InvalidParameter("waveform/channel count does not match the sources".into()));
    }
    let samplers: Vec<DelaySampler> = waveforms.iter().map(|w| DelaySampler::new(w, fs, n)).collect();
    let mut out = SignalMatrix::zeros(n, l_count, fs);
    let mut col = vec![ZERO; n];
    let check = |tau: f64, w: &Waveform| -> Result<()> {
        if !(tau >= 0.0) || tau > scn.tau_max * (1.0 + 1e-12) {
            return Err(Error::DelayOutOfRange { delay: tau, tau_max: scn.tau_max });
        }
        if n as f64 / fs + tau > w.period * (1.0 + 1e-12) {
            return Err(Error::WrapViolation { window: n as f64 / fs, tau_max: tau, period: w.period });
        }
        Ok(())
    };
    for (q, sampler) in samplers.iter().enumerate() {
        for l in 0..l_count {
            let link = ch.link(q, l);
            let mut paths: Vec<(f64, Complex64)> = link.nlos.clone();
            if link.los_present {
                paths.push((scn.delay(&scn.sources[q], l), link.los_amplitude));
            }
            for (tau, amp) in paths {
                check(tau, &waveforms[q])?;
                sampler.column_into(tau, &mut col);
                for (o, v) in out.column_mut(l).iter_mut().zip(&col) {
                    *o += amp * v;
                }
            }
        }
    }
    if sigma_w > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = complex_noise(&mut rng, sigma_w, n * l_count);
        for (o, w) in out.samples.iter_mut().zip(noise) {
            *o += w;
        }
    }
    Ok(out)
}
