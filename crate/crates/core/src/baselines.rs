//! Comparison methods: correlation-grid DPD with and without multipath
//! cancellation, and indirect localization from first-arrival TOAs
//! (matched filter or sparse deconvolution) followed by NLOS-mitigated
//! multilateration.

use nalgebra::{Matrix2, Vector2};
use num_complex::Complex64;

use crate::dlm::{fallback_correlation_localize, LocationGrid};
use crate::error::{Error, Result};
use crate::geometry::{Position, Scenario};
use crate::stage1::{Deconvolver, Stage1Params};
use crate::waveform::{Correlator, SignalMatrix, Waveform};

/// Grid-search DPD. Shares its implementation with the DLM fallback.
pub fn dpd_localize(signals: &SignalMatrix, waveforms: &[Waveform], scn: &Scenario, grid: &LocationGrid) -> Vec<Position> {
    fallback_correlation_localize(signals, waveforms, scn, grid)
}

/// DPD on the signals left after Stage-1 multipath cancellation.
pub fn dpd_with_mitigation(
    signals: &SignalMatrix,
    waveforms: &[Waveform],
    scn: &Scenario,
    grid: &LocationGrid,
    stage1: Stage1Params,
    sigma_w: f64,
) -> Result<Vec<Position>> {
    let deconv = Deconvolver::new(waveforms, scn.tau_max, signals.sample_rate, signals.num_samples(), stage1)?;
    let cleaned = deconv.run(signals, sigma_w)?.cleaned;
    Ok(dpd_localize(&cleaned, waveforms, scn, grid))
}

/// Matched-filter settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedFilterParams {
    /// Fraction of the correlation peak that marks the first arrival.
    pub frac_threshold: f64,
    /// Delay-scan spacing, seconds.
    pub tau_res: f64,
    pub tau_max: f64,
    /// Detection gate in units of the correlation noise level.
    pub gate_sigmas: f64,
}

impl MatchedFilterParams {
    pub fn new(tau_res: f64, tau_max: f64) -> Self {
        Self { frac_threshold: 0.5, tau_res, tau_max, gate_sigmas: 5.0 }
    }
}

/// First-arrival TOA by thresholding the matched-filter output: the earliest
/// scan delay whose normalized correlation exceeds `frac·max`, moved
/// forward to the local peak that follows it.
pub fn matched_filter_toa(r_l: &[Complex64], waveform: &Waveform, fs: f64, sigma_w: f64, params: &MatchedFilterParams) -> Result<f64> {
    if !(params.frac_threshold > 0.0 && params.frac_threshold < 1.0) || !(params.tau_res > 0.0) {
        return Err(Error::InvalidParameter("matched filter needs 0 < frac < 1 and tau_res > 0".into()));
    }
    let corr = Correlator::new(waveform, fs, r_l);
    let count = (params.tau_max / params.tau_res + 1e-9).floor() as usize + 1;
    // |s^H r| / ‖s‖ has noise level σ_w regardless of the delay
    let mag: Vec<f64> = (0..count)
        .map(|k| {
            let tau = k as f64 * params.tau_res;
            corr.correlation(tau).norm() / corr.energy(tau).max(f64::MIN_POSITIVE).sqrt()
        })
        .collect();
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    if !(peak > params.gate_sigmas * sigma_w) || peak == 0.0 {
        return Err(Error::NoDetection);
    }
    let mut k = mag.iter().position(|&v| v > params.frac_threshold * peak).expect("the peak exceeds the threshold");
    while k + 1 < count && mag[k + 1] > mag[k] {
        k += 1;
    }
    Ok(k as f64 * params.tau_res)
}

/// Earliest Stage-1 delay of each source at one sensor.
pub fn cs_toa(r_l: &[Complex64], deconv: &Deconvolver, sigma_w: f64) -> Result<Vec<Option<f64>>> {
    let paths = deconv.detect(r_l, 0, sigma_w)?;
    let count = deconv.samplers().len();
    let mut first: Vec<Option<f64>> = vec![None; count];
    for p in &paths {
        let slot = &mut first[p.source];
        if slot.is_none_or(|d| p.delay < d) {
            *slot = Some(p.delay);
        }
    }
    if first.iter().all(Option::is_none) {
        return Err(Error::NoDetection);
    }
    Ok(first)
}

/// First-arrival TOAs, `toas[q][l]`; missing where nothing was detected.
#[derive(Debug, Clone, PartialEq)]
pub struct ToaSet {
    pub toas: Vec<Vec<Option<f64>>>,
}

impl ToaSet {
    /// Matched-filter TOAs of every link.
    pub fn matched_filter(signals: &SignalMatrix, waveforms: &[Waveform], sigma_w: f64, params: &MatchedFilterParams) -> Self {
        let toas = waveforms
            .iter()
            .map(|w| (0..signals.num_sensors()).map(|l| matched_filter_toa(signals.column(l), w, signals.sample_rate, sigma_w, params).ok()).collect())
            .collect();
        Self { toas }
    }

    /// Sparse-deconvolution TOAs of every link.
    pub fn compressive(signals: &SignalMatrix, waveforms: &[Waveform], tau_max: f64, sigma_w: f64, stage1: Stage1Params) -> Result<Self> {
        let deconv = Deconvolver::new(waveforms, tau_max, signals.sample_rate, signals.num_samples(), stage1)?;
        let mut toas = vec![vec![None; signals.num_sensors()]; waveforms.len()];
        for l in 0..signals.num_sensors() {
            match cs_toa(signals.column(l), &deconv, sigma_w) {
                Ok(first) => {
                    for (q, d) in first.into_iter().enumerate() {
                        toas[q][l] = d;
                    }
                }
                Err(Error::NoDetection) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(Self { toas })
    }
}

const GN_MAX_ITERATIONS: usize = 100;
const GN_STEP_TOL: f64 = 1e-9;

/// Range residual sum of squares and its Gauss–Newton minimizer.
fn gauss_newton(anchors: &[Position], ranges: &[f64], start: Position) -> (Position, f64) {
    let mut p = Vector2::new(start.x, start.y);
    let rss = |p: &Vector2<f64>| -> f64 {
        anchors.iter().zip(ranges).map(|(a, r)| (r - ((p.x - a.x).hypot(p.y - a.y))).powi(2)).sum()
    };
    for _ in 0..GN_MAX_ITERATIONS {
        let mut jtj = Matrix2::zeros();
        let mut jtr = Vector2::zeros();
        for (a, r) in anchors.iter().zip(ranges) {
            let d = (p.x - a.x).hypot(p.y - a.y).max(1e-12);
            let j = Vector2::new((p.x - a.x) / d, (p.y - a.y) / d);
            let res = r - d;
            jtj += j * j.transpose();
            jtr += j * res;
        }
        let Some(step) = jtj.lu().solve(&jtr) else {
            break;
        };
        let before = rss(&p);
        let mut t = 1.0;
        while t > 1e-6 && rss(&(p + step * t)) > before {
            t *= 0.5;
        }
        p += step * t;
        if (step * t).norm() < GN_STEP_TOL {
            break;
        }
    }
    (Position::new(p.x, p.y), rss(&p))
}

/// Closed-form least-squares position from range differences to the first
/// anchor.
fn linearized(anchors: &[Position], ranges: &[f64]) -> Option<Position> {
    let (a0, r0) = (anchors[0], ranges[0]);
    let mut ata = Matrix2::zeros();
    let mut atb = Vector2::zeros();
    for (a, r) in anchors.iter().zip(ranges).skip(1) {
        let row = Vector2::new(2.0 * (a.x - a0.x), 2.0 * (a.y - a0.y));
        let b = (a.x * a.x + a.y * a.y) - (a0.x * a0.x + a0.y * a0.y) - r * r + r0 * r0;
        ata += row * row.transpose();
        atb += row * b;
    }
    ata.lu().solve(&atb).map(|v| Position::new(v.x, v.y))
}

/// Multilateration with NLOS rejection: every sensor subset of size ≥ 3 is
/// fitted by nonlinear least squares, and the fit with the smallest residual
/// per sensor wins (larger subsets win ties). Estimates are clipped to the
/// search area.
pub fn multilaterate_nlos_mitigated(toas: &ToaSet, scn: &Scenario) -> Result<Vec<Position>> {
    let c = scn.speed_of_light;
    let mut out = Vec::with_capacity(toas.toas.len());
    for row in &toas.toas {
        let avail: Vec<usize> = (0..row.len()).filter(|&l| row[l].is_some()).collect();
        if avail.len() < 3 {
            return Err(Error::InsufficientSensors(avail.len()));
        }
        let mut best: Option<(f64, usize, Position)> = None;
        for mask in 1u64..(1 << avail.len()) {
            let subset: Vec<usize> = (0..avail.len()).filter(|&i| mask >> i & 1 == 1).map(|i| avail[i]).collect();
            if subset.len() < 3 {
                continue;
            }
            let anchors: Vec<Position> = subset.iter().map(|&l| scn.sensors[l]).collect();
            let ranges: Vec<f64> = subset.iter().map(|&l| c * row[l].expect("available")).collect();
            let centroid = Position::new(
                anchors.iter().map(|a| a.x).sum::<f64>() / anchors.len() as f64,
                anchors.iter().map(|a| a.y).sum::<f64>() / anchors.len() as f64,
            );
            let start = linearized(&anchors, &ranges).filter(Position::is_finite).unwrap_or(centroid);
            let (p, rss) = gauss_newton(&anchors, &ranges, start);
            if !p.is_finite() {
                continue;
            }
            let score = rss / subset.len() as f64;
            let better = match &best {
                None => true,
                Some((s, k, _)) => score < s - 1e-12 || (score <= s + 1e-12 && subset.len() > *k),
            };
            if better {
                best = Some((score, subset.len(), p));
            }
        }
        let (_, _, p) = best.ok_or(Error::InsufficientSensors(avail.len()))?;
        out.push(scn.search_area.clamp(&p));
    }
    Ok(out)
}
