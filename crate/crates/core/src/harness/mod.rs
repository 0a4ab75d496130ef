//! Monte Carlo experiments: trial synthesis, method dispatch, metrics, the
//! recovery-window sweep and result files.

pub mod config;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

pub use config::{ChannelModel, ExperimentConfig, Method, SweepParam};

use crate::baselines::{dpd_localize, dpd_with_mitigation, multilaterate_nlos_mitigated, MatchedFilterParams, ToaSet};
use crate::channel::{draw_turin_channel, fixed_channel, ChannelRealization, FixedChannelSpec, LinkChannel, NlosPath};
use crate::dlm::{active_sets, fallback_grid, run_dlm, GridConfig, Stage2};
use crate::error::{Error, Result};
use crate::geometry::{recovery_window_scene, Position, Scenario};
use crate::waveform::{generate_waveform, synthesize_received, SignalConfig, SignalMatrix, Waveform};

/// `σ_w² = N·L·P_LOS / 10^{SNR/10}`.
pub fn snr_to_sigma(snr_db: f64, n: usize, l: usize, p_los: f64) -> f64 {
    (n * l) as f64 * p_los / 10f64.powf(snr_db / 10.0)
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one trial; independent of execution order.
pub fn trial_seed(master: u64, trial: usize, sweep_index: usize) -> u64 {
    mix(mix(mix(master) ^ trial as u64) ^ (sweep_index as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    mix(seed ^ stream.wrapping_mul(0xA076_1D64_78BD_642F))
}

/// Everything synthesized for one trial.
#[derive(Debug, Clone)]
pub struct TrialData {
    pub scenario: Scenario,
    pub waveforms: Vec<Waveform>,
    pub channel: ChannelRealization,
    pub signals: SignalMatrix,
    pub sigma_w: f64,
    pub grids: GridConfig,
}

/// Draws waveforms, channel and noise of one trial at one sweep value.
pub fn simulate_trial(cfg: &ExperimentConfig, sweep_index: usize, trial: usize) -> Result<TrialData> {
    let value = cfg.values[sweep_index];
    let seed = trial_seed(cfg.seed, trial, sweep_index);
    let scn = cfg.scenario.clone();
    let l_count = scn.num_sensors();
    let mut snr = cfg.snr_db;
    let mut channel_model = cfg.channel;
    let mut grids = cfg.grids;
    match cfg.sweep {
        SweepParam::Snr => snr = value,
        SweepParam::DelaySpread => match &mut channel_model {
            ChannelModel::Turin(t) => t.t_rms = value,
            ChannelModel::LosOnly => return Err(Error::Config("a delay-spread sweep needs the turin channel".into())),
        },
        SweepParam::LosSensors => {
            let k = value.round();
            if !(k >= 1.0 && k <= l_count as f64) {
                return Err(Error::Config(format!("LOS sensor count {value} outside 1..={l_count}")));
            }
            match &mut channel_model {
                ChannelModel::Turin(t) => t.num_blocked_sensors = l_count - k as usize,
                ChannelModel::LosOnly => return Err(Error::Config("a LOS-count sweep needs the turin channel".into())),
            }
        }
        SweepParam::RefinementSteps => grids.refinement_steps = value.round().max(1.0) as usize,
    }
    let period = cfg.signal.period_for(scn.tau_max);
    let waveforms: Vec<Waveform> = (0..scn.num_sources())
        .map(|q| generate_waveform(sub_seed(seed, 1 + q as u64), cfg.signal.bandwidth, period))
        .collect();
    let channel = match channel_model {
        ChannelModel::Turin(t) => draw_turin_channel(sub_seed(seed, 1000), &scn, &t)?,
        ChannelModel::LosOnly => {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 1000));
            let links = (0..scn.num_sources())
                .map(|_| (0..l_count).map(|_| LinkChannel::los_only(Complex64::cis(rng.gen_range(0.0..std::f64::consts::TAU)))).collect())
                .collect();
            ChannelRealization::new(links)
        }
    };
    let sigma_w = snr_to_sigma(snr, cfg.signal.num_samples, l_count, 1.0).sqrt();
    let signals = synthesize_received(&scn, &waveforms, &channel, sigma_w, &cfg.signal, sub_seed(seed, 2000))?;
    Ok(TrialData { scenario: scn, waveforms, channel, signals, sigma_w, grids })
}

/// Runs one method on one trial's signals.
pub fn locate(cfg: &ExperimentConfig, data: &TrialData, method: Method) -> Result<Vec<Position>> {
    let scn = &data.scenario;
    let (signals, ws, sigma) = (&data.signals, &data.waveforms, data.sigma_w);
    match method {
        Method::Dlm => Ok(run_dlm(signals, ws, scn, sigma, &cfg.dlm, &data.grids)?.positions()),
        Method::Dpd => Ok(dpd_localize(signals, ws, scn, &fallback_grid(scn, &data.grids))),
        Method::DpdMitigated => dpd_with_mitigation(signals, ws, scn, &fallback_grid(scn, &data.grids), cfg.dlm.stage1, sigma),
        Method::IndirectCs => {
            let toas = ToaSet::compressive(signals, ws, scn.tau_max, sigma, cfg.dlm.stage1)?;
            multilaterate_nlos_mitigated(&toas, scn)
        }
        Method::IndirectMf => {
            let mut p = MatchedFilterParams::new(data.grids.tau_res(scn.speed_of_light), scn.tau_max);
            p.frac_threshold = cfg.mf_threshold;
            multilaterate_nlos_mitigated(&ToaSet::matched_filter(signals, ws, sigma, &p), scn)
        }
    }
}

/// Outcome of one method on one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub method: Method,
    pub sweep_index: usize,
    pub value: f64,
    pub trial: usize,
    /// Per-source estimates; `None` when the method failed.
    pub estimates: Option<Vec<Position>>,
    pub truths: Vec<Position>,
    pub runtime_s: f64,
    pub error: Option<String>,
}

impl TrialRecord {
    /// Position error of each source; infinite for a failed method.
    pub fn errors(&self) -> Vec<f64> {
        match &self.estimates {
            Some(e) => e.iter().zip(&self.truths).map(|(a, b)| a.distance_to(b)).collect(),
            None => vec![f64::INFINITY; self.truths.len()],
        }
    }
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub param: String,
    pub value: f64,
    /// Fraction of source estimates within the error radius.
    pub p: f64,
    /// Root mean square position error over the located sources, divided by
    /// the ranging resolution.
    pub rmse: f64,
    pub runtime_s: f64,
    pub trials: usize,
}

/// `P` and `rMSE` of the estimates of `Z` trials (`estimates[z][q]`).
/// A failed trial (`None`) counts as a miss and is left out of the rMSE.
pub fn compute_metrics(estimates: &[Option<Vec<Position>>], truths: &[Vec<Position>], zeta: f64, r: f64) -> (f64, f64) {
    assert_eq!(estimates.len(), truths.len(), "one truth per trial");
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut sq = 0.0;
    let mut located = 0usize;
    for (est, truth) in estimates.iter().zip(truths) {
        total += truth.len();
        if let Some(est) = est {
            for (a, b) in est.iter().zip(truth) {
                let d = a.distance_to(b);
                if d < zeta {
                    hits += 1;
                }
                sq += d * d;
                located += 1;
            }
        }
    }
    let p = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    let rmse = if located == 0 { f64::NAN } else { (sq / located as f64).sqrt() / r };
    (p, rmse)
}

/// Fraction of source estimates of `records` within `radius`.
pub fn success_rate(records: &[&TrialRecord], radius: f64) -> f64 {
    let errs: Vec<f64> = records.iter().flat_map(|r| r.errors()).collect();
    if errs.is_empty() {
        return 0.0;
    }
    errs.iter().filter(|&&e| e < radius).count() as f64 / errs.len() as f64
}

/// Results of a Monte Carlo run.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloOutput {
    pub rows: Vec<MetricsRow>,
    pub records: Vec<TrialRecord>,
}

impl MonteCarloOutput {
    pub fn records_for(&self, method: Method, sweep_index: usize) -> Vec<&TrialRecord> {
        self.records.iter().filter(|r| r.method == method && r.sweep_index == sweep_index).collect()
    }
}

/// Runs every trial of `cfg` (in parallel) and aggregates the metrics.
pub fn run_monte_carlo(cfg: &ExperimentConfig) -> Result<MonteCarloOutput> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.values.len()).flat_map(|s| (0..cfg.trials).map(move |t| (s, t))).collect();
    let per_job: Vec<Vec<TrialRecord>> = jobs
        .par_iter()
        .map(|&(s, t)| -> Result<Vec<TrialRecord>> {
            let data = simulate_trial(cfg, s, t)?;
            Ok(cfg
                .methods
                .iter()
                .map(|&m| {
                    let start = Instant::now();
                    let out = locate(cfg, &data, m);
                    let runtime_s = start.elapsed().as_secs_f64();
                    let (estimates, error) = match out {
                        Ok(p) => (Some(p), None),
                        Err(e) => (None, Some(e.to_string())),
                    };
                    TrialRecord {
                        method: m,
                        sweep_index: s,
                        value: cfg.values[s],
                        trial: t,
                        estimates,
                        truths: data.scenario.sources.clone(),
                        runtime_s,
                        error,
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let records: Vec<TrialRecord> = per_job.into_iter().flatten().collect();
    let r = cfg.ranging_resolution();
    let mut rows = Vec::new();
    for &m in &cfg.methods {
        for (s, &value) in cfg.values.iter().enumerate() {
            let mine: Vec<&TrialRecord> = records.iter().filter(|x| x.method == m && x.sweep_index == s).collect();
            let est: Vec<Option<Vec<Position>>> = mine.iter().map(|x| x.estimates.clone()).collect();
            let truths: Vec<Vec<Position>> = mine.iter().map(|x| x.truths.clone()).collect();
            let (p, rmse) = compute_metrics(&est, &truths, cfg.zeta, r);
            let runtime_s = mine.iter().map(|x| x.runtime_s).sum::<f64>() / mine.len() as f64;
            rows.push(MetricsRow { method: m.name().into(), param: cfg.sweep.name().into(), value, p, rmse, runtime_s, trials: mine.len() });
        }
    }
    Ok(MonteCarloOutput { rows, records })
}

/// Settings of the recovery-window experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoremConfig {
    /// Values of `v = 1/u²`.
    pub v_values: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub signal: SignalConfig,
    pub grids: GridConfig,
    pub dlm: crate::dlm::DlmParams,
    /// A location counts as part of the decomposition when its group norm
    /// exceeds this fraction of the largest coefficient.
    pub significance: f64,
    /// Delay spread setting the mean power of the random NLOS tap.
    pub t_rms: f64,
    pub tap_power_std_db: f64,
}

impl Default for TheoremConfig {
    fn default() -> Self {
        Self {
            v_values: vec![2.0, 2.5, 3.2, 3.5, 3.8, 4.5],
            trials: 100,
            seed: 7,
            signal: SignalConfig::default(),
            grids: GridConfig::default(),
            dlm: crate::dlm::DlmParams::default(),
            significance: 1.0 / 30.0,
            t_rms: 0.2e-6,
            tap_power_std_db: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremRow {
    pub v: f64,
    pub p: f64,
    pub trials: usize,
}

/// Noiseless recovery-window scene of one trial: random waveform, unit-power
/// LOS paths with random phases, and a log-normal NLOS tap on the fixed
/// 91 m path. Shared by every `v` so the sweep compares like with like.
pub fn theorem_trial(cfg: &TheoremConfig, trial: usize) -> Result<(Scenario, Vec<Waveform>, SignalMatrix)> {
    let scn = recovery_window_scene(cfg.signal.sample_rate);
    let seed = trial_seed(cfg.seed, trial, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 3000));
    let w = generate_waveform(sub_seed(seed, 1), cfg.signal.bandwidth, cfg.signal.period_for(scn.tau_max));
    let mut spec = FixedChannelSpec::recovery_window(scn.speed_of_light);
    for a in spec.los_amplitudes[0].iter_mut() {
        *a = Complex64::cis(rng.gen_range(0.0..std::f64::consts::TAU));
    }
    let NlosPath { sensor, delay, .. } = spec.nlos[0];
    let excess = delay - scn.delay(&scn.sources[0], sensor);
    let mean_db = -10.0 * excess / cfg.t_rms.max(f64::MIN_POSITIVE) * std::f64::consts::LOG10_E;
    let db = mean_db + Normal::new(0.0, cfg.tap_power_std_db).expect("finite std").sample(&mut rng);
    spec.nlos[0].amplitude = 10f64.powf(db / 20.0) * Complex64::cis(rng.gen_range(0.0..std::f64::consts::TAU));
    let ch = fixed_channel(&scn, &spec)?;
    let signals = synthesize_received(&scn, std::slice::from_ref(&w), &ch, 0.0, &cfg.signal, 0)?;
    Ok((scn, vec![w], signals))
}

/// Whether the Stage-2 solution with LOS norm `1/√v` holds exactly one
/// significant location and that location is the source.
pub fn theorem_success(cfg: &TheoremConfig, scn: &Scenario, ws: &[Waveform], signals: &SignalMatrix, v: f64) -> Result<bool> {
    let mut stage2 = Stage2::new(scn, ws, cfg.signal.sample_rate, cfg.signal.num_samples, cfg.dlm, cfg.grids)?;
    let eps = cfg.dlm.epsilon_floor * signals.energy();
    let solved = stage2.refined_solve(signals, &[1.0 / v.sqrt()], eps)?;
    let active = active_sets(&solved.solution, &solved.layout, 1, cfg.significance);
    let unit = cfg.grids.d_res;
    let truth = scn.sources[0];
    Ok(match active.locations[0].as_slice() {
        [(i, j)] => Position::new(*i as f64 * unit, *j as f64 * unit).distance_to(&truth) < 1e-9 * unit.max(1.0),
        _ => false,
    })
}

/// Recovery probability for each `v`.
pub fn run_theorem_experiment(cfg: &TheoremConfig) -> Result<Vec<TheoremRow>> {
    if cfg.trials == 0 || cfg.v_values.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidParameter("trials >= 1 and v > 0 required".into()));
    }
    let outcomes: Vec<Vec<bool>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| -> Result<Vec<bool>> {
            let (scn, ws, signals) = theorem_trial(cfg, t)?;
            cfg.v_values.iter().map(|&v| theorem_success(cfg, &scn, &ws, &signals, v)).collect()
        })
        .collect::<Result<_>>()?;
    Ok(cfg
        .v_values
        .iter()
        .enumerate()
        .map(|(i, &v)| TheoremRow { v, p: outcomes.iter().filter(|o| o[i]).count() as f64 / cfg.trials as f64, trials: cfg.trials })
        .collect())
}

pub const CSV_HEADER: [&str; 7] = ["method", "param", "value", "P", "rMSE", "runtime_s", "trials"];

/// Writes the table as CSV and, if `plot_script` is set, a matplotlib
/// script next to it that plots `P` against `value` per method.
pub fn emit_results(rows: &[MetricsRow], path: &Path, plot_script: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.param.clone(),
            r.value.to_string(),
            r.p.to_string(),
            r.rmse.to_string(),
            r.runtime_s.to_string(),
            r.trials.to_string(),
        ])?;
    }
    w.flush()?;
    if plot_script {
        let csv_name = path.file_name().and_then(|s| s.to_str()).unwrap_or("results.csv");
        let script = format!(
            "import csv\nimport collections\nimport matplotlib.pyplot as plt\n\n\
             rows = list(csv.DictReader(open(\"{csv_name}\")))\n\
             series = collections.defaultdict(list)\n\
             for r in rows:\n    series[r[\"method\"]].append((float(r[\"value\"]), float(r[\"P\"])))\n\
             for method, pts in sorted(series.items()):\n    pts.sort()\n    plt.plot([p[0] for p in pts], [p[1] for p in pts], marker=\"o\", label=method)\n\
             plt.xlabel(rows[0][\"param\"] if rows else \"value\")\nplt.ylabel(\"P\")\nplt.ylim(0, 1)\nplt.legend()\n\
             plt.savefig(\"{csv_name}.png\", dpi=150)\n"
        );
        let mut f = std::fs::File::create(path.with_extension("py"))?;
        f.write_all(script.as_bytes())?;
    }
    Ok(())
}

pub const SIGNAL_HEADER: [&str; 4] = ["sensor", "sample", "re", "im"];

/// Writes received samples as CSV, one row per sensor and sample.
pub fn write_signals(signals: &SignalMatrix, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(SIGNAL_HEADER)?;
    for l in 0..signals.num_sensors() {
        for (i, v) in signals.column(l).iter().enumerate() {
            w.write_record([l.to_string(), i.to_string(), v.re.to_string(), v.im.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads samples written by [`write_signals`] into an `n x l` matrix.
pub fn read_signals(path: &Path, n: usize, l: usize, sample_rate: f64) -> Result<SignalMatrix> {
    let mut out = SignalMatrix::zeros(n, l, sample_rate);
    let mut seen = vec![false; n * l];
    let mut r = csv::Reader::from_path(path)?;
    for rec in r.records() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).ok_or_else(|| Error::Config(format!("signal row has {} fields, expected 4", rec.len())));
        let bad = |k: usize| Error::Config(format!("unparsable signal field '{}'", rec.get(k).unwrap_or("")));
        let sensor: usize = field(0)?.trim().parse().map_err(|_| bad(0))?;
        let sample: usize = field(1)?.trim().parse().map_err(|_| bad(1))?;
        let re: f64 = field(2)?.trim().parse().map_err(|_| bad(2))?;
        let im: f64 = field(3)?.trim().parse().map_err(|_| bad(3))?;
        if sensor >= l || sample >= n {
            return Err(Error::Config(format!("signal index ({sensor}, {sample}) outside {l} sensors x {n} samples")));
        }
        out.column_mut(sensor)[sample] = Complex64::new(re, im);
        seen[sensor * n + sample] = true;
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        return Err(Error::Config(format!("signal file lacks sensor {} sample {}", k / n, k % n)));
    }
    Ok(out)
}

/// Writes recovery-window rows with the results-table header.
pub fn theorem_rows(rows: &[TheoremRow]) -> Vec<MetricsRow> {
    rows.iter()
        .map(|r| MetricsRow { method: "dlm_stage2".into(), param: "v".into(), value: r.v, p: r.p, rmse: f64::NAN, runtime_s: f64::NAN, trials: r.trials })
        .collect()
}
