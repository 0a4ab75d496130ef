//! Experiment configuration and its INI file form.
//!
//! ```ini
//! [scenario]
//! sensors = 40,-55; -45,-40; -50,55; 60,60; 5,0
//! sources = 20,30
//! area = -100,-100,100,100
//!
//! [channel]
//! model = turin
//! t_rms = 0.2e-6
//!
//! [experiment]
//! methods = dlm,dpd
//! sweep = snr
//! values = 10,20,30
//! ```
//!
//! Every key is optional; missing keys keep their defaults.

use std::path::Path;
use std::str::FromStr;

use ini::Ini;

use crate::channel::TurinParams;
use crate::dlm::{DlmParams, GridConfig};
use crate::error::{Error, Result};
use crate::geometry::{reference_scene, Position, Scenario, SearchArea, SPEED_OF_LIGHT};
use crate::stage1::LambdaRule;
use crate::waveform::SignalConfig;

/// Localization methods the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Dlm,
    Dpd,
    DpdMitigated,
    IndirectCs,
    IndirectMf,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Dlm, Method::Dpd, Method::DpdMitigated, Method::IndirectCs, Method::IndirectMf];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dlm => "dlm",
            Method::Dpd => "dpd",
            Method::DpdMitigated => "dpd_mitigated",
            Method::IndirectCs => "indirect_cs",
            Method::IndirectMf => "indirect_mf",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// How the channel of each trial is drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChannelModel {
    Turin(TurinParams),
    /// Unit-power LOS paths with random phases at every sensor.
    LosOnly,
}

/// Quantity varied across the rows of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// SNR per observation time, dB.
    Snr,
    /// Turin delay spread, seconds.
    DelaySpread,
    /// Number of sensors with a LOS path.
    LosSensors,
    /// Grid refinement steps.
    RefinementSteps,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Snr => "snr_db",
            SweepParam::DelaySpread => "t_rms",
            SweepParam::LosSensors => "los_sensors",
            SweepParam::RefinementSteps => "refinement_steps",
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "snr" | "snr_db" => Ok(SweepParam::Snr),
            "t_rms" | "delay_spread" => Ok(SweepParam::DelaySpread),
            "los_sensors" => Ok(SweepParam::LosSensors),
            "refinement_steps" => Ok(SweepParam::RefinementSteps),
            other => Err(Error::Config(format!("unknown sweep parameter '{other}'"))),
        }
    }
}

/// Everything a Monte Carlo run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub signal: SignalConfig,
    pub channel: ChannelModel,
    /// SNR of every row unless the sweep varies it.
    pub snr_db: f64,
    pub sweep: SweepParam,
    pub values: Vec<f64>,
    pub trials: usize,
    pub methods: Vec<Method>,
    pub dlm: DlmParams,
    pub grids: GridConfig,
    pub mf_threshold: f64,
    /// Error radius of a correct estimate, meters.
    pub zeta: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let signal = SignalConfig::default();
        Self {
            scenario: reference_scene(signal.sample_rate),
            signal,
            channel: ChannelModel::Turin(TurinParams::default()),
            snr_db: 30.0,
            sweep: SweepParam::Snr,
            values: vec![30.0],
            trials: 100,
            methods: Method::ALL.to_vec(),
            dlm: DlmParams::default(),
            grids: GridConfig::default(),
            mf_threshold: 0.5,
            zeta: signal.ranging_resolution(SPEED_OF_LIGHT) / 3.0,
            seed: 1,
        }
    }
}

impl ExperimentConfig {
    /// Ranging resolution `c/B`.
    pub fn ranging_resolution(&self) -> f64 {
        self.signal.ranging_resolution(self.scenario.speed_of_light)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if !(self.zeta > 0.0) {
            return Err(Error::Config("zeta must be positive".into()));
        }
        if self.values.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("values and methods must be nonempty".into()));
        }
        self.signal.validate()?;
        self.dlm.validate()?;
        self.grids.validate()?;
        crate::geometry::validate_scenario(&self.scenario)?;
        if let ChannelModel::Turin(t) = &self.channel {
            t.validate(self.scenario.num_sensors())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_ini_str(&text)
    }

    /// Parses the INI form on top of the defaults.
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = Self::default();
        let get = |section: &str, key: &str| ini.section(Some(section)).and_then(|s| s.get(key)).map(str::trim);
        for section in ini.sections().flatten() {
            if !["scenario", "channel", "dlm", "grids", "experiment"].contains(&section) {
                return Err(Error::Config(format!("unknown section [{section}]")));
            }
        }

        if let Some(v) = get("scenario", "sample_rate") {
            cfg.signal.sample_rate = num(v)?;
        }
        if let Some(v) = get("scenario", "bandwidth") {
            cfg.signal.bandwidth = num(v)?;
        }
        if let Some(v) = get("scenario", "num_samples") {
            cfg.signal.num_samples = num(v)?;
        }
        let mut scn = cfg.scenario.clone();
        if let Some(v) = get("scenario", "sensors") {
            scn.sensors = positions(v)?;
        }
        if let Some(v) = get("scenario", "sources") {
            scn.sources = positions(v)?;
        }
        if let Some(v) = get("scenario", "area") {
            let a: Vec<f64> = list(v, ',')?;
            if a.len() != 4 {
                return Err(Error::Config("area needs x_min,y_min,x_max,y_max".into()));
            }
            scn.search_area = SearchArea::new(a[0], a[1], a[2], a[3]);
        }
        cfg.scenario = Scenario::new(scn.sensors, scn.sources, scn.search_area, cfg.signal.sample_rate);
        if let Some(v) = get("scenario", "tau_max") {
            cfg.scenario.tau_max = num(v)?;
        }

        let mut turin = TurinParams::default();
        if let Some(v) = get("channel", "mean_interarrival") {
            turin.mean_interarrival = num(v)?;
        }
        if let Some(v) = get("channel", "t_rms") {
            turin.t_rms = num(v)?;
        }
        if let Some(v) = get("channel", "tap_power_std_db") {
            turin.tap_power_std_db = num(v)?;
        }
        if let Some(v) = get("channel", "blocked_sensors") {
            turin.num_blocked_sensors = num(v)?;
        }
        if let Some(v) = get("channel", "los_power") {
            turin.los_power = num(v)?;
        }
        if let Some(v) = get("channel", "los_lognormal") {
            turin.los_lognormal = num(v)?;
        }
        cfg.channel = match get("channel", "model").unwrap_or("turin") {
            "turin" => ChannelModel::Turin(turin),
            "los" | "los_only" => ChannelModel::LosOnly,
            other => return Err(Error::Config(format!("unknown channel model '{other}'"))),
        };

        let d = &mut cfg.dlm;
        if let Some(v) = get("dlm", "mu") {
            d.mu = num(v)?;
        }
        if let Some(v) = get("dlm", "gamma") {
            d.gamma = num(v)?;
        }
        if let Some(v) = get("dlm", "threshold") {
            d.threshold = num(v)?;
        }
        if let Some(v) = get("dlm", "tol") {
            d.solver.tol = num(v)?;
        }
        if let Some(v) = get("dlm", "max_iterations") {
            d.solver.max_iterations = num(v)?;
        }
        if let Some(v) = get("dlm", "tau_max") {
            d.tau_max = Some(num(v)?);
        }
        if let Some(v) = get("dlm", "epsilon_floor") {
            d.epsilon_floor = num(v)?;
        }
        if let Some(v) = get("dlm", "stage1_prune_frac") {
            d.stage1.prune_frac = num(v)?;
        }
        if let Some(v) = get("dlm", "stage1_lambda") {
            d.stage1.lambda = LambdaRule::Fixed(num(v)?);
        }
        if let Some(v) = get("dlm", "stage1_lambda_floor") {
            d.stage1.lambda = LambdaRule::Universal { relative_floor: num(v)? };
        }
        if let Some(v) = get("dlm", "stage1_tau_res") {
            d.stage1.tau_res = Some(num(v)?);
        }
        if let Some(v) = get("dlm", "stage1_merge_adjacent") {
            d.stage1.merge_adjacent = num(v)?;
        }
        if let Some(v) = get("dlm", "mf_threshold") {
            cfg.mf_threshold = num(v)?;
        }

        if let Some(v) = get("grids", "d_res") {
            cfg.grids.d_res = num(v)?;
        }
        if let Some(v) = get("grids", "refinement_steps") {
            cfg.grids.refinement_steps = num(v)?;
        }
        if let Some(v) = get("grids", "neighbor_span") {
            cfg.grids.neighbor_span = num(v)?;
        }

        if let Some(v) = get("experiment", "methods") {
            cfg.methods = v.split(',').map(str::parse).collect::<Result<_>>()?;
        }
        if let Some(v) = get("experiment", "trials") {
            cfg.trials = num(v)?;
        }
        if let Some(v) = get("experiment", "snr") {
            cfg.snr_db = num(v)?;
            cfg.values = vec![cfg.snr_db];
        }
        if let Some(v) = get("experiment", "sweep") {
            cfg.sweep = v.parse()?;
        }
        match get("experiment", "values") {
            Some(v) => cfg.values = list(v, ',')?,
            None if cfg.sweep != SweepParam::Snr => return Err(Error::Config("a non-SNR sweep needs 'values'".into())),
            None => {}
        }
        if let Some(v) = get("experiment", "zeta") {
            cfg.zeta = num(v)?;
        } else {
            cfg.zeta = cfg.ranging_resolution() / 3.0;
        }
        if let Some(v) = get("experiment", "seed") {
            cfg.seed = num(v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn num<T: FromStr>(s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Config(format!("cannot parse '{s}'")))
}

fn list(s: &str, sep: char) -> Result<Vec<f64>> {
    s.split(sep).filter(|t| !t.trim().is_empty()).map(num).collect()
}

/// `"x,y; x,y; …"` in meters.
fn positions(s: &str) -> Result<Vec<Position>> {
    s.split(';')
        .filter(|t| !t.trim().is_empty())
        .map(|pair| {
            let v = list(pair, ',')?;
            match v.as_slice() {
                [x, y] => Ok(Position::new(*x, *y)),
                _ => Err(Error::Config(format!("position '{pair}' must be 'x,y'"))),
            }
        })
        .collect()
}
