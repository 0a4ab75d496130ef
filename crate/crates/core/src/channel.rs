//! Multipath channel realizations: the Turin urban model with LOS blockage,
//! and hand-specified deterministic channels.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::error::{Error, Result};
use crate::geometry::Scenario;

/// Parameters of the Turin model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurinParams {
    pub mean_interarrival: f64,
    /// Decay constant of the exponential power delay profile. Zero disables NLOS.
    pub t_rms: f64,
    pub tap_power_std_db: f64,
    pub num_blocked_sensors: usize,
    pub los_power: f64,
    /// Draw the LOS power from the same log-normal law as the NLOS taps
    /// instead of fixing it at `los_power`.
    pub los_lognormal: bool,
}

impl Default for TurinParams {
    fn default() -> Self {
        Self {
            mean_interarrival: 0.2e-6,
            t_rms: 0.2e-6,
            tap_power_std_db: 10.0,
            num_blocked_sensors: 1,
            los_power: 1.0,
            los_lognormal: false,
        }
    }
}

impl TurinParams {
    pub fn validate(&self, num_sensors: usize) -> Result<()> {
        if !(self.mean_interarrival > 0.0) {
            return Err(Error::InvalidParameter("mean_interarrival must be positive".into()));
        }
        if !(self.t_rms >= 0.0) || !(self.tap_power_std_db >= 0.0) || !(self.los_power > 0.0) {
            return Err(Error::InvalidParameter("t_rms, tap_power_std_db must be >= 0 and los_power > 0".into()));
        }
        if self.num_blocked_sensors > num_sensors {
            return Err(Error::InvalidParameter(format!(
                "{} blocked sensors requested but only {} exist",
                self.num_blocked_sensors, num_sensors
            )));
        }
        Ok(())
    }
}

/// Paths between one source and one sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkChannel {
    pub los_present: bool,
    pub los_amplitude: Complex64,
    /// `(delay, amplitude)` of each NLOS arrival.
    pub nlos: Vec<(f64, Complex64)>,
}

impl LinkChannel {
    pub fn los_only(amplitude: Complex64) -> Self {
        Self { los_present: true, los_amplitude: amplitude, nlos: Vec::new() }
    }
}

/// Channel of every (source, sensor) pair, indexed `links[q][l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub links: Vec<Vec<LinkChannel>>,
}

impl ChannelRealization {
    pub fn new(links: Vec<Vec<LinkChannel>>) -> Self {
        Self { links }
    }

    pub fn num_sources(&self) -> usize {
        self.links.len()
    }

    pub fn link(&self, q: usize, l: usize) -> &LinkChannel {
        &self.links[q][l]
    }

    /// Number of sensors receiving the LOS path of source `q`.
    pub fn los_count(&self, q: usize) -> usize {
        self.links[q].iter().filter(|k| k.los_present).count()
    }

    /// Checks that every NLOS arrival comes strictly after the LOS delay.
    pub fn check_causality(&self, scn: &Scenario) -> Result<()> {
        for (q, row) in self.links.iter().enumerate() {
            for (l, link) in row.iter().enumerate() {
                let los = scn.delay(&scn.sources[q], l);
                if let Some((d, _)) = link.nlos.iter().find(|(d, _)| *d <= los) {
                    return Err(Error::InconsistentSpec(format!(
                        "NLOS delay {d:e} s at source {q}, sensor {l} does not exceed the LOS delay {los:e} s"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn uniform_phase<R: Rng>(rng: &mut R) -> Complex64 {
    Complex64::cis(rng.gen_range(0.0..2.0 * PI))
}

/// Draws a Turin channel for every source of `scn`.
pub fn draw_turin_channel(seed: u64, scn: &Scenario, params: &TurinParams) -> Result<ChannelRealization> {
    params.validate(scn.num_sensors())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l_count = scn.num_sensors();
    let blocked: Vec<usize> = sample(&mut rng, l_count, params.num_blocked_sensors).into_vec();
    let gaps = Exp::new(1.0 / params.mean_interarrival).expect("positive rate");
    let tap_db = Normal::new(0.0, params.tap_power_std_db).expect("finite std");
    let mut links = Vec::with_capacity(scn.num_sources());
    for src in &scn.sources {
        let mut row = Vec::with_capacity(l_count);
        for l in 0..l_count {
            let t0 = scn.delay(src, l);
            let los_power = if params.los_lognormal {
                10f64.powf((10.0 * params.los_power.log10() + tap_db.sample(&mut rng)) / 10.0)
            } else {
                params.los_power
            };
            let los_amplitude = los_power.sqrt() * uniform_phase(&mut rng);
            let mut nlos = Vec::new();
            if params.t_rms > 0.0 {
                let mut t = t0;
                loop {
                    t += gaps.sample(&mut rng);
                    if t > scn.tau_max {
                        break;
                    }
                    let mean_db = 10.0 * (params.los_power * (-(t - t0) / params.t_rms).exp()).log10();
                    let power = 10f64.powf((mean_db + tap_db.sample(&mut rng)) / 10.0);
                    nlos.push((t, power.sqrt() * uniform_phase(&mut rng)));
                }
            }
            row.push(LinkChannel { los_present: !blocked.contains(&l), los_amplitude, nlos });
        }
        links.push(row);
    }
    Ok(ChannelRealization { links })
}

/// One explicitly specified NLOS arrival.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlosPath {
    pub source: usize,
    pub sensor: usize,
    pub delay: f64,
    pub amplitude: Complex64,
}

/// Explicit description of a deterministic channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedChannelSpec {
    /// `los_present[q][l]`.
    pub los_present: Vec<Vec<bool>>,
    /// `los_amplitudes[q][l]`; ignored where the LOS is blocked.
    pub los_amplitudes: Vec<Vec<Complex64>>,
    pub nlos: Vec<NlosPath>,
}

impl FixedChannelSpec {
    /// Unit-amplitude LOS everywhere and no NLOS.
    pub fn all_los(num_sources: usize, num_sensors: usize) -> Self {
        Self {
            los_present: vec![vec![true; num_sensors]; num_sources],
            los_amplitudes: vec![vec![Complex64::new(1.0, 0.0); num_sensors]; num_sources],
            nlos: Vec::new(),
        }
    }

    /// Channel of the square-array recovery-window scene: the sensor at
    /// (40,−40) is blocked and the sensor at the origin also receives a
    /// reflection with a 91 m path.
    pub fn recovery_window(speed_of_light: f64) -> Self {
        let mut spec = Self::all_los(1, 5);
        spec.los_present[0][0] = false;
        spec.nlos.push(NlosPath { source: 0, sensor: 4, delay: 91.0 / speed_of_light, amplitude: Complex64::new(1.0, 0.0) });
        spec
    }
}

/// Builds the realization described by `spec`.
pub fn fixed_channel(scn: &Scenario, spec: &FixedChannelSpec) -> Result<ChannelRealization> {
    let (q_count, l_count) = (scn.num_sources(), scn.num_sensors());
    let shape_ok = |v: usize, rows: &[usize]| v == q_count && rows.iter().all(|r| *r == l_count);
    let los_rows: Vec<usize> = spec.los_present.iter().map(Vec::len).collect();
    let amp_rows: Vec<usize> = spec.los_amplitudes.iter().map(Vec::len).collect();
    if !shape_ok(spec.los_present.len(), &los_rows) || !shape_ok(spec.los_amplitudes.len(), &amp_rows) {
        return Err(Error::InconsistentSpec(format!("LOS tables must be {q_count} x {l_count}")));
    }
    let mut links: Vec<Vec<LinkChannel>> = (0..q_count)
        .map(|q| {
            (0..l_count)
                .map(|l| LinkChannel {
                    los_present: spec.los_present[q][l],
                    los_amplitude: spec.los_amplitudes[q][l],
                    nlos: Vec::new(),
                })
                .collect()
        })
        .collect();
    for p in &spec.nlos {
        if p.source >= q_count || p.sensor >= l_count {
            return Err(Error::InconsistentSpec(format!("NLOS path at source {}, sensor {} is out of range", p.source, p.sensor)));
        }
        links[p.source][p.sensor].nlos.push((p.delay, p.amplitude));
    }
    for row in &mut links {
        for link in row.iter_mut() {
            link.nlos.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
    }
    let ch = ChannelRealization { links };
    ch.check_causality(scn)?;
    Ok(ch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{reference_scene, recovery_window_scene, SPEED_OF_LIGHT};

    #[test]
    fn one_blocked_sensor_per_source() {
        let mut scn = reference_scene(20e6);
        scn.sources.push(crate::geometry::Position::new(-10.0, 5.0));
        for seed in 0..50 {
            let ch = draw_turin_channel(seed, &scn, &TurinParams::default()).unwrap();
            assert_eq!(ch.los_count(0), 4);
            assert_eq!(ch.los_count(1), 4);
            let blocked = |q: usize| ch.links[q].iter().position(|k| !k.los_present);
            assert_eq!(blocked(0), blocked(1));
        }
    }

    #[test]
    fn zero_spread_means_no_nlos() {
        let scn = reference_scene(20e6);
        let params = TurinParams { t_rms: 0.0, ..Default::default() };
        let ch = draw_turin_channel(3, &scn, &params).unwrap();
        assert!(ch.links[0].iter().all(|k| k.nlos.is_empty()));
    }

    #[test]
    fn nlos_follows_los_and_fits_horizon() {
        let scn = reference_scene(20e6);
        for seed in 0..200 {
            let ch = draw_turin_channel(seed, &scn, &TurinParams::default()).unwrap();
            ch.check_causality(&scn).unwrap();
            assert!(ch.links[0].iter().flat_map(|k| &k.nlos).all(|(d, _)| *d <= scn.tau_max));
        }
    }

    #[test]
    fn same_seed_same_channel() {
        let scn = reference_scene(20e6);
        let a = draw_turin_channel(11, &scn, &TurinParams::default()).unwrap();
        let b = draw_turin_channel(11, &scn, &TurinParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unit_los_power_by_default() {
        let scn = reference_scene(20e6);
        let ch = draw_turin_channel(5, &scn, &TurinParams::default()).unwrap();
        assert!(ch.links[0].iter().all(|k| (k.los_amplitude.norm() - 1.0).abs() < 1e-12));
        let lognormal = TurinParams { los_lognormal: true, ..Default::default() };
        let ch = draw_turin_channel(5, &scn, &lognormal).unwrap();
        assert!(ch.links[0].iter().any(|k| (k.los_amplitude.norm() - 1.0).abs() > 1e-3));
    }

    #[test]
    fn mean_interarrival() {
        // Gaps of a Poisson process are exponential; pool them over 10^4
        // draws. Arrivals past tau_max are censored, so measure the rate as
        // (count of arrivals) / (total observed window length).
        let scn = reference_scene(20e6);
        let params = TurinParams { num_blocked_sensors: 0, ..Default::default() };
        let (mut count, mut window) = (0usize, 0.0);
        for seed in 0..10_000 {
            let ch = draw_turin_channel(seed, &scn, &params).unwrap();
            for (l, link) in ch.links[0].iter().enumerate() {
                count += link.nlos.len();
                window += scn.tau_max - scn.delay(&scn.sources[0], l);
            }
        }
        let mean = window / count as f64;
        assert!((mean / 0.2e-6 - 1.0).abs() < 0.05, "{mean:e}");
    }

    #[test]
    fn power_delay_profile_is_monotone() {
        // Geometric mean tap power per excess-delay bin; the dB-domain mean
        // is the PDP in dB, so it must decrease bin to bin.
        let scn = reference_scene(20e6);
        let params = TurinParams { num_blocked_sensors: 0, ..Default::default() };
        let bins = 8;
        let width = 0.1e-6;
        let mut sum_db = vec![0.0; bins];
        let mut n = vec![0usize; bins];
        for seed in 0..10_000 {
            let ch = draw_turin_channel(seed, &scn, &params).unwrap();
            for (l, link) in ch.links[0].iter().enumerate() {
                let t0 = scn.delay(&scn.sources[0], l);
                for (d, a) in &link.nlos {
                    let b = ((d - t0) / width) as usize;
                    if b < bins {
                        sum_db[b] += 10.0 * a.norm_sqr().log10();
                        n[b] += 1;
                    }
                }
            }
        }
        let avg: Vec<f64> = (0..bins).map(|b| 10f64.powf(sum_db[b] / n[b] as f64 / 10.0)).collect();
        for w in avg.windows(2) {
            assert!(w[1] <= 1.1 * w[0], "{avg:?}");
        }
    }

    #[test]
    fn recovery_window_channel() {
        let scn = recovery_window_scene(20e6);
        let ch = fixed_channel(&scn, &FixedChannelSpec::recovery_window(SPEED_OF_LIGHT)).unwrap();
        assert_eq!(ch.los_count(0), 4);
        assert!(!ch.link(0, 0).los_present);
        assert_eq!(ch.link(0, 4).nlos.len(), 1);
        assert!((ch.link(0, 4).nlos[0].0 - 91.0 / SPEED_OF_LIGHT).abs() < 1e-20);
    }

    #[test]
    fn all_los_fixed_channel() {
        let scn = reference_scene(20e6);
        let ch = fixed_channel(&scn, &FixedChannelSpec::all_los(1, 5)).unwrap();
        assert_eq!(ch.los_count(0), 5);
        assert!(ch.links[0].iter().all(|k| k.nlos.is_empty()));
    }

    #[test]
    fn early_nlos_rejected() {
        let scn = reference_scene(20e6);
        let mut spec = FixedChannelSpec::all_los(1, 5);
        let los = scn.delay(&scn.sources[0], 2);
        spec.nlos.push(NlosPath { source: 0, sensor: 2, delay: los * 0.5, amplitude: Complex64::new(1.0, 0.0) });
        assert!(matches!(fixed_channel(&scn, &spec), Err(Error::InconsistentSpec(_))));
    }
}
