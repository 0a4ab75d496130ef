//! The direct localization method: Stage-1 cleanup, then the group-sparse
//! program over per-source location grids and per-link delay grids, solved
//! coarse to fine, with LOS-count estimation, spurious-location pruning and
//! a correlation fallback.
//!
//! Grid points are stored as integer lattice indices in units of the final
//! resolution, so the delay/location resolution link `c·τ_res = d_res` holds
//! exactly at every step and duplicates are detected exactly.

use std::collections::{BTreeSet, HashMap};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::geometry::{Position, Scenario, SearchArea};
use crate::solver::{solve_constrained_with, GroupSparseProblem, GroupSparseSolution, SolverOptions};
use crate::stage1::{Deconvolver, Stage1Params};
use crate::stats::chi_square_inverse_cdf;
use crate::waveform::{Correlator, DelaySampler, SignalMatrix, Waveform};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Grid resolutions and refinement schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    /// Final location resolution, meters.
    pub d_res: f64,
    /// Number of refinement steps `R`; step `r` uses `2^{R−r}` times the
    /// final resolution.
    pub refinement_steps: usize,
    /// Stencil half-width in grid steps.
    pub neighbor_span: i64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { d_res: 1.0, refinement_steps: 5, neighbor_span: 2 }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_res > 0.0) || self.refinement_steps == 0 || self.refinement_steps > 30 || self.neighbor_span < 0 {
            return Err(Error::InvalidParameter("grid config needs d_res > 0, 1 <= R <= 30, span >= 0".into()));
        }
        Ok(())
    }

    /// Final delay resolution `d_res / c`.
    pub fn tau_res(&self, c: f64) -> f64 {
        self.d_res / c
    }

    /// Grid spacing at step `r` (1-based) in units of the final resolution.
    pub fn spacing(&self, r: usize) -> i64 {
        1i64 << (self.refinement_steps - r)
    }
}

/// Parameters of the localizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DlmParams {
    pub mu: f64,
    pub gamma: f64,
    /// Spurious-location threshold relative to the strongest path.
    pub threshold: f64,
    pub solver: SolverOptions,
    /// Delay horizon of the Stage-2 delay grids; defaults to the scene's.
    pub tau_max: Option<f64>,
    /// Groups below this fraction of the strongest coefficient are inactive.
    pub active_floor: f64,
    /// Lower bound on `ε` relative to the data energy, so noiseless data
    /// still yields a well-posed program.
    pub epsilon_floor: f64,
    pub stage1: Stage1Params,
}

impl Default for DlmParams {
    fn default() -> Self {
        Self {
            mu: 0.2,
            gamma: 0.99,
            threshold: 1.0 / 30.0,
            solver: SolverOptions::default(),
            tau_max: None,
            active_floor: 1e-6,
            epsilon_floor: 1e-6,
            stage1: Stage1Params::default(),
        }
    }
}

impl DlmParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.mu) || !unit(self.gamma) || !unit(self.threshold) {
            return Err(Error::InvalidParameter("mu, gamma and threshold must lie in (0, 1)".into()));
        }
        if !(self.active_floor >= 0.0) || !(self.epsilon_floor >= 0.0) {
            return Err(Error::InvalidParameter("floors must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `ε = (σ_w²/2)·F⁻¹(γ, 2NL)`.
pub fn set_epsilon(sigma_w: f64, n: usize, l: usize, gamma: f64) -> f64 {
    if sigma_w == 0.0 {
        return 0.0;
    }
    0.5 * sigma_w * sigma_w * chi_square_inverse_cdf(gamma, 2.0 * (n * l) as f64)
}

/// LOS-atom norm `u = 1/√(S − μ)`.
pub fn u_from_s(s: usize, mu: f64) -> f64 {
    assert!(s >= 1 && mu > 0.0 && mu < 1.0, "S >= 1 and 0 < mu < 1 required");
    1.0 / (s as f64 - mu).sqrt()
}

/// Location grid on the lattice `unit·ℤ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationGrid {
    /// Final resolution, meters per lattice unit.
    pub unit: f64,
    /// Current spacing in lattice units.
    pub spacing: i64,
    /// Lattice indices of the points, sorted.
    pub indices: Vec<(i64, i64)>,
}

impl LocationGrid {
    /// Uniform coverage of `area` with spacing `spacing·unit`.
    pub fn uniform(area: &SearchArea, unit: f64, spacing: i64) -> Self {
        let step = unit * spacing as f64;
        let range = |lo: f64, hi: f64| {
            let first = (lo / step - 1e-9).ceil() as i64;
            let mut v = Vec::new();
            let mut k = first;
            while (k as f64) * step < hi {
                v.push(k * spacing);
                k += 1;
            }
            v
        };
        let xs = range(area.x_min, area.x_max);
        let ys = range(area.y_min, area.y_max);
        let indices = xs
            .iter()
            .flat_map(|&i| ys.iter().map(move |&j| (i, j)))
            .filter(|&(i, j)| area.contains(&Position::new(i as f64 * unit, j as f64 * unit)))
            .collect();
        Self { unit, spacing, indices }
    }

    pub fn resolution(&self) -> f64 {
        self.unit * self.spacing as f64
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn position(&self, k: usize) -> Position {
        let (i, j) = self.indices[k];
        Position::new(i as f64 * self.unit, j as f64 * self.unit)
    }

    pub fn points(&self) -> Vec<Position> {
        (0..self.len()).map(|k| self.position(k)).collect()
    }
}

/// Delay grid on the lattice `unit·ℕ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayLattice {
    pub unit: f64,
    pub spacing: i64,
    pub indices: Vec<i64>,
}

impl DelayLattice {
    pub fn uniform(tau_max: f64, unit: f64, spacing: i64) -> Self {
        let last = (tau_max / (unit * spacing as f64) + 1e-9).floor() as i64;
        Self { unit, spacing, indices: (0..=last).map(|k| k * spacing).collect() }
    }

    pub fn resolution(&self) -> f64 {
        self.unit * self.spacing as f64
    }

    pub fn delays(&self) -> Vec<f64> {
        self.indices.iter().map(|&k| k as f64 * self.unit).collect()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// All grids of one refinement step.
#[derive(Debug, Clone, PartialEq)]
pub struct Grids {
    /// One location grid per source.
    pub locations: Vec<LocationGrid>,
    /// `delays[q][l]`.
    pub delays: Vec<Vec<DelayLattice>>,
}

/// Step-1 grids: uniform coverage of the area and of `[0, τ_max]`.
pub fn initial_grids(scn: &Scenario, gcfg: &GridConfig, tau_max: f64) -> Grids {
    let spacing = gcfg.spacing(1);
    let unit_tau = gcfg.tau_res(scn.speed_of_light);
    let loc = LocationGrid::uniform(&scn.search_area, gcfg.d_res, spacing);
    let del = DelayLattice::uniform(tau_max, unit_tau, spacing);
    Grids {
        locations: vec![loc; scn.num_sources()],
        delays: vec![vec![del; scn.num_sensors()]; scn.num_sources()],
    }
}

/// Union of `(2·span+1)²` stencils at spacing `spacing` around each active
/// location, clipped to the area.
pub fn refine_locations(active: &[(i64, i64)], spacing: i64, span: i64, unit: f64, area: &SearchArea) -> Result<LocationGrid> {
    if active.is_empty() {
        return Err(Error::EmptyActiveSet);
    }
    let mut set = BTreeSet::new();
    for &(i, j) in active {
        for a in -span..=span {
            for b in -span..=span {
                let p = (i + a * spacing, j + b * spacing);
                if area.contains(&Position::new(p.0 as f64 * unit, p.1 as f64 * unit)) {
                    set.insert(p);
                }
            }
        }
    }
    Ok(LocationGrid { unit, spacing, indices: set.into_iter().collect() })
}

/// Union of `2·span+1` delays at spacing `spacing` around each active delay,
/// clipped to `[0, τ_max]`.
pub fn refine_delays(active: &[i64], spacing: i64, span: i64, unit: f64, tau_max: f64) -> Result<DelayLattice> {
    if active.is_empty() {
        return Err(Error::EmptyActiveSet);
    }
    let mut set = BTreeSet::new();
    for &k in active {
        for a in -span..=span {
            let d = k + a * spacing;
            if d >= 0 && d as f64 * unit <= tau_max * (1.0 + 1e-12) {
                set.insert(d);
            }
        }
    }
    Ok(DelayLattice { unit, spacing, indices: set.into_iter().collect() })
}

/// Active points of a solved step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActiveSets {
    pub locations: Vec<Vec<(i64, i64)>>,
    pub delays: Vec<Vec<Vec<i64>>>,
}

/// Grids of step `r + 1` from the active points of step `r`. A source or
/// link without active points keeps its previous grid.
pub fn refine_grids(prev: &Grids, active: &ActiveSets, r: usize, gcfg: &GridConfig, area: &SearchArea, tau_max: f64) -> Grids {
    assert!(r < gcfg.refinement_steps, "refinement past the last step");
    let spacing = gcfg.spacing(r + 1);
    let locations = prev
        .locations
        .iter()
        .zip(&active.locations)
        .map(|(g, act)| refine_locations(act, spacing, gcfg.neighbor_span, g.unit, area).unwrap_or_else(|_| g.clone()))
        .collect();
    let delays = prev
        .delays
        .iter()
        .zip(&active.delays)
        .map(|(row, act_row)| {
            row.iter()
                .zip(act_row)
                .map(|(g, act)| refine_delays(act, spacing, gcfg.neighbor_span, g.unit, tau_max).unwrap_or_else(|_| g.clone()))
                .collect()
        })
        .collect();
    Grids { locations, delays }
}

/// Which grid point each column of an assembled problem stands for.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemLayout {
    /// Per location group: source and lattice index.
    pub locations: Vec<(usize, (i64, i64))>,
    /// Per sensor, per delay column: source and lattice index.
    pub delays: Vec<Vec<(usize, i64)>>,
    pub location_unit: f64,
    pub delay_unit: f64,
}

impl ProblemLayout {
    pub fn position(&self, g: usize) -> Position {
        let (i, j) = self.locations[g].1;
        Position::new(i as f64 * self.location_unit, j as f64 * self.location_unit)
    }
}

/// Builds the program over `grids`: location groups weighted `1/u_q`,
/// delay singletons weighted 1.
pub fn assemble_problem(
    signals: &SignalMatrix,
    samplers: &[DelaySampler],
    scn: &Scenario,
    grids: &Grids,
    u: &[f64],
    epsilon: f64,
) -> (GroupSparseProblem, ProblemLayout) {
    let (n, l_count) = (signals.num_samples(), signals.num_sensors());
    let mut locations = Vec::new();
    for (q, g) in grids.locations.iter().enumerate() {
        locations.extend(g.indices.iter().map(|&ij| (q, ij)));
    }
    let location_unit = grids.locations.first().map_or(1.0, |g| g.unit);
    let delay_unit = grids.delays.first().and_then(|r| r.first()).map_or(1.0, |d| d.unit);
    let mut delays = Vec::with_capacity(l_count);
    let mut dictionaries = Vec::with_capacity(l_count);
    for l in 0..l_count {
        let cols: Vec<(usize, i64)> = grids.delays.iter().enumerate().flat_map(|(q, row)| row[l].indices.iter().map(move |&k| (q, k))).collect();
        let total = locations.len() + cols.len();
        let mut a = DMatrix::from_element(n, total, ZERO);
        let buf = a.as_mut_slice();
        for (c, &(q, (i, j))) in locations.iter().enumerate() {
            let p = Position::new(i as f64 * location_unit, j as f64 * location_unit);
            samplers[q].column_into(scn.delay(&p, l), &mut buf[c * n..(c + 1) * n]);
        }
        for (k, &(q, d)) in cols.iter().enumerate() {
            let c = locations.len() + k;
            samplers[q].column_into(d as f64 * delay_unit, &mut buf[c * n..(c + 1) * n]);
        }
        dictionaries.push(a);
        delays.push(cols);
    }
    let location_weights = locations.iter().map(|&(q, _)| 1.0 / u[q]).collect();
    let problem = GroupSparseProblem {
        dictionaries,
        num_location_groups: locations.len(),
        location_weights,
        data: signals.samples.clone(),
        epsilon,
    };
    (problem, ProblemLayout { locations, delays, location_unit, delay_unit })
}

/// Location groups and delay atoms whose magnitude exceeds `floor·A`.
pub fn active_sets(sol: &GroupSparseSolution, layout: &ProblemLayout, num_sources: usize, floor: f64) -> ActiveSets {
    let cut = floor * sol.max_modulus();
    let l_count = sol.z.len();
    let mut out = ActiveSets { locations: vec![Vec::new(); num_sources], delays: vec![vec![Vec::new(); l_count]; num_sources] };
    if sol.max_modulus() == 0.0 {
        return out;
    }
    for (g, &(q, ij)) in layout.locations.iter().enumerate() {
        if sol.location_norm(g) > cut {
            out.locations[q].push(ij);
        }
    }
    for l in 0..l_count {
        for (k, &(q, d)) in layout.delays[l].iter().enumerate() {
            if sol.z[l][k].norm() > cut {
                out.delays[q][l].push(d);
            }
        }
    }
    out
}

/// Location picked for one source.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub position: Position,
    pub lattice_index: (i64, i64),
    /// Per-sensor LOS amplitudes at the selected point.
    pub amplitudes: Vec<Complex64>,
    /// `Ŝ_q`-th largest amplitude modulus at the selected point.
    pub strength: f64,
}

/// Keeps locations whose `Ŝ_q`-th largest amplitude exceeds `A·T` and picks
/// the strongest survivor of each source.
pub fn prune_and_select(sol: &GroupSparseSolution, layout: &ProblemLayout, s_hat: &[usize], threshold: f64) -> Vec<Option<Selection>> {
    let a = sol.max_modulus();
    let mut best: Vec<Option<Selection>> = vec![None; s_hat.len()];
    for (g, &(q, ij)) in layout.locations.iter().enumerate() {
        let mut mags: Vec<f64> = sol.y[g].iter().map(|v| v.norm()).collect();
        mags.sort_by(|x, y| y.total_cmp(x));
        let k = s_hat[q].clamp(1, mags.len());
        let strength = mags[k - 1];
        if strength > a * threshold && best[q].as_ref().is_none_or(|b| strength > b.strength) {
            best[q] = Some(Selection { position: layout.position(g), lattice_index: ij, amplitudes: sol.y[g].clone(), strength });
        }
    }
    best
}

/// `argmax_{p ∈ G} Σ_l |s_q(τ_l(p))^H r_l|² / ‖s_q(τ_l(p))‖²` for each source;
/// ties go to the lowest grid index.
pub fn fallback_correlation_localize(signals: &SignalMatrix, waveforms: &[Waveform], scn: &Scenario, grid: &LocationGrid) -> Vec<Position> {
    let fs = signals.sample_rate;
    let points = grid.points();
    waveforms
        .iter()
        .map(|w| {
            let corr: Vec<Correlator> = (0..signals.num_sensors()).map(|l| Correlator::new(w, fs, signals.column(l))).collect();
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (k, p) in points.iter().enumerate() {
                let v: f64 = corr.iter().enumerate().map(|(l, c)| c.normalized_power(scn.delay(p, l))).sum();
                if v > best.0 {
                    best = (v, k);
                }
            }
            points[best.1]
        })
        .collect()
}

/// Estimate for one source.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceEstimate {
    pub position: Position,
    /// Estimated number of sensors with a LOS path.
    pub s_hat: usize,
    /// LOS amplitudes at the estimate; empty when the fallback was used.
    pub amplitudes: Vec<Complex64>,
    pub fallback_used: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub stage1_time: Duration,
    pub stage2_time: Duration,
    pub epsilon: f64,
    /// Passes of the LOS-count loop.
    pub passes: usize,
    pub solves: usize,
    pub solver_iterations: usize,
    /// `Ŝ` of every source at the start of each pass.
    pub s_hat_history: Vec<Vec<usize>>,
    /// Active step-1 locations of the last pass, per source.
    pub step1_active: Vec<Vec<Position>>,
    /// Several sources were mapped to the same grid point.
    pub shared_estimate: bool,
    /// Solves whose ε was raised to the least-squares residual.
    pub relaxed_solves: usize,
    /// Location-grid size per step of the last pass (all sources).
    pub grid_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub sources: Vec<SourceEstimate>,
    pub diagnostics: Diagnostics,
}

impl LocalizationResult {
    pub fn positions(&self) -> Vec<Position> {
        self.sources.iter().map(|s| s.position).collect()
    }
}

/// Result of one coarse-to-fine sweep.
#[derive(Debug, Clone)]
pub struct RefinedSolve {
    pub solution: GroupSparseSolution,
    pub layout: ProblemLayout,
    pub grids: Grids,
    pub step1_active: ActiveSets,
    pub solves: usize,
    pub relaxed: usize,
    pub grid_sizes: Vec<usize>,
}

/// Stage-2 engine bound to one scene, set of waveforms and configuration.
pub struct Stage2<'a> {
    pub scn: &'a Scenario,
    pub params: DlmParams,
    pub gcfg: GridConfig,
    pub samplers: Vec<DelaySampler>,
    pub tau_max: f64,
    step1_cache: Option<(GroupSparseProblem, ProblemLayout, Grids)>,
    step1_warm: Option<GroupSparseSolution>,
}

impl<'a> Stage2<'a> {
    pub fn new(scn: &'a Scenario, waveforms: &[Waveform], fs: f64, n: usize, params: DlmParams, gcfg: GridConfig) -> Result<Self> {
        params.validate()?;
        gcfg.validate()?;
        let samplers = waveforms.iter().map(|w| DelaySampler::new(w, fs, n)).collect();
        let tau_max = params.tau_max.unwrap_or(scn.tau_max);
        Ok(Self { scn, params, gcfg, samplers, tau_max, step1_cache: None, step1_warm: None })
    }

    fn solve(&self, p: &mut GroupSparseProblem, warm: Option<&GroupSparseSolution>, relaxed: &mut usize) -> Result<GroupSparseSolution> {
        match solve_constrained_with(p, &self.params.solver, warm) {
            Err(Error::Infeasible { min_residual, .. }) => {
                *relaxed += 1;
                p.epsilon = min_residual * (1.0 + 1e-3) + 1e-12 * p.data.norm_squared();
                solve_constrained_with(p, &self.params.solver, warm)
            }
            other => other,
        }
    }

    /// Solves the program over `R` progressively refined grids with LOS
    /// weights `1/u_q`.
    pub fn refined_solve(&mut self, signals: &SignalMatrix, u: &[f64], epsilon: f64) -> Result<RefinedSolve> {
        let (mut problem, mut layout, mut grids) = match self.step1_cache.take() {
            Some((mut p, layout, grids)) => {
                for (w, &(q, _)) in p.location_weights.iter_mut().zip(&layout.locations) {
                    *w = 1.0 / u[q];
                }
                p.epsilon = epsilon;
                (p, layout, grids)
            }
            None => {
                let grids = initial_grids(self.scn, &self.gcfg, self.tau_max);
                let (p, layout) = assemble_problem(signals, &self.samplers, self.scn, &grids, u, epsilon);
                (p, layout, grids)
            }
        };
        let q_count = self.scn.num_sources();
        let mut relaxed = 0;
        let mut solves = 0;
        let mut grid_sizes = Vec::new();
        let mut warm = self.step1_warm.take();
        let mut step1_active = ActiveSets::default();
        let r_max = self.gcfg.refinement_steps;
        for r in 1..=r_max {
            grid_sizes.push(layout.locations.len());
            let eps_used = problem.epsilon;
            let solution = self.solve(&mut problem, warm.as_ref(), &mut relaxed)?;
            problem.epsilon = eps_used;
            solves += 1;
            let active = active_sets(&solution, &layout, q_count, self.params.active_floor);
            if r == 1 {
                step1_active = active.clone();
                self.step1_cache = Some((problem.clone(), layout.clone(), grids.clone()));
                self.step1_warm = Some(solution.clone());
            }
            if r == r_max {
                return Ok(RefinedSolve { solution, layout, grids, step1_active, solves, relaxed, grid_sizes });
            }
            let next = refine_grids(&grids, &active, r, &self.gcfg, &self.scn.search_area, self.tau_max);
            let (p, next_layout) = assemble_problem(signals, &self.samplers, self.scn, &next, u, epsilon);
            warm = Some(map_solution(&solution, &layout, &next_layout));
            problem = p;
            layout = next_layout;
            grids = next;
        }
        unreachable!("the loop returns at the last step")
    }
}

/// Carries coefficients over to a new layout by matching grid points.
fn map_solution(sol: &GroupSparseSolution, from: &ProblemLayout, to: &ProblemLayout) -> GroupSparseSolution {
    let l_count = sol.z.len();
    let loc: HashMap<(usize, (i64, i64)), usize> = from.locations.iter().enumerate().map(|(g, k)| (*k, g)).collect();
    let y = to
        .locations
        .iter()
        .map(|k| loc.get(k).map_or_else(|| vec![ZERO; l_count], |&g| sol.y[g].clone()))
        .collect();
    let z = (0..l_count)
        .map(|l| {
            let del: HashMap<(usize, i64), usize> = from.delays[l].iter().enumerate().map(|(c, k)| (*k, c)).collect();
            to.delays[l].iter().map(|k| del.get(k).map_or(ZERO, |&c| sol.z[l][c])).collect()
        })
        .collect();
    GroupSparseSolution { y, z, lambda: sol.lambda, iterations: 0, objective: 0.0, residual_sq: 0.0, certificate_gap: 0.0 }
}

/// Full-resolution grid used by the correlation fallback.
pub fn fallback_grid(scn: &Scenario, gcfg: &GridConfig) -> LocationGrid {
    LocationGrid::uniform(&scn.search_area, gcfg.d_res, 1)
}

/// Localizes every source from the received signals.
pub fn run_dlm(
    signals: &SignalMatrix,
    waveforms: &[Waveform],
    scn: &Scenario,
    sigma_w: f64,
    params: &DlmParams,
    gcfg: &GridConfig,
) -> Result<LocalizationResult> {
    params.validate()?;
    gcfg.validate()?;
    if waveforms.len() != scn.num_sources() || signals.num_sensors() != scn.num_sensors() {
        return Err(Error::InvalidParameter("waveforms and signal columns must match the scene".into()));
    }
    let (n, l_count, q_count) = (signals.num_samples(), signals.num_sensors(), scn.num_sources());
    let fs = signals.sample_rate;
    let mut diag = Diagnostics::default();

    let t1 = Instant::now();
    let deconv = Deconvolver::new(waveforms, scn.tau_max, fs, n, params.stage1)?;
    let cleaned = deconv.run(signals, sigma_w)?.cleaned;
    diag.stage1_time = t1.elapsed();

    let t2 = Instant::now();
    let energy = cleaned.energy();
    let epsilon = set_epsilon(sigma_w, n, l_count, params.gamma);
    diag.epsilon = epsilon;
    if energy <= epsilon {
        let grid = fallback_grid(scn, gcfg);
        let sources = fallback_correlation_localize(&cleaned, waveforms, scn, &grid)
            .into_iter()
            .map(|position| SourceEstimate { position, s_hat: l_count, amplitudes: Vec::new(), fallback_used: true })
            .collect();
        diag.stage2_time = t2.elapsed();
        return Ok(LocalizationResult { sources, diagnostics: diag });
    }
    let eps_eff = epsilon.max(params.epsilon_floor * energy);
    let mut stage2 = Stage2::new(scn, waveforms, fs, n, *params, *gcfg)?;
    let mut s_hat = vec![l_count; q_count];
    let mut estimates: Vec<Option<SourceEstimate>> = vec![None; q_count];
    let mut fallback_positions: Option<Vec<Position>> = None;
    while estimates.iter().any(Option::is_none) {
        diag.passes += 1;
        diag.s_hat_history.push(s_hat.clone());
        let u: Vec<f64> = s_hat.iter().map(|&s| u_from_s(s, params.mu)).collect();
        let solved = stage2.refined_solve(&cleaned, &u, eps_eff)?;
        diag.solves += solved.solves;
        diag.relaxed_solves += solved.relaxed;
        diag.solver_iterations += solved.solution.iterations;
        diag.grid_sizes = solved.grid_sizes.clone();
        diag.step1_active = solved
            .step1_active
            .locations
            .iter()
            .map(|v| v.iter().map(|&(i, j)| Position::new(i as f64 * gcfg.d_res, j as f64 * gcfg.d_res)).collect())
            .collect();
        let picks = prune_and_select(&solved.solution, &solved.layout, &s_hat, params.threshold);
        for q in 0..q_count {
            if estimates[q].is_some() {
                continue;
            }
            if let Some(sel) = &picks[q] {
                estimates[q] = Some(SourceEstimate { position: sel.position, s_hat: s_hat[q], amplitudes: sel.amplitudes.clone(), fallback_used: false });
            } else if s_hat[q] > 1 {
                s_hat[q] -= 1;
            } else {
                let fb = fallback_positions.get_or_insert_with(|| {
                    fallback_correlation_localize(&cleaned, waveforms, scn, &fallback_grid(scn, gcfg))
                });
                estimates[q] = Some(SourceEstimate { position: fb[q], s_hat: 1, amplitudes: Vec::new(), fallback_used: true });
            }
        }
    }
    let sources: Vec<SourceEstimate> = estimates.into_iter().map(|e| e.expect("loop ends when all are located")).collect();
    for a in 0..q_count {
        for b in a + 1..q_count {
            if sources[a].position == sources[b].position {
                diag.shared_estimate = true;
            }
        }
    }
    diag.stage2_time = t2.elapsed();
    Ok(LocalizationResult { sources, diagnostics: diag })
}
