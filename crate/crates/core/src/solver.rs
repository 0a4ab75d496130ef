//! Convex programs behind both stages.
//!
//! The localization program is
//!
//! ```text
//! minimize   Σ_g w_g ‖y_g‖₂ + Σ_{l,d} |z_{l,d}|
//! subject to Σ_l ‖r_l − A_l [y(l); z_l]‖₂² ≤ ε
//! ```
//!
//! where each location group `y_g` holds one coefficient per sensor and the
//! delay coefficients are singletons. It is solved through its penalized
//! form `½‖res‖² + λΩ(x)`: exact block coordinate descent with active-set
//! sweeps handles a fixed `λ`, and a safeguarded secant search on `log λ`
//! drives the residual onto the `ε` boundary. Every returned point carries a
//! duality-gap certificate built from the scaled residual.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Default certified relative tolerance.
pub const DEFAULT_TOL: f64 = 1e-5;
/// Default budget of coordinate-descent sweeps.
pub const DEFAULT_MAX_ITERATIONS: usize = 50_000;
/// Largest active set handed to the Newton phase.
const MAX_NEWTON_MEMBERS: usize = 400;

/// The ε-constrained location program over fixed grids.
///
/// Column `g < num_location_groups` of every sensor dictionary belongs to
/// location group `g`; the remaining columns are per-sensor delay atoms.
#[derive(Debug, Clone)]
pub struct GroupSparseProblem {
    /// One `N x C_l` dictionary per sensor.
    pub dictionaries: Vec<DMatrix<Complex64>>,
    pub num_location_groups: usize,
    /// Weight `1/u_q` of each location group.
    pub location_weights: Vec<f64>,
    /// `N x L` received samples.
    pub data: DMatrix<Complex64>,
    /// Bound on the squared residual norm.
    pub epsilon: f64,
}

impl GroupSparseProblem {
    pub fn num_sensors(&self) -> usize {
        self.dictionaries.len()
    }

    pub fn num_samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_delay_columns(&self, l: usize) -> usize {
        self.dictionaries[l].ncols() - self.num_location_groups
    }

    pub fn validate(&self) -> Result<()> {
        let (n, l_count) = (self.data.nrows(), self.data.ncols());
        if self.dictionaries.len() != l_count || l_count == 0 {
            return Err(Error::InvalidParameter("one dictionary per sensor is required".into()));
        }
        if self.location_weights.len() != self.num_location_groups {
            return Err(Error::InvalidParameter("one weight per location group is required".into()));
        }
        if self.location_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter("location weights must be positive".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidParameter("epsilon must be nonnegative".into()));
        }
        for d in &self.dictionaries {
            if d.nrows() != n || d.ncols() < self.num_location_groups {
                return Err(Error::InvalidParameter("dictionary shape does not match the data".into()));
            }
            if d.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
                return Err(Error::InvalidParameter("dictionary has non-finite entries".into()));
            }
        }
        Ok(())
    }

    /// `A_l [y(l); z_l]` for every sensor.
    pub fn reconstruct(&self, y: &[Vec<Complex64>], z: &[Vec<Complex64>]) -> DMatrix<Complex64> {
        let n = self.num_samples();
        let mut out = DMatrix::from_element(n, self.num_sensors(), ZERO);
        for (l, dict) in self.dictionaries.iter().enumerate() {
            let coeffs = y.iter().map(|g| g[l]).chain(z[l].iter().copied());
            for (c, v) in coeffs.enumerate() {
                if v != ZERO {
                    let col = dict.column(c);
                    for i in 0..n {
                        out[(i, l)] += col[i] * v;
                    }
                }
            }
        }
        out
    }

    /// Smallest achievable squared residual (least squares on each sensor).
    pub fn min_residual(&self) -> f64 {
        (0..self.num_sensors())
            .map(|l| {
                let a = &self.dictionaries[l];
                let r = self.data.column(l).into_owned();
                if a.ncols() == 0 {
                    return r.norm_squared();
                }
                let svd = a.clone().svd(true, false);
                let u = svd.u.expect("left singular vectors");
                let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
                let keep = smax * 1e-12 * a.nrows().max(a.ncols()) as f64;
                let mut fit = r.norm_squared();
                for (k, s) in svd.singular_values.iter().enumerate() {
                    if *s > keep {
                        fit -= u.column(k).dotc(&r).norm_sqr();
                    }
                }
                fit.max(0.0)
            })
            .sum()
    }
}

/// Solution of [`GroupSparseProblem`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSparseSolution {
    /// `y[g][l]`: coefficient of location group `g` at sensor `l`.
    pub y: Vec<Vec<Complex64>>,
    /// `z[l][d]`: coefficient of delay atom `d` at sensor `l`.
    pub z: Vec<Vec<Complex64>>,
    pub objective: f64,
    pub residual_sq: f64,
    pub certificate_gap: f64,
    /// Penalty weight of the penalized problem sharing this solution.
    pub lambda: f64,
    pub iterations: usize,
}

impl GroupSparseSolution {
    pub fn zeros(p: &GroupSparseProblem) -> Self {
        let l_count = p.num_sensors();
        Self {
            y: vec![vec![ZERO; l_count]; p.num_location_groups],
            z: (0..l_count).map(|l| vec![ZERO; p.num_delay_columns(l)]).collect(),
            objective: 0.0,
            residual_sq: p.data.norm_squared(),
            certificate_gap: 0.0,
            lambda: f64::INFINITY,
            iterations: 0,
        }
    }

    pub fn location_norm(&self, g: usize) -> f64 {
        self.y[g].iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest modulus among all location and delay coefficients.
    pub fn max_modulus(&self) -> f64 {
        self.y.iter().flatten().chain(self.z.iter().flatten()).map(|v| v.norm()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Certified relative tolerance on the objective.
    pub tol: f64,
    /// Budget of coordinate-descent sweeps.
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL, max_iterations: DEFAULT_MAX_ITERATIONS }
    }
}

/// Block coordinate descent state for `½‖r − Ax‖² + λ Σ_g w_g ‖x_g‖`.
struct Engine<'a> {
    n: usize,
    blocks: Vec<&'a [Complex64]>,
    data: &'a [Complex64],
    /// Per member: sensor and column offset inside that sensor's block.
    member_sensor: Vec<usize>,
    member_offset: Vec<usize>,
    group_start: Vec<usize>,
    weights: Vec<f64>,
    col_sq: Vec<f64>,
    x: Vec<Complex64>,
    res: Vec<Complex64>,
    iterations: usize,
    budget: usize,
    last_gap: f64,
    grad: Vec<Complex64>,
}

#[inline]
fn dotc(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (u, v) in a.iter().zip(b) {
        re += u.re * v.re + u.im * v.im;
        im += u.re * v.im - u.im * v.re;
    }
    Complex64::new(re, im)
}

#[inline]
fn axpy_sub(y: &mut [Complex64], a: &[Complex64], s: Complex64) {
    for (u, v) in y.iter_mut().zip(a) {
        *u -= v * s;
    }
}

impl<'a> Engine<'a> {
    fn new(n: usize, blocks: Vec<&'a [Complex64]>, data: &'a [Complex64], groups: Vec<(Vec<(usize, usize)>, f64)>, budget: usize) -> Self {
        let mut member_sensor = Vec::new();
        let mut member_offset = Vec::new();
        let mut group_start = vec![0];
        let mut weights = Vec::with_capacity(groups.len());
        for (members, w) in groups {
            for (l, c) in members {
                member_sensor.push(l);
                member_offset.push(c * n);
            }
            group_start.push(member_sensor.len());
            weights.push(w);
        }
        let col_sq = member_sensor
            .iter()
            .zip(&member_offset)
            .map(|(&l, &o)| blocks[l][o..o + n].iter().map(|v| v.norm_sqr()).sum())
            .collect();
        let m = member_sensor.len();
        let max_group = group_start.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0);
        Self {
            n,
            blocks,
            data,
            member_sensor,
            member_offset,
            group_start,
            weights,
            col_sq,
            x: vec![ZERO; m],
            res: data.to_vec(),
            iterations: 0,
            budget,
            last_gap: f64::INFINITY,
            grad: vec![ZERO; max_group],
        }
    }

    fn for_problem(p: &'a GroupSparseProblem, budget: usize) -> Self {
        let l_count = p.num_sensors();
        let g_count = p.num_location_groups;
        let mut groups: Vec<(Vec<(usize, usize)>, f64)> =
            (0..g_count).map(|g| ((0..l_count).map(|l| (l, g)).collect(), p.location_weights[g])).collect();
        for l in 0..l_count {
            for c in g_count..p.dictionaries[l].ncols() {
                groups.push((vec![(l, c)], 1.0));
            }
        }
        let blocks = p.dictionaries.iter().map(|d| d.as_slice()).collect();
        Self::new(p.num_samples(), blocks, p.data.as_slice(), groups, budget)
    }

    fn num_groups(&self) -> usize {
        self.weights.len()
    }

    fn column(&self, m: usize) -> &'a [Complex64] {
        let o = self.member_offset[m];
        &self.blocks[self.member_sensor[m]][o..o + self.n]
    }

    fn res_range(&self, m: usize) -> std::ops::Range<usize> {
        let l = self.member_sensor[m];
        l * self.n..(l + 1) * self.n
    }

    fn set_x(&mut self, x: Vec<Complex64>) {
        self.x = x;
        self.res.copy_from_slice(self.data);
        for m in 0..self.x.len() {
            if self.x[m] != ZERO {
                let r = self.res_range(m);
                let col = self.column(m);
                axpy_sub(&mut self.res[r], col, self.x[m]);
            }
        }
    }

    /// Exact minimization over one group; returns the largest coefficient change.
    fn update_group(&mut self, gi: usize, lam: f64) -> f64 {
        let (s, e) = (self.group_start[gi], self.group_start[gi + 1]);
        let c = lam * self.weights[gi];
        let mut gn2 = 0.0;
        let mut dmax: f64 = 0.0;
        for m in s..e {
            let g = dotc(self.column(m), &self.res[self.res_range(m)]) + self.col_sq[m] * self.x[m];
            self.grad[m - s] = g;
            gn2 += g.norm_sqr();
            dmax = dmax.max(self.col_sq[m]);
        }
        let gn = gn2.sqrt();
        let mut change: f64 = 0.0;
        let shrink: Option<f64> = if gn <= c || dmax == 0.0 {
            None
        } else if e - s == 1 {
            Some(0.0)
        } else {
            Some(self.solve_group_norm(s, e, c, gn, dmax))
        };
        for m in s..e {
            let g = self.grad[m - s];
            let d = self.col_sq[m];
            let new = match shrink {
                None => ZERO,
                Some(_) if d == 0.0 => ZERO,
                Some(_) if e - s == 1 => g / d * (1.0 - c / gn),
                Some(norm) => g * (norm / (d * norm + c)),
            };
            let delta = new - self.x[m];
            if delta != ZERO {
                change = change.max(delta.norm());
                let r = self.res_range(m);
                let col = self.column(m);
                // res ← res − a·(new − old)
                axpy_sub(&mut self.res[r], col, delta);
                self.x[m] = new;
            }
        }
        change
    }

    /// Norm `s` of the group minimizer: root of `Σ|g_j|²/(d_j s + c)² = 1`.
    fn solve_group_norm(&self, s: usize, e: usize, c: f64, gn: f64, dmax: f64) -> f64 {
        // The left side is convex and decreasing, so Newton from a lower
        // bound increases monotonically to the root.
        let mut t = ((gn - c) / dmax).max(0.0);
        for _ in 0..100 {
            let (mut psi, mut dpsi) = (0.0, 0.0);
            for m in s..e {
                let g2 = self.grad[m - s].norm_sqr();
                let den = self.col_sq[m] * t + c;
                psi += g2 / (den * den);
                dpsi -= 2.0 * g2 * self.col_sq[m] / (den * den * den);
            }
            if dpsi == 0.0 {
                break;
            }
            let step = (psi - 1.0) / dpsi;
            let next = t - step;
            if !(next > t) {
                break;
            }
            let done = (next - t) <= 1e-15 * next;
            t = next;
            if done {
                break;
            }
        }
        t
    }

    fn tick(&mut self) -> Result<()> {
        self.iterations += 1;
        if self.iterations > self.budget {
            return Err(Error::NonConvergence { iterations: self.iterations - 1, gap: self.last_gap });
        }
        Ok(())
    }

    fn sweep(&mut self, groups: &[usize], lam: f64) -> Result<f64> {
        self.tick()?;
        let mut change: f64 = 0.0;
        for &g in groups {
            change = change.max(self.update_group(g, lam));
        }
        Ok(change)
    }

    fn sweep_all(&mut self, lam: f64) -> Result<f64> {
        self.tick()?;
        let mut change: f64 = 0.0;
        for g in 0..self.num_groups() {
            change = change.max(self.update_group(g, lam));
        }
        Ok(change)
    }

    fn group_norm(&self, g: usize) -> f64 {
        let (s, e) = (self.group_start[g], self.group_start[g + 1]);
        self.x[s..e].iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    fn penalty(&self) -> f64 {
        (0..self.num_groups()).map(|g| self.weights[g] * self.group_norm(g)).sum()
    }

    fn residual_sq(&self) -> f64 {
        self.res.iter().map(|v| v.norm_sqr()).sum()
    }

    /// `max_g ‖A_g^H res‖ / w_g`.
    fn dual_ratio(&self) -> f64 {
        (0..self.num_groups())
            .map(|g| {
                let (s, e) = (self.group_start[g], self.group_start[g + 1]);
                let n2: f64 = (s..e).map(|m| dotc(self.column(m), &self.res[self.res_range(m)]).norm_sqr()).sum();
                n2.sqrt() / self.weights[g]
            })
            .fold(0.0, f64::max)
    }

    fn re_data_res(&self) -> f64 {
        self.data.iter().zip(&self.res).map(|(a, b)| a.re * b.re + a.im * b.im).sum()
    }

    /// Penalized primal value and duality gap.
    fn penalized_gap(&self, lam: f64) -> (f64, f64) {
        let rr = self.residual_sq();
        let primal = 0.5 * rr + lam * self.penalty();
        let ratio = self.dual_ratio();
        let theta = if ratio > lam { lam / ratio } else { 1.0 };
        let dual = theta * self.re_data_res() - 0.5 * theta * theta * rr;
        (primal, (primal - dual).max(0.0))
    }

    /// Certificate for the ε-constrained problem: `(objective, gap)`.
    fn constrained_certificate(&self, eps: f64) -> (f64, f64) {
        let omega = self.penalty();
        let ratio = self.dual_ratio();
        let lower = if ratio > 0.0 {
            let t = 1.0 / ratio;
            (t * (self.re_data_res() - eps.sqrt() * self.residual_sq().sqrt())).max(0.0)
        } else {
            0.0
        };
        (omega, (omega - lower).max(0.0))
    }

    /// Minimizes the penalized objective to relative duality gap `gap_tol`.
    fn solve_penalized(&mut self, lam: f64, gap_tol: f64) -> Result<()> {
        loop {
            self.sweep_all(lam)?;
            let (primal, gap) = self.penalized_gap(lam);
            self.last_gap = gap / primal.max(f64::MIN_POSITIVE);
            if gap <= gap_tol * primal {
                return Ok(());
            }
            let active: Vec<usize> = (0..self.num_groups()).filter(|&g| self.group_norm(g) > 0.0).collect();
            if active.is_empty() {
                continue;
            }
            for _ in 0..3 {
                self.sweep(&active, lam)?;
            }
            self.newton_active(&active, lam)?;
        }
    }

    /// Newton's method on the objective restricted to `active` groups, which
    /// is smooth while none of them is zero. Real and imaginary parts are
    /// separate variables. A step that carries a group through zero stops
    /// there and drops the group; other steps are backtracked on the true
    /// objective.
    fn newton_active(&mut self, active: &[usize], lam: f64) -> Result<()> {
        let mut active = active.to_vec();
        let mut rebuild = true;
        let mut members: Vec<usize> = Vec::new();
        let mut quad = DMatrix::<f64>::zeros(0, 0);
        for _ in 0..50 {
            if rebuild {
                members = active.iter().flat_map(|&g| self.group_start[g]..self.group_start[g + 1]).collect();
                if members.is_empty() || members.len() > MAX_NEWTON_MEMBERS {
                    break;
                }
                quad = self.realified_gram(&members);
                rebuild = false;
            }
            self.tick()?;
            let m = members.len();
            let obj = self.restricted_objective(&active, lam);
            let mut h = quad.clone();
            let mut grad = nalgebra::DVector::<f64>::zeros(2 * m);
            for (i, &mem) in members.iter().enumerate() {
                let c = -dotc(self.column(mem), &self.res[self.res_range(mem)]);
                grad[i] = c.re;
                grad[m + i] = c.im;
            }
            let mut offset = 0;
            for &g in &active {
                let size = self.group_start[g + 1] - self.group_start[g];
                let norm = self.group_norm(g);
                if norm == 0.0 {
                    return Ok(());
                }
                let coef = lam * self.weights[g] / norm;
                let idx: Vec<usize> = (offset..offset + size).chain(m + offset..m + offset + size).collect();
                let v: Vec<f64> = (0..size)
                    .map(|k| self.x[members[offset + k]].re)
                    .chain((0..size).map(|k| self.x[members[offset + k]].im))
                    .map(|t| t / norm)
                    .collect();
                for (a, &ia) in idx.iter().enumerate() {
                    grad[ia] += lam * self.weights[g] * v[a];
                    for (b, &ib) in idx.iter().enumerate() {
                        let eye = if a == b { 1.0 } else { 0.0 };
                        h[(ia, ib)] += coef * (eye - v[a] * v[b]);
                    }
                }
                offset += size;
            }
            let ridge = 1e-13 * (0..2 * m).map(|i| h[(i, i)]).fold(0.0, f64::max);
            for i in 0..2 * m {
                h[(i, i)] += ridge;
            }
            let Some(chol) = h.cholesky() else {
                break;
            };
            let d = -chol.solve(&grad);
            let decrement = -grad.dot(&d);
            if !(decrement > 1e-15 * obj) {
                break;
            }
            let delta: Vec<Complex64> = (0..m).map(|i| Complex64::new(d[i], d[m + i])).collect();
            let mut ad = vec![ZERO; self.res.len()];
            for (i, &mem) in members.iter().enumerate() {
                let r = self.res_range(mem);
                let col = self.column(mem);
                axpy_sub(&mut ad[r], col, -delta[i]);
            }
            let rr = self.residual_sq();
            let cross: f64 = ad.iter().zip(&self.res).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
            let aa: f64 = ad.iter().map(|v| v.norm_sqr()).sum();
            // objective after moving by t·delta with the groups in `drop` zeroed
            let trial = |e: &Self, t: f64, drop: Option<usize>| -> f64 {
                let mut pen = 0.0;
                let mut k = 0;
                let mut removed = vec![ZERO; 0];
                for (ai, &g) in active.iter().enumerate() {
                    let mut n2 = 0.0;
                    for mem in e.group_start[g]..e.group_start[g + 1] {
                        let v = e.x[mem] + delta[k] * t;
                        if drop == Some(ai) {
                            removed.push(v);
                        } else {
                            n2 += v.norm_sqr();
                        }
                        k += 1;
                    }
                    pen += e.weights[g] * n2.sqrt();
                }
                let base = 0.5 * (rr - 2.0 * t * cross + t * t * aa);
                match drop {
                    None => base + lam * pen,
                    Some(ai) => {
                        let g = active[ai];
                        let mut res: Vec<Complex64> = e.res.iter().zip(&ad).map(|(r, a)| r - a * t).collect();
                        for (k, mem) in (e.group_start[g]..e.group_start[g + 1]).enumerate() {
                            let r = e.res_range(mem);
                            let col = e.column(mem);
                            for (u, c) in res[r].iter_mut().zip(col) {
                                *u += c * removed[k];
                            }
                        }
                        0.5 * res.iter().map(|v| v.norm_sqr()).sum::<f64>() + lam * pen
                    }
                }
            };
            let mut step: Option<(f64, Option<usize>)> = None;
            if trial(self, 1.0, None) <= obj - 1e-4 * decrement {
                step = Some((1.0, None));
            } else {
                // earliest point where a group passes close to zero
                let mut crossing: Option<(f64, usize)> = None;
                let mut k = 0;
                for (ai, &g) in active.iter().enumerate() {
                    let size = self.group_start[g + 1] - self.group_start[g];
                    let xs = &self.x[self.group_start[g]..self.group_start[g + 1]];
                    let ds = &delta[k..k + size];
                    let xd: f64 = xs.iter().zip(ds).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
                    let dd: f64 = ds.iter().map(|v| v.norm_sqr()).sum();
                    let xx: f64 = xs.iter().map(|v| v.norm_sqr()).sum();
                    if dd > 0.0 && xd < 0.0 {
                        let t = -xd / dd;
                        let closest = xx - xd * xd / dd;
                        if t <= 1.0 && closest <= 0.01 * xx && crossing.is_none_or(|c| t < c.0) {
                            crossing = Some((t, ai));
                        }
                    }
                    k += size;
                }
                if let Some((t, ai)) = crossing {
                    if trial(self, t, Some(ai)) < obj {
                        step = Some((t, Some(ai)));
                    }
                }
                if step.is_none() {
                    let mut t = 0.5;
                    for _ in 0..40 {
                        if trial(self, t, None) <= obj - 1e-4 * t * decrement {
                            step = Some((t, None));
                            break;
                        }
                        t *= 0.5;
                    }
                }
            }
            let Some((t, drop)) = step else {
                break;
            };
            for (i, &mem) in members.iter().enumerate() {
                self.x[mem] += delta[i] * t;
            }
            for (r, a) in self.res.iter_mut().zip(&ad) {
                *r -= a * t;
            }
            if let Some(ai) = drop {
                let g = active.remove(ai);
                for mem in self.group_start[g]..self.group_start[g + 1] {
                    let v = self.x[mem];
                    if v != ZERO {
                        let r = self.res_range(mem);
                        let col = self.column(mem);
                        for (u, c) in self.res[r].iter_mut().zip(col) {
                            *u += c * v;
                        }
                        self.x[mem] = ZERO;
                    }
                }
                rebuild = true;
                continue;
            }
            if t == 1.0 && decrement < 1e-13 * obj {
                break;
            }
        }
        let x = std::mem::take(&mut self.x);
        self.set_x(x);
        Ok(())
    }

    fn restricted_objective(&self, active: &[usize], lam: f64) -> f64 {
        0.5 * self.residual_sq() + lam * active.iter().map(|&g| self.weights[g] * self.group_norm(g)).sum::<f64>()
    }

    /// Real `2m × 2m` form of the Gram matrix of `members`.
    fn realified_gram(&self, members: &[usize]) -> DMatrix<f64> {
        let m = members.len();
        let mut quad = DMatrix::<f64>::zeros(2 * m, 2 * m);
        for i in 0..m {
            for j in i..m {
                if self.member_sensor[members[i]] != self.member_sensor[members[j]] {
                    continue;
                }
                let v = dotc(self.column(members[i]), self.column(members[j]));
                for (a, b, w) in [(i, j, v), (j, i, v.conj())] {
                    quad[(a, b)] = w.re;
                    quad[(m + a, m + b)] = w.re;
                    quad[(a, m + b)] = -w.im;
                    quad[(m + a, b)] = w.im;
                }
            }
        }
        quad
    }
}

/// Solves the ε-constrained program with default options.
pub fn solve_constrained_group_lasso(p: &GroupSparseProblem, tol: f64) -> Result<GroupSparseSolution> {
    solve_constrained_with(p, &SolverOptions { tol, ..Default::default() }, None)
}

/// Solves the ε-constrained program, optionally warm-started from a
/// solution of a problem with the same column layout.
pub fn solve_constrained_with(
    p: &GroupSparseProblem,
    opts: &SolverOptions,
    warm: Option<&GroupSparseSolution>,
) -> Result<GroupSparseSolution> {
    p.validate()?;
    let eps = p.epsilon;
    let r2 = p.data.norm_squared();
    if r2 <= eps {
        return Ok(GroupSparseSolution::zeros(p));
    }
    let mut engine = Engine::for_problem(p, opts.max_iterations);
    let lam_max = engine.dual_ratio();
    if lam_max == 0.0 {
        return Err(Error::Infeasible { epsilon: eps, min_residual: r2 });
    }
    let mut u = (0.5 * lam_max).ln();
    if let Some(w) = warm {
        if w.y.len() == p.num_location_groups && (0..p.num_sensors()).all(|l| w.z.get(l).map(Vec::len) == Some(p.num_delay_columns(l))) {
            engine.set_x(flatten(p, &w.y, &w.z));
            if w.lambda.is_finite() && w.lambda > 0.0 {
                u = w.lambda.min(lam_max).ln();
            }
        }
    }
    let ln_eps = eps.ln();
    let mut hi = (lam_max.ln(), r2.ln() - ln_eps);
    let mut prev_hi: Option<(f64, f64)> = None;
    let mut lo: Option<(f64, f64)> = None;
    let mut last_side = 0i32;
    let mut inner_tol = 0.05 * opts.tol;
    let mut feasibility_checked = false;
    for _ in 0..400 {
        let lam = u.exp();
        engine.solve_penalized(lam, inner_tol)?;
        let rho = engine.residual_sq();
        let f = rho.ln() - ln_eps;
        if rho <= eps * (1.0 + 1e-6) {
            let (omega, gap) = engine.constrained_certificate(eps);
            let allowed = opts.tol * omega.max(1.0);
            if gap <= allowed {
                return Ok(extract(p, &engine, lam, omega, rho, gap));
            }
            engine.last_gap = gap / omega.max(1.0);
            let shortfall = (eps - rho).max(0.0) * 0.5 / lam;
            if shortfall <= 0.5 * allowed && inner_tol > 1e-15 {
                inner_tol = (inner_tol * 0.1).max(1e-15);
                continue;
            }
            // Illinois: a twice-retained endpoint has its value halved
            if last_side == -1 {
                hi.1 *= 0.5;
            }
            lo = Some((u, f));
            last_side = -1;
        } else {
            if u < hi.0 {
                prev_hi = Some(hi);
            }
            if last_side == 1 {
                if let Some(l) = lo.as_mut() {
                    l.1 *= 0.5;
                }
            }
            hi = (u, f);
            last_side = 1;
        }
        u = match lo {
            None => {
                if !feasibility_checked && lam < lam_max * 1e-9 {
                    feasibility_checked = true;
                    let min_residual = p.min_residual();
                    if min_residual >= eps {
                        return Err(Error::Infeasible { epsilon: eps, min_residual });
                    }
                }
                // extrapolate downward along the last two infeasible points
                let step = match prev_hi {
                    Some(ph) if ph.1 > hi.1 && ph.0 > hi.0 => {
                        let slope = (ph.1 - hi.1) / (ph.0 - hi.0);
                        (hi.1 / slope * 1.1).clamp(1.5f64.ln(), 100f64.ln())
                    }
                    _ => 2f64.ln(),
                };
                hi.0 - step
            }
            Some((ul, fl)) => {
                let (uh, fh) = hi;
                let width = uh - ul;
                if width < 1e-14 {
                    return Err(Error::NonConvergence { iterations: engine.iterations, gap: engine.last_gap });
                }
                let next = (ul * fh - uh * fl) / (fh - fl);
                if !next.is_finite() || next <= ul + 1e-3 * width || next >= uh - 1e-3 * width {
                    0.5 * (ul + uh)
                } else {
                    next
                }
            }
        };
    }
    Err(Error::NonConvergence { iterations: engine.iterations, gap: engine.last_gap })
}

fn flatten(p: &GroupSparseProblem, y: &[Vec<Complex64>], z: &[Vec<Complex64>]) -> Vec<Complex64> {
    let mut x: Vec<Complex64> = y.iter().flat_map(|g| g.iter().copied()).collect();
    for l in 0..p.num_sensors() {
        x.extend_from_slice(&z[l]);
    }
    x
}

fn extract(p: &GroupSparseProblem, e: &Engine, lam: f64, omega: f64, rho: f64, gap: f64) -> GroupSparseSolution {
    let l_count = p.num_sensors();
    let g_count = p.num_location_groups;
    let y = (0..g_count).map(|g| e.x[g * l_count..(g + 1) * l_count].to_vec()).collect();
    let mut off = g_count * l_count;
    let z = (0..l_count)
        .map(|l| {
            let k = p.num_delay_columns(l);
            let v = e.x[off..off + k].to_vec();
            off += k;
            v
        })
        .collect();
    GroupSparseSolution { y, z, objective: omega, residual_sq: rho, certificate_gap: gap, lambda: lam, iterations: e.iterations }
}

/// Objective `Σ_g w_g‖y_g‖ + Σ|z|` of a candidate solution.
pub fn objective(p: &GroupSparseProblem, y: &[Vec<Complex64>], z: &[Vec<Complex64>]) -> f64 {
    let loc: f64 = y
        .iter()
        .zip(&p.location_weights)
        .map(|(g, w)| w * g.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt())
        .sum();
    loc + z.iter().flatten().map(|v| v.norm()).sum::<f64>()
}

/// Suboptimality bound of a feasible `s`: its objective minus the dual value
/// of the residual scaled onto the dual-feasible set.
pub fn optimality_certificate(p: &GroupSparseProblem, s: &GroupSparseSolution) -> f64 {
    let mut engine = Engine::for_problem(p, 0);
    engine.set_x(flatten(p, &s.y, &s.z));
    engine.constrained_certificate(p.epsilon).1
}

/// Minimizes `λ‖x‖₁ + ‖r − Ax‖₂²` over complex `x`.
pub fn solve_penalized_lasso(a: &DMatrix<Complex64>, r: &[Complex64], lambda: f64) -> Result<Vec<Complex64>> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter("lambda must be positive".into()));
    }
    if a.nrows() != r.len() {
        return Err(Error::InvalidParameter("dictionary rows must match the data length".into()));
    }
    let groups = (0..a.ncols()).map(|c| (vec![(0, c)], 1.0)).collect();
    let mut engine = Engine::new(a.nrows(), vec![a.as_slice()], r, groups, DEFAULT_MAX_ITERATIONS);
    if r.iter().all(|v| *v == ZERO) {
        return Ok(vec![ZERO; a.ncols()]);
    }
    // λ‖x‖₁ + ‖res‖² is twice ½‖res‖² + (λ/2)‖x‖₁.
    engine.solve_penalized(lambda / 2.0, 1e-7)?;
    Ok(engine.x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DMatrix<Complex64> {
        DMatrix::from_fn(n, m, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = GroupSparseProblem {
            dictionaries: vec![random_matrix(&mut rng, 8, 4), random_matrix(&mut rng, 8, 5)],
            num_location_groups: 2,
            location_weights: vec![1.5, 2.0],
            data: DMatrix::from_element(8, 2, ZERO),
            epsilon: 0.0,
        };
        let s = solve_constrained_group_lasso(&p, 1e-5).unwrap();
        assert_eq!(s.objective, 0.0);
        assert!(s.y.iter().flatten().chain(s.z.iter().flatten()).all(|v| *v == ZERO));
    }

    #[test]
    fn loose_epsilon_gives_zero_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = random_matrix(&mut rng, 8, 2);
        let p = GroupSparseProblem {
            dictionaries: vec![random_matrix(&mut rng, 8, 4), random_matrix(&mut rng, 8, 5)],
            num_location_groups: 2,
            location_weights: vec![1.5, 2.0],
            epsilon: data.norm_squared() * 1.01,
            data,
        };
        let s = solve_constrained_group_lasso(&p, 1e-5).unwrap();
        assert_eq!(s.objective, 0.0);
        assert_eq!(optimality_certificate(&p, &s), 0.0);
    }

    #[test]
    fn single_column_ball_constraint() {
        // min |x| s.t. |β − x|² ≤ ε with a unit-norm column: x = (|β| − √ε)·β/|β|.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = random_matrix(&mut rng, 6, 1);
        a /= Complex64::from(a.norm());
        let beta = c(1.2, -0.7);
        let data = &a * beta;
        let eps = 0.3;
        let p = GroupSparseProblem {
            dictionaries: vec![a],
            num_location_groups: 0,
            location_weights: vec![],
            data,
            epsilon: eps,
        };
        let s = solve_constrained_group_lasso(&p, 1e-9).unwrap();
        let x = s.z[0][0];
        let expected = beta * ((beta.norm() - eps.sqrt()) / beta.norm());
        assert!((x - expected).norm() < 1e-6 * beta.norm(), "{x} vs {expected}");
        assert!(s.residual_sq <= eps * (1.0 + 1e-6));
    }

    #[test]
    fn weights_enter_objective_as_stated() {
        let y = vec![vec![c(3.0, 0.0), c(0.0, 4.0)], vec![c(1.0, 0.0), c(0.0, 0.0)]];
        let z = vec![vec![c(0.0, -2.0)], vec![]];
        let p = GroupSparseProblem {
            dictionaries: vec![DMatrix::from_element(2, 3, ZERO), DMatrix::from_element(2, 2, ZERO)],
            num_location_groups: 2,
            location_weights: vec![1.0 / 0.5, 1.0 / 0.25],
            data: DMatrix::from_element(2, 2, ZERO),
            epsilon: 0.0,
        };
        // ‖(3,4i)‖/0.5 + ‖(1,0)‖/0.25 + |−2i| = 10 + 4 + 2
        assert!((objective(&p, &y, &z) - 16.0).abs() < 1e-12);
    }

    fn random_problem(seed: u64) -> GroupSparseProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(6..=16);
        let l_count = rng.gen_range(1..=3);
        let g_count = rng.gen_range(1..=3);
        let dictionaries: Vec<_> = (0..l_count).map(|_| {
            let d = rng.gen_range(0..=2);
            random_matrix(&mut rng, n, g_count + d)
        }).collect();
        let mut data = DMatrix::from_element(n, l_count, ZERO);
        for l in 0..l_count {
            let x = DVector::from_fn(dictionaries[l].ncols(), |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            let col = &dictionaries[l] * x;
            data.set_column(l, &col);
        }
        data += random_matrix(&mut rng, n, l_count) * c(0.1, 0.0);
        let epsilon = data.norm_squared() * rng.gen_range(0.05..0.5);
        let location_weights = (0..g_count).map(|_| rng.gen_range(0.8..2.5)).collect();
        GroupSparseProblem { dictionaries, num_location_groups: g_count, location_weights, data, epsilon }
    }

    #[test]
    fn random_instances_certify() {
        for seed in 0..40 {
            let p = random_problem(seed);
            let s = solve_constrained_group_lasso(&p, 1e-6).unwrap();
            assert!(s.residual_sq <= p.epsilon * (1.0 + 1e-6));
            assert!(s.certificate_gap <= 1e-6 * s.objective.max(1.0));
            let recomputed = optimality_certificate(&p, &s);
            assert!((recomputed - s.certificate_gap).abs() <= 1e-9 * s.objective.max(1.0));
            assert!((objective(&p, &s.y, &s.z) - s.objective).abs() <= 1e-9 * s.objective);
        }
    }

    #[test]
    fn perturbation_increases_gap() {
        let p = random_problem(7);
        let s = solve_constrained_group_lasso(&p, 1e-8).unwrap();
        let mut worse = s.clone();
        // scale up, keeping feasibility: push y toward larger modulus
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for v in worse.y.iter_mut().flatten().chain(worse.z.iter_mut().flatten()) {
            *v += c(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
        }
        let gap = optimality_certificate(&p, &worse);
        let objective_worse = objective(&p, &worse.y, &worse.z);
        // Lower bounds are only meaningful for feasible points; compare the
        // objective excess, which the gap must dominate.
        assert!(gap > s.certificate_gap || objective_worse > s.objective);
        assert!(optimality_certificate(&p, &s) <= s.certificate_gap + 1e-12);
    }

    #[test]
    fn objective_is_monotone_across_sweeps() {
        let p = random_problem(11);
        let mut e = Engine::for_problem(&p, 10_000);
        let lam = 0.3 * e.dual_ratio();
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            e.sweep_all(lam).unwrap();
            let obj = 0.5 * e.residual_sq() + lam * e.penalty();
            assert!(obj <= last * (1.0 + 1e-14) + 1e-300);
            last = obj;
        }
    }

    #[test]
    fn lasso_zero_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_matrix(&mut rng, 10, 5);
        let x = solve_penalized_lasso(&a, &[ZERO; 10], 0.5).unwrap();
        assert!(x.iter().all(|v| *v == ZERO));
    }

    #[test]
    fn lasso_orthonormal_is_soft_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_matrix(&mut rng, 12, 5).qr().q();
        let r: Vec<Complex64> = (0..12).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let lambda = 0.6;
        let x = solve_penalized_lasso(&q, &r, lambda).unwrap();
        for k in 0..5 {
            let b = dotc(q.column(k).as_slice(), &r);
            let expect = if b.norm() <= lambda / 2.0 { ZERO } else { b * (1.0 - lambda / 2.0 / b.norm()) };
            assert!((x[k] - expect).norm() < 1e-7, "{k}: {} vs {}", x[k], expect);
        }
    }

    #[test]
    fn lasso_kill_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_matrix(&mut rng, 10, 7);
        let r: Vec<Complex64> = (0..10).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let m = (0..7).map(|k| dotc(a.column(k).as_slice(), &r).norm()).fold(0.0, f64::max);
        for lambda in [2.0 * m * (1.0 + 1e-12), 3.0 * m] {
            let x = solve_penalized_lasso(&a, &r, lambda).unwrap();
            assert!(x.iter().all(|v| *v == ZERO));
        }
        let x = solve_penalized_lasso(&a, &r, 1.9 * m).unwrap();
        assert!(x.iter().any(|v| *v != ZERO));
    }

    #[test]
    fn infeasible_bound_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = GroupSparseProblem {
            dictionaries: vec![random_matrix(&mut rng, 10, 2)],
            num_location_groups: 1,
            location_weights: vec![1.0],
            data: random_matrix(&mut rng, 10, 1),
            epsilon: 1e-6,
        };
        assert!(matches!(solve_constrained_group_lasso(&p, 1e-5), Err(Error::Infeasible { .. })));
    }
}
