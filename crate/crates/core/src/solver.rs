//! Semi-Lagrangian dynamic programming for the pinned value function, the
//! critical value, sub/supersolution residuals, admissible pin values,
//! maximality and the Aubry indicator.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::action::{cycle_battery_member, subsolution_estimate_margin, ActionError};
use crate::coupling::{CouplingError, CouplingMatrix, ProbabilityVector};
use crate::grid::{GridError, Stencil, TorusGrid, VelocityGrid};
use crate::hamiltonian::{
    legendre_transform, speed_bound, HamiltonianError, HamiltonianSpec, LagrangianTable,
    ModeHamiltonian, SpeedBound,
};
use crate::paths::{path_rng, ControlPolicy, FeedbackTable, SamplingConfig};
use crate::stopping::StoppingRule;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error(transparent)]
    Hamiltonian(#[from] HamiltonianError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Action(#[from] Box<ActionError>),
    #[error("α = {alpha} is below the discrete critical value: values fell to {min_value} after {iterations} iterations")]
    Diverged {
        alpha: f64,
        iterations: usize,
        min_value: f64,
    },
    #[error("no convergence after {iterations} iterations (last change {change})")]
    NotConverged { iterations: usize, change: f64 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl From<ActionError> for SolverError {
    fn from(e: ActionError) -> Self {
        SolverError::Action(Box::new(e))
    }
}

/// A grid function `𝕋^N → ℝ^M`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VectorField {
    grid: TorusGrid,
    m: usize,
    /// `values[mode * nodes + node]`.
    values: Vec<f64>,
}

impl VectorField {
    pub fn new(grid: TorusGrid, m: usize, values: Vec<f64>) -> Result<Self, SolverError> {
        if values.len() != m * grid.len() {
            return Err(GridError::FieldLength {
                expected: m * grid.len(),
                got: values.len(),
            }
            .into());
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::Invalid("field has non-finite entries".into()));
        }
        Ok(Self { grid, m, values })
    }

    /// `u_i(x) = c_i` everywhere.
    pub fn constant(grid: TorusGrid, c: &[f64]) -> Self {
        let values = c
            .iter()
            .flat_map(|v| std::iter::repeat_n(*v, grid.len()))
            .collect();
        Self {
            grid,
            m: c.len(),
            values,
        }
    }

    pub fn from_fn(grid: TorusGrid, m: usize, f: impl Fn(usize, &[f64]) -> f64) -> Self {
        let values = (0..m)
            .flat_map(|i| (0..grid.len()).map(move |node| (i, node)))
            .map(|(i, node)| f(i, &grid.coords(node)))
            .collect();
        Self { grid, m, values }
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, mode: usize, node: usize) -> f64 {
        self.values[mode * self.grid.len() + node]
    }

    pub fn set(&mut self, mode: usize, node: usize, value: f64) {
        let n = self.grid.len();
        self.values[mode * n + node] = value;
    }

    pub fn component(&self, mode: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[mode * n..(mode + 1) * n]
    }

    /// `(u_1(x), …, u_M(x))` at a node.
    pub fn at(&self, node: usize) -> Vec<f64> {
        (0..self.m).map(|i| self.get(i, node)).collect()
    }

    pub fn interpolate(&self, mode: usize, x: &[f64]) -> f64 {
        self.grid.interpolate(self.component(mode), x)
    }

    pub fn oscillation(&self) -> f64 {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
        hi - lo
    }

    /// `max_x (max_i u_i(x) − min_i u_i(x))`.
    pub fn mode_spread(&self) -> f64 {
        (0..self.grid.len())
            .map(|node| {
                let v = self.at(node);
                v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    - v.iter().copied().fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &VectorField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Adds `c_i` to component `i`.
    pub fn shifted(&self, c: &[f64]) -> VectorField {
        let n = self.grid.len();
        let mut out = self.clone();
        for (k, v) in out.values.iter_mut().enumerate() {
            *v += c[k / n];
        }
        out
    }
}

/// Discretization parameters of the dynamic programming iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DppOptions {
    pub dt: f64,
    /// Stop when the sup-norm change of one sweep drops below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DppOptions {
    fn default() -> Self {
        Self {
            dt: 0.005,
            tol: 1e-10,
            max_iter: 200_000,
        }
    }
}

/// Velocity spacing tied to the spatial resolution; coarser in 2-D to keep
/// the velocity box small.
pub fn default_velocity_points(grid: &TorusGrid, q_max: f64) -> usize {
    let spacing = match grid.dim() {
        1 => 10.0 * grid.spacing(),
        _ => (10.0 * grid.spacing()).max(0.4),
    };
    2 * (q_max / spacing).ceil() as usize + 1
}

/// Lagrangian table with a velocity box large enough for subsolutions at
/// levels up to `alpha_top`, allowing a spread `u_osc` between components.
pub fn lagrangian_for(
    spec: &HamiltonianSpec,
    coupling: &CouplingMatrix,
    grid: &TorusGrid,
    alpha_top: f64,
    u_osc: f64,
    velocity_points: Option<usize>,
) -> Result<(LagrangianTable, SpeedBound), SolverError> {
    let top = alpha_top.max(max_zero_momentum(spec));
    let bound = speed_bound(spec, coupling, top, u_osc)?;
    let n_q = velocity_points.unwrap_or_else(|| default_velocity_points(grid, bound.q_max));
    let table = legendre_transform(spec, grid, bound.q_max, n_q)?;
    Ok((table, bound))
}

fn max_zero_momentum(spec: &HamiltonianSpec) -> f64 {
    (0..spec.m())
        .map(|i| spec.zero_momentum_range(i).1)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Precomputed transition data of the scheme for one table and time step.
pub struct Dpp<'a> {
    table: &'a LagrangianTable,
    coupling: &'a CouplingMatrix,
    dt: f64,
    m: usize,
    nodes: usize,
    nv: usize,
    /// `e^{-ΔtΛ}` row-major.
    transition: Vec<f64>,
    /// Interpolation stencil of `x ⊕ Δt q_k`, at `[node * nv + k]`.
    dest: Vec<Stencil>,
    /// Velocity indices by increasing `|q|`, then lexicographic.
    order: Vec<usize>,
    /// Index of `−q_k`.
    mirror: Vec<usize>,
}

/// Argmin velocities and stop decisions of a converged sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedPolicy {
    pub feedback: FeedbackTable,
    /// Modes that stop at the pin.
    pub stop_modes: Vec<usize>,
    /// Number of (mode, node) pairs whose argmin lies on the velocity box.
    pub saturated: usize,
}

impl ExtractedPolicy {
    pub fn control(&self) -> ControlPolicy {
        ControlPolicy::Feedback {
            table: self.feedback.clone(),
        }
    }

    /// Stop on reaching `y` in a stopping mode; `radius` is usually one
    /// grid spacing.
    pub fn stopping_rule(&self, y: &[f64], radius: f64, cap: f64) -> StoppingRule {
        StoppingRule::Arrival {
            target: y.to_vec(),
            radius,
            modes: self.stop_modes.clone(),
            cap,
        }
    }
}

struct Sweep {
    values: Vec<f64>,
    argmin: Vec<usize>,
}

impl<'a> Dpp<'a> {
    pub fn new(table: &'a LagrangianTable, coupling: &'a CouplingMatrix, dt: f64) -> Result<Self, SolverError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SolverError::Invalid(format!("time step must be positive, got {dt}")));
        }
        if coupling.m() != table.m() {
            return Err(SolverError::Invalid(format!(
                "coupling has {} modes, table has {}",
                coupling.m(),
                table.m()
            )));
        }
        let grid = *table.grid();
        let vel = table.velocities();
        let nv = vel.len();
        let nodes = grid.len();
        let p = coupling.semigroup(dt)?;
        let m = coupling.m();
        let transition = (0..m * m).map(|k| p.get(k / m, k % m)).collect();
        let dest = (0..nodes * nv)
            .into_par_iter()
            .map(|idx| {
                let (node, k) = (idx / nv, idx % nv);
                let x = grid.coords(node);
                let q = vel.velocity(k);
                let y: Vec<f64> = x.iter().zip(&q).map(|(a, b)| a + dt * b).collect();
                grid.stencil(&y)
            })
            .collect();
        Ok(Self {
            table,
            coupling,
            dt,
            m,
            nodes,
            nv,
            transition,
            dest,
            order: vel.tie_break_order(),
            mirror: (0..nv).map(|k| vel.mirror(k)).collect(),
        })
    }

    pub fn table(&self) -> &LagrangianTable {
        self.table
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `z_i = Σ_j (e^{-ΔtΛ})_ij v_j`, nodewise.
    fn mix(&self, v: &[f64], scale: f64) -> Vec<f64> {
        let n = self.nodes;
        let mut z = vec![0.0; v.len()];
        for i in 0..self.m {
            for j in 0..self.m {
                let w = scale * self.transition[i * self.m + j];
                if w == 0.0 {
                    continue;
                }
                for node in 0..n {
                    z[i * n + node] += w * v[j * n + node];
                }
            }
        }
        z
    }

    /// One Jacobi sweep of `min_k [Δt (L_i(x, −q_k) + α) + z_i(x ⊕ Δt q_k)]`.
    fn sweep(&self, z: &[f64], alpha: f64) -> Sweep {
        let n = self.nodes;
        let z_min: Vec<f64> = (0..self.m)
            .map(|i| z[i * n..(i + 1) * n].iter().copied().fold(f64::INFINITY, f64::min))
            .collect();
        let out: Vec<(f64, usize)> = (0..self.m * n)
            .into_par_iter()
            .with_min_len(64)
            .map(|idx| {
                let (i, node) = (idx / n, idx % n);
                let zi = &z[i * n..(i + 1) * n];
                let mut best = f64::INFINITY;
                let mut arg = self.order[0];
                for &k in &self.order {
                    let cost = self.dt * (self.table.node_value(i, node, self.mirror[k]) + alpha);
                    if cost + z_min[i] >= best {
                        continue;
                    }
                    let c = cost + self.dest[node * self.nv + k].apply(|s| zi[s]);
                    if c < best {
                        best = c;
                        arg = k;
                    }
                }
                (best, arg)
            })
            .collect();
        let (values, argmin) = out.into_iter().unzip();
        Sweep { values, argmin }
    }

    /// Upper initialization `max_j b_j + K · ℓ¹-distance to the pin`, with `K`
    /// chosen so that moving toward the pin at some grid speed `s` (with
    /// `Δt s ≤ h`) costs at most `K s`. This makes the start a discrete
    /// supersolution, so the iteration decreases monotonically.
    fn upper_start(&self, pin: usize, b: &[f64], alpha: f64) -> Result<Vec<f64>, SolverError> {
        let grid = self.table.grid();
        let vel = self.table.velocities();
        let h = grid.spacing();
        let n_q = vel.points_per_axis();
        let half = n_q / 2;
        let dim = grid.dim();
        // velocity indices ±s e_a for admissible speeds s
        let mut moves: Vec<(usize, i64, usize, f64)> = Vec::new();
        for a in 0..dim {
            for step in 1..=half {
                let s = vel.velocity(vel.zero_index() + step * if a == 0 { 1 } else { n_q })[a];
                if self.dt * s > h * (1.0 + 1e-12) {
                    break;
                }
                for sign in [-1i64, 1] {
                    let k = if sign > 0 {
                        vel.zero_index() + step * if a == 0 { 1 } else { n_q }
                    } else {
                        vel.zero_index() - step * if a == 0 { 1 } else { n_q }
                    };
                    moves.push((a, sign, k, s));
                }
            }
        }
        if moves.is_empty() {
            return Err(SolverError::Invalid(format!(
                "time step {} moves the slowest grid speed {} by more than one cell",
                self.dt,
                vel.spacing()
            )));
        }
        let n = grid.points_per_axis() as i64;
        let ym = grid.multi(pin);
        // signed index offset from node to pin per axis, in (-n/2, n/2]
        let offset = |node: usize, a: usize| -> i64 {
            let xm = grid.multi(node);
            let mut d = (ym[a] as i64 - xm[a] as i64).rem_euclid(n);
            if d > n / 2 {
                d -= n;
            }
            d
        };
        let mut k_max: f64 = 0.0;
        for i in 0..self.m {
            for node in 0..self.nodes {
                if node == pin {
                    continue;
                }
                let mut best = f64::INFINITY;
                for &(a, sign, k, s) in &moves {
                    let d = offset(node, a);
                    let toward = d != 0 && (d.signum() == sign || d.abs() * 2 == n);
                    if !toward {
                        continue;
                    }
                    let cost = (self.table.node_value(i, node, self.mirror[k]) + alpha).max(0.0);
                    best = best.min(cost / s);
                }
                k_max = k_max.max(best);
            }
        }
        let top = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut v0 = vec![0.0; self.m * self.nodes];
        for node in 0..self.nodes {
            let dist: f64 = (0..dim).map(|a| offset(node, a).abs() as f64 * h).sum();
            for i in 0..self.m {
                v0[i * self.nodes + node] = top + k_max * dist;
            }
        }
        Ok(v0)
    }

    /// Value iteration with optional stopping at `pin` for payoff `b`.
    pub fn pinned(&self, pin: usize, b: &[f64], alpha: f64, opts: &DppOptions) -> Result<PinnedSolve, SolverError> {
        let grid = *self.table.grid();
        if pin >= self.nodes {
            return Err(SolverError::Invalid(format!("pin node {pin} outside the grid")));
        }
        if b.len() != self.m || b.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::Invalid(format!("pin vector must have {} finite entries", self.m)));
        }
        // solve with b shifted so that b_0 = 0; the shift is added back exactly
        let base = b[0];
        let bs: Vec<f64> = b.iter().map(|v| v - base).collect();
        let osc_b = bs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - bs.iter().copied().fold(f64::INFINITY, f64::min);
        let floor = bs.iter().copied().fold(f64::INFINITY, f64::min)
            - 10.0 * (self.table.q_max() * (grid.dim() as f64).sqrt() + 1.0 + osc_b);
        let mut v = self.upper_start(pin, &bs, alpha)?;
        let mut history: Vec<f64> = Vec::new();
        let mut monotone = true;
        let n = self.nodes;
        let mut last: Option<Sweep> = None;
        let mut stop = vec![false; self.m];
        let mut change = f64::INFINITY;
        let mut iterations = 0;
        while iterations < opts.max_iter {
            iterations += 1;
            let z = self.mix(&v, 1.0);
            let mut s = self.sweep(&z, alpha);
            for i in 0..self.m {
                let idx = i * n + pin;
                stop[i] = bs[i] <= s.values[idx];
                if stop[i] {
                    s.values[idx] = bs[i];
                }
            }
            change = 0.0;
            let mut min_value = f64::INFINITY;
            for (new, old) in s.values.iter().zip(&v) {
                change = f64::max(change, (new - old).abs());
                if new - old > 1e-12 * (1.0 + old.abs()) {
                    monotone = false;
                }
                min_value = min_value.min(*new);
            }
            v = std::mem::take(&mut s.values);
            last = Some(s);
            if change < opts.tol {
                break;
            }
            history.push(change);
            let k = history.len();
            let stalled = k >= 4000 && change >= 0.999 * history[k - 2001];
            if min_value < floor || stalled || !min_value.is_finite() {
                return Err(SolverError::Diverged {
                    alpha,
                    iterations,
                    min_value,
                });
            }
        }
        if change >= opts.tol {
            return Err(SolverError::NotConverged { iterations, change });
        }
        let sweep = last.expect("at least one sweep");
        let vel = self.table.velocities();
        let half = vel.points_per_axis() / 2;
        let saturated = sweep
            .argmin
            .iter()
            .filter(|&&k| {
                let mk = vel.multi(k);
                (0..grid.dim()).any(|a| mk[a] == 0 || mk[a] == 2 * half)
            })
            .count();
        let feedback = FeedbackTable::stationary(
            grid,
            self.m,
            sweep.argmin.iter().map(|&k| vel.velocity(k)).collect(),
        )
        .expect("table size");
        let values: Vec<f64> = v.iter().map(|x| x + base).collect();
        let field = VectorField::new(grid, self.m, values)?;
        let stop_modes: Vec<usize> = (0..self.m).filter(|i| stop[*i]).collect();
        let report = SolveReport {
            iterations,
            final_change: change,
            alpha,
            gamma: None,
            pin_node: pin,
            pin_y: grid.coords(pin),
            b: b.to_vec(),
            pin_values: field.at(pin),
            stop_modes: stop_modes.clone(),
            dt: self.dt,
            tol: opts.tol,
            q_max: self.table.q_max(),
            velocity_points: vel.points_per_axis(),
            monotone,
            saturated,
            residual: None,
        };
        Ok(PinnedSolve {
            field,
            report,
            policy: ExtractedPolicy {
                feedback,
                stop_modes,
                saturated,
            },
        })
    }

    /// Fixed point of `w ← min_q [Δt L(x, −q) + (1 − εΔt) e^{-ΔtΛ} w(x ⊕ Δt q)]`
    /// started from `init`; stops once the remaining error is below `tol_w`.
    pub fn discounted(&self, eps: f64, init: Vec<f64>, tol_w: f64, max_iter: usize) -> Result<(Vec<f64>, usize), SolverError> {
        let beta = 1.0 - eps * self.dt;
        if !(beta > 0.0 && beta < 1.0) {
            return Err(SolverError::Invalid(format!("discount {eps} incompatible with Δt {}", self.dt)));
        }
        let stop = tol_w * (1.0 - beta) / beta;
        let mut w = init;
        for it in 1..=max_iter {
            let z = self.mix(&w, beta);
            let s = self.sweep(&z, 0.0);
            let change = s
                .values
                .iter()
                .zip(&w)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            w = s.values;
            if change <= stop {
                return Ok((w, it));
            }
        }
        Err(SolverError::NotConverged {
            iterations: max_iter,
            change: f64::NAN,
        })
    }

    /// `max_{i,x} H_i(x, 0) = max_{i,x} (−min_q L_i(x, q))` from the table.
    pub fn max_zero_momentum(&self) -> f64 {
        let mut top = f64::NEG_INFINITY;
        for i in 0..self.m {
            for node in 0..self.nodes {
                let min_l = (0..self.nv)
                    .map(|k| self.table.node_value(i, node, k))
                    .fold(f64::INFINITY, f64::min);
                top = top.max(-min_l);
            }
        }
        top
    }

    /// `min_{i,x,p} H_i(x, p) = min_{i,x} (−L_i(x, 0))` from the table.
    pub fn min_hamiltonian(&self) -> f64 {
        let z = self.table.velocities().zero_index();
        (0..self.m)
            .flat_map(|i| (0..self.nodes).map(move |node| (i, node)))
            .map(|(i, node)| -self.table.node_value(i, node, z))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn coupling(&self) -> &CouplingMatrix {
        self.coupling
    }
}

/// Summary of one pinned solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_change: f64,
    pub alpha: f64,
    pub gamma: Option<f64>,
    pub pin_node: usize,
    pub pin_y: Vec<f64>,
    pub b: Vec<f64>,
    /// `v(y)`.
    pub pin_values: Vec<f64>,
    pub stop_modes: Vec<usize>,
    pub dt: f64,
    pub tol: f64,
    pub q_max: f64,
    pub velocity_points: usize,
    /// Whether every sweep decreased every value.
    pub monotone: bool,
    pub saturated: usize,
    pub residual: Option<ResidualSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualSummary {
    pub sub_max: f64,
    pub super_min: f64,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PinnedSolve {
    pub field: VectorField,
    pub report: SolveReport,
    pub policy: ExtractedPolicy,
}

/// Pinned value function: value iteration of the discrete dynamic
/// programming principle from above.
pub fn pinned_value(
    table: &LagrangianTable,
    coupling: &CouplingMatrix,
    y: &[f64],
    b: &[f64],
    alpha: f64,
    opts: &DppOptions,
) -> Result<PinnedSolve, SolverError> {
    let grid = table.grid();
    grid.check_point(y)?;
    let pin = grid.nearest(y);
    let coords = grid.coords(pin);
    if crate::grid::torus_distance(&coords, y) > 1e-9 {
        return Err(SolverError::Invalid(format!("pin {y:?} is not a grid node")));
    }
    Dpp::new(table, coupling, opts.dt)?.pinned(pin, b, alpha, opts)
}

/// Parameters of the critical-value estimators.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaOptions {
    pub epsilons: Vec<f64>,
    /// Bisection stops once the bracket is narrower than twice this.
    pub alpha_tol: f64,
    pub dpp: DppOptions,
}

impl Default for GammaOptions {
    fn default() -> Self {
        Self {
            epsilons: vec![0.1, 0.05, 0.025],
            alpha_tol: 0.0025,
            dpp: DppOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaReport {
    /// Bisection midpoint.
    pub gamma: f64,
    /// Smallest level at which the pinned solve converged.
    pub gamma_upper: f64,
    pub gamma_lower: f64,
    /// Discounted estimate extrapolated to zero discount.
    pub gamma_discounted: f64,
    /// `(ε, −ε·mean w_ε)`.
    pub discounted_by_eps: Vec<(f64, f64)>,
    pub bisection_steps: usize,
    /// `5 (h + Δt)`.
    pub allowance: f64,
    pub agree: bool,
}

/// Least-squares line through `(ε, γ_ε)` evaluated at `ε = 0`.
fn extrapolate(points: &[(f64, f64)]) -> f64 {
    if points.len() == 1 {
        return points[0].1;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    my - sxy / sxx * mx
}

/// Critical value by the discounted approximation and by bisection on the
/// boundedness of the pinned solve at node 0; both are reported.
pub fn critical_value(
    table: &LagrangianTable,
    coupling: &CouplingMatrix,
    opts: &GammaOptions,
) -> Result<GammaReport, SolverError> {
    if opts.epsilons.is_empty() || opts.epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(SolverError::Invalid("discounts must be positive".into()));
    }
    let dpp = Dpp::new(table, coupling, opts.dpp.dt)?;
    let m = coupling.m();
    let nodes = table.grid().len();

    // discounted estimator, warm-started across decreasing discounts
    let mut eps_sorted = opts.epsilons.clone();
    eps_sorted.sort_by(|a, b| b.total_cmp(a));
    let hi = dpp.max_zero_momentum();
    let mut prev: Option<(f64, f64, Vec<f64>)> = None;
    let mut by_eps = Vec::new();
    for &eps in &eps_sorted {
        let init = match &prev {
            None => vec![-hi / eps; m * nodes],
            Some((pe, pg, w)) => w.iter().map(|x| x + pg / pe - pg / eps).collect(),
        };
        let tol_w = 1e-4 / eps;
        let cap = (60.0 / (eps * opts.dpp.dt)) as usize + 1000;
        let (w, _) = dpp.discounted(eps, init, tol_w, cap)?;
        let g = -eps * w.iter().sum::<f64>() / w.len() as f64;
        by_eps.push((eps, g));
        prev = Some((eps, g, w));
    }
    let gamma_discounted = extrapolate(&by_eps);

    // bisection on boundedness
    let mut lo = dpp.min_hamiltonian() - 1.0;
    let mut up = hi;
    let b = vec![0.0; m];
    let mut steps = 0;
    while up - lo > 2.0 * opts.alpha_tol {
        let mid = 0.5 * (lo + up);
        steps += 1;
        match dpp.pinned(0, &b, mid, &opts.dpp) {
            Ok(_) => up = mid,
            Err(SolverError::Diverged { .. }) | Err(SolverError::NotConverged { .. }) => lo = mid,
            Err(e) => return Err(e),
        }
    }
    let gamma = 0.5 * (lo + up);
    let allowance = 5.0 * (table.grid().spacing() + opts.dpp.dt);
    Ok(GammaReport {
        gamma,
        gamma_upper: up,
        gamma_lower: lo,
        gamma_discounted,
        discounted_by_eps: by_eps,
        bisection_steps: steps,
        allowance,
        agree: (gamma - gamma_discounted).abs() <= allowance,
    })
}

/// Residual tolerance `C_H (h + Δt)`, with `C_H` the Lipschitz constant of the
/// Hamiltonians over momenta up to `ℓ_α + 1`.
pub fn residual_tolerance(
    spec: &HamiltonianSpec,
    coupling: &CouplingMatrix,
    grid: &TorusGrid,
    alpha: f64,
    u_spread: f64,
    dt: f64,
) -> Result<f64, SolverError> {
    let bound = speed_bound(spec, coupling, alpha.max(max_zero_momentum(spec)), u_spread)?;
    Ok(spec.local_lipschitz(bound.ell + 1.0) * (grid.spacing() + dt))
}

/// One-sided differences `(D⁻, D⁺)` of component `i` at `node` along each axis.
fn one_sided(u: &VectorField, i: usize, node: usize) -> ([f64; 2], [f64; 2]) {
    let g = u.grid();
    let h = g.spacing();
    let c = u.get(i, node);
    let mut back = [0.0; 2];
    let mut fwd = [0.0; 2];
    for a in 0..g.dim() {
        back[a] = (c - u.get(i, g.neighbor(node, a, -1))) / h;
        fwd[a] = (u.get(i, g.neighbor(node, a, 1)) - c) / h;
    }
    (back, fwd)
}

/// Per-node, per-mode residual field with its extreme entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualField {
    pub field: VectorField,
    pub extreme: f64,
    pub node: usize,
    pub mode: usize,
}

fn residual_field(
    u: &VectorField,
    coupling: &CouplingMatrix,
    alpha: f64,
    take_max: bool,
    f: impl Fn(usize, &[f64], [f64; 2], [f64; 2]) -> Result<f64, SolverError> + Sync,
) -> Result<ResidualField, SolverError> {
    let g = *u.grid();
    let n = g.len();
    let values: Vec<f64> = (0..u.m() * n)
        .into_par_iter()
        .map(|idx| {
            let (i, node) = (idx / n, idx % n);
            let (back, fwd) = one_sided(u, i, node);
            let x = g.coords(node);
            Ok(f(i, &x, back, fwd)? + coupling.row_dot(i, &u.at(node)) - alpha)
        })
        .collect::<Result<_, SolverError>>()?;
    let (mut best, mut arg) = (if take_max { f64::NEG_INFINITY } else { f64::INFINITY }, 0);
    for (k, v) in values.iter().enumerate() {
        if (take_max && *v > best) || (!take_max && *v < best) {
            best = *v;
            arg = k;
        }
    }
    Ok(ResidualField {
        field: VectorField::new(g, u.m(), values)?,
        extreme: best,
        node: arg % n,
        mode: arg / n,
    })
}

/// `max_p H_i(x, p) + Λ^i·u(x) − α` over the `2^N` one-sided difference
/// vertices at every node.
pub fn subsolution_residual(
    u: &VectorField,
    spec: &HamiltonianSpec,
    coupling: &CouplingMatrix,
    alpha: f64,
) -> Result<ResidualField, SolverError> {
    check_compatible(u, spec, coupling)?;
    let dim = u.grid().dim();
    residual_field(u, coupling, alpha, true, |i, x, back, fwd| {
        let mut best = f64::NEG_INFINITY;
        for corner in 0..(1usize << dim) {
            let p: Vec<f64> = (0..dim)
                .map(|a| if (corner >> a) & 1 == 1 { fwd[a] } else { back[a] })
                .collect();
            best = best.max(spec.eval(i, x, &p)?);
        }
        Ok(best)
    })
}

/// Minimum of a convex function over a box, by coordinate-wise ternary search.
fn convex_min_on_box(f: &dyn Fn(&[f64]) -> f64, lo: &[f64], hi: &[f64]) -> f64 {
    let dim = lo.len();
    let mut p: Vec<f64> = (0..dim).map(|a| 0.0f64.clamp(lo[a], hi[a])).collect();
    let sweeps = if dim == 1 { 1 } else { 12 };
    for _ in 0..sweeps {
        for a in 0..dim {
            let (mut l, mut r) = (lo[a], hi[a]);
            for _ in 0..80 {
                let m1 = l + (r - l) / 3.0;
                let m2 = r - (r - l) / 3.0;
                p[a] = m1;
                let f1 = f(&p);
                p[a] = m2;
                let f2 = f(&p);
                if f1 <= f2 {
                    r = m2;
                } else {
                    l = m1;
                }
            }
            p[a] = 0.5 * (l + r);
        }
    }
    f(&p)
}

/// Supersolution residual: along axes where `D⁻ ≤ D⁺` (a convex kink or
/// smooth point) the Hamiltonian is minimized over `[D⁻, D⁺]`; along axes
/// with `D⁻ > D⁺` (a concave kink, where no test function touches from
/// below) the larger endpoint value is used.
pub fn supersolution_residual(
    u: &VectorField,
    spec: &HamiltonianSpec,
    coupling: &CouplingMatrix,
    alpha: f64,
) -> Result<ResidualField, SolverError> {
    check_compatible(u, spec, coupling)?;
    let dim = u.grid().dim();
    residual_field(u, coupling, alpha, false, |i, x, back, fwd| {
        let concave: Vec<usize> = (0..dim).filter(|&a| back[a] > fwd[a]).collect();
        let mut best = f64::NEG_INFINITY;
        for corner in 0..(1usize << concave.len()) {
            let mut lo = vec![0.0; dim];
            let mut hi = vec![0.0; dim];
            for a in 0..dim {
                if let Some(pos) = concave.iter().position(|&c| c == a) {
                    let v = if (corner >> pos) & 1 == 1 { fwd[a] } else { back[a] };
                    lo[a] = v;
                    hi[a] = v;
                } else {
                    lo[a] = back[a];
                    hi[a] = fwd[a];
                }
            }
            let value = match spec.mode(i) {
                ModeHamiltonian::Quadratic { potential } => {
                    let p2: f64 = (0..dim).map(|a| 0.0f64.clamp(lo[a], hi[a]).powi(2)).sum();
                    0.5 * p2 + potential.value(x)
                }
                ModeHamiltonian::Tabulated(_) => {
                    let f = |p: &[f64]| spec.eval(i, x, p).unwrap_or(f64::INFINITY);
                    convex_min_on_box(&f, &lo, &hi)
                }
            };
            best = best.max(value);
        }
        Ok(best)
    })
}

fn check_compatible(u: &VectorField, spec: &HamiltonianSpec, coupling: &CouplingMatrix) -> Result<(), SolverError> {
    if u.m() != spec.m() || u.m() != coupling.m() || u.grid().dim() != spec.dim() {
        return Err(SolverError::Invalid(format!(
            "field has {} modes in dimension {}, system has {} modes in dimension {}",
            u.m(),
            u.grid().dim(),
            spec.m(),
            spec.dim()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsolutionVerdict {
    pub pass: bool,
    pub tol: f64,
    pub max_residual: f64,
    pub worst_node: usize,
    pub worst_mode: usize,
    #[serde(skip)]
    pub residual: VectorField,
}

/// Discrete Clarke-gradient subsolution test at tolerance `tol`.
pub fn subsolution_verify(
    u: &VectorField,
    spec: &HamiltonianSpec,
    coupling: &CouplingMatrix,
    alpha: f64,
    tol: f64,
) -> Result<SubsolutionVerdict, SolverError> {
    let r = subsolution_residual(u, spec, coupling, alpha)?;
    Ok(SubsolutionVerdict {
        pass: r.extreme <= tol,
        tol,
        max_residual: r.extreme,
        worst_node: r.node,
        worst_mode: r.mode,
        residual: r.field,
    })
}

/// Monte Carlo cycle-inequality evidence for admissibility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct EvidenceConfig {
    pub trials: usize,
    pub samples: usize,
    pub seed: u64,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleEvidence {
    /// Smallest `E_i[∫ L + α ds − b_i + b_{ω(τ)}]` over the trials.
    pub min_margin: f64,
    pub stderr: f64,
    pub worst: String,
    pub trials: usize,
    /// Whether every trial is at least `−3·stderr`.
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibleVerdict {
    pub admissible: bool,
    /// `max_i |v_i(y) − b_i|`.
    pub gap: f64,
    pub threshold: f64,
    pub pin_values: Vec<f64>,
    pub evidence: Option<CycleEvidence>,
}

/// Primary test: `b` is admissible iff the pinned solve returns `v(y) = b`
/// (within `10·tol`). Optionally backed by sampled τ-cycles at `y`.
pub fn admissible_check(
    table: &LagrangianTable,
    coupling: &CouplingMatrix,
    y: &[f64],
    b: &[f64],
    alpha: f64,
    opts: &DppOptions,
    evidence: Option<EvidenceConfig>,
) -> Result<AdmissibleVerdict, SolverError> {
    let solve = pinned_value(table, coupling, y, b, alpha, opts)?;
    let gap = solve
        .report
        .pin_values
        .iter()
        .zip(b)
        .map(|(v, c)| (v - c).abs())
        .fold(0.0, f64::max);
    let threshold = 10.0 * opts.tol;
    let evidence = match evidence {
        None => None,
        Some(cfg) => Some(cycle_evidence(table, coupling, y, b, alpha, cfg)?),
    };
    Ok(AdmissibleVerdict {
        admissible: gap <= threshold,
        gap,
        threshold,
        pin_values: solve.report.pin_values.clone(),
        evidence,
    })
}

fn cycle_evidence(
    table: &LagrangianTable,
    coupling: &CouplingMatrix,
    y: &[f64],
    b: &[f64],
    alpha: f64,
    cfg: EvidenceConfig,
) -> Result<CycleEvidence, SolverError> {
    let m = coupling.m();
    let constant = VectorField::constant(*table.grid(), b);
    let mut rng = path_rng(cfg.seed, u64::MAX);
    let mut worst = (f64::INFINITY, 0.0, String::new());
    let mut consistent = true;
    for trial in 0..cfg.trials {
        let member = cycle_battery_member(&mut rng, m, y, y, table.q_max(), cfg.dt);
        let i = rng.random_range(0..m);
        let est = subsolution_estimate_margin(
            &constant,
            table,
            coupling,
            y,
            y,
            &member.policy,
            &member.rule,
            &ProbabilityVector::basis(m, i),
            alpha,
            SamplingConfig {
                samples: cfg.samples,
                seed: cfg.seed.wrapping_add(trial as u64 + 1),
                dt: cfg.dt,
            },
            table.grid().spacing(),
        )?;
        if est.margin < -3.0 * est.stderr - 1e-12 {
            consistent = false;
        }
        if est.margin < worst.0 {
            worst = (est.margin, est.stderr, format!("{} from mode {i}", member.label));
        }
    }
    Ok(CycleEvidence {
        min_margin: worst.0,
        stderr: worst.1,
        worst: worst.2,
        trials: cfg.trials,
        consistent,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaximalityVerdict {
    pub pass: bool,
    /// `max (u − v)` over nodes and modes.
    pub max_excess: f64,
    pub node: usize,
    pub mode: usize,
}

/// `u ≤ v + tol` everywhere, for a verified subsolution `u` with `u(y) = b`.
pub fn maximality_check(
    v: &VectorField,
    u: &VectorField,
    pin: usize,
    b: &[f64],
    verdict: &SubsolutionVerdict,
    tol: f64,
) -> Result<MaximalityVerdict, SolverError> {
    if u.grid() != v.grid() || u.m() != v.m() || b.len() != u.m() {
        return Err(SolverError::Precondition("fields live on different grids".into()));
    }
    if !verdict.pass {
        return Err(SolverError::Precondition(format!(
            "u is not a subsolution (residual {} > {})",
            verdict.max_residual, verdict.tol
        )));
    }
    let pin_gap = u
        .at(pin)
        .iter()
        .zip(b)
        .map(|(x, c)| (x - c).abs())
        .fold(0.0, f64::max);
    if pin_gap > tol {
        return Err(SolverError::Precondition(format!("u(y) differs from b by {pin_gap}")));
    }
    let n = u.grid().len();
    let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
    for (k, (a, c)) in u.values().iter().zip(v.values()).enumerate() {
        if a - c > best {
            best = a - c;
            arg = k;
        }
    }
    Ok(MaximalityVerdict {
        pass: best <= tol,
        max_excess: best,
        node: arg % n,
        mode: arg / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AubryProbe {
    pub b: Vec<f64>,
    pub inside: bool,
    pub sub_max: f64,
    pub super_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AubryVerdict {
    pub inside: bool,
    pub alpha: f64,
    pub pin_node: usize,
    pub b: Vec<f64>,
    pub sub_max: f64,
    pub super_min: f64,
    pub tol: f64,
    /// `(node, mode, residual)` of the most negative supersolution residual
    /// when outside, of the largest subsolution residual otherwise.
    pub witness: (usize, usize, f64),
    pub probes: Vec<AubryProbe>,
    #[serde(skip)]
    pub field: VectorField,
}

/// Pins at `y` with `b = 0` at level `alpha` (an upper estimate of the critical
/// value), re-pins at `b = v(y)`, and declares `y` inside when the result is
/// a discrete critical solution: subsolution residual `≤ tol` and
/// supersolution residual `≥ −tol` at every node.
#[allow(clippy::too_many_arguments)]
pub fn aubry_indicator(
    table: &LagrangianTable,
    spec: &HamiltonianSpec,
    coupling: &CouplingMatrix,
    y: &[f64],
    alpha: f64,
    opts: &DppOptions,
    tol: Option<f64>,
    probe_seed: u64,
) -> Result<AubryVerdict, SolverError> {
    if !alpha.is_finite() {
        return Err(SolverError::Precondition("critical value estimate unavailable".into()));
    }
    let m = coupling.m();
    let first = pinned_value(table, coupling, y, &vec![0.0; m], alpha, opts)?;
    let b = first.report.pin_values.clone();
    let judge = |b: &[f64]| -> Result<(bool, ResidualField, ResidualField, f64, PinnedSolve), SolverError> {
        let solve = pinned_value(table, coupling, y, b, alpha, opts)?;
        let v = &solve.field;
        let tol = match tol {
            Some(t) => t,
            None => residual_tolerance(spec, coupling, v.grid(), alpha, v.mode_spread(), opts.dt)?,
        };
        let sub = subsolution_residual(v, spec, coupling, alpha)?;
        let sup = supersolution_residual(v, spec, coupling, alpha)?;
        let inside = sub.extreme <= tol && sup.extreme >= -tol;
        Ok((inside, sub, sup, tol, solve))
    };
    let (inside, sub, sup, tol_used, solve) = judge(&b)?;
    let mut probes = Vec::new();
    if m > 1 {
        let mut rng = path_rng(probe_seed, u64::MAX - 1);
        for _ in 0..2 {
            let r: Vec<f64> = (0..m).map(|_| rng.random_range(-0.5..0.5)).collect();
            let lr: Vec<f64> = (0..m).map(|i| coupling.row_dot(i, &r)).collect();
            let perturbed: Vec<f64> = b.iter().zip(&lr).map(|(x, d)| x + d).collect();
            // re-pin at the attained values so the probe vector is admissible
            let attained = pinned_value(table, coupling, y, &perturbed, alpha, opts)?.report.pin_values;
            let (ins, s, p, _, _) = judge(&attained)?;
            probes.push(AubryProbe {
                b: attained,
                inside: ins,
                sub_max: s.extreme,
                super_min: p.extreme,
            });
        }
    }
    let witness = if inside || sub.extreme > tol_used {
        (sub.node, sub.mode, sub.extreme)
    } else {
        (sup.node, sup.mode, sup.extreme)
    };
    let witness = if !inside && sup.extreme < -tol_used {
        (sup.node, sup.mode, sup.extreme)
    } else {
        witness
    };
    Ok(AubryVerdict {
        inside,
        alpha,
        pin_node: solve.report.pin_node,
        b,
        sub_max: sub.extreme,
        super_min: sup.extreme,
        tol: tol_used,
        witness,
        probes,
        field: solve.field,
    })
}

/// Builds the table for quadratic or tabulated modes at the grid resolution and
/// returns it with the velocity grid used.
pub fn velocity_grid_of(table: &LagrangianTable) -> &VelocityGrid {
    table.velocities()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::Potential;
    use std::f64::consts::PI;

    fn scalar_setup(n: usize, potential: Potential) -> (HamiltonianSpec, CouplingMatrix, LagrangianTable) {
        let spec = HamiltonianSpec::quadratic(1, vec![potential]).unwrap();
        let c = CouplingMatrix::scalar();
        let grid = TorusGrid::new(1, n).unwrap();
        let (t, _) = lagrangian_for(&spec, &c, &grid, 1.0, 0.0, None).unwrap();
        (spec, c, t)
    }

    fn opts(dt: f64) -> DppOptions {
        DppOptions {
            dt,
            tol: 1e-10,
            max_iter: 200_000,
        }
    }

    #[test]
    fn free_particle_pinned_value_is_zero() {
        let spec = HamiltonianSpec::quadratic(1, vec![Potential::Constant { value: 0.0 }; 2]).unwrap();
        let c = CouplingMatrix::new(&[vec![2.0, -2.0], vec![-0.5, 0.5]]).unwrap();
        let grid = TorusGrid::new(1, 32).unwrap();
        let (t, _) = lagrangian_for(&spec, &c, &grid, 0.5, 0.0, None).unwrap();
        let s = pinned_value(&t, &c, &[0.0], &[0.0, 0.0], 0.0, &opts(0.01)).unwrap();
        // slowest nonzero grid speed δq costs ½ δq per unit distance
        let dq = t.velocities().spacing();
        for node in 0..32 {
            let d = grid.coords(node)[0].min(1.0 - grid.coords(node)[0]);
            for i in 0..2 {
                let v = s.field.get(i, node);
                assert!(v >= -1e-9 && v <= 0.5 * dq * d + 1e-9, "v = {v} at {node}");
            }
        }
        assert!(s.report.monotone);
    }

    #[test]
    fn scalar_cosine_matches_mane_potential() {
        let (_, c, t) = scalar_setup(100, Potential::cosine(1.0, 1.0));
        let s = pinned_value(&t, &c, &[0.0], &[0.0], 1.0, &opts(0.01)).unwrap();
        let err = (0..100)
            .map(|k| {
                let x = k as f64 / 100.0;
                let d = x.min(1.0 - x);
                (s.field.get(0, k) - 2.0 / PI * (1.0 - (PI * d).cos())).abs()
            })
            .fold(0.0, f64::max);
        assert!(err < 0.05, "max error {err}");
        assert!(s.report.monotone);
        assert_eq!(s.report.saturated, 0);
    }

    #[test]
    fn shift_by_constant_vector_is_exact() {
        let spec = HamiltonianSpec::quadratic(
            1,
            vec![Potential::cosine(1.0, 1.0), Potential::cosine(0.5, 1.0)],
        )
        .unwrap();
        let c = CouplingMatrix::symmetric_pair(1.0);
        let grid = TorusGrid::new(1, 32).unwrap();
        let (t, _) = lagrangian_for(&spec, &c, &grid, 1.5, 0.5, None).unwrap();
        let b = [0.1, -0.2];
        let base = pinned_value(&t, &c, &[0.0], &b, 1.5, &opts(0.02)).unwrap();
        for mu in [-1.0, 0.5, 3.0] {
            let shifted = pinned_value(&t, &c, &[0.0], &[b[0] + mu, b[1] + mu], 1.5, &opts(0.02)).unwrap();
            assert!(shifted.field.max_abs_diff(&base.field.shifted(&[mu, mu])) < 1e-12);
        }
    }

    #[test]
    fn below_critical_value_diverges() {
        let (_, c, t) = scalar_setup(32, Potential::cosine(1.0, 1.0));
        let r = pinned_value(&t, &c, &[0.0], &[0.0], 0.5, &opts(0.02));
        assert!(matches!(r, Err(SolverError::Diverged { .. })), "{r:?}");
    }

    #[test]
    fn constant_potential_critical_value() {
        let spec = HamiltonianSpec::quadratic(1, vec![Potential::Constant { value: 0.3 }; 2]).unwrap();
        let c = CouplingMatrix::symmetric_pair(1.0);
        let grid = TorusGrid::new(1, 16).unwrap();
        let (t, _) = lagrangian_for(&spec, &c, &grid, 0.3, 0.0, None).unwrap();
        let g = critical_value(
            &t,
            &c,
            &GammaOptions {
                epsilons: vec![0.4, 0.2],
                alpha_tol: 1e-3,
                dpp: opts(0.05),
            },
        )
        .unwrap();
        assert!((g.gamma - 0.3).abs() <= 2e-3, "{g:?}");
        assert!((g.gamma_discounted - 0.3).abs() <= 1e-3, "{g:?}");
    }

    #[test]
    fn constant_field_is_subsolution_above_max() {
        let spec = HamiltonianSpec::quadratic(1, vec![Potential::cosine(1.0, 1.0)]).unwrap();
        let c = CouplingMatrix::scalar();
        let u = VectorField::constant(TorusGrid::new(1, 64).unwrap(), &[2.0]);
        assert!(subsolution_verify(&u, &spec, &c, 1.0, 1e-12).unwrap().pass);
        assert!(!subsolution_verify(&u, &spec, &c, 0.9, 1e-12).unwrap().pass);
    }

    #[test]
    fn closed_form_solution_residuals() {
        let spec = HamiltonianSpec::quadratic(1, vec![Potential::cosine(1.0, 1.0)]).unwrap();
        let c = CouplingMatrix::scalar();
        let grid = TorusGrid::new(1, 200).unwrap();
        let u = VectorField::from_fn(grid, 1, |_, x| {
            let d = x[0].min(1.0 - x[0]);
            2.0 / PI * (1.0 - (PI * d).cos())
        });
        let tol = residual_tolerance(&spec, &c, &grid, 1.0, 0.0, 0.0).unwrap();
        let sub = subsolution_verify(&u, &spec, &c, 1.0, tol).unwrap();
        assert!(sub.pass, "{} > {}", sub.max_residual, tol);
        let sup = supersolution_residual(&u, &spec, &c, 1.0).unwrap();
        assert!(sup.extreme >= -tol);
        let doubled = VectorField::from_fn(grid, 1, |i, x| 2.0 * u.interpolate(i, x));
        let bad = subsolution_verify(&doubled, &spec, &c, 1.0, tol).unwrap();
        assert!(!bad.pass);
    }

    #[test]
    fn maximality_preconditions() {
        let (spec, c, t) = scalar_setup(64, Potential::cosine(1.0, 1.0));
        let s = pinned_value(&t, &c, &[0.0], &[0.0], 1.2, &opts(0.01)).unwrap();
        let tol = residual_tolerance(&spec, &c, t.grid(), 1.2, 0.0, 0.01).unwrap();
        let verdict = subsolution_verify(&s.field, &spec, &c, 1.2, tol).unwrap();
        assert!(verdict.pass);
        let ok = maximality_check(&s.field, &s.field, 0, &[0.0], &verdict, 1e-9).unwrap();
        assert!(ok.pass);
        let mut raised = s.field.shifted(&[0.1]);
        raised.set(0, 0, 0.0);
        let v2 = subsolution_verify(&raised, &spec, &c, 1.2, tol).unwrap();
        assert!(matches!(
            maximality_check(&s.field, &raised, 0, &[0.0], &v2, 1e-9),
            Err(SolverError::Precondition(_))
        ));
    }
}
