//! The action functional `E_a[∫_0^τ L_{ω(s)}(x + I(Ξ)(s), −Ξ(s)) + α ds]`:
//! Monte Carlo evaluation, exact evaluation for cylinder-simple data, and the
//! subsolution-estimate margin.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::coupling::{expm, CouplingError, CouplingMatrix, ProbabilityVector};
use crate::grid::{centered, torus_distance, wrap_unit};
use crate::hamiltonian::{HamiltonianError, LagrangianTable};
use crate::paths::{
    path_rng, realize_control, sample_with_rng, ControlPolicy, IndexPath, PathError,
    PiecewiseConstant, Realization, SampleHold, SamplingConfig, Vec2,
};
use crate::solver::VectorField;
use crate::stopping::{StoppingError, StoppingRule};

#[derive(Debug, Error)]
pub enum ActionError {
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error(transparent)]
    Hamiltonian(#[from] HamiltonianError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Stopping(#[from] StoppingError),
    #[error("{violations} of {samples} paths miss the target displacement; the control is not a τ-cycle")]
    CycleViolation { violations: usize, samples: usize },
    #[error("not a cylinder-simple configuration: {0}")]
    Unsupported(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Conditional estimate given `ω(0) = mode`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeEstimate {
    pub mode: usize,
    pub weight: f64,
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
    pub mean_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
    pub alpha: f64,
    pub mean_tau: f64,
    pub breakdown: Vec<ModeEstimate>,
}

/// What one simulated path contributes.
#[derive(Debug, Clone, Copy, PartialEq)]
struct PathOutcome {
    action: f64,
    tau: f64,
    end_mode: usize,
    displacement: Vec2,
}

/// Mean, unbiased variance.
fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Per initial mode with positive weight, `⌈samples · a_i⌉` paths (at least 2).
fn allocation(a: &ProbabilityVector, samples: usize) -> Vec<(usize, usize)> {
    (0..a.len())
        .filter(|&i| a.get(i) > 0.0)
        .map(|i| (i, ((samples as f64 * a.get(i)).ceil() as usize).max(2)))
        .collect()
}

const GL2: f64 = 0.288_675_134_594_812_9; // 1 / (2√3)

/// Exact integral of `L_{ω(s)}(x0 + X(s), −ξ(s)) + α` over `[0, tau]`: the
/// integrand is polynomial between control cells, jumps and grid-line
/// crossings, where two-point Gauss–Legendre is exact.
fn path_integral(
    table: &LagrangianTable,
    path: &IndexPath,
    real: &Realization,
    x0: &[f64],
    tau: f64,
    alpha: f64,
) -> Result<f64, ActionError> {
    let dim = x0.len();
    let n = table.grid().points_per_axis() as f64;
    let dt = real.dt();
    let mut total = 0.0;
    let mut breaks: Vec<f64> = Vec::with_capacity(16);
    let mut point = vec![0.0; dim];
    for (k, q) in real.velocities.iter().enumerate() {
        let s0 = k as f64 * dt;
        if s0 >= tau {
            break;
        }
        let s1 = ((k + 1) as f64 * dt).min(tau);
        let base = real.curve.points[k];
        let negq: Vec<f64> = q[..dim].iter().map(|v| -v).collect();
        breaks.clear();
        breaks.push(s0);
        breaks.push(s1);
        for &(t, _) in path.jumps() {
            if t > s0 && t < s1 {
                breaks.push(t);
            }
        }
        for a in 0..dim {
            if q[a] == 0.0 {
                continue;
            }
            let u0 = (x0[a] + base[a]) * n;
            let u1 = (x0[a] + base[a] + (s1 - s0) * q[a]) * n;
            let (lo, hi) = if u0 < u1 { (u0, u1) } else { (u1, u0) };
            let mut j = lo.floor() + 1.0;
            while j < hi {
                breaks.push(s0 + (j / n - x0[a] - base[a]) / q[a]);
                j += 1.0;
            }
        }
        breaks.sort_by(f64::total_cmp);
        for w in breaks.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            let mid = 0.5 * (a + b);
            let mode = path.evaluate(mid);
            let half = 0.5 * (b - a);
            let mut acc = 0.0;
            for s in [mid - 2.0 * half * GL2, mid + 2.0 * half * GL2] {
                for c in 0..dim {
                    point[c] = wrap_unit(x0[c] + base[c] + (s - s0) * q[c]);
                }
                acc += table.eval(mode, &point, &negq)?;
            }
            total += half * acc + (b - a) * alpha;
        }
    }
    Ok(total)
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    table: &LagrangianTable,
    coupling: &CouplingMatrix,
    x: &[f64],
    policy: &ControlPolicy,
    rule: &StoppingRule,
    a: &ProbabilityVector,
    alpha: f64,
    sampling: SamplingConfig,
) -> Result<Vec<(usize, Vec<PathOutcome>)>, ActionError> {
    if x.len() != table.grid().dim() {
        return Err(ActionError::Invalid(format!(
            "start point has {} coordinates, grid dimension is {}",
            x.len(),
            table.grid().dim()
        )));
    }
    if a.len() != coupling.m() || coupling.m() != table.m() {
        return Err(ActionError::Invalid("mode counts disagree".into()));
    }
    if sampling.samples == 0 {
        return Err(ActionError::Invalid("need at least one sample".into()));
    }
    rule.validate()?;
    let horizon = rule.cap() + 1.0;
    let m = coupling.m();
    allocation(a, sampling.samples)
        .into_iter()
        .map(|(i, count)| {
            let start = ProbabilityVector::basis(m, i);
            let outcomes: Vec<PathOutcome> = (0..count as u64)
                .into_par_iter()
                .map(|k| -> Result<PathOutcome, ActionError> {
                    let mut rng = path_rng(sampling.seed, ((i as u64) << 40) | k);
                    let path = sample_with_rng(coupling, &start, horizon, &mut rng);
                    let real =
                        realize_control(policy, &path, x, horizon, sampling.dt, table.q_max())?;
                    let tau = rule.evaluate_along(&path, Some((&real.curve, x)))?;
                    let action = path_integral(table, &path, &real, x, tau, alpha)?;
                    Ok(PathOutcome {
                        action,
                        tau,
                        end_mode: path.evaluate(tau),
                        displacement: real.curve.displacement(tau),
                    })
                })
                .collect::<Result<_, _>>()?;
            Ok((i, outcomes))
        })
        .collect()
}

fn stratified(
    a: &ProbabilityVector,
    alpha: f64,
    strata: &[(usize, Vec<f64>, Vec<f64>)],
) -> ActionEstimate {
    let mut mean = 0.0;
    let mut var = 0.0;
    let mut mean_tau = 0.0;
    let mut samples = 0;
    let mut breakdown = Vec::new();
    for (i, values, taus) in strata {
        let w = a.get(*i);
        let (mu, v) = moments(values);
        let (tau_mu, _) = moments(taus);
        mean += w * mu;
        var += w * w * v / values.len() as f64;
        mean_tau += w * tau_mu;
        samples += values.len();
        breakdown.push(ModeEstimate {
            mode: *i,
            weight: w,
            mean: mu,
            stderr: (v / values.len() as f64).sqrt(),
            samples: values.len(),
            mean_tau: tau_mu,
        });
    }
    ActionEstimate {
        mean,
        stderr: var.sqrt(),
        samples,
        alpha,
        mean_tau,
        breakdown,
    }
}

/// Monte Carlo estimate of the action, stratified by the initial mode. Path
/// `k` started at mode `i` uses random stream `(i << 40) | k`, so the same
/// seed gives common random numbers across `α`, policies and rules.
#[allow(clippy::too_many_arguments)]
pub fn action_mc(
    table: &LagrangianTable,
    coupling: &CouplingMatrix,
    x: &[f64],
    policy: &ControlPolicy,
    rule: &StoppingRule,
    a: &ProbabilityVector,
    alpha: f64,
    sampling: SamplingConfig,
) -> Result<ActionEstimate, ActionError> {
    let strata = simulate(table, coupling, x, policy, rule, a, alpha, sampling)?;
    let rows: Vec<(usize, Vec<f64>, Vec<f64>)> = strata
        .into_iter()
        .map(|(i, outs)| {
            (
                i,
                outs.iter().map(|o| o.action).collect(),
                outs.iter().map(|o| o.tau).collect(),
            )
        })
        .collect();
    Ok(stratified(a, alpha, &rows))
}

/// `RHS − LHS` of the subsolution estimate along one battery member.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginEstimate {
    pub margin: f64,
    pub stderr: f64,
    /// `E_a[u_{ω(0)}(x) − u_{ω(τ)}(y)]`.
    pub lhs: f64,
    pub action: ActionEstimate,
}

/// Margin of `E_a[u_{ω(0)}(x) − u_{ω(τ)}(y)] ≤ action` over common paths.
/// Refuses when some path ends farther than `cycle_tol` from `y − x`.
#[allow(clippy::too_many_arguments)]
pub fn subsolution_estimate_margin(
    u: &VectorField,
    table: &LagrangianTable,
    coupling: &CouplingMatrix,
    x: &[f64],
    y: &[f64],
    policy: &ControlPolicy,
    rule: &StoppingRule,
    a: &ProbabilityVector,
    alpha: f64,
    sampling: SamplingConfig,
    cycle_tol: f64,
) -> Result<MarginEstimate, ActionError> {
    if u.m() != coupling.m() || y.len() != x.len() {
        return Err(ActionError::Invalid("field, coupling or points disagree".into()));
    }
    let strata = simulate(table, coupling, x, policy, rule, a, alpha, sampling)?;
    let d: Vec<f64> = x.iter().zip(y).map(|(p, q)| q - p).collect();
    let violations = strata
        .iter()
        .flat_map(|(_, outs)| outs)
        .filter(|o| torus_distance(&o.displacement[..x.len()], &d) > cycle_tol)
        .count();
    let total: usize = strata.iter().map(|(_, o)| o.len()).sum();
    if violations > 0 {
        return Err(ActionError::CycleViolation {
            violations,
            samples: total,
        });
    }
    let ux: Vec<f64> = (0..u.m()).map(|i| u.interpolate(i, x)).collect();
    let uy: Vec<f64> = (0..u.m()).map(|i| u.interpolate(i, y)).collect();
    let mut action_rows = Vec::new();
    let mut lhs_rows = Vec::new();
    let mut margin_rows = Vec::new();
    for (i, outs) in &strata {
        let taus: Vec<f64> = outs.iter().map(|o| o.tau).collect();
        let lhs: Vec<f64> = outs.iter().map(|o| ux[*i] - uy[o.end_mode]).collect();
        let act: Vec<f64> = outs.iter().map(|o| o.action).collect();
        let margin: Vec<f64> = act.iter().zip(&lhs).map(|(r, l)| r - l).collect();
        action_rows.push((*i, act, taus.clone()));
        lhs_rows.push((*i, lhs, taus.clone()));
        margin_rows.push((*i, margin, taus));
    }
    let action = stratified(a, alpha, &action_rows);
    let lhs = stratified(a, alpha, &lhs_rows).mean;
    let margin = stratified(a, alpha, &margin_rows);
    Ok(MarginEstimate {
        margin: margin.mean,
        stderr: margin.stderr,
        lhs,
        action,
    })
}

/// Exact action for cylinder-simple data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExactAction {
    pub value: f64,
    pub expected_tau: f64,
}

enum Survival {
    /// The rule stops only at boundary times.
    Full,
    /// Hitting rule: the process is killed on entering the set.
    Killed(Vec<usize>),
}

struct Exact<'a> {
    table: &'a LagrangianTable,
    coupling: &'a CouplingMatrix,
    x: Vec<f64>,
    alpha: f64,
    policy: &'a ControlPolicy,
    rule: &'a StoppingRule,
    boundaries: Vec<f64>,
    survival: Survival,
    /// Left ends of sample-and-hold levels among the boundaries.
    hold_starts: Vec<f64>,
}

impl Exact<'_> {
    /// `e^{-sΛ}` (or the killed version) as an M×M matrix.
    fn kernel(&self, s: f64) -> Result<DMatrix<f64>, ActionError> {
        let m = self.coupling.m();
        match &self.survival {
            Survival::Full => Ok(self.coupling.semigroup(s)?.matrix().clone()),
            Survival::Killed(set) => {
                let alive: Vec<usize> = (0..m).filter(|i| !set.contains(i)).collect();
                let k = alive.len();
                let sub = DMatrix::from_fn(k, k, |a, b| -s * self.coupling.get(alive[a], alive[b]));
                let e = expm(&sub);
                let mut out = DMatrix::zeros(m, m);
                for (a, &i) in alive.iter().enumerate() {
                    for (b, &j) in alive.iter().enumerate() {
                        out[(i, j)] = e[(a, b)].max(0.0);
                    }
                }
                Ok(out)
            }
        }
    }

    fn velocity(&self, s: f64, hold_mode: usize) -> Result<Vec<f64>, ActionError> {
        let dim = self.x.len();
        Ok(match self.policy {
            ControlPolicy::Constant { velocity } => velocity.clone(),
            ControlPolicy::OpenLoop { path } => path.value(s).to_vec(),
            ControlPolicy::SampleHold { control } => match control.level(s) {
                Some((j, _)) => control.velocities[j][hold_mode].clone(),
                None => vec![0.0; dim],
            },
            _ => {
                return Err(ActionError::Unsupported(
                    "controls must be constant, open-loop or sample-and-hold".into(),
                ))
            }
        })
    }

    /// `(∫ Σ_j K_ij(s) (L_j + α) ds, ∫ Σ_j K_ij(s) ds)` over `[0, len]`.
    fn interval(&self, i: usize, start: &[f64], q: &[f64], len: f64) -> Result<(f64, f64), ActionError> {
        let dim = self.x.len();
        let n = self.table.grid().points_per_axis() as f64;
        let mut breaks = vec![0.0, len];
        for a in 0..dim {
            if q[a] == 0.0 {
                continue;
            }
            let u0 = start[a] * n;
            let u1 = (start[a] + len * q[a]) * n;
            let (lo, hi) = if u0 < u1 { (u0, u1) } else { (u1, u0) };
            let mut j = lo.floor() + 1.0;
            while j < hi {
                breaks.push((j / n - start[a]) / q[a]);
                j += 1.0;
            }
        }
        breaks.sort_by(f64::total_cmp);
        let negq: Vec<f64> = q.iter().map(|v| -v).collect();
        let f = |s: f64| -> Result<(f64, f64), ActionError> {
            let k = self.kernel(s)?;
            let p: Vec<f64> = (0..dim).map(|a| wrap_unit(start[a] + s * q[a])).collect();
            let mut val = 0.0;
            let mut mass = 0.0;
            for j in 0..self.coupling.m() {
                let w = k[(i, j)];
                if w == 0.0 {
                    continue;
                }
                val += w * (self.table.eval(j, &p, &negq)? + self.alpha);
                mass += w;
            }
            Ok((val, mass))
        };
        let mut total = (0.0, 0.0);
        for w in breaks.windows(2) {
            if w[1] > w[0] {
                let piece = adaptive_gauss(&f, w[0], w[1], 1e-12, 30)?;
                total.0 += piece.0;
                total.1 += piece.1;
            }
        }
        Ok(total)
    }

    fn stops_at(&self, t: f64, mode: usize) -> bool {
        match self.rule {
            StoppingRule::Monitored { times, stop_sets } => times
                .iter()
                .position(|s| *s == t)
                .is_some_and(|j| stop_sets[j].contains(&mode)),
            _ => false,
        }
    }

    /// Expected (action, τ) for a path in mode `i` at boundary `level`.
    fn recurse(&self, level: usize, i: usize, hold_mode: usize, disp: Vec<f64>) -> Result<(f64, f64), ActionError> {
        let s0 = self.boundaries[level];
        let s1 = self.boundaries[level + 1];
        let hold_mode = if self.hold_starts.contains(&s0) { i } else { hold_mode };
        let q = self.velocity(s0, hold_mode)?;
        let start: Vec<f64> = self.x.iter().zip(&disp).map(|(x, d)| x + d).collect();
        let (mut value, mut tau) = self.interval(i, &start, &q, s1 - s0)?;
        if level + 2 < self.boundaries.len() {
            let k = self.kernel(s1 - s0)?;
            let next: Vec<f64> = disp.iter().zip(&q).map(|(d, v)| d + (s1 - s0) * v).collect();
            for j in 0..self.coupling.m() {
                let w = k[(i, j)];
                if w == 0.0 || self.stops_at(s1, j) {
                    continue;
                }
                let (v, t) = self.recurse(level + 1, j, hold_mode, next.clone())?;
                value += w * v;
                tau += w * t;
            }
        }
        Ok((value, tau))
    }
}

/// Two-level comparison of 8-point Gauss–Legendre; bisects until the halves
/// agree with the whole to `tol`.
fn adaptive_gauss<F>(f: &F, a: f64, b: f64, tol: f64, depth: usize) -> Result<(f64, f64), ActionError>
where
    F: Fn(f64) -> Result<(f64, f64), ActionError>,
{
    const X: [f64; 4] = [
        0.183_434_642_495_649_8,
        0.525_532_409_916_329,
        0.796_666_477_413_626_7,
        0.960_289_856_497_536_3,
    ];
    const W: [f64; 4] = [
        0.362_683_783_378_362,
        0.313_706_645_877_887_3,
        0.222_381_034_453_374_5,
        0.101_228_536_290_376_3,
    ];
    let gl = |a: f64, b: f64| -> Result<(f64, f64), ActionError> {
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        let mut s = (0.0, 0.0);
        for k in 0..4 {
            for sign in [-1.0, 1.0] {
                let v = f(c + sign * h * X[k])?;
                s.0 += W[k] * v.0;
                s.1 += W[k] * v.1;
            }
        }
        Ok((s.0 * h, s.1 * h))
    };
    let whole = gl(a, b)?;
    let m = 0.5 * (a + b);
    let left = gl(a, m)?;
    let right = gl(m, b)?;
    let split = (left.0 + right.0, left.1 + right.1);
    if depth == 0 || ((split.0 - whole.0).abs() <= tol && (split.1 - whole.1).abs() <= tol) {
        return Ok(split);
    }
    let l = adaptive_gauss(f, a, m, 0.5 * tol, depth - 1)?;
    let r = adaptive_gauss(f, m, b, 0.5 * tol, depth - 1)?;
    Ok((l.0 + r.0, l.1 + r.1))
}

/// Exact action by expanding `E_a` over the cylinder events of a simple (or
/// hitting) rule: between consecutive boundaries the index law is propagated
/// by the semigroup, at boundaries the history is branched.
///
/// Supported controls: constant, open-loop and sample-and-hold; supported
/// rules: deterministic, monitored, and hitting (with the killed semigroup).
pub fn action_exact_simple(
    table: &LagrangianTable,
    coupling: &CouplingMatrix,
    x: &[f64],
    policy: &ControlPolicy,
    rule: &StoppingRule,
    a: &ProbabilityVector,
    alpha: f64,
) -> Result<ExactAction, ActionError> {
    rule.validate()?;
    if a.len() != coupling.m() || coupling.m() != table.m() {
        return Err(ActionError::Invalid("mode counts disagree".into()));
    }
    let cap = rule.cap();
    let (mut boundaries, survival) = match rule {
        StoppingRule::Deterministic { t } => (vec![0.0, *t], Survival::Full),
        StoppingRule::Monitored { times, .. } => {
            let mut b = vec![0.0];
            b.extend(times.iter().copied().filter(|t| *t > 0.0));
            (b, Survival::Full)
        }
        StoppingRule::Hitting { modes, cap } => (vec![0.0, *cap], Survival::Killed(modes.clone())),
        other => {
            return Err(ActionError::Unsupported(format!(
                "rule '{other}' is not given by cylinder events"
            )))
        }
    };
    let mut hold_starts = vec![0.0];
    match policy {
        ControlPolicy::Constant { .. } => {}
        ControlPolicy::OpenLoop { path } => {
            boundaries.extend(path.times.iter().copied().filter(|t| *t > 0.0 && *t < cap));
        }
        ControlPolicy::SampleHold { control } => {
            boundaries.extend(control.times.iter().copied().filter(|t| *t > 0.0 && *t < cap));
            hold_starts.extend(control.times.iter().copied());
        }
        _ => {
            return Err(ActionError::Unsupported(
                "controls must be constant, open-loop or sample-and-hold".into(),
            ))
        }
    }
    boundaries.sort_by(f64::total_cmp);
    boundaries.dedup();
    let ex = Exact {
        table,
        coupling,
        x: x.to_vec(),
        alpha,
        policy,
        rule,
        boundaries,
        survival,
        hold_starts,
    };
    let mut value = 0.0;
    let mut tau = 0.0;
    for i in 0..coupling.m() {
        let w = a.get(i);
        if w == 0.0 {
            continue;
        }
        if let Survival::Killed(set) = &ex.survival {
            if set.contains(&i) {
                continue;
            }
        }
        if ex.boundaries.len() < 2 || ex.stops_at(0.0, i) {
            continue;
        }
        let (v, t) = ex.recurse(0, i, i, vec![0.0; x.len()])?;
        value += w * v;
        tau += w * t;
    }
    Ok(ExactAction {
        value,
        expected_tau: tau,
    })
}

/// A control and stopping rule whose curve from `x` ends at `y` on every path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatteryMember {
    pub label: String,
    pub policy: ControlPolicy,
    pub rule: StoppingRule,
}

fn snap_up(t: f64, dt: f64) -> f64 {
    (t / dt).ceil().max(1.0) * dt
}

/// Draws a random τ-cycle from `x` to `y`: straight runs with a winding,
/// reach-and-wait legs stopped by hitting or jump-count rules, and
/// reach-then-loop controls whose loops depend on the mode and which stop on
/// monitored events. Times are multiples of `dt`; speeds stay below
/// `0.8 q_max`.
pub fn cycle_battery_member<R: Rng + ?Sized>(
    rng: &mut R,
    m: usize,
    x: &[f64],
    y: &[f64],
    q_max: f64,
    dt: f64,
) -> BatteryMember {
    let dim = x.len();
    let speed = 0.8 * q_max;
    let mut d: Vec<f64> = (0..dim)
        .map(|a| centered(y[a] - x[a]) + rng.random_range(-1i32..=1) as f64)
        .collect();
    // windings must stay within the speed budget for a reasonable time
    for v in d.iter_mut() {
        if v.abs() > 1.2 {
            *v -= v.signum();
        }
    }
    let norm = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let reach = snap_up(norm / speed + rng.random_range(0.0..1.0), dt);
    let q: Vec<f64> = d.iter().map(|v| v / reach).collect();
    let random_modes = |rng: &mut R| -> Vec<usize> {
        let mut set: Vec<usize> = (0..m).filter(|_| rng.random_bool(0.5)).collect();
        if set.is_empty() {
            set.push(rng.random_range(0..m));
        }
        set
    };
    let reach_then_stop = PiecewiseConstant {
        times: vec![0.0, reach],
        values: vec![q.clone(), vec![0.0; dim]],
    };
    match rng.random_range(0..4) {
        0 => BatteryMember {
            label: format!("straight T={reach}"),
            policy: ControlPolicy::Constant { velocity: q },
            rule: StoppingRule::Deterministic { t: reach },
        },
        1 => {
            let cap = reach + snap_up(rng.random_range(0.5..3.0), dt);
            let modes = random_modes(rng);
            BatteryMember {
                label: format!("reach-then-hit T={reach} modes={modes:?}"),
                policy: ControlPolicy::OpenLoop { path: reach_then_stop },
                rule: StoppingRule::AtLeast {
                    t: reach,
                    base: Box::new(StoppingRule::Hitting { modes, cap }),
                },
            }
        }
        2 => {
            let cap = reach + snap_up(rng.random_range(0.5..3.0), dt);
            let n = rng.random_range(1..=3);
            BatteryMember {
                label: format!("reach-then-jump T={reach} n={n}"),
                policy: ControlPolicy::OpenLoop { path: reach_then_stop },
                rule: StoppingRule::AtLeast {
                    t: reach,
                    base: Box::new(StoppingRule::NthJump { n, cap }),
                },
            }
        }
        _ => {
            let loops = rng.random_range(1..=3);
            let width = snap_up((1.0 / speed).max(rng.random_range(0.5..1.5)), dt);
            let times: Vec<f64> = (1..=loops).map(|j| j as f64 * width).collect();
            let velocities: Vec<Vec<Vec<f64>>> = (0..loops)
                .map(|_| {
                    (0..m)
                        .map(|_| {
                            (0..dim)
                                .map(|_| rng.random_range(-1i32..=1) as f64 / width)
                                .collect()
                        })
                        .collect()
                })
                .collect();
            let stop_times: Vec<f64> = times.iter().map(|t| reach + t).collect();
            let stop_sets: Vec<Vec<usize>> = (0..loops).map(|_| random_modes(rng)).collect();
            BatteryMember {
                label: format!("reach-then-loop T={reach} loops={loops}"),
                policy: ControlPolicy::Concatenation {
                    prefix: PiecewiseConstant {
                        times: vec![0.0],
                        values: vec![q],
                    },
                    switch: reach,
                    tail: Box::new(ControlPolicy::SampleHold {
                        control: SampleHold { times, velocities },
                    }),
                },
                rule: StoppingRule::Monitored {
                    times: stop_times,
                    stop_sets,
                },
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TorusGrid;
    use crate::hamiltonian::{legendre_transform, HamiltonianSpec, Potential};

    fn cosine_table(m: usize) -> LagrangianTable {
        let spec = HamiltonianSpec::quadratic(1, vec![Potential::cosine(1.0, 1.0); m]).unwrap();
        legendre_transform(&spec, &TorusGrid::new(1, 64).unwrap(), 3.0, 61).unwrap()
    }

    fn sampling(samples: usize) -> SamplingConfig {
        SamplingConfig {
            samples,
            seed: 17,
            dt: 1.0 / 64.0,
        }
    }

    #[test]
    fn zero_stopping_time_gives_zero() {
        let t = cosine_table(1);
        let e = action_mc(
            &t,
            &CouplingMatrix::scalar(),
            &[0.2],
            &ControlPolicy::constant(&[0.5]),
            &StoppingRule::deterministic(0.0),
            &ProbabilityVector::basis(1, 0),
            1.0,
            sampling(10),
        )
        .unwrap();
        assert_eq!(e.mean, 0.0);
        assert_eq!(e.stderr, 0.0);
    }

    #[test]
    fn scalar_constant_control_matches_quadrature() {
        let t = cosine_table(1);
        let (x, q, tt, alpha) = (0.1, 0.7, 1.3, 1.0);
        let e = action_mc(
            &t,
            &CouplingMatrix::scalar(),
            &[x],
            &ControlPolicy::constant(&[q]),
            &StoppingRule::deterministic(tt),
            &ProbabilityVector::basis(1, 0),
            alpha,
            sampling(4),
        )
        .unwrap();
        // fine midpoint rule of the interpolated integrand
        let k = 200_000;
        let h = tt / k as f64;
        let oracle: f64 = (0..k)
            .map(|j| {
                let s = (j as f64 + 0.5) * h;
                t.eval(0, &[wrap_unit(x + s * q)], &[-q]).unwrap() + alpha
            })
            .sum::<f64>()
            * h;
        assert!((e.mean - oracle).abs() < 1e-8, "{} vs {}", e.mean, oracle);
        // and the closed form of the continuum integrand within interpolation error
        let closed = 0.5 * q * q * tt + alpha * tt
            - ((2.0 * std::f64::consts::PI * (x + tt * q)).sin()
                - (2.0 * std::f64::consts::PI * x).sin())
                / (2.0 * std::f64::consts::PI * q);
        assert!((e.mean - closed).abs() < 2e-3);
    }

    #[test]
    fn exact_alpha_shift_and_zero_lagrangian() {
        let spec = HamiltonianSpec::quadratic(1, vec![Potential::Constant { value: 0.0 }; 2]).unwrap();
        let zero = LagrangianTable::from_fn(
            TorusGrid::new(1, 16).unwrap(),
            crate::grid::VelocityGrid::new(1, 2.0, 5).unwrap(),
            2,
            |_, _, _| 0.0,
        );
        let c = CouplingMatrix::symmetric_pair(1.0);
        let a = ProbabilityVector::new(vec![0.3, 0.7]).unwrap();
        let rule = StoppingRule::monitored(vec![0.5, 1.0], vec![vec![1], vec![]]).unwrap();
        let policy = ControlPolicy::constant(&[0.25]);
        let e = action_exact_simple(&zero, &c, &[0.0], &policy, &rule, &a, 2.0).unwrap();
        assert!((e.value - 2.0 * e.expected_tau).abs() < 1e-12);
        // P(ω(0.5) = 1) = a e^{-0.5Λ} e_1
        let p1 = c.semigroup(0.5).unwrap().left_apply(a.as_slice())[1];
        let tau = 0.5 * p1 + 1.0 * (1.0 - p1);
        assert!((e.expected_tau - tau).abs() < 1e-12);
        let table = legendre_transform(&spec, &TorusGrid::new(1, 16).unwrap(), 2.0, 9).unwrap();
        let e0 = action_exact_simple(&table, &c, &[0.0], &policy, &rule, &a, 0.0).unwrap();
        let e3 = action_exact_simple(&table, &c, &[0.0], &policy, &rule, &a, 3.0).unwrap();
        assert!((e3.value - e0.value - 3.0 * e0.expected_tau).abs() < 1e-12);
    }

    #[test]
    fn exact_matches_semigroup_weighted_quadrature() {
        // M = 2, V_1 = cos 2πx, V_2 = 0, constant control, deterministic τ
        let spec = HamiltonianSpec::quadratic(
            1,
            vec![Potential::cosine(1.0, 1.0), Potential::Constant { value: 0.0 }],
        )
        .unwrap();
        let t = legendre_transform(&spec, &TorusGrid::new(1, 64).unwrap(), 2.0, 41).unwrap();
        let c = CouplingMatrix::symmetric_pair(1.0);
        let (x, q, tt) = (0.3, 0.4, 1.5);
        let e = action_exact_simple(
            &t,
            &c,
            &[x],
            &ControlPolicy::constant(&[q]),
            &StoppingRule::deterministic(tt),
            &ProbabilityVector::basis(2, 0),
            0.5,
        )
        .unwrap();
        let k = 20_000;
        let h = tt / k as f64;
        let oracle: f64 = (0..k)
            .map(|j| {
                let s = (j as f64 + 0.5) * h;
                let p = 0.5 * (1.0 + (-2.0 * s).exp());
                let xs = [wrap_unit(x + s * q)];
                p * t.eval(0, &xs, &[-q]).unwrap() + (1.0 - p) * t.eval(1, &xs, &[-q]).unwrap() + 0.5
            })
            .sum::<f64>()
            * h;
        assert!((e.value - oracle).abs() < 1e-6, "{} vs {}", e.value, oracle);
        assert!((e.expected_tau - tt).abs() < 1e-12);
    }

    #[test]
    fn unsupported_rules_are_structural_errors() {
        let t = cosine_table(2);
        let r = action_exact_simple(
            &t,
            &CouplingMatrix::symmetric_pair(1.0),
            &[0.0],
            &ControlPolicy::zero(1),
            &StoppingRule::nth_jump(1, 2.0),
            &ProbabilityVector::uniform(2),
            0.0,
        );
        assert!(matches!(r, Err(ActionError::Unsupported(_))));
    }

    #[test]
    fn battery_members_are_cycles() {
        let c = CouplingMatrix::symmetric_pair(1.0);
        let mut rng = path_rng(5, 0);
        for _ in 0..40 {
            let member = cycle_battery_member(&mut rng, 2, &[0.3], &[0.0], 3.0, 1.0 / 64.0);
            let check = crate::paths::check_cycle(
                &c,
                &ProbabilityVector::uniform(2),
                &member.policy,
                &member.rule,
                &[0.3],
                &[-0.3],
                3.0,
                1e-9,
                SamplingConfig {
                    samples: 50,
                    seed: 3,
                    dt: 1.0 / 64.0,
                },
            )
            .unwrap();
            assert!(check.is_member(), "{}", member.label);
        }
    }
}
