//! Hamiltonians `H_i(x, p)` on the torus, their Legendre–Fenchel conjugates
//! `L_i(x, q) = max_p (p·q - H_i(x, p))`, and the momentum/velocity bounds the
//! dynamic-programming solver works with.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupling::CouplingMatrix;
pub use crate::grid::TorusGrid;
use crate::grid::{GridError, VelocityGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HamiltonianError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("momentum box too small: maximizer on the boundary at x = {x:?}, q = {q:?}")]
    MomentumBoxTooSmall { x: Vec<f64>, q: Vec<f64> },
    #[error("velocity {q:?} outside the table box of radius {q_max}")]
    VelocityOutOfRange { q: Vec<f64>, q_max: f64 },
    #[error("momentum {p:?} outside the tabulated box of radius {p_max}")]
    MomentumOutOfRange { p: Vec<f64>, p_max: f64 },
    #[error("mode {mode} out of range (M = {m})")]
    Mode { mode: usize, m: usize },
    #[error("no momentum satisfies the level bound {level} (alpha too small)")]
    Infeasible { level: f64 },
    #[error("invalid Hamiltonian: {0}")]
    Invalid(String),
}

/// Scalar or per-axis list in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Components {
    Scalar(f64),
    List(Vec<f64>),
}

impl Components {
    pub fn expand(&self, dim: usize) -> Vec<f64> {
        match self {
            Components::Scalar(v) => vec![*v; dim],
            Components::List(v) => v.clone(),
        }
    }
}

impl Default for Components {
    fn default() -> Self {
        Components::Scalar(0.0)
    }
}

/// `amplitude · cos(2π k·(x - shift) + phase)` with integer wave vector `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineTerm {
    pub amplitude: f64,
    pub frequency: Components,
    #[serde(default)]
    pub phase: f64,
    #[serde(default)]
    pub shift: Components,
}

impl CosineTerm {
    pub fn new(amplitude: f64, frequency: f64) -> Self {
        Self {
            amplitude,
            frequency: Components::Scalar(frequency),
            phase: 0.0,
            shift: Components::Scalar(0.0),
        }
    }

    pub fn shifted(mut self, shift: f64) -> Self {
        self.shift = Components::Scalar(shift);
        self
    }

    fn arg(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let k = self.frequency.expand(x.len());
        let s = self.shift.expand(x.len());
        let dot: f64 = x
            .iter()
            .zip(&k)
            .zip(&s)
            .map(|((xi, ki), si)| ki * (xi - si))
            .sum();
        (2.0 * PI * dot + self.phase, k)
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.amplitude * self.arg(x).0.cos()
    }

    fn gradient_bound(&self, dim: usize) -> f64 {
        let k = self.frequency.expand(dim);
        self.amplitude.abs() * 2.0 * PI * k.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn validate(&self, dim: usize) -> Result<(), HamiltonianError> {
        let k = self.frequency.expand(dim);
        let s = self.shift.expand(dim);
        if k.len() != dim || s.len() != dim {
            return Err(HamiltonianError::Invalid(format!(
                "cosine term needs {dim} frequency/shift components"
            )));
        }
        if k.iter().any(|v| v.fract() != 0.0) {
            return Err(HamiltonianError::Invalid(
                "cosine frequencies must be integers to be periodic".into(),
            ));
        }
        Ok(())
    }
}

/// Closed-form potentials `V(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Potential {
    Constant { value: f64 },
    Cosine(CosineTerm),
    SumOfCosines { terms: Vec<CosineTerm> },
}

impl Potential {
    pub fn cosine(amplitude: f64, frequency: f64) -> Self {
        Potential::Cosine(CosineTerm::new(amplitude, frequency))
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Potential::Constant { value } => *value,
            Potential::Cosine(t) => t.value(x),
            Potential::SumOfCosines { terms } => terms.iter().map(|t| t.value(x)).sum(),
        }
    }

    /// Upper bound on `|∇V|`.
    pub fn gradient_bound(&self, dim: usize) -> f64 {
        match self {
            Potential::Constant { .. } => 0.0,
            Potential::Cosine(t) => t.gradient_bound(dim),
            Potential::SumOfCosines { terms } => terms.iter().map(|t| t.gradient_bound(dim)).sum(),
        }
    }

    /// `(min V, max V)` over the torus.
    pub fn range(&self, dim: usize) -> (f64, f64) {
        match self {
            Potential::Constant { value } => (*value, *value),
            Potential::Cosine(t) if t.frequency.expand(dim).iter().any(|k| *k != 0.0) => {
                (-t.amplitude.abs(), t.amplitude.abs())
            }
            _ => {
                // Dense sampling; sums of cosines have no closed-form extrema.
                let n = if dim == 1 { 1 << 14 } else { 512 };
                let grid = TorusGrid::new(dim, n).expect("valid sampling grid");
                (0..grid.len())
                    .map(|k| self.value(&grid.coords(k)))
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v), hi.max(v))
                    })
            }
        }
    }

    fn validate(&self, dim: usize) -> Result<(), HamiltonianError> {
        match self {
            Potential::Constant { value } if !value.is_finite() => {
                Err(HamiltonianError::Invalid("non-finite constant potential".into()))
            }
            Potential::Constant { .. } => Ok(()),
            Potential::Cosine(t) => t.validate(dim),
            Potential::SumOfCosines { terms } => terms.iter().try_for_each(|t| t.validate(dim)),
        }
    }
}

/// `H(x, p)` sampled on a torus grid times a momentum box grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabulatedHamiltonian {
    pub grid: TorusGrid,
    pub momenta: VelocityGrid,
    /// `values[node * momenta.len() + p_index]`.
    pub values: Vec<f64>,
}

impl TabulatedHamiltonian {
    pub fn from_fn(
        grid: TorusGrid,
        momenta: VelocityGrid,
        f: impl Fn(&[f64], &[f64]) -> f64,
    ) -> Self {
        let np = momenta.len();
        let mut values = Vec::with_capacity(grid.len() * np);
        for node in 0..grid.len() {
            let x = grid.coords(node);
            for k in 0..np {
                values.push(f(&x, &momenta.velocity(k)));
            }
        }
        Self {
            grid,
            momenta,
            values,
        }
    }

    fn at(&self, node: usize, k: usize) -> f64 {
        self.values[node * self.momenta.len() + k]
    }

    fn eval(&self, x: &[f64], p: &[f64]) -> Result<f64, HamiltonianError> {
        let ps = self
            .momenta
            .stencil(p)
            .ok_or_else(|| HamiltonianError::MomentumOutOfRange {
                p: p.to_vec(),
                p_max: self.momenta.q_max(),
            })?;
        let xs = self.grid.stencil(x);
        Ok(xs
            .iter()
            .map(|(node, wx)| wx * ps.apply(|k| self.at(node, k)))
            .sum())
    }

    fn validate(&self) -> Result<(), HamiltonianError> {
        let np = self.momenta.len();
        if self.values.len() != self.grid.len() * np {
            return Err(HamiltonianError::Invalid("tabulated value count mismatch".into()));
        }
        if self.grid.dim() != self.momenta.dim() {
            return Err(HamiltonianError::Invalid("tabulated dimension mismatch".into()));
        }
        let n_p = self.momenta.points_per_axis();
        let dim = self.grid.dim();
        for node in 0..self.grid.len() {
            // midpoint convexity along each momentum axis
            for k in 0..np {
                let m = self.momenta.multi(k);
                for a in 0..dim {
                    if m[a] == 0 || m[a] == n_p - 1 {
                        continue;
                    }
                    let step = if a == 0 { 1 } else { n_p };
                    let c = self.at(node, k);
                    let l = self.at(node, k - step);
                    let r = self.at(node, k + step);
                    if 2.0 * c > l + r + 1e-9 {
                        return Err(HamiltonianError::Invalid(format!(
                            "not convex in p at node {node}, momentum index {k}"
                        )));
                    }
                }
            }
            // growth: H/|p| increasing along the axis rays at the boundary
            for a in 0..dim {
                for sign in [-1i64, 1] {
                    let half = (n_p / 2) as i64;
                    let idx = |r: i64| -> usize {
                        let mut m = [half, half];
                        m[a] = half + sign * r;
                        (m[0] + m[1] * if dim == 2 { n_p as i64 } else { 0 }) as usize
                    };
                    let outer = idx(half);
                    let inner = idx(half - 1);
                    let po = self.momenta.velocity(outer).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let pi = self.momenta.velocity(inner).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if pi > 0.0 && self.at(node, outer) / po <= self.at(node, inner) / pi {
                        return Err(HamiltonianError::Invalid(format!(
                            "H(x,p)/|p| not increasing at the momentum boundary (node {node})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One component `H_i` of the system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum ModeHamiltonian {
    /// `½|p|² + V(x)`.
    Quadratic { potential: Potential },
    Tabulated(TabulatedHamiltonian),
}

/// The Hamiltonians of all `M` modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianSpec {
    dim: usize,
    modes: Vec<ModeHamiltonian>,
}

impl HamiltonianSpec {
    pub fn new(dim: usize, modes: Vec<ModeHamiltonian>) -> Result<Self, HamiltonianError> {
        if dim != 1 && dim != 2 {
            return Err(GridError::Dimension(dim).into());
        }
        if modes.is_empty() {
            return Err(HamiltonianError::Invalid("no modes".into()));
        }
        for m in &modes {
            match m {
                ModeHamiltonian::Quadratic { potential } => potential.validate(dim)?,
                ModeHamiltonian::Tabulated(t) => {
                    if t.grid.dim() != dim {
                        return Err(HamiltonianError::Invalid("tabulated grid dimension".into()));
                    }
                    t.validate()?
                }
            }
        }
        Ok(Self { dim, modes })
    }

    /// Quadratic Hamiltonians `½|p|² + V_i(x)`.
    pub fn quadratic(dim: usize, potentials: Vec<Potential>) -> Result<Self, HamiltonianError> {
        Self::new(
            dim,
            potentials
                .into_iter()
                .map(|potential| ModeHamiltonian::Quadratic { potential })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m(&self) -> usize {
        self.modes.len()
    }

    pub fn mode(&self, i: usize) -> &ModeHamiltonian {
        &self.modes[i]
    }

    pub fn eval(&self, i: usize, x: &[f64], p: &[f64]) -> Result<f64, HamiltonianError> {
        match self.modes.get(i) {
            Some(ModeHamiltonian::Quadratic { potential }) => {
                Ok(0.5 * p.iter().map(|v| v * v).sum::<f64>() + potential.value(x))
            }
            Some(ModeHamiltonian::Tabulated(t)) => t.eval(x, p),
            None => Err(HamiltonianError::Mode {
                mode: i,
                m: self.m(),
            }),
        }
    }

    /// `min_p H_i(x, p)`.
    pub fn min_over_p(&self, i: usize, x: &[f64]) -> f64 {
        match &self.modes[i] {
            ModeHamiltonian::Quadratic { potential } => potential.value(x),
            ModeHamiltonian::Tabulated(t) => {
                let xs = t.grid.stencil(x);
                (0..t.momenta.len())
                    .map(|k| xs.apply(|node| t.at(node, k)))
                    .fold(f64::INFINITY, f64::min)
            }
        }
    }

    /// `(min, max)` over `x` of `H_i(x, 0)`.
    pub fn zero_momentum_range(&self, i: usize) -> (f64, f64) {
        match &self.modes[i] {
            ModeHamiltonian::Quadratic { potential } => potential.range(self.dim),
            ModeHamiltonian::Tabulated(t) => {
                let z = t.momenta.zero_index();
                (0..t.grid.len())
                    .map(|node| t.at(node, z))
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v), hi.max(v))
                    })
            }
        }
    }

    /// `min_{x,p} H_i(x, p)`.
    pub fn global_min(&self, i: usize) -> f64 {
        match &self.modes[i] {
            ModeHamiltonian::Quadratic { potential } => potential.range(self.dim).0,
            ModeHamiltonian::Tabulated(t) => t.values.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    /// Lipschitz constant of `H_i` in `(x, p)` over `|p| <= radius`.
    pub fn local_lipschitz(&self, radius: f64) -> f64 {
        (0..self.m())
            .map(|i| match &self.modes[i] {
                ModeHamiltonian::Quadratic { potential } => {
                    radius + potential.gradient_bound(self.dim)
                }
                ModeHamiltonian::Tabulated(t) => {
                    let mut lip: f64 = 0.0;
                    let hp = t.momenta.spacing();
                    let hx = t.grid.spacing();
                    let n_p = t.momenta.points_per_axis();
                    for node in 0..t.grid.len() {
                        for k in 0..t.momenta.len() {
                            let p = t.momenta.velocity(k);
                            if p.iter().map(|v| v * v).sum::<f64>().sqrt() > radius + hp {
                                continue;
                            }
                            let m = t.momenta.multi(k);
                            let mut gp = 0.0;
                            let mut gx = 0.0;
                            for a in 0..self.dim {
                                let step = if a == 0 { 1 } else { n_p };
                                if m[a] + 1 < n_p {
                                    gp += ((t.at(node, k + step) - t.at(node, k)) / hp).powi(2);
                                }
                                let nb = t.grid.neighbor(node, a, 1);
                                gx += ((t.at(nb, k) - t.at(node, k)) / hx).powi(2);
                            }
                            lip = lip.max(gp.sqrt() + gx.sqrt());
                        }
                    }
                    lip
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Momentum and velocity bounds derived from coercivity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpeedBound {
    /// Momentum bound for subsolutions at the given level.
    pub ell: f64,
    /// Radius of the velocity box used by the dynamic programming.
    pub q_max: f64,
}

/// `ℓ = max{|p| : min_x H_i(x,p) <= α + ‖Λ‖_∞ u_osc for some i}` and
/// `q_max = max{|∂_p H_i| : |p| <= ℓ} + 1`.
pub fn speed_bound(
    spec: &HamiltonianSpec,
    coupling: &CouplingMatrix,
    alpha: f64,
    u_osc: f64,
) -> Result<SpeedBound, HamiltonianError> {
    let level = alpha + coupling.inf_norm() * u_osc;
    let mut ell: Option<f64> = None;
    let mut q_max: f64 = 0.0;
    for i in 0..spec.m() {
        match spec.mode(i) {
            ModeHamiltonian::Quadratic { potential } => {
                let (vmin, _) = potential.range(spec.dim());
                if level >= vmin {
                    let l = (2.0 * (level - vmin)).sqrt();
                    ell = Some(ell.map_or(l, |e| e.max(l)));
                }
            }
            ModeHamiltonian::Tabulated(t) => {
                let np = t.momenta.len();
                let mut feasible: Vec<usize> = Vec::new();
                for k in 0..np {
                    let min_x = (0..t.grid.len())
                        .map(|node| t.at(node, k))
                        .fold(f64::INFINITY, f64::min);
                    if min_x <= level {
                        feasible.push(k);
                    }
                }
                if let Some(l) = feasible
                    .iter()
                    .map(|&k| norm(&t.momenta.velocity(k)))
                    .reduce(f64::max)
                {
                    ell = Some(ell.map_or(l, |e| e.max(l)));
                    // slope of H along p over the feasible ball
                    let n_p = t.momenta.points_per_axis();
                    let hp = t.momenta.spacing();
                    for node in 0..t.grid.len() {
                        for k in 0..np {
                            if norm(&t.momenta.velocity(k)) > l + 1e-12 {
                                continue;
                            }
                            let m = t.momenta.multi(k);
                            let mut g = 0.0;
                            for a in 0..spec.dim() {
                                let step = if a == 0 { 1 } else { n_p };
                                let d = if m[a] + 1 < n_p {
                                    t.at(node, k + step) - t.at(node, k)
                                } else {
                                    t.at(node, k) - t.at(node, k - step)
                                };
                                g += (d / hp).powi(2);
                            }
                            q_max = q_max.max(g.sqrt());
                        }
                    }
                }
            }
        }
    }
    let ell = ell.ok_or(HamiltonianError::Infeasible { level })?;
    // for ½|p|² the velocity ∂_p H = p, so the quadratic modes contribute ℓ
    let quadratic_present = (0..spec.m())
        .any(|i| matches!(spec.mode(i), ModeHamiltonian::Quadratic { .. }));
    if quadratic_present {
        q_max = q_max.max(ell);
    }
    Ok(SpeedBound {
        ell,
        q_max: q_max + 1.0,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// The Lagrangians of all modes sampled on torus grid × velocity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianTable {
    grid: TorusGrid,
    velocities: VelocityGrid,
    m: usize,
    /// `values[(mode * nodes + node) * n_vel + q_index]`.
    values: Vec<f64>,
}

impl LagrangianTable {
    pub fn from_fn(
        grid: TorusGrid,
        velocities: VelocityGrid,
        m: usize,
        f: impl Fn(usize, &[f64], &[f64]) -> f64 + Sync,
    ) -> Self {
        let nv = velocities.len();
        let nodes = grid.len();
        let values: Vec<f64> = (0..m * nodes)
            .into_par_iter()
            .flat_map_iter(|row| {
                let (i, node) = (row / nodes, row % nodes);
                let x = grid.coords(node);
                let vel = &velocities;
                let f = &f;
                (0..nv).map(move |k| f(i, &x, &vel.velocity(k)))
            })
            .collect();
        Self {
            grid,
            velocities,
            m,
            values,
        }
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn velocities(&self) -> &VelocityGrid {
        &self.velocities
    }

    pub fn q_max(&self) -> f64 {
        self.velocities.q_max()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Table value at a node and velocity index.
    #[inline]
    pub fn node_value(&self, mode: usize, node: usize, q_index: usize) -> f64 {
        self.values[(mode * self.grid.len() + node) * self.velocities.len() + q_index]
    }

    /// Multilinear interpolation in `x` (periodic) and `q`.
    pub fn eval(&self, mode: usize, x: &[f64], q: &[f64]) -> Result<f64, HamiltonianError> {
        if mode >= self.m {
            return Err(HamiltonianError::Mode { mode, m: self.m });
        }
        self.grid.check_point(x)?;
        let qs = self
            .velocities
            .stencil(q)
            .ok_or_else(|| HamiltonianError::VelocityOutOfRange {
                q: q.to_vec(),
                q_max: self.q_max(),
            })?;
        let xs = self.grid.stencil(x);
        Ok(xs
            .iter()
            .map(|(node, w)| w * qs.apply(|k| self.node_value(mode, node, k)))
            .sum())
    }
}

/// Evaluates `L_i(x, q)` from the table.
pub fn eval_lagrangian(
    table: &LagrangianTable,
    i: usize,
    x: &[f64],
    q: &[f64],
) -> Result<f64, HamiltonianError> {
    table.eval(i, x, q)
}

/// `max_p (p·q - f(p))` over the box `[-radius, radius]^N` with `n` points per
/// axis, refined by a parabola through the neighbors of the discrete maximizer
/// along each axis. Errors when the discrete maximizer sits on the box boundary.
pub fn conjugate_on_box(
    f: impl Fn(&[f64]) -> f64,
    dim: usize,
    radius: f64,
    n: usize,
    q: &[f64],
) -> Result<f64, Vec<f64>> {
    let box_grid = VelocityGrid::new(dim, radius, n).expect("valid momentum box");
    let g = |k: usize| {
        let p = box_grid.velocity(k);
        p.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() - f(&p)
    };
    let (best, best_val) = (0..box_grid.len())
        .map(|k| (k, g(k)))
        .fold((0, f64::NEG_INFINITY), |acc, (k, v)| if v > acc.1 { (k, v) } else { acc });
    let m = box_grid.multi(best);
    let mut gain = 0.0;
    for a in 0..dim {
        if m[a] == 0 || m[a] == n - 1 {
            return Err(box_grid.velocity(best));
        }
        let step = if a == 0 { 1 } else { n };
        let (l, c, r) = (g(best - step), best_val, g(best + step));
        let denom = l - 2.0 * c + r;
        if denom < 0.0 {
            // vertex of the parabola through (-1,l), (0,c), (1,r)
            gain += (r - l).powi(2) / (-8.0 * denom);
        }
    }
    Ok(best_val + gain)
}

/// Lagrangian table by closed form for quadratic modes and by numerical
/// conjugation for tabulated ones.
pub fn legendre_transform(
    spec: &HamiltonianSpec,
    grid: &TorusGrid,
    q_max: f64,
    n_q: usize,
) -> Result<LagrangianTable, HamiltonianError> {
    if grid.dim() != spec.dim() {
        return Err(GridError::PointDimension {
            expected: spec.dim(),
            got: grid.dim(),
        }
        .into());
    }
    let velocities = VelocityGrid::new(spec.dim(), q_max, n_q)?;
    let failure = std::sync::Mutex::new(None);
    let table = LagrangianTable::from_fn(*grid, velocities, spec.m(), |i, x, q| {
        match spec.mode(i) {
            ModeHamiltonian::Quadratic { potential } => {
                0.5 * q.iter().map(|v| v * v).sum::<f64>() - potential.value(x)
            }
            ModeHamiltonian::Tabulated(t) => {
                let n_p = t.momenta.points_per_axis();
                match conjugate_on_box(
                    |p| t.eval(x, p).unwrap_or(f64::INFINITY),
                    spec.dim(),
                    t.momenta.q_max(),
                    n_p,
                    q,
                ) {
                    Ok(v) => v,
                    Err(_) => {
                        let mut slot = failure.lock().unwrap();
                        if slot.is_none() {
                            *slot = Some((x.to_vec(), q.to_vec()));
                        }
                        f64::NAN
                    }
                }
            }
        }
    });
    if let Some((x, q)) = failure.into_inner().unwrap() {
        return Err(HamiltonianError::MomentumBoxTooSmall { x, q });
    }
    Ok(table)
}

/// Lagrangian table computed purely numerically from `H`, on the momentum box
/// `[-p_radius, p_radius]^N` with `n_p` points per axis.
pub fn legendre_numeric(
    spec: &HamiltonianSpec,
    grid: &TorusGrid,
    q_max: f64,
    n_q: usize,
    p_radius: f64,
    n_p: usize,
) -> Result<LagrangianTable, HamiltonianError> {
    let velocities = VelocityGrid::new(spec.dim(), q_max, n_q)?;
    let failure = std::sync::Mutex::new(None);
    let table = LagrangianTable::from_fn(*grid, velocities, spec.m(), |i, x, q| {
        match conjugate_on_box(
            |p| spec.eval(i, x, p).unwrap_or(f64::INFINITY),
            spec.dim(),
            p_radius,
            n_p,
            q,
        ) {
            Ok(v) => v,
            Err(_) => {
                let mut slot = failure.lock().unwrap();
                if slot.is_none() {
                    *slot = Some((x.to_vec(), q.to_vec()));
                }
                f64::NAN
            }
        }
    });
    if let Some((x, q)) = failure.into_inner().unwrap() {
        return Err(HamiltonianError::MomentumBoxTooSmall { x, q });
    }
    Ok(table)
}

/// Default momentum box for the numerical transform: radius `ℓ + 2` and four
/// times the spatial resolution.
pub fn default_momentum_box(ell: f64, grid: &TorusGrid) -> (f64, usize) {
    let n = 4 * grid.points_per_axis() + 1;
    (ell + 2.0, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine_spec() -> HamiltonianSpec {
        HamiltonianSpec::quadratic(1, vec![Potential::cosine(1.0, 1.0)]).unwrap()
    }

    #[test]
    fn free_particle_is_self_dual() {
        let spec = HamiltonianSpec::quadratic(1, vec![Potential::Constant { value: 0.0 }]).unwrap();
        let grid = TorusGrid::new(1, 16).unwrap();
        let t = legendre_transform(&spec, &grid, 2.0, 21).unwrap();
        for k in 0..t.velocities().len() {
            let q = t.velocities().velocity(k)[0];
            assert!((t.node_value(0, 3, k) - 0.5 * q * q).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_transform_matches_direct_maximization() {
        // independent oracle: brute-force max over a fine p grid, no refinement
        let spec = cosine_spec();
        let grid = TorusGrid::new(1, 16).unwrap();
        let t = legendre_transform(&spec, &grid, 2.0, 9).unwrap();
        for node in 0..grid.len() {
            let x = grid.coords(node)[0];
            for k in 0..9 {
                let q = t.velocities().velocity(k)[0];
                let brute = (0..=40000)
                    .map(|j| -5.0 + j as f64 * 2.5e-4)
                    .map(|p| p * q - 0.5 * p * p - (2.0 * PI * x).cos())
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!((t.node_value(0, node, k) - brute).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn numeric_path_agrees_with_closed_form() {
        let spec = cosine_spec();
        let grid = TorusGrid::new(1, 32).unwrap();
        let closed = legendre_transform(&spec, &grid, 3.0, 13).unwrap();
        let (r, n) = default_momentum_box(2.0, &grid);
        let numeric = legendre_numeric(&spec, &grid, 3.0, 13, r, n).unwrap();
        for node in 0..grid.len() {
            for k in 0..13 {
                let d = closed.node_value(0, node, k) - numeric.node_value(0, node, k);
                assert!(d.abs() < 1e-10, "node {node} q {k}: {d}");
            }
        }
    }

    #[test]
    fn small_momentum_box_is_an_error() {
        let spec = cosine_spec();
        let grid = TorusGrid::new(1, 8).unwrap();
        let err = legendre_numeric(&spec, &grid, 3.0, 7, 1.0, 41).unwrap_err();
        assert!(matches!(err, HamiltonianError::MomentumBoxTooSmall { .. }));
    }

    #[test]
    fn biconjugate_recovers_hamiltonian() {
        let spec = cosine_spec();
        let grid = TorusGrid::new(1, 16).unwrap();
        let t = legendre_transform(&spec, &grid, 4.0, 161).unwrap();
        let dq = t.velocities().spacing();
        for node in 0..grid.len() {
            let x = grid.coords(node);
            for p in [-2.0, -0.7, 0.0, 1.3, 2.5] {
                let h = conjugate_on_box(
                    |q| t.eval(0, &x, q).unwrap(),
                    1,
                    t.q_max(),
                    161,
                    &[p],
                )
                .unwrap();
                let exact = spec.eval(0, &x, &[p]).unwrap();
                // modulus of the grid: the quadratic varies by ~dq² per cell
                assert!((h - exact).abs() <= 2.0 * dq * dq, "p {p}: {h} vs {exact}");
            }
        }
    }

    #[test]
    fn interpolation_at_nodes_and_midpoints() {
        let spec = cosine_spec();
        let grid = TorusGrid::new(1, 16).unwrap();
        let t = legendre_transform(&spec, &grid, 2.0, 9).unwrap();
        let x = grid.coords(5);
        let q = t.velocities().velocity(3);
        assert_eq!(t.eval(0, &x, &q).unwrap(), t.node_value(0, 5, 3));
        let xm = [x[0] + 0.5 * grid.spacing()];
        let mid = t.eval(0, &xm, &q).unwrap();
        assert!((mid - 0.5 * (t.node_value(0, 5, 3) + t.node_value(0, 6, 3))).abs() < 1e-14);
        assert!(matches!(
            t.eval(0, &x, &[2.5]),
            Err(HamiltonianError::VelocityOutOfRange { .. })
        ));
    }

    #[test]
    fn interpolation_error_is_second_order() {
        // max over off-node points of |interp - closed| scales like h²
        let spec = cosine_spec();
        let err = |n: usize| {
            let grid = TorusGrid::new(1, n).unwrap();
            let t = legendre_transform(&spec, &grid, 1.0, 3).unwrap();
            (0..997)
                .map(|j| j as f64 / 997.0)
                .map(|x| (t.eval(0, &[x], &[0.0]).unwrap() + (2.0 * PI * x).cos()).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(32), err(64));
        let h = 1.0 / 32.0;
        // |V''| <= 4π², linear interpolation error <= h²/8 |V''|
        assert!(e1 <= 0.5 * PI * PI * h * h);
        assert!(e2 < 0.3 * e1);
    }

    #[test]
    fn speed_bound_examples() {
        let lam = CouplingMatrix::scalar();
        let spec = cosine_spec();
        let b = speed_bound(&spec, &lam, 1.0, 0.0).unwrap();
        assert!((b.ell - 2.0).abs() < 1e-15);
        assert!((b.q_max - 3.0).abs() < 1e-15);

        let free = HamiltonianSpec::quadratic(1, vec![Potential::Constant { value: 0.0 }]).unwrap();
        let b = speed_bound(&free, &lam, 0.0, 0.0).unwrap();
        assert_eq!(b.ell, 0.0);
        assert_eq!(b.q_max, 1.0);

        assert!(matches!(
            speed_bound(&spec, &lam, -1.5, 0.0),
            Err(HamiltonianError::Infeasible { .. })
        ));
    }

    #[test]
    fn tabulated_hamiltonian_round_trip() {
        let grid = TorusGrid::new(1, 16).unwrap();
        let momenta = VelocityGrid::new(1, 6.0, 241).unwrap();
        let tab = TabulatedHamiltonian::from_fn(grid, momenta, |x, p| {
            0.5 * p[0] * p[0] + (2.0 * PI * x[0]).cos()
        });
        let spec = HamiltonianSpec::new(1, vec![ModeHamiltonian::Tabulated(tab)]).unwrap();
        let t = legendre_transform(&spec, &grid, 3.0, 13).unwrap();
        let closed = legendre_transform(&cosine_spec(), &grid, 3.0, 13).unwrap();
        for node in 0..16 {
            for k in 0..13 {
                assert!((t.node_value(0, node, k) - closed.node_value(0, node, k)).abs() < 1e-9);
            }
        }
        let b = speed_bound(&spec, &CouplingMatrix::scalar(), 1.0, 0.0).unwrap();
        assert!((b.ell - 2.0).abs() < 0.05);
    }

    #[test]
    fn nonconvex_table_is_rejected() {
        let grid = TorusGrid::new(1, 8).unwrap();
        let momenta = VelocityGrid::new(1, 3.0, 31).unwrap();
        let tab = TabulatedHamiltonian::from_fn(grid, momenta, |_, p| (p[0] * p[0] - 1.0).powi(2) - 3.0 * p[0].abs());
        assert!(HamiltonianSpec::new(1, vec![ModeHamiltonian::Tabulated(tab)]).is_err());
    }
}
