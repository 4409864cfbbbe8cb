//! Piecewise-constant index paths of the switching chain, cylinder measures,
//! exact path sampling, the shift flow, nonanticipating controls and the
//! integrated curves they drive on the torus.

use std::io::{self, BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupling::{CouplingError, CouplingMatrix, ProbabilityVector};
use crate::grid::{torus_distance, wrap_unit, TorusGrid};
use crate::stopping::{StoppingError, StoppingRule};

#[derive(Debug, Error)]
pub enum PathError {
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error(transparent)]
    Stopping(#[from] StoppingError),
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("cylinder times must be nonnegative and strictly increasing: {0:?}")]
    UnorderedTimes(Vec<f64>),
    #[error("cylinder is malformed: {0}")]
    InvalidCylinder(String),
    #[error("control velocity {velocity:?} at t = {time} exceeds the bound {q_max}")]
    VelocityBound {
        time: f64,
        velocity: Vec<f64>,
        q_max: f64,
    },
    #[error("invalid control: {0}")]
    InvalidControl(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A right-continuous piecewise-constant path of mode indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexPath {
    initial: usize,
    jumps: Vec<(f64, usize)>,
    horizon: f64,
}

impl IndexPath {
    pub fn new(initial: usize, jumps: Vec<(f64, usize)>, horizon: f64) -> Result<Self, PathError> {
        let mut prev_t = 0.0;
        let mut prev_i = initial;
        for &(t, i) in &jumps {
            if !(t > prev_t) || !t.is_finite() {
                return Err(PathError::InvalidPath(format!(
                    "jump times must be positive and strictly increasing (got {t} after {prev_t})"
                )));
            }
            if i == prev_i {
                return Err(PathError::InvalidPath(format!(
                    "jump at {t} does not change the index {i}"
                )));
            }
            prev_t = t;
            prev_i = i;
        }
        if !(horizon >= 0.0) {
            return Err(PathError::InvalidPath(format!("negative horizon {horizon}")));
        }
        Ok(Self {
            initial,
            jumps,
            horizon,
        })
    }

    pub fn constant(initial: usize, horizon: f64) -> Self {
        Self {
            initial,
            jumps: Vec::new(),
            horizon,
        }
    }

    pub fn initial(&self) -> usize {
        self.initial
    }

    pub fn jumps(&self) -> &[(f64, usize)] {
        &self.jumps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// `ω(t)`; constant after the last recorded jump.
    pub fn evaluate(&self, t: f64) -> usize {
        let k = self.jumps.partition_point(|&(s, _)| s <= t);
        if k == 0 {
            self.initial
        } else {
            self.jumps[k - 1].1
        }
    }

    /// Number of jumps in `(0, t]`.
    pub fn jumps_until(&self, t: f64) -> usize {
        self.jumps.partition_point(|&(s, _)| s <= t)
    }

    /// The shifted path `s ↦ ω(s + h)`.
    pub fn shift(&self, h: f64) -> IndexPath {
        assert!(h >= 0.0, "shift must be nonnegative");
        if h == 0.0 {
            return self.clone();
        }
        let initial = self.evaluate(h);
        let jumps = self
            .jumps
            .iter()
            .filter(|(t, _)| *t > h)
            .map(|&(t, i)| (t - h, i))
            .collect();
        IndexPath {
            initial,
            jumps,
            horizon: (self.horizon - h).max(0.0),
        }
    }

    /// Keeps the record on `[0, t]` and appends `tail` (a path started at `t`
    /// from `ω(t)`), shifted forward by `t`.
    pub fn splice(&self, t: f64, tail: &IndexPath) -> IndexPath {
        let mut jumps: Vec<(f64, usize)> =
            self.jumps.iter().copied().filter(|(s, _)| *s <= t).collect();
        let mut last = jumps.last().map_or(self.initial, |j| j.1);
        for &(s, i) in &tail.jumps {
            if s > 0.0 && i != last {
                jumps.push((s + t, i));
                last = i;
            }
        }
        IndexPath {
            initial: self.initial,
            jumps,
            horizon: t + tail.horizon,
        }
    }
}

/// Thin cylinder `{ω : ω(t_1) = j_1, …, ω(t_k) = j_k}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub times: Vec<f64>,
    pub indices: Vec<usize>,
}

impl Cylinder {
    pub fn new(times: Vec<f64>, indices: Vec<usize>) -> Result<Self, PathError> {
        let c = Self { times, indices };
        c.check()?;
        Ok(c)
    }

    fn check(&self) -> Result<(), PathError> {
        if self.times.is_empty() || self.times.len() != self.indices.len() {
            return Err(PathError::InvalidCylinder(format!(
                "{} times and {} indices",
                self.times.len(),
                self.indices.len()
            )));
        }
        let ordered = self.times[0] >= 0.0
            && self.times.iter().all(|t| t.is_finite())
            && self.times.windows(2).all(|w| w[1] > w[0]);
        if !ordered {
            return Err(PathError::UnorderedTimes(self.times.clone()));
        }
        Ok(())
    }

    pub fn contains(&self, path: &IndexPath) -> bool {
        self.times
            .iter()
            .zip(&self.indices)
            .all(|(t, j)| path.evaluate(*t) == *j)
    }

    pub fn last_time(&self) -> f64 {
        *self.times.last().expect("nonempty")
    }
}

/// `(a e^{-t_1Λ})_{j_1} ∏_l (e^{-(t_l - t_{l-1})Λ})_{j_{l-1} j_l}`.
pub fn cylinder_probability(
    coupling: &CouplingMatrix,
    a: &ProbabilityVector,
    c: &Cylinder,
) -> Result<f64, PathError> {
    c.check()?;
    let m = coupling.m();
    if a.len() != m {
        return Err(CouplingError::Dimension {
            expected: m,
            got: a.len(),
        }
        .into());
    }
    if let Some(&j) = c.indices.iter().find(|&&j| j >= m) {
        return Err(PathError::InvalidCylinder(format!("index {j} >= M = {m}")));
    }
    let first = coupling.semigroup(c.times[0])?;
    let mut p = first.left_apply(a.as_slice())[c.indices[0]];
    for l in 1..c.times.len() {
        let step = coupling.semigroup(c.times[l] - c.times[l - 1])?;
        p *= step.get(c.indices[l - 1], c.indices[l]);
    }
    Ok(p)
}

/// The per-path random stream: ChaCha8 seeded by `seed`, stream `stream`.
pub fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws an index from a probability vector.
pub fn draw_index<R: Rng + ?Sized>(a: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in a.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Exact simulation of the chain with generator `-Λ` on `[0, horizon]`.
pub fn sample_with_rng<R: Rng + ?Sized>(
    coupling: &CouplingMatrix,
    a: &ProbabilityVector,
    horizon: f64,
    rng: &mut R,
) -> IndexPath {
    let mut state = draw_index(a.as_slice(), rng);
    let initial = state;
    let mut t = 0.0;
    let mut jumps = Vec::new();
    let m = coupling.m();
    loop {
        let rate = coupling.exit_rate(state);
        if !(rate > 0.0) {
            break;
        }
        t += Exp::new(rate).expect("positive rate").sample(rng);
        if t > horizon {
            break;
        }
        let u: f64 = rng.random::<f64>() * rate;
        let mut acc = 0.0;
        let mut next = state;
        for j in 0..m {
            if j == state {
                continue;
            }
            let w = -coupling.get(state, j);
            if w > 0.0 {
                next = j;
                acc += w;
                if u < acc {
                    break;
                }
            }
        }
        state = next;
        jumps.push((t, state));
    }
    IndexPath {
        initial,
        jumps,
        horizon,
    }
}

/// One path from stream 0 of `seed`.
pub fn sample_index_path(
    coupling: &CouplingMatrix,
    a: &ProbabilityVector,
    horizon: f64,
    seed: u64,
) -> IndexPath {
    sample_with_rng(coupling, a, horizon, &mut path_rng(seed, 0))
}

/// `count` independent paths; path `k` uses stream `k`.
pub fn sample_paths(
    coupling: &CouplingMatrix,
    a: &ProbabilityVector,
    horizon: f64,
    seed: u64,
    count: usize,
) -> Vec<IndexPath> {
    (0..count as u64)
        .into_par_iter()
        .map(|k| sample_with_rng(coupling, a, horizon, &mut path_rng(seed, k)))
        .collect()
}

pub type Vec2 = [f64; 2];

fn to_vec2(v: &[f64]) -> Vec2 {
    let mut out = [0.0; 2];
    out[..v.len()].copy_from_slice(v);
    out
}

/// A piecewise-constant open-loop control: `values[k]` on `[times[k], times[k+1])`,
/// and the last value afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseConstant {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl PiecewiseConstant {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self, PathError> {
        if times.is_empty() || times.len() != values.len() || times[0] != 0.0 {
            return Err(PathError::InvalidControl(
                "piecewise-constant control needs matching times/values starting at 0".into(),
            ));
        }
        if !times.windows(2).all(|w| w[1] > w[0]) {
            return Err(PathError::InvalidControl("breakpoints must increase".into()));
        }
        Ok(Self { times, values })
    }

    pub fn value(&self, t: f64) -> &[f64] {
        let k = self.times.partition_point(|&s| s <= t).max(1);
        &self.values[k - 1]
    }
}

/// Velocities per (time layer, mode, grid node).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackTable {
    pub grid: TorusGrid,
    pub m: usize,
    /// Width of a time layer; the last layer applies to all later times.
    pub cell_dt: f64,
    pub layers: usize,
    /// `velocities[((layer * m + mode) * nodes + node)]`.
    pub velocities: Vec<Vec<f64>>,
}

impl FeedbackTable {
    /// A time-independent table.
    pub fn stationary(grid: TorusGrid, m: usize, velocities: Vec<Vec<f64>>) -> Result<Self, PathError> {
        if velocities.len() != m * grid.len() {
            return Err(PathError::InvalidControl("feedback table size".into()));
        }
        Ok(Self {
            grid,
            m,
            cell_dt: f64::INFINITY,
            layers: 1,
            velocities,
        })
    }

    pub fn lookup(&self, t: f64, mode: usize, position: &[f64]) -> &[f64] {
        let layer = if self.layers <= 1 {
            0
        } else {
            ((t / self.cell_dt).floor() as usize).min(self.layers - 1)
        };
        let node = self.grid.nearest(position);
        &self.velocities[(layer * self.m + mode) * self.grid.len() + node]
    }
}

/// Sample-and-hold control: on `[t_{j-1}, t_j)` (with `t_0 = 0`) the velocity is
/// `velocities[j-1][ω(t_{j-1})]`; zero after the last level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleHold {
    pub times: Vec<f64>,
    /// `velocities[level][mode]`.
    pub velocities: Vec<Vec<Vec<f64>>>,
}

impl SampleHold {
    pub fn new(times: Vec<f64>, velocities: Vec<Vec<Vec<f64>>>) -> Result<Self, PathError> {
        if times.is_empty() || times.len() != velocities.len() {
            return Err(PathError::InvalidControl("sample-and-hold level count".into()));
        }
        if !(times[0] >= 0.0) || !times.windows(2).all(|w| w[1] > w[0]) {
            return Err(PathError::InvalidControl("levels must increase".into()));
        }
        Ok(Self { times, velocities })
    }

    /// Level `j` (0-based) whose interval contains `t`, with its left endpoint.
    pub fn level(&self, t: f64) -> Option<(usize, f64)> {
        let j = self.times.partition_point(|&s| s <= t);
        if j >= self.times.len() {
            None
        } else {
            Some((j, if j == 0 { 0.0 } else { self.times[j - 1] }))
        }
    }
}

/// A nonanticipating control rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ControlPolicy {
    Constant { velocity: Vec<f64> },
    OpenLoop { path: PiecewiseConstant },
    Feedback { table: FeedbackTable },
    SampleHold { control: SampleHold },
    /// `prefix` on `[0, switch)`, then `tail` applied to the shifted path.
    Concatenation {
        prefix: PiecewiseConstant,
        switch: f64,
        tail: Box<ControlPolicy>,
    },
}

impl ControlPolicy {
    pub fn constant(q: &[f64]) -> Self {
        ControlPolicy::Constant { velocity: q.to_vec() }
    }

    pub fn zero(dim: usize) -> Self {
        ControlPolicy::Constant {
            velocity: vec![0.0; dim],
        }
    }

    /// Velocity at local time `t` for a policy started at absolute time `offset`.
    fn velocity_at(&self, t: f64, offset: f64, path: &IndexPath, position: &[f64]) -> Vec2 {
        match self {
            ControlPolicy::Constant { velocity } => to_vec2(velocity),
            ControlPolicy::OpenLoop { path: pc } => to_vec2(pc.value(t)),
            ControlPolicy::Feedback { table } => {
                to_vec2(table.lookup(t, path.evaluate(offset + t), position))
            }
            ControlPolicy::SampleHold { control } => match control.level(t) {
                Some((j, start)) => to_vec2(&control.velocities[j][path.evaluate(offset + start)]),
                None => [0.0; 2],
            },
            ControlPolicy::Concatenation {
                prefix,
                switch,
                tail,
            } => {
                if t < *switch {
                    to_vec2(prefix.value(t))
                } else {
                    tail.velocity_at(t - switch, offset + switch, path, position)
                }
            }
        }
    }

    /// The control value at time `t` along `path` given the current position.
    pub fn velocity(&self, t: f64, path: &IndexPath, position: &[f64]) -> Vec<f64> {
        let v = self.velocity_at(t, 0.0, path, position);
        v[..position.len()].to_vec()
    }
}

/// Lifted (unprojected) displacement sampled on a uniform time grid; linear
/// between samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusCurve {
    pub dim: usize,
    pub dt: f64,
    pub points: Vec<Vec2>,
}

impl TorusCurve {
    /// Lifted displacement `∫_0^t ξ ds`.
    pub fn displacement(&self, t: f64) -> Vec2 {
        let cells = self.points.len() - 1;
        let s = (t / self.dt).max(0.0);
        let k = (s.floor() as usize).min(cells.saturating_sub(1));
        let f = (s - k as f64).clamp(0.0, if cells == 0 { 0.0 } else { f64::INFINITY });
        let (a, b) = if cells == 0 {
            (self.points[0], self.points[0])
        } else {
            (self.points[k], self.points[k + 1])
        };
        let mut out = [0.0; 2];
        for d in 0..self.dim {
            out[d] = a[d] + f * (b[d] - a[d]);
        }
        out
    }

    /// Position on the torus of `x0 + ∫_0^t ξ ds`.
    pub fn position(&self, x0: &[f64], t: f64) -> Vec<f64> {
        let d = self.displacement(t);
        (0..self.dim).map(|a| wrap_unit(x0[a] + d[a])).collect()
    }

    pub fn horizon(&self) -> f64 {
        (self.points.len() - 1) as f64 * self.dt
    }
}

/// A control evaluated cell by cell along one index path.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    /// Velocity on cell `k`, i.e. on `[k dt, (k+1) dt)`.
    pub velocities: Vec<Vec2>,
    pub curve: TorusCurve,
}

impl Realization {
    pub fn dt(&self) -> f64 {
        self.curve.dt
    }

    pub fn control_record(&self) -> PiecewiseConstant {
        let dim = self.curve.dim;
        PiecewiseConstant {
            times: (0..self.velocities.len()).map(|k| k as f64 * self.dt()).collect(),
            values: self.velocities.iter().map(|v| v[..dim].to_vec()).collect(),
        }
    }
}

/// Evaluates `policy` on the cells of width `dt` covering `[0, horizon]` and
/// integrates it; the position fed to feedback rules is `x0 + ∫ξ`.
pub fn realize_control(
    policy: &ControlPolicy,
    path: &IndexPath,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    q_max: f64,
) -> Result<Realization, PathError> {
    if !(dt > 0.0) {
        return Err(PathError::InvalidControl(format!("dt must be positive, got {dt}")));
    }
    let dim = x0.len();
    let cells = ((horizon / dt).ceil() as usize).max(1);
    let mut velocities = Vec::with_capacity(cells);
    let mut points = Vec::with_capacity(cells + 1);
    let mut pos = [0.0; 2];
    points.push(pos);
    let bound = q_max * (1.0 + 1e-12);
    let mut here = vec![0.0; dim];
    for k in 0..cells {
        let t = k as f64 * dt;
        for a in 0..dim {
            here[a] = wrap_unit(x0[a] + pos[a]);
        }
        let v = policy.velocity_at(t, 0.0, path, &here);
        if v[..dim].iter().any(|c| !(c.abs() <= bound)) {
            return Err(PathError::VelocityBound {
                time: t,
                velocity: v[..dim].to_vec(),
                q_max,
            });
        }
        for a in 0..dim {
            pos[a] += dt * v[a];
        }
        velocities.push(v);
        points.push(pos);
    }
    Ok(Realization {
        velocities,
        curve: TorusCurve { dim, dt, points },
    })
}

/// Result of [`check_cycle`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CycleCheck {
    pub violations: usize,
    pub samples: usize,
    pub fraction: f64,
}

impl CycleCheck {
    pub fn is_member(&self) -> bool {
        self.violations == 0
    }
}

/// Shared sampling parameters for path-based estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub samples: usize,
    pub seed: u64,
    /// Width of the control cells.
    pub dt: f64,
}

/// Fraction of sampled paths whose displacement at `τ` misses `displacement`
/// by more than `tolerance` in torus distance.
#[allow(clippy::too_many_arguments)]
pub fn check_cycle(
    coupling: &CouplingMatrix,
    a: &ProbabilityVector,
    policy: &ControlPolicy,
    rule: &StoppingRule,
    x0: &[f64],
    displacement: &[f64],
    q_max: f64,
    tolerance: f64,
    sampling: SamplingConfig,
) -> Result<CycleCheck, PathError> {
    let horizon = rule.cap() + 1.0;
    let misses: Vec<bool> = (0..sampling.samples as u64)
        .into_par_iter()
        .map(|k| -> Result<bool, PathError> {
            let path = sample_with_rng(coupling, a, horizon, &mut path_rng(sampling.seed, k));
            let real = realize_control(policy, &path, x0, horizon, sampling.dt, q_max)?;
            let tau = rule.evaluate_along(&path, Some((&real.curve, x0)))?;
            let d = real.curve.displacement(tau);
            Ok(torus_distance(&d[..x0.len()], displacement) > tolerance)
        })
        .collect::<Result<_, _>>()?;
    let violations = misses.iter().filter(|m| **m).count();
    Ok(CycleCheck {
        violations,
        samples: sampling.samples,
        fraction: violations as f64 / sampling.samples.max(1) as f64,
    })
}

/// Writes `# M N T` followed by `t index` lines (the initial index at `t = 0`).
pub fn write_path<W: Write>(w: &mut W, m: usize, dim: usize, path: &IndexPath) -> io::Result<()> {
    writeln!(w, "# {} {} {}", m, dim, path.horizon)?;
    writeln!(w, "0 {}", path.initial)?;
    for (t, i) in &path.jumps {
        writeln!(w, "{t} {i}")?;
    }
    Ok(())
}

/// Reads the format of [`write_path`]; returns `(M, N, path)`.
pub fn read_path<R: BufRead>(r: R) -> Result<(usize, usize, IndexPath), PathError> {
    let mut header: Option<(usize, usize, f64)> = None;
    let mut initial = None;
    let mut jumps = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line_no = lineno + 1;
        let err = |msg: &str| PathError::Parse {
            line: line_no,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields[0] == "#" {
            if fields.len() != 4 {
                return Err(err("header must be '# M N T'"));
            }
            header = Some((
                fields[1].parse().map_err(|_| err("bad M"))?,
                fields[2].parse().map_err(|_| err("bad N"))?,
                fields[3].parse().map_err(|_| err("bad T"))?,
            ));
            continue;
        }
        if fields.len() != 2 {
            return Err(err("expected 't index'"));
        }
        let t: f64 = fields[0].parse().map_err(|_| err("bad time"))?;
        let i: usize = fields[1].parse().map_err(|_| err("bad index"))?;
        if initial.is_none() {
            if t != 0.0 {
                return Err(err("first line must be the index at t = 0"));
            }
            initial = Some(i);
        } else {
            jumps.push((t, i));
        }
    }
    let (m, dim, horizon) = header.ok_or(PathError::Parse {
        line: 0,
        msg: "missing header".into(),
    })?;
    let path = IndexPath::new(
        initial.ok_or(PathError::Parse {
            line: 0,
            msg: "missing initial index".into(),
        })?,
        jumps,
        horizon,
    )?;
    Ok((m, dim, path))
}

/// Writes `# M N T` followed by `t x1 [x2]` lines at the curve samples.
pub fn write_curve<W: Write>(
    w: &mut W,
    m: usize,
    x0: &[f64],
    curve: &TorusCurve,
) -> io::Result<()> {
    writeln!(w, "# {} {} {}", m, curve.dim, curve.horizon())?;
    for k in 0..curve.points.len() {
        let t = k as f64 * curve.dt;
        let p = curve.position(x0, t);
        let coords: Vec<String> = p.iter().map(|c| c.to_string()).collect();
        writeln!(w, "{t} {}", coords.join(" "))?;
    }
    Ok(())
}
