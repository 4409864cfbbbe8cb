//! Bounded stopping rules on index paths, their dyadic simple approximations,
//! the level decomposition of simple rules, and Monte Carlo estimates of the
//! stopped transition matrix.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupling::{CouplingError, CouplingMatrix, ProbabilityVector, StochasticMatrix};
use crate::grid::torus_distance;
use crate::paths::{path_rng, sample_with_rng, IndexPath, TorusCurve};

#[derive(Debug, Error)]
pub enum StoppingError {
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error("stopping rule is not simple: {0}")]
    NotSimple(String),
    #[error("stopping rule needs the controlled curve: {0}")]
    NeedsCurve(String),
    #[error("invalid stopping rule: {0}")]
    Invalid(String),
    #[error("cannot parse stopping rule '{input}': {msg}")]
    Parse { input: String, msg: String },
}

/// A bounded stopping time adapted to the path filtration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StoppingRule {
    Deterministic { t: f64 },
    /// First time the index lies in `modes`, capped.
    Hitting { modes: Vec<usize>, cap: f64 },
    /// Time of the `n`-th jump, capped.
    NthJump { n: usize, cap: f64 },
    /// `(⌊τ 2ⁿ⌋ + 1) / 2ⁿ` for the base rule `τ`.
    Dyadic { level: u32, base: Box<StoppingRule> },
    /// Stops at the first `times[j]` with `ω(times[j]) ∈ stop_sets[j]`, and at
    /// the last time in any case.
    Monitored {
        times: Vec<f64>,
        stop_sets: Vec<Vec<usize>>,
    },
    /// `max(t, base)`.
    AtLeast { t: f64, base: Box<StoppingRule> },
    /// First sample time of the curve within `radius` of `target` while the
    /// index lies in `modes`, capped.
    Arrival {
        target: Vec<f64>,
        radius: f64,
        modes: Vec<usize>,
        cap: f64,
    },
}

impl StoppingRule {
    pub fn deterministic(t: f64) -> Self {
        StoppingRule::Deterministic { t }
    }

    pub fn hitting(modes: Vec<usize>, cap: f64) -> Self {
        StoppingRule::Hitting { modes, cap }
    }

    pub fn nth_jump(n: usize, cap: f64) -> Self {
        StoppingRule::NthJump { n, cap }
    }

    pub fn monitored(times: Vec<f64>, stop_sets: Vec<Vec<usize>>) -> Result<Self, StoppingError> {
        let rule = StoppingRule::Monitored { times, stop_sets };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<(), StoppingError> {
        let bad = |msg: String| Err(StoppingError::Invalid(msg));
        match self {
            StoppingRule::Deterministic { t } if !(*t >= 0.0 && t.is_finite()) => {
                bad(format!("deterministic time {t}"))
            }
            StoppingRule::Hitting { cap, .. }
            | StoppingRule::NthJump { cap, .. }
            | StoppingRule::Arrival { cap, .. }
                if !(*cap >= 0.0 && cap.is_finite()) =>
            {
                bad(format!("cap {cap}"))
            }
            StoppingRule::Monitored { times, stop_sets } => {
                if times.is_empty() || times.len() != stop_sets.len() {
                    return bad("monitored rule needs one stop set per time".into());
                }
                if !(times[0] >= 0.0) || !times.windows(2).all(|w| w[1] > w[0]) {
                    return bad(format!("monitoring times must increase: {times:?}"));
                }
                Ok(())
            }
            StoppingRule::Dyadic { base, .. } => base.validate(),
            StoppingRule::AtLeast { t, base } => {
                if !(*t >= 0.0) {
                    return bad(format!("lower bound {t}"));
                }
                base.validate()
            }
            _ => Ok(()),
        }
    }

    /// The almost-sure bound.
    pub fn cap(&self) -> f64 {
        match self {
            StoppingRule::Deterministic { t } => *t,
            StoppingRule::Hitting { cap, .. }
            | StoppingRule::NthJump { cap, .. }
            | StoppingRule::Arrival { cap, .. } => *cap,
            StoppingRule::Dyadic { level, base } => dyadic_ceiling(base.cap(), *level),
            StoppingRule::Monitored { times, .. } => *times.last().unwrap_or(&0.0),
            StoppingRule::AtLeast { t, base } => t.max(base.cap()),
        }
    }

    pub fn needs_curve(&self) -> bool {
        match self {
            StoppingRule::Arrival { .. } => true,
            StoppingRule::Dyadic { base, .. } | StoppingRule::AtLeast { base, .. } => {
                base.needs_curve()
            }
            _ => false,
        }
    }

    /// `τ(ω)` for rules that depend on the index path only.
    pub fn evaluate(&self, path: &IndexPath) -> Result<f64, StoppingError> {
        self.evaluate_along(path, None)
    }

    /// `τ(ω)`; `curve` carries the controlled displacement and the start point
    /// for rules that look at the position.
    pub fn evaluate_along(
        &self,
        path: &IndexPath,
        curve: Option<(&TorusCurve, &[f64])>,
    ) -> Result<f64, StoppingError> {
        Ok(match self {
            StoppingRule::Deterministic { t } => *t,
            StoppingRule::Hitting { modes, cap } => {
                if modes.contains(&path.initial()) {
                    0.0
                } else {
                    path.jumps()
                        .iter()
                        .find(|(_, i)| modes.contains(i))
                        .map_or(*cap, |&(t, _)| t.min(*cap))
                }
            }
            StoppingRule::NthJump { n, cap } => {
                if *n == 0 {
                    0.0
                } else {
                    path.jumps().get(n - 1).map_or(*cap, |&(t, _)| t.min(*cap))
                }
            }
            StoppingRule::Dyadic { level, base } => {
                dyadic_ceiling(base.evaluate_along(path, curve)?, *level)
            }
            StoppingRule::Monitored { times, stop_sets } => {
                let last = times.len() - 1;
                times
                    .iter()
                    .zip(stop_sets)
                    .enumerate()
                    .find(|(j, (t, s))| *j == last || s.contains(&path.evaluate(**t)))
                    .map(|(_, (t, _))| *t)
                    .expect("nonempty monitoring times")
            }
            StoppingRule::AtLeast { t, base } => t.max(base.evaluate_along(path, curve)?),
            StoppingRule::Arrival {
                target,
                radius,
                modes,
                cap,
            } => {
                let (curve, x0) = curve.ok_or_else(|| {
                    StoppingError::NeedsCurve("arrival rule evaluated without a curve".into())
                })?;
                let mut out = *cap;
                for k in 0..curve.points.len() {
                    let t = k as f64 * curve.dt;
                    if t > *cap {
                        break;
                    }
                    if modes.contains(&path.evaluate(t))
                        && torus_distance(&curve.position(x0, t), target) <= *radius
                    {
                        out = t;
                        break;
                    }
                }
                out
            }
        })
    }

    /// The finitely many values of a simple rule, increasing; `None` when the
    /// rule can take a continuum of values.
    pub fn support(&self) -> Option<Vec<f64>> {
        match self {
            StoppingRule::Deterministic { t } => Some(vec![*t]),
            StoppingRule::Monitored { times, .. } => Some(times.clone()),
            StoppingRule::Dyadic { level, base } => {
                let scale = 2f64.powi(*level as i32);
                let top = (base.cap() * scale).floor() as usize + 1;
                Some((1..=top).map(|j| j as f64 / scale).collect())
            }
            StoppingRule::AtLeast { t, base } => base.support().map(|s| {
                let mut v: Vec<f64> = s.into_iter().map(|x| x.max(*t)).collect();
                v.dedup();
                v
            }),
            _ => None,
        }
    }
}

/// `(⌊τ 2ⁿ⌋ + 1) / 2ⁿ`: the right end of the half-open dyadic cell holding `τ`.
pub fn dyadic_ceiling(tau: f64, level: u32) -> f64 {
    let scale = 2f64.powi(level as i32);
    ((tau * scale).floor() + 1.0) / scale
}

/// The simple rule `τ_n` approximating `rule` from above.
pub fn dyadic_approximation(rule: &StoppingRule, level: u32) -> StoppingRule {
    StoppingRule::Dyadic {
        level,
        base: Box::new(rule.clone()),
    }
}

/// Levels `t_1 < … < t_l` of a simple rule with `E_j = {τ = t_j}` and
/// `F_j = {τ ≥ t_j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimpleDecomposition {
    rule: StoppingRule,
    times: Vec<f64>,
}

impl SimpleDecomposition {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn levels(&self) -> usize {
        self.times.len()
    }

    /// Index `j` with `τ(ω) = t_j`.
    pub fn level_of(&self, path: &IndexPath) -> Result<usize, StoppingError> {
        let tau = self.rule.evaluate(path)?;
        self.times
            .iter()
            .position(|t| *t == tau)
            .ok_or_else(|| StoppingError::NotSimple(format!("value {tau} outside the support")))
    }

    pub fn in_e(&self, j: usize, path: &IndexPath) -> Result<bool, StoppingError> {
        Ok(self.level_of(path)? == j)
    }

    pub fn in_f(&self, j: usize, path: &IndexPath) -> Result<bool, StoppingError> {
        Ok(self.level_of(path)? >= j)
    }

    /// `(Σ_j t_j 𝕀(E_j), Σ_j (t_j − t_{j−1}) 𝕀(F_j))` on one path.
    pub fn identity_sides(&self, path: &IndexPath) -> Result<(f64, f64), StoppingError> {
        let level = self.level_of(path)?;
        let lhs = self.times[level];
        let mut rhs = 0.0;
        let mut prev = 0.0;
        for (j, t) in self.times.iter().enumerate() {
            if j <= level {
                rhs += t - prev;
            }
            prev = *t;
        }
        Ok((lhs, rhs))
    }
}

pub fn decompose_simple(rule: &StoppingRule) -> Result<SimpleDecomposition, StoppingError> {
    rule.validate()?;
    let times = rule
        .support()
        .ok_or_else(|| StoppingError::NotSimple(format!("{rule}")))?;
    Ok(SimpleDecomposition {
        rule: rule.clone(),
        times,
    })
}

/// Row `i` is the empirical law of `ω(τ)` over `samples` paths started at `i`;
/// path `k` of row `i` uses stream `(i << 40) | k`.
pub fn estimate_stopped_matrix(
    coupling: &CouplingMatrix,
    rule: &StoppingRule,
    samples: usize,
    seed: u64,
) -> Result<StochasticMatrix, StoppingError> {
    if rule.needs_curve() {
        return Err(StoppingError::NeedsCurve(format!("{rule}")));
    }
    if samples == 0 {
        return Err(StoppingError::Invalid("need at least one sample".into()));
    }
    let m = coupling.m();
    let horizon = rule.cap() + 1.0;
    let mut out = DMatrix::zeros(m, m);
    for i in 0..m {
        let a = ProbabilityVector::basis(m, i);
        let ends: Vec<usize> = (0..samples as u64)
            .into_par_iter()
            .map(|k| -> Result<usize, StoppingError> {
                let mut rng = path_rng(seed, ((i as u64) << 40) | k);
                let path = sample_with_rng(coupling, &a, horizon, &mut rng);
                Ok(path.evaluate(rule.evaluate(&path)?))
            })
            .collect::<Result<_, _>>()?;
        for j in ends {
            out[(i, j)] += 1.0;
        }
        for j in 0..m {
            out[(i, j)] /= samples as f64;
        }
    }
    Ok(StochasticMatrix::new(out)?)
}

impl fmt::Display for StoppingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |v: &[usize]| {
            v.iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        match self {
            StoppingRule::Deterministic { t } => write!(f, "deterministic t={t}"),
            StoppingRule::Hitting { modes, cap } => write!(f, "hit modes=[{}] cap={cap}", list(modes)),
            StoppingRule::NthJump { n, cap } => write!(f, "jump n={n} cap={cap}"),
            StoppingRule::Dyadic { level, base } => write!(f, "dyadic level={level} ({base})"),
            StoppingRule::Monitored { times, .. } => write!(f, "monitored at {times:?}"),
            StoppingRule::AtLeast { t, base } => write!(f, "max({t}, {base})"),
            StoppingRule::Arrival { target, cap, .. } => write!(f, "arrival at {target:?} cap={cap}"),
        }
    }
}

/// Parses `deterministic t=…`, `hit modes=[…] cap=…` and `jump n=… cap=…`.
/// A missing `cap` is reported as an error; use [`parse_rule_with_default_cap`]
/// to fill it in.
impl FromStr for StoppingRule {
    type Err = StoppingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_rule_with_default_cap(s, None)
    }
}

pub fn parse_rule_with_default_cap(s: &str, default_cap: Option<f64>) -> Result<StoppingRule, StoppingError> {
    let err = |msg: &str| StoppingError::Parse {
        input: s.to_string(),
        msg: msg.to_string(),
    };
    let mut words = s.split_whitespace();
    let kind = words.next().ok_or_else(|| err("empty rule"))?;
    let mut t = None;
    let mut cap = None;
    let mut n = None;
    let mut modes = None;
    // allow spaces inside the bracketed list
    let rest: Vec<&str> = words.collect();
    let joined = rest.join(" ");
    let mut tokens = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for ch in joined.chars() {
        match ch {
            '[' => {
                depth += 1;
                cur.push(ch)
            }
            ']' => {
                depth -= 1;
                cur.push(ch)
            }
            c if c.is_whitespace() && depth == 0 => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
            }
            c if c.is_whitespace() => {}
            c => cur.push(c),
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    for tok in tokens {
        let (key, value) = tok.split_once('=').ok_or_else(|| err("expected key=value"))?;
        let num = || value.parse::<f64>().map_err(|_| err(&format!("bad number for {key}")));
        match key {
            "t" => t = Some(num()?),
            "cap" => cap = Some(num()?),
            "n" => n = Some(value.parse::<usize>().map_err(|_| err("bad jump count"))?),
            "modes" => {
                let inner = value
                    .strip_prefix('[')
                    .and_then(|v| v.strip_suffix(']'))
                    .ok_or_else(|| err("modes must be a bracketed list"))?;
                let list: Result<Vec<usize>, _> = inner
                    .split(',')
                    .filter(|x| !x.trim().is_empty())
                    .map(|x| x.trim().parse::<usize>())
                    .collect();
                modes = Some(list.map_err(|_| err("bad mode index"))?);
            }
            other => return Err(err(&format!("unknown key '{other}'"))),
        }
    }
    let cap = cap.or(default_cap);
    let rule = match kind {
        "deterministic" => StoppingRule::Deterministic {
            t: t.ok_or_else(|| err("missing t"))?,
        },
        "hit" => StoppingRule::Hitting {
            modes: modes.ok_or_else(|| err("missing modes"))?,
            cap: cap.ok_or_else(|| err("missing cap"))?,
        },
        "jump" => StoppingRule::NthJump {
            n: n.ok_or_else(|| err("missing n"))?,
            cap: cap.ok_or_else(|| err("missing cap"))?,
        },
        other => return Err(err(&format!("unknown rule kind '{other}'"))),
    };
    rule.validate()?;
    Ok(rule)
}

/// Ten mean holding times of the slowest mode.
pub fn default_cap(coupling: &CouplingMatrix) -> f64 {
    let slowest = (0..coupling.m())
        .map(|i| coupling.exit_rate(i))
        .filter(|r| *r > 0.0)
        .fold(f64::INFINITY, f64::min);
    if slowest.is_finite() {
        10.0 / slowest
    } else {
        10.0
    }
}
