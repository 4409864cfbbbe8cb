//! Periodic grids on the flat torus `R^N / Z^N` (N = 1 or 2), velocity boxes,
//! and multilinear interpolation stencils.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("torus dimension must be 1 or 2, got {0}")]
    Dimension(usize),
    #[error("need at least 8 points per axis, got {0}")]
    TooCoarse(usize),
    #[error("velocity grid needs an odd number of points per axis (got {0}) so that q = 0 is a node")]
    EvenVelocityGrid(usize),
    #[error("velocity radius must be positive, got {0}")]
    VelocityRadius(f64),
    #[error("point has {got} coordinates, grid dimension is {expected}")]
    PointDimension { expected: usize, got: usize },
    #[error("values length {got} does not match grid size {expected}")]
    FieldLength { expected: usize, got: usize },
}

/// Wraps a real coordinate into `[0, 1)`.
pub fn wrap_unit(x: f64) -> f64 {
    let r = x - x.floor();
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Signed representative of `x` in `[-1/2, 1/2)`.
pub fn centered(x: f64) -> f64 {
    let r = wrap_unit(x + 0.5) - 0.5;
    if r < -0.5 {
        r + 1.0
    } else {
        r
    }
}

/// Euclidean distance on the torus.
pub fn torus_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| centered(x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Uniform periodic grid with `n` points per axis and spacing `1/n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TorusGrid {
    dim: usize,
    n: usize,
}

/// Up to four (node, weight) pairs of a multilinear interpolation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub nodes: [usize; 4],
    pub weights: [f64; 4],
    pub len: usize,
}

impl Stencil {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.nodes[..self.len]
            .iter()
            .copied()
            .zip(self.weights[..self.len].iter().copied())
    }

    pub fn apply(&self, values: impl Fn(usize) -> f64) -> f64 {
        self.iter().map(|(k, w)| w * values(k)).sum()
    }
}

impl TorusGrid {
    pub fn new(dim: usize, n: usize) -> Result<Self, GridError> {
        if dim != 1 && dim != 2 {
            return Err(GridError::Dimension(dim));
        }
        if n < 8 {
            return Err(GridError::TooCoarse(n));
        }
        Ok(Self { dim, n })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_axis(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn check_point(&self, x: &[f64]) -> Result<(), GridError> {
        if x.len() != self.dim {
            return Err(GridError::PointDimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Flat index of a multi-index, axis 0 fastest; indices are taken mod n.
    pub fn flat(&self, idx: &[i64]) -> usize {
        let n = self.n as i64;
        let mut k = 0usize;
        let mut stride = 1usize;
        for &i in idx.iter().take(self.dim) {
            k += (i.rem_euclid(n) as usize) * stride;
            stride *= self.n;
        }
        k
    }

    pub fn multi(&self, node: usize) -> [usize; 2] {
        let mut out = [0usize; 2];
        let mut r = node;
        for o in out.iter_mut().take(self.dim) {
            *o = r % self.n;
            r /= self.n;
        }
        out
    }

    /// Coordinates of a node in `[0, 1)^N`.
    pub fn coords(&self, node: usize) -> Vec<f64> {
        let m = self.multi(node);
        (0..self.dim).map(|a| m[a] as f64 * self.spacing()).collect()
    }

    /// Node nearest to `x` (periodic rounding).
    pub fn nearest(&self, x: &[f64]) -> usize {
        let idx: Vec<i64> = x
            .iter()
            .take(self.dim)
            .map(|c| (wrap_unit(*c) * self.n as f64).round() as i64)
            .collect();
        self.flat(&idx)
    }

    /// Neighbor of `node` shifted by `step` along `axis`.
    pub fn neighbor(&self, node: usize, axis: usize, step: i64) -> usize {
        let m = self.multi(node);
        let mut idx = [m[0] as i64, m[1] as i64];
        idx[axis] += step;
        self.flat(&idx[..self.dim])
    }

    /// Periodic multilinear interpolation stencil at `x`.
    pub fn stencil(&self, x: &[f64]) -> Stencil {
        let n = self.n as f64;
        let mut base = [0i64; 2];
        let mut frac = [0.0f64; 2];
        for a in 0..self.dim {
            let s = wrap_unit(x[a]) * n;
            let f = s.floor();
            base[a] = f as i64;
            frac[a] = s - f;
        }
        let mut st = Stencil {
            nodes: [0; 4],
            weights: [0.0; 4],
            len: 1 << self.dim,
        };
        for corner in 0..st.len {
            let mut w = 1.0;
            let mut idx = [0i64; 2];
            for a in 0..self.dim {
                let bit = (corner >> a) & 1;
                idx[a] = base[a] + bit as i64;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            st.nodes[corner] = self.flat(&idx[..self.dim]);
            st.weights[corner] = w;
        }
        st
    }

    /// Interpolates a nodal array at `x`.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        self.stencil(x).apply(|k| values[k])
    }
}

/// Uniform velocity box `[-q_max, q_max]^N` with an odd number of points per
/// axis so that the zero velocity is a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityGrid {
    dim: usize,
    n_q: usize,
    q_max: f64,
}

impl VelocityGrid {
    pub fn new(dim: usize, q_max: f64, n_q: usize) -> Result<Self, GridError> {
        if dim != 1 && dim != 2 {
            return Err(GridError::Dimension(dim));
        }
        if n_q % 2 == 0 || n_q < 3 {
            return Err(GridError::EvenVelocityGrid(n_q));
        }
        if !(q_max > 0.0) || !q_max.is_finite() {
            return Err(GridError::VelocityRadius(q_max));
        }
        Ok(Self { dim, n_q, q_max })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_axis(&self) -> usize {
        self.n_q
    }

    pub fn q_max(&self) -> f64 {
        self.q_max
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.q_max / (self.n_q - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.n_q.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn axis_value(&self, i: usize) -> f64 {
        let half = (self.n_q / 2) as i64;
        let k = i as i64 - half;
        if k == half {
            self.q_max
        } else if k == -half {
            -self.q_max
        } else {
            k as f64 * self.spacing()
        }
    }

    pub fn multi(&self, idx: usize) -> [usize; 2] {
        [idx % self.n_q, if self.dim == 2 { idx / self.n_q } else { 0 }]
    }

    pub fn velocity(&self, idx: usize) -> Vec<f64> {
        let m = self.multi(idx);
        (0..self.dim).map(|a| self.axis_value(m[a])).collect()
    }

    /// Index of `-q`.
    pub fn mirror(&self, idx: usize) -> usize {
        let m = self.multi(idx);
        let r0 = self.n_q - 1 - m[0];
        if self.dim == 2 {
            r0 + (self.n_q - 1 - m[1]) * self.n_q
        } else {
            r0
        }
    }

    pub fn zero_index(&self) -> usize {
        let h = self.n_q / 2;
        if self.dim == 2 {
            h + h * self.n_q
        } else {
            h
        }
    }

    /// Indices sorted by `|q|`, then lexicographically by components.
    pub fn tie_break_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            let qa = self.velocity(a);
            let qb = self.velocity(b);
            let na: f64 = qa.iter().map(|v| v * v).sum();
            let nb: f64 = qb.iter().map(|v| v * v).sum();
            na.total_cmp(&nb).then_with(|| {
                qa.iter()
                    .zip(&qb)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        });
        order
    }

    /// Multilinear stencil in velocity space; `None` outside the box.
    pub fn stencil(&self, q: &[f64]) -> Option<Stencil> {
        let tol = 1e-12 * self.q_max;
        let mut base = [0usize; 2];
        let mut frac = [0.0f64; 2];
        for a in 0..self.dim {
            if !(q[a].abs() <= self.q_max + tol) {
                return None;
            }
            let s = ((q[a] + self.q_max) / self.spacing()).clamp(0.0, (self.n_q - 1) as f64);
            let mut f = s.floor() as usize;
            if f >= self.n_q - 1 {
                f = self.n_q - 2;
            }
            base[a] = f;
            frac[a] = s - f as f64;
        }
        let mut st = Stencil {
            nodes: [0; 4],
            weights: [0.0; 4],
            len: 1 << self.dim,
        };
        for corner in 0..st.len {
            let mut w = 1.0;
            let mut idx = 0usize;
            let mut stride = 1usize;
            for a in 0..self.dim {
                let bit = (corner >> a) & 1;
                idx += (base[a] + bit) * stride;
                stride *= self.n_q;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            st.nodes[corner] = idx;
            st.weights[corner] = w;
        }
        Some(st)
    }
}
