//! Coupling matrices and the stochastic semigroup they generate.
//!
//! A coupling matrix `Λ` has nonpositive off-diagonal entries, zero row sums
//! and an irreducible off-diagonal pattern. Under these conditions `-Λ` is the
//! generator of a continuous-time Markov chain on the mode indices and
//! `e^{-tΛ}` is a stochastic matrix for every `t >= 0`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

/// Row-sum tolerance for a valid coupling matrix (scaled by the row magnitude).
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Entries with magnitude at or below this count as zero in the coupling graph.
pub const ZERO_THRESHOLD: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CouplingError {
    #[error("coupling matrix must be square and nonempty (got {rows} rows, row {bad_row} has {cols} entries)")]
    NotSquare {
        rows: usize,
        bad_row: usize,
        cols: usize,
    },
    #[error("coupling matrix is empty")]
    Empty,
    #[error("coupling matrix violates {0}")]
    Invalid(String),
    #[error("time must be nonnegative and finite, got {0}")]
    NegativeTime(f64),
    #[error("vector length {got} does not match the number of modes {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("not a probability vector: {0}")]
    NotProbability(String),
    #[error("not a stochastic matrix: {0}")]
    NotStochastic(String),
    #[error("stationary distribution solve failed (residual {residual:e})")]
    Stationary { residual: f64 },
    #[error("coupling matrix has rank below M-1; the kernel/image splitting is undefined")]
    RankDeficient,
}

/// Outcome of checking a raw matrix against the three structural conditions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub m: usize,
    /// Off-diagonal entries that are strictly positive, as `(row, col)`.
    pub positive_off_diagonal: Vec<(usize, usize)>,
    /// Rows whose sum is not zero, with the offending sum.
    pub nonzero_row_sums: Vec<(usize, f64)>,
    /// A proper nonempty index set with no outgoing edge, if one exists.
    pub closed_set: Option<Vec<usize>>,
}

impl ValidationReport {
    pub fn sign_ok(&self) -> bool {
        self.positive_off_diagonal.is_empty()
    }

    pub fn row_sums_ok(&self) -> bool {
        self.nonzero_row_sums.is_empty()
    }

    pub fn irreducible(&self) -> bool {
        self.closed_set.is_none()
    }

    pub fn passed(&self) -> bool {
        self.sign_ok() && self.row_sums_ok() && self.irreducible()
    }

    fn failure_summary(&self) -> String {
        let mut parts = Vec::new();
        if let Some(&(i, j)) = self.positive_off_diagonal.first() {
            parts.push(format!("sign condition: entry ({i},{j}) is positive"));
        }
        if let Some(&(i, s)) = self.nonzero_row_sums.first() {
            parts.push(format!("zero row sums: row {i} sums to {s}"));
        }
        if let Some(set) = &self.closed_set {
            parts.push(format!("irreducibility: index set {set:?} has no outgoing edge"));
        }
        parts.join("; ")
    }
}

fn to_dmatrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CouplingError> {
    let m = rows.len();
    if m == 0 {
        return Err(CouplingError::Empty);
    }
    for (r, row) in rows.iter().enumerate() {
        if row.len() != m {
            return Err(CouplingError::NotSquare {
                rows: m,
                bad_row: r,
                cols: row.len(),
            });
        }
    }
    Ok(DMatrix::from_fn(m, m, |i, j| rows[i][j]))
}

/// Checks the sign, row-sum and irreducibility conditions on a row-major matrix.
pub fn validate_coupling(rows: &[Vec<f64>]) -> Result<ValidationReport, CouplingError> {
    let a = to_dmatrix(rows)?;
    Ok(validate_matrix(&a))
}

fn validate_matrix(a: &DMatrix<f64>) -> ValidationReport {
    let m = a.nrows();
    let mut positive_off_diagonal = Vec::new();
    let mut nonzero_row_sums = Vec::new();
    for i in 0..m {
        let mut sum = 0.0;
        let mut scale: f64 = 1.0;
        for j in 0..m {
            let v = a[(i, j)];
            sum += v;
            scale = scale.max(v.abs());
            if i != j && v > 0.0 {
                positive_off_diagonal.push((i, j));
            }
        }
        if !(sum.abs() <= ROW_SUM_TOL * scale) {
            nonzero_row_sums.push((i, sum));
        }
    }
    ValidationReport {
        m,
        positive_off_diagonal,
        nonzero_row_sums,
        closed_set: closed_index_set(a),
    }
}

/// Returns the smallest reachable set that is not the whole index set, if any.
///
/// Reachability follows edges `i -> j` for `i != j` and `|Λ_ij| > ZERO_THRESHOLD`.
/// Any reachable set is closed (no outgoing edge), so a proper one witnesses
/// reducibility.
fn closed_index_set(a: &DMatrix<f64>) -> Option<Vec<usize>> {
    let m = a.nrows();
    let mut best: Option<Vec<usize>> = None;
    for start in 0..m {
        let mut seen = vec![false; m];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            for j in 0..m {
                if j != i && !seen[j] && a[(i, j)].abs() > ZERO_THRESHOLD {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        let set: Vec<usize> = (0..m).filter(|&j| seen[j]).collect();
        if set.len() < m && best.as_ref().map_or(true, |b| set.len() < b.len()) {
            best = Some(set);
        }
    }
    best
}

/// A validated coupling matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    entries: DMatrix<f64>,
}

impl CouplingMatrix {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self, CouplingError> {
        let entries = to_dmatrix(rows)?;
        Self::from_matrix(entries)
    }

    pub fn from_matrix(entries: DMatrix<f64>) -> Result<Self, CouplingError> {
        if entries.nrows() == 0 {
            return Err(CouplingError::Empty);
        }
        if !entries.is_square() {
            return Err(CouplingError::NotSquare {
                rows: entries.nrows(),
                bad_row: 0,
                cols: entries.ncols(),
            });
        }
        let report = validate_matrix(&entries);
        if !report.passed() {
            return Err(CouplingError::Invalid(report.failure_summary()));
        }
        Ok(Self { entries })
    }

    /// The scalar case `Λ = [[0]]`.
    pub fn scalar() -> Self {
        Self {
            entries: DMatrix::zeros(1, 1),
        }
    }

    /// `[[r, -r], [-r, r]]`.
    pub fn symmetric_pair(rate: f64) -> Self {
        Self::new(&[vec![rate, -rate], vec![-rate, rate]]).expect("valid for rate > 0")
    }

    pub fn m(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.m())
            .map(|i| self.entries.row(i).iter().copied().collect())
            .collect()
    }

    /// Total jump rate out of mode `i`, i.e. the diagonal entry.
    pub fn exit_rate(&self, i: usize) -> f64 {
        self.entries[(i, i)]
    }

    /// `Λ^i · u`, the coupling term of equation `i`.
    pub fn row_dot(&self, i: usize, u: &[f64]) -> f64 {
        self.entries.row(i).iter().zip(u).map(|(a, b)| a * b).sum()
    }

    /// Maximum absolute row sum.
    pub fn inf_norm(&self) -> f64 {
        (0..self.m())
            .map(|i| self.entries.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// `e^{-tΛ}`.
    pub fn semigroup(&self, t: f64) -> Result<StochasticMatrix, CouplingError> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(CouplingError::NegativeTime(t));
        }
        if t == 0.0 {
            return Ok(StochasticMatrix(DMatrix::identity(self.m(), self.m())));
        }
        Ok(StochasticMatrix(expm(&(&self.entries * -t))))
    }

    /// The probability vector `π` with `π Λ = 0`.
    pub fn stationary_distribution(&self) -> Result<ProbabilityVector, CouplingError> {
        let m = self.m();
        if m == 1 {
            return Ok(ProbabilityVector(vec![1.0]));
        }
        // Λᵀ πᵀ = 0 has rank M-1 and its equations sum to zero, so the last
        // one can be replaced by the normalization Σπ = 1.
        let mut sys = self.entries.transpose();
        for j in 0..m {
            sys[(m - 1, j)] = 1.0;
        }
        let mut rhs = DVector::zeros(m);
        rhs[m - 1] = 1.0;
        let pi = sys
            .lu()
            .solve(&rhs)
            .ok_or(CouplingError::Stationary { residual: f64::NAN })?;
        let residual = (pi.transpose() * &self.entries).amax();
        let scale = self.entries.amax().max(1.0);
        if !(residual <= 1e-10 * scale) {
            return Err(CouplingError::Stationary { residual });
        }
        let mut v: Vec<f64> = pi.iter().copied().collect();
        // Round-off can leave tiny negative components for nearly reducible Λ.
        for c in v.iter_mut() {
            if *c < 0.0 && *c > -1e-14 {
                *c = 0.0;
            }
        }
        let sum: f64 = v.iter().sum();
        v.iter_mut().for_each(|c| *c /= sum);
        Ok(ProbabilityVector(v))
    }

    /// Splits `a = α·1 + a₂` with `a₂ ∈ im(Λ)` and returns `α` together with the
    /// mean-zero `b` solving `Λ b = -a₂`.
    pub fn split_ker_im(&self, a: &[f64]) -> Result<KerImSplit, CouplingError> {
        let m = self.m();
        if a.len() != m {
            return Err(CouplingError::Dimension {
                expected: m,
                got: a.len(),
            });
        }
        let pi = self.stationary_distribution()?;
        let alpha: f64 = pi.0.iter().zip(a).map(|(p, x)| p * x).sum();
        let image_part: Vec<f64> = a.iter().map(|x| x - alpha).collect();
        if m == 1 {
            return Ok(KerImSplit {
                alpha,
                image_part,
                b: vec![0.0],
            });
        }
        // (Λ + 11ᵀ/M) is invertible under irreducibility and its solution is mean-zero.
        let sys = DMatrix::from_fn(m, m, |i, j| self.entries[(i, j)] + 1.0 / m as f64);
        let rhs = DVector::from_iterator(m, image_part.iter().map(|x| -x));
        let lu = sys.lu();
        let sol = lu.solve(&rhs).ok_or(CouplingError::RankDeficient)?;
        let check = &self.entries * &sol - &rhs;
        if !(check.amax() <= 1e-9 * (1.0 + rhs.amax())) {
            return Err(CouplingError::RankDeficient);
        }
        Ok(KerImSplit {
            alpha,
            image_part,
            b: sol.iter().copied().collect(),
        })
    }
}

/// Result of [`CouplingMatrix::split_ker_im`].
#[derive(Debug, Clone, PartialEq)]
pub struct KerImSplit {
    pub alpha: f64,
    pub image_part: Vec<f64>,
    pub b: Vec<f64>,
}

/// A square matrix with nonnegative entries and unit row sums.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix(DMatrix<f64>);

impl StochasticMatrix {
    pub const ENTRY_TOL: f64 = 1e-12;
    pub const ROW_TOL: f64 = 1e-10;

    pub fn new(entries: DMatrix<f64>) -> Result<Self, CouplingError> {
        let s = Self(entries);
        s.check()?;
        Ok(s)
    }

    pub fn identity(m: usize) -> Self {
        Self(DMatrix::identity(m, m))
    }

    pub fn check(&self) -> Result<(), CouplingError> {
        if !self.0.is_square() {
            return Err(CouplingError::NotStochastic("not square".into()));
        }
        for i in 0..self.0.nrows() {
            let mut sum = 0.0;
            for j in 0..self.0.ncols() {
                let v = self.0[(i, j)];
                if !(v >= -Self::ENTRY_TOL) {
                    return Err(CouplingError::NotStochastic(format!(
                        "entry ({i},{j}) = {v:e}"
                    )));
                }
                sum += v;
            }
            if !((sum - 1.0).abs() <= Self::ROW_TOL) {
                return Err(CouplingError::NotStochastic(format!("row {i} sums to {sum}")));
            }
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.0.row(i).iter().copied().collect()
    }

    pub fn mul(&self, other: &StochasticMatrix) -> DMatrix<f64> {
        &self.0 * &other.0
    }

    /// Row vector times matrix: `a P`.
    pub fn left_apply(&self, a: &[f64]) -> Vec<f64> {
        let m = self.m();
        (0..m)
            .map(|j| (0..m).map(|i| a[i] * self.0[(i, j)]).sum())
            .collect()
    }

    /// Matrix times column vector: `P b`.
    pub fn right_apply(&self, b: &[f64]) -> Vec<f64> {
        let m = self.m();
        (0..m)
            .map(|i| (0..m).map(|j| self.0[(i, j)] * b[j]).sum())
            .collect()
    }
}

/// A point of the probability simplex in `R^M`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub const SUM_TOL: f64 = 1e-12;

    pub fn new(components: Vec<f64>) -> Result<Self, CouplingError> {
        if components.is_empty() {
            return Err(CouplingError::NotProbability("empty".into()));
        }
        if let Some(c) = components.iter().find(|c| !(**c >= 0.0)) {
            return Err(CouplingError::NotProbability(format!("negative component {c}")));
        }
        let sum: f64 = components.iter().sum();
        if !((sum - 1.0).abs() <= Self::SUM_TOL) {
            return Err(CouplingError::NotProbability(format!("components sum to {sum}")));
        }
        Ok(Self(components))
    }

    /// The basis vector `e_i`.
    pub fn basis(m: usize, i: usize) -> Self {
        let mut v = vec![0.0; m];
        v[i] = 1.0;
        Self(v)
    }

    pub fn uniform(m: usize) -> Self {
        Self(vec![1.0 / m as f64; m])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    /// `a P` for a stochastic matrix `P`; stays on the simplex.
    pub fn evolve(&self, p: &StochasticMatrix) -> ProbabilityVector {
        let mut v = p.left_apply(&self.0);
        for c in v.iter_mut() {
            if *c < 0.0 {
                *c = 0.0;
            }
        }
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|c| *c /= s);
        ProbabilityVector(v)
    }
}

// Padé coefficients and thresholds for scaling and squaring.
const THETA: [f64; 5] = [
    1.495585217958292e-2,
    2.539398330063230e-1,
    9.504178996162932e-1,
    2.097847961257068e0,
    5.371920351148152e0,
];
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn one_norm(a: &DMatrix<f64>) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with diagonal Padé approximants
/// of degree 3, 5, 7, 9 or 13, chosen from the 1-norm.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let norm = one_norm(a);
    let a2 = a * a;

    let pade_low = |coef: &[f64]| {
        // U = A Σ_{odd} c_k A^{k-1}, V = Σ_{even} c_k A^k
        let mut u = &ident * coef[1];
        let mut v = &ident * coef[0];
        let mut pow = ident.clone();
        let mut k = 2;
        while k < coef.len() {
            pow = &pow * &a2;
            v += &pow * coef[k];
            if k + 1 < coef.len() {
                u += &pow * coef[k + 1];
            }
            k += 2;
        }
        (a * u, v)
    };

    let solve = |u: DMatrix<f64>, v: DMatrix<f64>| -> DMatrix<f64> {
        let p = &v + &u;
        let q = &v - &u;
        q.lu().solve(&p).expect("Padé denominator is nonsingular")
    };

    for (idx, coef) in [&PADE3[..], &PADE5[..], &PADE7[..], &PADE9[..]].iter().enumerate() {
        if norm <= THETA[idx] {
            let (u, v) = pade_low(coef);
            return solve(u, v);
        }
    }

    let s = if norm > THETA[4] {
        (norm / THETA[4]).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scale = 2f64.powi(-s);
    let a1 = a * scale;
    let a2 = &a1 * &a1;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &PADE13;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1];
    let u = &a1 * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];
    let mut r = solve(u, v);
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym() -> CouplingMatrix {
        CouplingMatrix::symmetric_pair(1.0)
    }

    #[test]
    fn validation_examples() {
        let ok = validate_coupling(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        assert!(ok.passed());

        let reducible = validate_coupling(&[vec![1.0, -1.0], vec![0.0, 0.0]]).unwrap();
        assert!(reducible.sign_ok() && reducible.row_sums_ok());
        assert_eq!(reducible.closed_set, Some(vec![1]));

        let bad_sum = validate_coupling(&[vec![1.0, 0.0], vec![-1.0, 1.0]]).unwrap();
        assert!(!bad_sum.row_sums_ok());
        assert_eq!(bad_sum.nonzero_row_sums[0].0, 0);
        assert!((bad_sum.nonzero_row_sums[0].1 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn validation_rejects_non_square() {
        assert!(matches!(
            validate_coupling(&[vec![1.0, -1.0], vec![0.0]]),
            Err(CouplingError::NotSquare { .. })
        ));
        assert!(matches!(validate_coupling(&[]), Err(CouplingError::Empty)));
    }

    #[test]
    fn positive_off_diagonal_is_reported() {
        let r = validate_coupling(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        assert_eq!(r.positive_off_diagonal, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn scalar_is_valid() {
        let s = CouplingMatrix::new(&[vec![0.0]]).unwrap();
        assert_eq!(s.semigroup(3.0).unwrap().get(0, 0), 1.0);
        assert_eq!(s.stationary_distribution().unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn semigroup_two_by_two_closed_form() {
        // eigenvalues of Λ are 0 and 2 with eigenvectors (1,1), (1,-1)
        let p = sym().semigroup(1.0).unwrap();
        let e = (-2.0f64).exp();
        assert!((p.get(0, 0) - 0.5 * (1.0 + e)).abs() < 1e-14);
        assert!((p.get(0, 1) - 0.5 * (1.0 - e)).abs() < 1e-14);
        assert!((p.get(1, 0) - 0.5 * (1.0 - e)).abs() < 1e-14);
        assert!((p.get(1, 1) - 0.5 * (1.0 + e)).abs() < 1e-14);
    }

    #[test]
    fn semigroup_at_zero_and_negative_time() {
        let p = sym().semigroup(0.0).unwrap();
        assert_eq!(p, StochasticMatrix::identity(2));
        assert!(matches!(sym().semigroup(-1.0), Err(CouplingError::NegativeTime(_))));
    }

    #[test]
    fn expm_large_norm_matches_diagonalization() {
        // exercises the squaring branch
        let lam = CouplingMatrix::symmetric_pair(7.5);
        let p = lam.semigroup(3.0).unwrap();
        let e = (-45.0f64).exp();
        assert!((p.get(0, 0) - 0.5 * (1.0 + e)).abs() < 1e-13);
        p.check().unwrap();
    }

    #[test]
    fn stationary_examples() {
        let pi = sym().stationary_distribution().unwrap();
        assert!((pi.get(0) - 0.5).abs() < 1e-15 && (pi.get(1) - 0.5).abs() < 1e-15);
        let (a, b) = (0.3, 1.7);
        let lam = CouplingMatrix::new(&[vec![a, -a], vec![-b, b]]).unwrap();
        let pi = lam.stationary_distribution().unwrap();
        assert!((pi.get(0) - b / (a + b)).abs() < 1e-14);
        assert!((pi.get(1) - a / (a + b)).abs() < 1e-14);
    }

    #[test]
    fn split_examples() {
        let s = sym().split_ker_im(&[2.5, 2.5]).unwrap();
        assert!((s.alpha - 2.5).abs() < 1e-15);
        assert!(s.b.iter().all(|v| v.abs() < 1e-14));

        let s = sym().split_ker_im(&[1.0, -1.0]).unwrap();
        assert!(s.alpha.abs() < 1e-15);
        assert!((s.b[0] + 0.5).abs() < 1e-14 && (s.b[1] - 0.5).abs() < 1e-14);

        let s = sym().split_ker_im(&[0.0, 0.0]).unwrap();
        assert_eq!(s.alpha, 0.0);
        assert!(s.b.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn split_three_modes_solves_system() {
        let lam = CouplingMatrix::new(&[
            vec![2.0, -1.5, -0.5],
            vec![-0.2, 0.2, 0.0],
            vec![0.0, -3.0, 3.0],
        ])
        .unwrap();
        let a = [0.4, -1.0, 2.0];
        let s = lam.split_ker_im(&a).unwrap();
        let lb = lam.entries() * DVector::from_vec(s.b.clone());
        for i in 0..3 {
            assert!((lb[i] + (a[i] - s.alpha)).abs() < 1e-9);
        }
        assert!(s.b.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn reducible_matrix_is_rejected_on_construction() {
        assert!(matches!(
            CouplingMatrix::new(&[vec![1.0, -1.0], vec![0.0, 0.0]]),
            Err(CouplingError::Invalid(_))
        ));
    }

    #[test]
    fn probability_vector_checks() {
        assert!(ProbabilityVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbabilityVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbabilityVector::new(vec![1.5, -0.5]).is_err());
    }
}
