//! One step of the dynamics written as a random affine map on `n x m`
//! matrices, together with the operator-norm and fixed-point oracles built
//! on that representation.
//!
//! For an active set `S` with indicator `δ` and diagonal `D = diag(δ)`:
//!
//! ```text
//! A_S(M) = M (I - α D) + (α/k) (J̄ - I) M δ δᵀ      linear part
//! B_S    = (α/k) C_dev δ δᵀ                         offset
//! Φ_S(M) = A_S(M) + B_S
//! ```
//!
//! where `J̄` is the `n x n` averaging matrix and `C_dev` is the competency
//! matrix with its column means removed. This module never looks at
//! signals: agreement with [`crate::model::step`] is what shows that the
//! signals drop out of the update.
//!
//! Dense operators act on row-major vectorisations, `vec(M)[i*m + j] = M[i,j]`.

use itertools::Itertools;
use nalgebra::DMatrix;
use rand::Rng;

use crate::error::OracleError;
use crate::model::{seeded_rng, ActiveSet, CompetencyMatrix, SimConfig};
use crate::numeric::{binomial, compensated_mean};

/// Largest `n*m` for which dense `(nm) x (nm)` operators are assembled.
pub const DENSE_LIMIT: usize = 10_000;
/// Largest subset count for which expectations are taken by enumeration.
pub const ENUMERATION_LIMIT: u128 = 100_000;

/// `C` minus its column means.
pub fn c_dev(competency: &CompetencyMatrix) -> DMatrix<f64> {
    let c = competency.matrix();
    let mut out = c.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let mean = compensated_mean(c.column(j).as_slice());
        col.add_scalar_mut(-mean);
    }
    out
}

/// The affine map `Φ_S` for one active set.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePiece {
    active: ActiveSet,
    alpha: f64,
    c_dev: DMatrix<f64>,
}

impl AffinePiece {
    pub fn new(active: ActiveSet, alpha: f64, c_dev: DMatrix<f64>) -> Self {
        Self { active, alpha, c_dev }
    }

    pub fn active(&self) -> &ActiveSet {
        &self.active
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn k(&self) -> usize {
        self.active.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.c_dev.shape()
    }

    /// Linear part `A_S(M)`.
    pub fn apply_linear(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = m.nrows();
        let scale = self.alpha / self.k() as f64;
        // (M δ)_i, then (J̄ - I) applied to it
        let row_sums: Vec<f64> = (0..n)
            .map(|i| self.active.iter().map(|j| m[(i, j)]).sum())
            .collect();
        let mean = row_sums.iter().sum::<f64>() / n as f64;
        let mut out = m.clone();
        for j in self.active.iter() {
            for i in 0..n {
                out[(i, j)] = (1.0 - self.alpha) * m[(i, j)] + scale * (mean - row_sums[i]);
            }
        }
        out
    }

    /// Offset `B_S`: column `j ∈ S` holds `(α/k) Σ_{r∈S} C_dev[·, r]`.
    pub fn offset(&self) -> DMatrix<f64> {
        let (n, m) = self.c_dev.shape();
        let scale = self.alpha / self.k() as f64;
        let mut out = DMatrix::zeros(n, m);
        for i in 0..n {
            let s: f64 = self.active.iter().map(|r| self.c_dev[(i, r)]).sum();
            for j in self.active.iter() {
                out[(i, j)] = scale * s;
            }
        }
        out
    }

    /// `Φ_S(M) = A_S(M) + B_S`.
    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply_linear(m) + self.offset()
    }
}

pub fn apply_a(piece: &AffinePiece, m: &DMatrix<f64>) -> DMatrix<f64> {
    piece.apply_linear(m)
}

pub fn apply_phi(piece: &AffinePiece, m: &DMatrix<f64>) -> DMatrix<f64> {
    piece.apply(m)
}

/// A linear map on `n x m` matrices with its Frobenius adjoint.
pub trait LinearMap {
    fn shape(&self) -> (usize, usize);
    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64>;
    fn apply_adjoint(&self, m: &DMatrix<f64>) -> DMatrix<f64>;
}

impl LinearMap for AffinePiece {
    fn shape(&self) -> (usize, usize) {
        self.c_dev.shape()
    }

    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply_linear(m)
    }

    // Both (I - αD) and (J̄ - I) ⊗ δδᵀ are symmetric.
    fn apply_adjoint(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply_linear(m)
    }
}

/// `A_{S_b} ∘ ... ∘ A_{S_1}`; the first piece is applied first.
#[derive(Debug, Clone, PartialEq)]
pub struct Composition(pub Vec<AffinePiece>);

impl Composition {
    /// Whether the active sets together cover every dimension.
    pub fn covers(&self) -> bool {
        let Some(first) = self.0.first() else {
            return false;
        };
        let m = first.shape().1;
        (0..m).all(|j| self.0.iter().any(|p| p.active().contains(j)))
    }
}

impl LinearMap for Composition {
    fn shape(&self) -> (usize, usize) {
        self.0.first().map_or((0, 0), AffinePiece::shape)
    }

    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.0.iter().fold(m.clone(), |acc, p| p.apply_linear(&acc))
    }

    fn apply_adjoint(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.0.iter().rev().fold(m.clone(), |acc, p| p.apply_linear(&acc))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityMap {
    pub n: usize,
    pub m: usize,
}

impl LinearMap for IdentityMap {
    fn shape(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m.clone()
    }

    fn apply_adjoint(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIteration {
    /// Stop once `‖G*G v − λ v‖ ≤ tol · λ`.
    pub tol: f64,
    pub max_iterations: usize,
    /// Seed of the start vector.
    pub seed: u64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iterations: 10_000_000,
            seed: 0x005E_ED0F_0B5E_4A7E,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormEstimate {
    /// Largest singular value (the Lipschitz constant of the map).
    pub value: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Frobenius operator norm by power iteration on `G* G`.
pub fn operator_norm<L: LinearMap + ?Sized>(map: &L) -> Result<NormEstimate, OracleError> {
    operator_norm_with(map, PowerIteration::default())
}

pub fn operator_norm_with<L: LinearMap + ?Sized>(
    map: &L,
    opts: PowerIteration,
) -> Result<NormEstimate, OracleError> {
    let (n, m) = map.shape();
    let mut rng = seeded_rng(opts.seed, 0);
    let mut v = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
    let norm = v.norm();
    if norm == 0.0 {
        return Ok(NormEstimate { value: 0.0, iterations: 0, residual: 0.0 });
    }
    v /= norm;
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iterations {
        let u = map.apply_adjoint(&map.apply(&v));
        let lambda = v.dot(&u);
        let u_norm = u.norm();
        if u_norm == 0.0 || lambda <= 0.0 {
            return Ok(NormEstimate { value: 0.0, iterations: it, residual: 0.0 });
        }
        residual = (&u - &v * lambda).norm();
        if residual <= opts.tol * lambda {
            return Ok(NormEstimate {
                value: lambda.sqrt(),
                iterations: it,
                residual,
            });
        }
        v = u / u_norm;
    }
    Err(OracleError::NoConvergence {
        iterations: opts.max_iterations,
        residual,
    })
}

fn dense_guard(n: usize, m: usize) -> Result<usize, OracleError> {
    let dim = n * m;
    if dim > DENSE_LIMIT {
        return Err(OracleError::TooLarge { dim, limit: DENSE_LIMIT });
    }
    Ok(dim)
}

/// Dense `(nm) x (nm)` matrix of `map` in the row-major vectorisation.
pub fn dense_operator<L: LinearMap + ?Sized>(map: &L) -> Result<DMatrix<f64>, OracleError> {
    let (n, m) = map.shape();
    let dim = dense_guard(n, m)?;
    let mut out = DMatrix::zeros(dim, dim);
    let mut basis = DMatrix::zeros(n, m);
    for q in 0..dim {
        basis[(q / m, q % m)] = 1.0;
        let image = map.apply(&basis);
        basis[(q / m, q % m)] = 0.0;
        for p in 0..dim {
            out[(p, q)] = image[(p / m, p % m)];
        }
    }
    Ok(out)
}

/// Largest singular value of the dense operator, by SVD.
pub fn exact_operator_norm<L: LinearMap + ?Sized>(map: &L) -> Result<f64, OracleError> {
    let dense = dense_operator(map)?;
    Ok(dense.singular_values().max())
}

/// `Q_S = I - α D - (α/k) δ δᵀ` (`m x m`).
pub fn q_matrix(active: &ActiveSet, alpha: f64, k: usize, m: usize) -> DMatrix<f64> {
    let scale = alpha / k as f64;
    DMatrix::from_fn(m, m, |a, b| {
        let da = active.contains(a);
        let db = active.contains(b);
        let id = if a == b { 1.0 } else { 0.0 };
        let diag = if a == b && da { alpha } else { 0.0 };
        let outer = if da && db { scale } else { 0.0 };
        id - diag - outer
    })
}

/// Closed form of `Q_S²`: `I - α(2-α) D + (α/k)(3α-2) δ δᵀ`.
pub fn qs_square(active: &ActiveSet, alpha: f64, k: usize, m: usize) -> DMatrix<f64> {
    let outer_coef = alpha / k as f64 * (3.0 * alpha - 2.0);
    DMatrix::from_fn(m, m, |a, b| {
        let da = active.contains(a);
        let db = active.contains(b);
        let id = if a == b { 1.0 } else { 0.0 };
        let diag = if a == b && da { alpha * (2.0 - alpha) } else { 0.0 };
        let outer = if da && db { outer_coef } else { 0.0 };
        id - diag + outer
    })
}

/// Single-inclusion probability `k/m`.
pub fn p1(m: usize, k: usize) -> f64 {
    k as f64 / m as f64
}

/// Pair-inclusion probability `k(k-1) / (m(m-1))`; zero when `m = 1`.
pub fn p2(m: usize, k: usize) -> f64 {
    if m < 2 {
        return 0.0;
    }
    (k * (k - 1)) as f64 / (m * (m - 1)) as f64
}

/// `W = E[δ δᵀ] = p2 J + (p1 - p2) I` for a uniform `k`-subset.
pub fn inclusion_second_moment(m: usize, k: usize) -> DMatrix<f64> {
    let (p1, p2) = (p1(m, k), p2(m, k));
    DMatrix::from_fn(m, m, |a, b| if a == b { p1 } else { p2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssemblyPath {
    /// Enumerate when `C(m,k) <= ENUMERATION_LIMIT`, otherwise closed form.
    Auto,
    Enumerate,
    ClosedForm,
}

/// `E[A_S]` as a dense `(nm) x (nm)` matrix and `E[B_S]` as `n x m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedOperator {
    pub n: usize,
    pub m: usize,
    pub linear: DMatrix<f64>,
    pub offset: DMatrix<f64>,
    /// Path actually taken (never `Auto`).
    pub path: AssemblyPath,
}

impl ExpectedOperator {
    /// `E[A_S] U + E[B_S]`.
    pub fn apply(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let image = &self.linear * vectorize(u);
        unvectorize(&image, self.n, self.m) + &self.offset
    }
}

pub fn vectorize(m: &DMatrix<f64>) -> nalgebra::DVector<f64> {
    let (rows, cols) = m.shape();
    nalgebra::DVector::from_fn(rows * cols, |p, _| m[(p / cols, p % cols)])
}

pub fn unvectorize(v: &nalgebra::DVector<f64>, n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |i, j| v[i * m + j])
}

pub fn expected_operator(
    competency: &CompetencyMatrix,
    cfg: &SimConfig,
) -> Result<ExpectedOperator, OracleError> {
    expected_operator_via(competency, cfg.k, cfg.alpha, AssemblyPath::Auto)
}

pub fn expected_operator_via(
    competency: &CompetencyMatrix,
    k: usize,
    alpha: f64,
    path: AssemblyPath,
) -> Result<ExpectedOperator, OracleError> {
    let (n, m) = competency.shape();
    let dim = dense_guard(n, m)?;
    let path = match path {
        AssemblyPath::Auto if binomial(m, k) <= ENUMERATION_LIMIT => AssemblyPath::Enumerate,
        AssemblyPath::Auto => AssemblyPath::ClosedForm,
        p => p,
    };
    let cdev = c_dev(competency);
    let (linear, offset) = match path {
        AssemblyPath::Enumerate => enumerate_expectation(&cdev, k, alpha, dim),
        _ => closed_form_expectation(&cdev, k, alpha, dim),
    };
    Ok(ExpectedOperator { n, m, linear, offset, path })
}

/// Averages the dense `A_S` and `B_S` over every `k`-subset.
fn enumerate_expectation(
    cdev: &DMatrix<f64>,
    k: usize,
    alpha: f64,
    dim: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = cdev.shape();
    let mut linear = DMatrix::zeros(dim, dim);
    let mut offset = DMatrix::zeros(n, m);
    let mut count = 0usize;
    let mut basis = DMatrix::zeros(n, m);
    for subset in (0..m).combinations(k) {
        let active = ActiveSet::new(subset, m).expect("combinations are valid subsets");
        let piece = AffinePiece::new(active, alpha, cdev.clone());
        for l in 0..n {
            for r in 0..m {
                let q = l * m + r;
                if !piece.active().contains(r) {
                    // inactive columns pass through unchanged
                    linear[(q, q)] += 1.0;
                    continue;
                }
                basis[(l, r)] = 1.0;
                let image = piece.apply_linear(&basis);
                basis[(l, r)] = 0.0;
                for i in 0..n {
                    for j in piece.active().iter() {
                        linear[(i * m + j, q)] += image[(i, j)];
                    }
                }
            }
        }
        offset += piece.offset();
        count += 1;
    }
    let scale = 1.0 / count as f64;
    (linear * scale, offset * scale)
}

/// `E[A_S]` from `E[δ] = p1` and `W`:
/// `E[A](U) = (1 - α p1) U + (α/k)(J̄ - I) U W`, `E[B] = (α/k) C_dev W`.
fn closed_form_expectation(
    cdev: &DMatrix<f64>,
    k: usize,
    alpha: f64,
    dim: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = cdev.shape();
    let w = inclusion_second_moment(m, k);
    let scale = alpha / k as f64;
    let diag = 1.0 - alpha * p1(m, k);
    let inv_n = 1.0 / n as f64;
    let linear = DMatrix::from_fn(dim, dim, |p, q| {
        let (i, j) = (p / m, p % m);
        let (l, r) = (q / m, q % m);
        let same = if i == l { 1.0 } else { 0.0 };
        let id = if p == q { diag } else { 0.0 };
        id + scale * w[(j, r)] * (inv_n - same)
    });
    let offset = cdev * &w * scale;
    (linear, offset)
}

/// Solves `(I - E[A]) E = E[B]` for the limiting mean of `Δ`.
pub fn stationary_expectation_oracle(
    competency: &CompetencyMatrix,
    cfg: &SimConfig,
) -> Result<DMatrix<f64>, OracleError> {
    let op = expected_operator(competency, cfg)?;
    solve_fixed_point(&op)
}

pub fn solve_fixed_point(op: &ExpectedOperator) -> Result<DMatrix<f64>, OracleError> {
    let dim = op.n * op.m;
    let system = DMatrix::identity(dim, dim) - &op.linear;
    let rhs = vectorize(&op.offset);
    let solution = system.lu().solve(&rhs).ok_or(OracleError::SingularSystem)?;
    if solution.iter().any(|v| !v.is_finite()) {
        return Err(OracleError::SingularSystem);
    }
    Ok(unvectorize(&solution, op.n, op.m))
}
