//! Dense small-matrix kernel: real eigenpairs, Lyapunov solve, controllability
//! rank and single-input pole placement.
//!
//! Sizes in this crate never exceed a few dozen states, so everything is
//! plain `DMatrix<f64>` with direct (Kronecker / LU / SVD) methods.

use nalgebra::{DMatrix, DVector, Schur};
use num_complex::Complex64;
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("eigenvalue {re}+{im}i is not real within tolerance")]
    ComplexSpectrum { re: f64, im: f64 },
    #[error("eigenvalue {0} is defective (eigenvectors do not span its multiplicity)")]
    Defective(f64),
    #[error("matrix is not Hurwitz (max real part {0})")]
    Unstable(f64),
    #[error("right-hand side is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("Kronecker-sum system is singular")]
    SingularSystem,
    #[error("pair is uncontrollable (rank {rank} < {n})")]
    Uncontrollable { rank: usize, n: usize },
    #[error("pole placement needs a single input column, got {0} inputs")]
    MultiInput(usize),
    #[error("placed spectrum misses requested poles by {0:e}")]
    PlacementInaccurate(f64),
    #[error("eigenvalue iteration did not converge")]
    NoConvergence,
}

const SCHUR_MAX_ITER: usize = 10_000;

/// All eigenvalues of a square matrix via a bounded real Schur iteration.
///
/// The unshifted QR sweep can stall on matrices with repeated eigenvalues, so
/// a failed attempt is retried on the transpose and on shifted copies.
pub fn eigenvalues(a: &Matrix) -> Result<DVector<Complex64>, NumError> {
    ensure_square(a)?;
    ensure_finite(a)?;
    let n = a.nrows();
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let scale = norm2(a).max(1.0);
    let attempts: [(bool, f64); 5] = [(false, 0.0), (true, 0.0), (false, 0.37), (true, -0.61), (false, 1.13)];
    for (transpose, shift) in attempts {
        let base = if transpose { a.transpose() } else { a.clone() };
        let c = shift * scale;
        let shifted = base + Matrix::identity(n, n) * c;
        if let Some(s) = Schur::try_new(shifted, f64::EPSILON, SCHUR_MAX_ITER) {
            return Ok(s.complex_eigenvalues().map(|z| z - c));
        }
    }
    Err(NumError::NoConvergence)
}

/// A real eigenvalue with a unit-norm eigenvector of `Aᵀ` (a left eigenvector of `A`).
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Vector,
}

fn ensure_finite(a: &Matrix) -> Result<(), NumError> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumError::NonFinite)
    }
}

fn ensure_square(a: &Matrix) -> Result<(), NumError> {
    if a.is_square() {
        Ok(())
    } else {
        Err(NumError::NonSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        })
    }
}

/// Spectral norm.
pub fn norm2(a: &Matrix) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Index sets of the connected components of the symmetric nonzero pattern of
/// a square matrix. A block-diagonal matrix (up to permutation) splits into its
/// blocks; indices inside each component are ascending and components are
/// ordered by their smallest index.
pub fn decoupled_blocks(a: &Matrix) -> Vec<Vec<usize>> {
    let n = a.nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        let mut j = i;
        while p[j] != r {
            let next = p[j];
            p[j] = r;
            j = next;
        }
        r
    }
    for i in 0..n {
        for j in 0..n {
            if i != j && a[(i, j)] != 0.0 {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    let mut root_slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if root_slot[r] == usize::MAX {
            root_slot[r] = blocks.len();
            blocks.push(Vec::new());
        }
        blocks[root_slot[r]].push(i);
    }
    blocks
}

fn principal_submatrix(a: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(idx.len(), idx.len(), |i, j| a[(idx[i], idx[j])])
}

/// Unit norm, sign fixed so the largest-magnitude entry is positive.
fn normalize_sign(mut v: Vector) -> Vector {
    let nrm = v.norm();
    if nrm > 0.0 {
        v /= nrm;
    }
    let mut best = 0;
    for i in 0..v.len() {
        if v[i].abs() > v[best].abs() + 1e-12 {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v = -v;
    }
    v
}

/// Eigenpairs of one dense block, in the block's own coordinates.
fn block_eig(at: &Matrix, tol: f64) -> Result<Vec<EigenPair>, NumError> {
    let n = at.nrows();
    if n == 1 {
        return Ok(vec![EigenPair {
            value: at[(0, 0)],
            vector: Vector::from_element(1, 1.0),
        }]);
    }
    let scale = norm2(at).max(1.0);
    let mut values = Vec::with_capacity(n);
    for z in eigenvalues(at)?.iter() {
        if z.im.abs() >= tol * scale {
            return Err(NumError::ComplexSpectrum { re: z.re, im: z.im });
        }
        values.push(z.re);
    }
    values.sort_by(|a, b| a.total_cmp(b));

    // Cluster (numerically) repeated eigenvalues, then take the null space of
    // (Aᵀ − λI) for each cluster.
    let cluster_tol = 1e-9 * scale;
    let mut pairs = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && values[j] - values[j - 1] <= cluster_tol {
            j += 1;
        }
        let mult = j - i;
        let lambda = values[i..j].iter().sum::<f64>() / mult as f64;
        let shifted = at - Matrix::identity(n, n) * lambda;
        let svd = shifted.clone().svd(false, true);
        let v_t = svd.v_t.expect("requested V^T");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
        let mut vecs: Vec<Vector> = order[..mult].iter().map(|&k| v_t.row(k).transpose()).collect();
        if mult > 1 {
            // Orthonormal basis of the eigenspace; make it deterministic by
            // rotating onto the coordinate axes where possible (reduced row form).
            let basis = Matrix::from_columns(&vecs);
            vecs = canonical_basis(&basis);
        }
        for v in vecs {
            let v = normalize_sign(v);
            let res = (at * &v - &v * lambda).norm();
            if res > tol * scale {
                return Err(NumError::Defective(lambda));
            }
            pairs.push(EigenPair {
                value: lambda,
                vector: v,
            });
        }
        i = j;
    }
    // A defective eigenvalue splits numerically into nearby values whose
    // vectors are almost parallel.
    let basis = Matrix::from_columns(&pairs.iter().map(|p| p.vector.clone()).collect::<Vec<_>>());
    let sv = basis.singular_values();
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin < 1e-7 {
        let mut worst = (0, 0.0);
        for a in 0..pairs.len() {
            for b in (a + 1)..pairs.len() {
                let d = pairs[a].vector.dot(&pairs[b].vector).abs();
                if d > worst.1 {
                    worst = (a, d);
                }
            }
        }
        return Err(NumError::Defective(pairs[worst.0].value));
    }
    Ok(pairs)
}

/// Gram–Schmidt on the reduced column-echelon form of a basis, so repeated
/// eigenvalues get a reproducible eigenvector choice.
fn canonical_basis(basis: &Matrix) -> Vec<Vector> {
    let (n, k) = basis.shape();
    let mut b = basis.clone();
    let mut pivot_row = 0;
    for col in 0..k {
        if pivot_row >= n {
            break;
        }
        // pick the largest pivot in rows >= pivot_row across remaining columns
        let mut best = (pivot_row, col, 0.0);
        for r in pivot_row..n {
            for c in col..k {
                if b[(r, c)].abs() > best.2 {
                    best = (r, c, b[(r, c)].abs());
                }
            }
        }
        if best.2 < 1e-12 {
            break;
        }
        b.swap_columns(col, best.1);
        let piv = b[(best.0, col)];
        let pc = b.column(col) / piv;
        b.set_column(col, &pc);
        for c in 0..k {
            if c != col {
                let f = b[(best.0, c)];
                let nc = b.column(c) - &pc * f;
                b.set_column(c, &nc);
            }
        }
        pivot_row = best.0 + 1;
    }
    let mut out: Vec<Vector> = Vec::with_capacity(k);
    for c in 0..k {
        let mut v: Vector = b.column(c).into();
        for q in &out {
            let d = q.dot(&v);
            v -= q * d;
        }
        let nrm = v.norm();
        if nrm > 1e-14 {
            out.push(v / nrm);
        }
    }
    out
}

/// Real eigenpairs of `aᵀ` (left eigenvectors of `a`), ascending by value.
///
/// Decoupled blocks (from the exact zero pattern) are solved independently, so
/// repeated eigenvalues that come from identical blocks get block-supported
/// eigenvectors. Fails with [`NumError::ComplexSpectrum`] if any eigenvalue has
/// an imaginary part of at least `tol·max(1, ‖a‖)`.
pub fn real_eig(a: &Matrix, tol: f64) -> Result<Vec<EigenPair>, NumError> {
    ensure_square(a)?;
    ensure_finite(a)?;
    let n = a.nrows();
    let at = a.transpose();
    let mut pairs = Vec::with_capacity(n);
    for block in decoupled_blocks(&at) {
        let sub = principal_submatrix(&at, &block);
        for p in block_eig(&sub, tol)? {
            let mut full = Vector::zeros(n);
            for (k, &i) in block.iter().enumerate() {
                full[i] = p.vector[k];
            }
            pairs.push(EigenPair {
                value: p.value,
                vector: full,
            });
        }
    }
    // stable sort keeps block order among equal eigenvalues
    pairs.sort_by(|x, y| x.value.total_cmp(&y.value));
    Ok(pairs)
}

/// Largest real part of the spectrum of `a`.
pub fn spectral_abscissa(a: &Matrix) -> Result<f64, NumError> {
    ensure_square(a)?;
    ensure_finite(a)?;
    if a.nrows() == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(eigenvalues(a)?.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max))
}

pub fn is_symmetric(a: &Matrix, tol: f64) -> bool {
    a.is_square() && (a - a.transpose()).amax() <= tol * a.amax().max(1.0)
}

pub fn symmetric_eigenvalue_range(a: &Matrix) -> (f64, f64) {
    let ev = a.clone().symmetric_eigenvalues();
    let lo = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Solves `P·A + Aᵀ·P = −M` for a Hurwitz `a_cl` and symmetric positive
/// definite `m` through the Kronecker-sum linear system.
pub fn solve_lyapunov(a_cl: &Matrix, m: &Matrix) -> Result<Matrix, NumError> {
    ensure_square(a_cl)?;
    ensure_square(m)?;
    ensure_finite(a_cl)?;
    ensure_finite(m)?;
    let n = a_cl.nrows();
    if m.nrows() != n {
        return Err(NumError::DimensionMismatch(format!(
            "A is {n}x{n} but M is {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let abscissa = spectral_abscissa(a_cl)?;
    if abscissa >= 0.0 {
        return Err(NumError::Unstable(abscissa));
    }
    if !is_symmetric(m, 1e-12) || symmetric_eigenvalue_range(m).0 <= 0.0 {
        return Err(NumError::NotPositiveDefinite);
    }
    // column-major vec: vec(PA) = (Aᵀ ⊗ I) vec P, vec(AᵀP) = (I ⊗ Aᵀ) vec P
    let id = Matrix::identity(n, n);
    let at = a_cl.transpose();
    let kron_sum = at.kronecker(&id) + id.kronecker(&at);
    let rhs = -Vector::from_column_slice(m.as_slice());
    let sol = kron_sum.lu().solve(&rhs).ok_or(NumError::SingularSystem)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(NumError::SingularSystem);
    }
    let p = Matrix::from_column_slice(n, n, sol.as_slice());
    Ok((&p + p.transpose()) * 0.5)
}

/// `[B, AB, …, Aⁿ⁻¹B]`.
pub fn controllability_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix, NumError> {
    ensure_square(a)?;
    let n = a.nrows();
    if b.nrows() != n {
        return Err(NumError::DimensionMismatch(format!(
            "A is {n}x{n} but B has {} rows",
            b.nrows()
        )));
    }
    let m = b.ncols();
    let mut w = Matrix::zeros(n, n * m);
    let mut blk = b.clone();
    for k in 0..n {
        w.view_mut((0, k * m), (n, m)).copy_from(&blk);
        blk = a * blk;
    }
    Ok(w)
}

/// Smallest singular value of `[A − λI, B]` over the eigenvalues `λ` of `A`,
/// relative to `max(‖A‖, ‖B‖, 1)`.
pub fn pbh_margin(a: &Matrix, b: &Matrix) -> Result<f64, NumError> {
    ensure_square(a)?;
    ensure_finite(a)?;
    ensure_finite(b)?;
    let n = a.nrows();
    let m = b.ncols();
    let scale = norm2(a).max(norm2(b)).max(1.0);
    let mut worst = f64::INFINITY;
    for lam in eigenvalues(a)?.iter() {
        let mut w = DMatrix::<Complex64>::zeros(n, n + m);
        for i in 0..n {
            for j in 0..n {
                w[(i, j)] = Complex64::new(a[(i, j)], 0.0);
            }
            w[(i, i)] -= *lam;
            for j in 0..m {
                w[(i, n + j)] = Complex64::new(b[(i, j)], 0.0);
            }
        }
        let smin = w.singular_values().iter().cloned().fold(f64::INFINITY, f64::min);
        worst = worst.min(smin / scale);
    }
    Ok(worst)
}

/// Numerical rank of the controllability matrix. A pair passing the
/// Popov–Belevitch–Hautus test at relative level `tol` reports full rank;
/// otherwise singular values of `[B, AB, …]` above `tol·σ_max` are counted.
pub fn controllability_rank(a: &Matrix, b: &Matrix, tol: f64) -> Result<usize, NumError> {
    let w = controllability_matrix(a, b)?;
    ensure_finite(&w)?;
    let n = a.nrows();
    if w.is_empty() {
        return Ok(0);
    }
    if pbh_margin(a, b)? > tol {
        return Ok(n);
    }
    let sv = w.singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > tol * smax).count().min(n - 1))
}

/// Maximum pairwise distance between two sorted multisets of reals.
pub fn spectrum_distance(mut got: Vec<f64>, mut want: Vec<f64>) -> f64 {
    if got.len() != want.len() {
        return f64::INFINITY;
    }
    got.sort_by(|a, b| a.total_cmp(b));
    want.sort_by(|a, b| a.total_cmp(b));
    got.iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max)
}

/// Ackermann placement for a single input, returning `K` with
/// `eig(A0 + b·Kᵀ) = poles`.
pub fn ackermann_gain(a0: &Matrix, b: &Matrix, poles: &[f64]) -> Result<Matrix, NumError> {
    ensure_square(a0)?;
    let n = a0.nrows();
    if b.ncols() != 1 {
        return Err(NumError::MultiInput(b.ncols()));
    }
    if b.nrows() != n || poles.len() != n {
        return Err(NumError::DimensionMismatch(format!(
            "A0 is {n}x{n}, b has {} rows, {} poles given",
            b.nrows(),
            poles.len()
        )));
    }
    let rank = controllability_rank(a0, b, 1e-10)?;
    if rank < n {
        return Err(NumError::Uncontrollable { rank, n });
    }
    let w = controllability_matrix(a0, b)?;
    let mut phi = Matrix::identity(n, n);
    for &p in poles {
        phi *= a0 - Matrix::identity(n, n) * p;
    }
    let mut e_n = Vector::zeros(n);
    e_n[n - 1] = 1.0;
    // q = W⁻ᵀ e_n, gain row = qᵀ φ(A0); A0 − b·row has the requested poles.
    let q = w
        .transpose()
        .lu()
        .solve(&e_n)
        .ok_or(NumError::Uncontrollable { rank, n })?;
    let k = -(phi.transpose() * q);
    let k = Matrix::from_column_slice(n, 1, k.as_slice());

    let closed = a0 + b * k.transpose();
    let placed: Vec<f64> = match real_eig(&closed, 1e-6) {
        Ok(pairs) => pairs.iter().map(|p| p.value).collect(),
        Err(NumError::ComplexSpectrum { .. }) => return Err(NumError::PlacementInaccurate(f64::INFINITY)),
        Err(e) => return Err(e),
    };
    let miss = spectrum_distance(placed, poles.to_vec());
    let scale = poles.iter().fold(1.0_f64, |acc, p| acc.max(p.abs()));
    if miss > 1e-6 * scale {
        return Err(NumError::PlacementInaccurate(miss));
    }
    Ok(k)
}
