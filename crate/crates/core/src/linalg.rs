//! Dense linear-algebra kernels: guarded normal-equation solves and symmetric
//! eigendecompositions (full dense, or Lanczos for a few leading pairs).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative pivot below which a Gram matrix is treated as singular.
const SINGULAR_PIVOT: f64 = 1e-12;
/// Ridge factor applied (times trace/dim) on detected singularity.
pub const RIDGE_FACTOR: f64 = 1e-10;

/// Solution of a symmetric positive semi-definite system.
#[derive(Debug, Clone)]
pub struct GuardedSolve {
    pub solution: DVector<f64>,
    pub ridge_used: bool,
    /// Cholesky factor of the (possibly ridged) matrix, reused for variance formulas.
    pub chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

/// Solve `gram * x = rhs`. A ridge of `1e-10 * trace / dim` is added only when
/// the Cholesky factorization fails or a scaled pivot falls below `1e-12`.
pub fn solve_spd_guarded(gram: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<GuardedSolve> {
    let p = gram.nrows();
    if p == 0 {
        return Err(Error::Size("empty normal equations".into()));
    }
    if let Some(chol) = gram.clone().cholesky() {
        let l = chol.l_dirty();
        let well_posed = (0..p).all(|k| {
            let diag = gram[(k, k)];
            diag > 0.0 && l[(k, k)] * l[(k, k)] >= SINGULAR_PIVOT * diag
        });
        if well_posed {
            let solution = chol.solve(rhs);
            return Ok(GuardedSolve {
                solution,
                ridge_used: false,
                chol,
            });
        }
    }
    let trace = gram.trace();
    let ridge = if trace > 0.0 {
        RIDGE_FACTOR * trace / p as f64
    } else {
        RIDGE_FACTOR
    };
    let mut ridged = gram.clone();
    for k in 0..p {
        ridged[(k, k)] += ridge;
    }
    let chol = ridged
        .cholesky()
        .ok_or_else(|| Error::numerical("normal equations", "ridged Gram matrix not positive definite"))?;
    let solution = chol.solve(rhs);
    Ok(GuardedSolve {
        solution,
        ridge_used: true,
        chol,
    })
}

/// Eigensolver used for local principal components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EigenSolver {
    /// Full dense symmetric eigendecomposition.
    Dense,
    /// Lanczos with full reorthogonalization from a seeded random start;
    /// falls back to `Dense` when it does not converge.
    Lanczos { seed: u64 },
}

impl Default for EigenSolver {
    fn default() -> Self {
        EigenSolver::Lanczos { seed: 0x5eed }
    }
}

/// Leading eigenpairs of a symmetric matrix, eigenvalues nonincreasing.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    /// Columns are unit-norm eigenvectors matching `values`.
    pub vectors: DMatrix<f64>,
}

/// All eigenpairs, sorted by nonincreasing eigenvalue.
pub fn dense_eigen_desc(a: &DMatrix<f64>) -> Result<EigenPairs> {
    let m = a.nrows();
    let eig = SymmetricEigen::try_new(a.clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::numerical("symmetric eigensolver", "QR iteration did not converge"))?;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]).then(x.cmp(&y)));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(m, m, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(EigenPairs { values, vectors })
}

/// The `k` largest eigenpairs of the symmetric matrix `a`.
pub fn top_eigen(a: &DMatrix<f64>, k: usize, solver: EigenSolver) -> Result<EigenPairs> {
    let m = a.nrows();
    if k > m {
        return Err(Error::Size(format!("requested {k} eigenpairs of a {m}x{m} matrix")));
    }
    let dense = |a: &DMatrix<f64>| -> Result<EigenPairs> {
        let full = dense_eigen_desc(a)?;
        Ok(EigenPairs {
            values: full.values[..k].to_vec(),
            vectors: full.vectors.columns(0, k).into_owned(),
        })
    };
    match solver {
        EigenSolver::Dense => dense(a),
        EigenSolver::Lanczos { seed } => {
            // Small problems are cheaper to solve densely.
            if m <= 48 || 4 * k >= m {
                return dense(a);
            }
            match lanczos_top(a, k, seed) {
                Some(pairs) => Ok(pairs),
                None => dense(a),
            }
        }
    }
}

/// Lanczos iteration with full reorthogonalization. Returns `None` when the
/// Ritz residuals do not reach the tolerance, or when an invariant subspace
/// smaller than `k` is hit.
fn lanczos_top(a: &DMatrix<f64>, k: usize, seed: u64) -> Option<EigenPairs> {
    let m = a.nrows();
    let max_steps = m.min(160);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = DVector::from_fn(m, |_, _| rng.random::<f64>() - 0.5);
    q /= q.norm();

    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs())) * m as f64;
    if scale == 0.0 {
        return None;
    }

    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(max_steps);
    let mut alphas: Vec<f64> = Vec::with_capacity(max_steps);
    let mut betas: Vec<f64> = Vec::with_capacity(max_steps);
    basis.push(q);

    let mut step = 0;
    loop {
        let qj = &basis[step];
        let mut w = a * qj;
        let alpha = qj.dot(&w);
        alphas.push(alpha);
        // Two passes of classical Gram-Schmidt against the whole basis.
        for _ in 0..2 {
            for v in &basis {
                let c = v.dot(&w);
                w.axpy(-c, v, 1.0);
            }
        }
        let beta = w.norm();
        step += 1;

        let converged_check = step >= k + 8 && (step % 6 == 0 || step == max_steps || beta <= 1e-14 * scale);
        if converged_check {
            let eig = tridiagonal_eigen(&alphas, &betas, true)?;
            let tol = 1e-13 * eig.values[0].abs().max(f64::MIN_POSITIVE);
            let done = (0..k).all(|c| (beta * eig.vectors[(0, c)]).abs() <= tol);
            if done || beta <= 1e-14 * scale {
                if step < k {
                    return None;
                }
                let eig = tridiagonal_eigen(&alphas, &betas, false)?;
                let mut vectors = DMatrix::zeros(m, k);
                for c in 0..k {
                    let mut col = DVector::zeros(m);
                    for (r, v) in basis.iter().enumerate() {
                        col.axpy(eig.vectors[(r, c)], v, 1.0);
                    }
                    let norm = col.norm();
                    col /= norm;
                    vectors.set_column(c, &col);
                }
                let values = eig.values[..k].to_vec();
                return Some(EigenPairs { values, vectors });
            }
            if step == max_steps {
                return None;
            }
        }
        if step == max_steps {
            return None;
        }
        betas.push(beta);
        basis.push(w / beta);
    }
}

/// Eigenpairs of the symmetric tridiagonal matrix with diagonal `alphas` and
/// off-diagonal `betas`, by implicit QL with Wilkinson shifts. Sorted descending.
/// With `last_row_only` the returned vectors hold only the final row of the
/// eigenvector matrix.
fn tridiagonal_eigen(alphas: &[f64], betas: &[f64], last_row_only: bool) -> Option<EigenPairs> {
    let n = alphas.len();
    if n == 0 {
        return Some(EigenPairs { values: Vec::new(), vectors: DMatrix::zeros(0, 0) });
    }
    let mut d = alphas.to_vec();
    let mut e = vec![0.0; n];
    e[..n - 1].copy_from_slice(&betas[..n - 1]);
    let rows = if last_row_only { 1 } else { n };
    let mut z = if last_row_only {
        let mut z = DMatrix::<f64>::zeros(1, n);
        z[(0, n - 1)] = 1.0;
        z
    } else {
        DMatrix::<f64>::identity(n, n)
    };
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return None;
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = (g * g + 1.0).sqrt();
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut underflow = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = (f * f + g * g).sqrt();
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let (lo, hi) = z.as_mut_slice().split_at_mut((i + 1) * rows);
                let zi = &mut lo[i * rows..];
                for (a, h) in zi.iter_mut().zip(hi[..rows].iter_mut()) {
                    let f = *h;
                    *h = s * *a + c * f;
                    *a = c * *a - s * f;
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    let values = order.iter().map(|&k| d[k]).collect();
    let vectors = DMatrix::from_fn(rows, n, |r, c| z[(r, order[c])]);
    Some(EigenPairs { values, vectors })
}

/// `X' X` with an exactly symmetric result.
pub fn gram(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = x.tr_mul(x);
    let n = g.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            g[(j, i)] = g[(i, j)];
        }
    }
    g
}
