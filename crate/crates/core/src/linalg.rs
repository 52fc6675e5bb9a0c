//! Dense symmetric eigensolver and a small regularized least-squares solver.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Off-diagonal Frobenius norm, relative to the matrix norm, at which Jacobi stops.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
/// Maximum number of full cyclic sweeps.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Allowed asymmetry `|a_ij - a_ji|`, relative to `max(1, max |a|)`.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// Eigenpairs of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    /// Sorted descending.
    pub values: Array1<f64>,
    /// Column `i` is the unit eigenvector of `values[i]`.
    pub vectors: Array2<f64>,
    pub sweeps: usize,
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Eigenvalues are sorted descending (ties keep the diagonal order). Each
/// eigenvector is flipped so that its largest-magnitude entry (first one on
/// ties) is nonnegative, which makes the output reproducible.
pub fn symmetric_evd(a: ArrayView2<'_, f64>) -> Result<SymmetricEigen> {
    let (rows, cols) = a.dim();
    if rows != cols {
        return Err(Error::shape("symmetric_evd", "square matrix", format!("{rows}x{cols}")));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("symmetric_evd input".into()));
    }
    let n = rows;
    let scale = a.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    for i in 0..n {
        for j in i + 1..n {
            if (a[[i, j]] - a[[j, i]]).abs() > SYMMETRY_TOLERANCE * scale {
                return Err(Error::Invalid(format!(
                    "matrix is not symmetric at ({i},{j}): {} vs {}",
                    a[[i, j]],
                    a[[j, i]]
                )));
            }
        }
    }

    // row-major working copies
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (a[[i, j]] + a[[j, i]]);
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let total: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let threshold = JACOBI_TOLERANCE * total;

    let off_norm = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    let mut off = off_norm(&m);
    while off > threshold {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps, residual: off });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // rotate columns p, q
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                // rotate rows p, q
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        off = off_norm(&m);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = Array1::from_iter(order.iter().map(|&i| m[i * n + i]));
    let mut vectors = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        let mut pivot = 0;
        for k in 0..n {
            if v[k * n + src].abs() > v[pivot * n + src].abs() {
                pivot = k;
            }
        }
        let sign = if v[pivot * n + src] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[[k, col]] = sign * v[k * n + src];
        }
    }
    Ok(SymmetricEigen {
        values,
        vectors,
        sweeps,
    })
}

/// Cholesky factor `L` (lower) of a symmetric positive definite matrix.
fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Relative ridge added to the normal matrix, scaled by its mean diagonal.
pub const RIDGE_SCALE: f64 = 1e-8;
/// Refinement passes that remove the ridge bias on well-determined directions.
pub const REFINEMENT_STEPS: usize = 3;

/// Minimizes `‖target − Σ_i coef_i · basis_i‖` where `basis` holds one
/// vector per row.
///
/// Solves the ridge-regularized normal equations and then applies iterated
/// refinement `x ← x + (A + ρI)⁻¹ (bᵀ − A x)`, which converges to the
/// minimum-norm least-squares solution while staying stable when the basis
/// rows are linearly dependent.
pub fn least_squares_rows(basis: ArrayView2<'_, f64>, target: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let (g, n) = basis.dim();
    if target.len() != n {
        return Err(Error::shape("least_squares_rows target", n, target.len()));
    }
    if g == 0 {
        return Err(Error::Invalid("least squares needs at least one basis vector".into()));
    }
    let gram = basis.dot(&basis.t());
    let rhs = basis.dot(&target);
    let mean_diag = gram.diag().sum() / g as f64;
    if mean_diag == 0.0 {
        return Ok(Array1::zeros(g));
    }
    let mut ridge = RIDGE_SCALE * mean_diag;
    let mut regularized = gram.clone();
    let l = loop {
        for i in 0..g {
            regularized[[i, i]] = gram[[i, i]] + ridge;
        }
        match cholesky(&regularized) {
            Some(l) => break l,
            None => ridge *= 10.0,
        }
    };
    let mut x = cholesky_solve(&l, &rhs);
    for _ in 0..REFINEMENT_STEPS {
        let r = &rhs - &gram.dot(&x);
        x += &cholesky_solve(&l, &r);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        &r + &r.t()
    }

    #[test]
    fn identity_eigenvalues() {
        let e = symmetric_evd(Array2::<f64>::eye(3).view()).unwrap();
        assert_eq!(e.values, array![1.0, 1.0, 1.0]);
        assert_eq!(e.vectors, Array2::eye(3));
    }

    #[test]
    fn diagonal_case_axis_vectors() {
        let a = array![[2.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 5.0]];
        let e = symmetric_evd(a.view()).unwrap();
        assert_eq!(e.values, array![5.0, 2.0, -1.0]);
        assert_eq!(e.vectors, array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn random_reconstruction_and_orthonormality() {
        let a = random_symmetric(20, 5);
        let e = symmetric_evd(a.view()).unwrap();
        let lambda = Array2::from_diag(&e.values);
        let rebuilt = e.vectors.dot(&lambda).dot(&e.vectors.t());
        let err = (&rebuilt - &a).mapv(|v| v * v).sum().sqrt();
        let norm = a.mapv(|v| v * v).sum().sqrt();
        assert!(err / norm <= 1e-8, "relative error {err}");
        let gram = e.vectors.t().dot(&e.vectors);
        for ((i, j), v) in gram.indexed_iter() {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((v - want).abs() <= 1e-9);
        }
        for w in e.values.windows(2) {
            assert!(w[0] >= w[1]);
        }
        for i in 0..20 {
            let av = a.dot(&e.vectors.column(i));
            let lv = &e.vectors.column(i) * e.values[i];
            let res = (&av - &lv).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
            assert!(res <= 1e-8 * norm);
        }
    }

    #[test]
    fn sign_convention_holds() {
        let a = random_symmetric(8, 9);
        let e = symmetric_evd(a.view()).unwrap();
        for col in e.vectors.columns() {
            let pivot = col.iter().fold(0.0f64, |m, v| if v.abs() > m.abs() { *v } else { m });
            assert!(pivot >= 0.0);
        }
    }

    #[test]
    fn rejects_asymmetric() {
        let a = array![[1.0, 2.0], [0.0, 1.0]];
        assert!(matches!(symmetric_evd(a.view()), Err(Error::Invalid(_))));
    }

    #[test]
    fn least_squares_exact_combination() {
        let basis = array![[1.0, 2.0, 0.0, 1.0], [0.0, 1.0, 3.0, -1.0]];
        let target = &basis.row(0) * 0.5 + &basis.row(1) * 0.5;
        let x = least_squares_rows(basis.view(), target.view()).unwrap();
        assert!((x[0] - 0.5).abs() <= 1e-12 && (x[1] - 0.5).abs() <= 1e-12, "{x}");
    }

    #[test]
    fn least_squares_duplicate_rows_stay_finite() {
        let basis = array![[1.0, 0.0], [1.0, 0.0]];
        let x = least_squares_rows(basis.view(), array![2.0, 0.0].view()).unwrap();
        assert!((x[0] + x[1] - 2.0).abs() <= 1e-6);
        assert!((x[0] - x[1]).abs() <= 1e-6, "{x}");
    }
}
