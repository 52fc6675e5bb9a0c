//! Classical (Torgerson) multidimensional scaling of seen-class centers.
//!
//! Pairwise Euclidean distances between class centers are double centered
//! into the Gram matrix `B` of a zero-centered configuration, and the top
//! eigenpairs of `B` give the embedded coordinates `O` (one column per class).

use std::path::Path;

use log::warn;
use ndarray::{Array1, Array2, ArrayView2};

use crate::data::{save_matrix, save_vector};
use crate::error::{Error, Result};
use crate::linalg::symmetric_evd;

/// Eigenvalues at or below this fraction of the largest one are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Symmetric matrix of pairwise distances with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix(Array2<f64>);

impl DistanceMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    /// Wraps an existing matrix after checking squareness, symmetry, a zero
    /// diagonal and nonnegative entries.
    pub fn from_matrix(values: Array2<f64>) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c || r == 0 {
            return Err(Error::shape("distance matrix", "non-empty square", format!("{r}x{c}")));
        }
        for i in 0..r {
            if values[[i, i]] != 0.0 {
                return Err(Error::Invalid(format!("distance matrix diagonal ({i},{i}) is nonzero")));
            }
            for j in 0..r {
                let v = values[[i, j]];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Invalid(format!("distance ({i},{j}) = {v} is not a finite nonnegative value")));
                }
                if (v - values[[j, i]]).abs() > 1e-12 * v.abs().max(1.0) {
                    return Err(Error::Invalid(format!("distance matrix asymmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self(values))
    }
}

/// Double-centered inner-product matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(Array2<f64>);

impl GramMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Embedded coordinates of the seen-class centers.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedManifold {
    /// `target_dim × m`; column `j` is the embedding of seen class `j`.
    pub coords: Array2<f64>,
    /// All eigenvalues of `B`, descending, negatives clamped to zero.
    pub eigenvalues: Array1<f64>,
    /// Number of eigenvalues above the rank tolerance.
    pub effective_rank: usize,
}

impl EmbeddedManifold {
    pub fn dim(&self) -> usize {
        self.coords.nrows()
    }

    pub fn classes(&self) -> usize {
        self.coords.ncols()
    }
}

/// Euclidean distance between every pair of rows.
pub fn pairwise_distance_matrix(centers: ArrayView2<'_, f64>) -> Result<DistanceMatrix> {
    let m = centers.nrows();
    if m == 0 {
        return Err(Error::Invalid("need at least one center".into()));
    }
    if centers.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("class centers".into()));
    }
    let mut d = Array2::zeros((m, m));
    for i in 0..m {
        for j in i + 1..m {
            let dist = centers
                .row(i)
                .iter()
                .zip(centers.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d[[i, j]] = dist;
            d[[j, i]] = dist;
        }
    }
    Ok(DistanceMatrix(d))
}

/// `b_ij = −½ (d²_ij − d²_i· − d²_·j + d²_··)` with row, column and grand means of squared distances.
pub fn double_center(d: &DistanceMatrix) -> GramMatrix {
    let m = d.len();
    let sq = d.values().mapv(|v| v * v);
    let row_mean: Vec<f64> = sq.rows().into_iter().map(|r| r.sum() / m as f64).collect();
    let col_mean: Vec<f64> = sq.columns().into_iter().map(|c| c.sum() / m as f64).collect();
    let grand = sq.sum() / (m * m) as f64;
    let mut b = Array2::from_shape_fn((m, m), |(i, j)| -0.5 * (sq[[i, j]] - row_mean[i] - col_mean[j] + grand));
    // exact symmetry for the eigensolver
    for i in 0..m {
        for j in i + 1..m {
            let avg = 0.5 * (b[[i, j]] + b[[j, i]]);
            b[[i, j]] = avg;
            b[[j, i]] = avg;
        }
    }
    GramMatrix(b)
}

/// Coordinates from the top eigenpairs of `B`; rows past the effective rank are zero.
pub fn extract_embedding(b: &GramMatrix, target_dim: usize) -> Result<EmbeddedManifold> {
    if target_dim == 0 {
        return Err(Error::Invalid("embedding dimension must be >= 1".into()));
    }
    let m = b.values().nrows();
    let eig = symmetric_evd(b.values().view())?;
    let max = eig.values.iter().fold(0.0f64, |acc, v| acc.max(*v));
    let most_negative = eig.values.iter().fold(0.0f64, |acc, v| acc.min(*v));
    if most_negative < -RANK_TOLERANCE * max.max(f64::MIN_POSITIVE) {
        warn!("distance matrix is not Euclidean: eigenvalue {most_negative:e} clamped to zero");
    }
    let eigenvalues = eig.values.mapv(|v| v.max(0.0));
    let cutoff = RANK_TOLERANCE * max;
    let effective_rank = eigenvalues.iter().filter(|&&v| v > cutoff && v > 0.0).count();
    let kept = effective_rank.min(target_dim);
    let mut coords = Array2::zeros((target_dim, m));
    for i in 0..kept {
        let scale = eigenvalues[i].sqrt();
        coords.row_mut(i).assign(&(&eig.vectors.column(i) * scale));
    }
    Ok(EmbeddedManifold {
        coords,
        eigenvalues,
        effective_rank,
    })
}

/// Convenience: centers → distances → Gram matrix → embedding.
pub fn embed_centers(centers: ArrayView2<'_, f64>, target_dim: usize) -> Result<EmbeddedManifold> {
    let d = pairwise_distance_matrix(centers)?;
    extract_embedding(&double_center(&d), target_dim)
}

/// Writes `distances.csv`, `gram.csv`, `eigenvalues.csv` and `embedding.csv` into `dir`.
pub fn dump_csv(dir: &Path, d: &DistanceMatrix, b: &GramMatrix, manifold: &EmbeddedManifold) -> Result<()> {
    save_matrix(dir.join("distances.csv"), d.values())?;
    save_matrix(dir.join("gram.csv"), b.values())?;
    save_vector(dir.join("eigenvalues.csv"), "eigenvalue", &manifold.eigenvalues)?;
    save_matrix(dir.join("embedding.csv"), &manifold.coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn triangle() -> Array2<f64> {
        array![[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]]
    }

    fn column_distances(coords: &Array2<f64>) -> Array2<f64> {
        let m = coords.ncols();
        Array2::from_shape_fn((m, m), |(i, j)| {
            (0..coords.nrows())
                .map(|r| (coords[[r, i]] - coords[[r, j]]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
    }

    #[test]
    fn single_center() {
        let d = pairwise_distance_matrix(array![[1.0, 2.0]].view()).unwrap();
        assert_eq!(d.values(), &array![[0.0]]);
        let o = extract_embedding(&double_center(&d), 3).unwrap();
        assert_eq!(o.coords, Array2::zeros((3, 1)));
        assert_eq!(o.effective_rank, 0);
    }

    #[test]
    fn triangle_distances() {
        let d = pairwise_distance_matrix(triangle().view()).unwrap();
        assert_eq!(d.values(), &array![[0.0, 3.0, 4.0], [3.0, 0.0, 5.0], [4.0, 5.0, 0.0]]);
    }

    #[test]
    fn zero_distances_give_zero_gram() {
        let d = DistanceMatrix::from_matrix(Array2::zeros((4, 4))).unwrap();
        assert_eq!(double_center(&d).values(), &Array2::<f64>::zeros((4, 4)));
    }

    #[test]
    fn triangle_gram_by_hand() {
        // squared distances [[0,9,16],[9,0,25],[16,25,0]]
        // row means 25/3, 34/3, 41/3; grand mean 100/9
        let d = pairwise_distance_matrix(triangle().view()).unwrap();
        let b = double_center(&d);
        let r = [25.0 / 3.0, 34.0 / 3.0, 41.0 / 3.0];
        let sq = [[0.0, 9.0, 16.0], [9.0, 0.0, 25.0], [16.0, 25.0, 0.0]];
        let g = 100.0 / 9.0;
        for i in 0..3 {
            for j in 0..3 {
                let want = -0.5 * (sq[i][j] - r[i] - r[j] + g);
                assert!((b.values()[[i, j]] - want).abs() <= 1e-12);
            }
        }
        // trace identity Tr(B) = m/2 · d²_··
        assert!((b.values().diag().sum() - 1.5 * g).abs() <= 1e-12);
    }

    #[test]
    fn gram_equals_centered_inner_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_fn((7, 3), |_| rng.random_range(-2.0..2.0));
        let b = double_center(&pairwise_distance_matrix(x.view()).unwrap());
        let m = 7;
        let centering = Array2::<f64>::eye(m) - Array2::from_elem((m, m), 1.0 / m as f64);
        let g = x.dot(&x.t());
        let want = centering.dot(&g).dot(&centering);
        for (a, w) in b.values().iter().zip(want.iter()) {
            assert!((a - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn triangle_embedding_reproduces_distances() {
        let d = pairwise_distance_matrix(triangle().view()).unwrap();
        let o = extract_embedding(&double_center(&d), 2).unwrap();
        let back = column_distances(&o.coords);
        for (a, b) in back.iter().zip(d.values().iter()) {
            assert!((a - b).abs() <= 1e-9);
        }
        for row in o.coords.rows() {
            assert!(row.sum().abs() <= 1e-9);
        }
    }

    #[test]
    fn rank_deficient_rows_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array2::from_shape_fn((10, 5), |_| rng.random_range(-1.0..1.0));
        let d = pairwise_distance_matrix(x.view()).unwrap();
        let o = extract_embedding(&double_center(&d), 8).unwrap();
        assert_eq!(o.effective_rank, 5);
        for r in 5..8 {
            assert!(o.coords.row(r).iter().all(|v| *v == 0.0));
        }
        let back = column_distances(&o.coords);
        for (a, b) in back.iter().zip(d.values().iter()) {
            assert!((a - b).abs() <= 1e-8 * b.max(1.0));
        }
    }

    #[test]
    fn translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Array2::from_shape_fn((6, 4), |_| rng.random_range(-1.0..1.0));
        let shifted = &x + &array![10.0, -3.0, 0.5, 7.0];
        let a = embed_centers(x.view(), 4).unwrap();
        let b = embed_centers(shifted.view(), 4).unwrap();
        for (u, v) in a.coords.iter().zip(b.coords.iter()) {
            assert!((u - v).abs() <= 1e-8);
        }
    }

    #[test]
    fn euclidean_eigenvalues_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Array2::from_shape_fn((15, 6), |_| rng.random_range(-1.0..1.0));
        let b = double_center(&pairwise_distance_matrix(x.view()).unwrap());
        let eig = symmetric_evd(b.values().view()).unwrap();
        let norm = b.values().mapv(|v| v * v).sum().sqrt();
        assert!(eig.values.iter().all(|&v| v >= -1e-9 * norm));
    }
}
