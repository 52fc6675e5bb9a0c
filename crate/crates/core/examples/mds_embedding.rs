//! Embeds a handful of random class centers and checks that the embedding
//! reproduces their pairwise distances.
//!
//! ```text
//! cargo run --example mds_embedding
//! ```

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zsl_expand::mds::{double_center, extract_embedding, pairwise_distance_matrix};

fn main() -> zsl_expand::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // 12 centers that live in a 3-dimensional subspace of R^20
    let basis = Array2::from_shape_fn((3, 20), |_| rng.random_range(-1.0..1.0));
    let weights = Array2::from_shape_fn((12, 3), |_| rng.random_range(-2.0..2.0));
    let centers = weights.dot(&basis);

    let distances = pairwise_distance_matrix(centers.view())?;
    let gram = double_center(&distances);
    let manifold = extract_embedding(&gram, 6)?;

    println!("effective rank {}", manifold.effective_rank);
    let head: Vec<String> = manifold.eigenvalues.iter().take(6).map(|v| format!("{v:.4}")).collect();
    println!("leading eigenvalues {}", head.join(" "));

    let points = manifold.coords.t().to_owned();
    let rebuilt = pairwise_distance_matrix(points.view())?;
    let worst = (rebuilt.values() - distances.values())
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    println!("max distance error {worst:.2e}");
    println!("rows past the rank are zero: {}", manifold.coords.rows().into_iter().skip(3).all(|r| r.iter().all(|&v| v == 0.0)));
    Ok(())
}
