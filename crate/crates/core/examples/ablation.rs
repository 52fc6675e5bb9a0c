//! Compares recognition with predefined (P), expanded (E) and concatenated
//! (P+E) prototypes over a few seeds. Artifacts go to the system temp dir.
//!
//! ```text
//! cargo run --release --example ablation
//! ```

use zsl_expand::data::Segment;
use zsl_expand::experiment::{mean_std, run_ablation, ExperimentConfig};

fn main() -> zsl_expand::Result<()> {
    let config = ExperimentConfig {
        cluster_spread: 1.0,
        epochs: 100,
        projection_epochs: 100,
        seeds: vec![1, 2, 3],
        out_dir: std::env::temp_dir().join("zsl-expand-ablation"),
        ..ExperimentConfig::default()
    };
    let runs = run_ablation(&config)?;
    for segment in [Segment::Predefined, Segment::Expanded, Segment::Combined] {
        let hits: Vec<f64> = runs.iter().filter_map(|r| r.hit1(segment)).collect();
        let (m, s) = mean_std(&hits);
        println!("{:<4} Hit@1 {m:.3} ± {s:.3}", segment.label());
    }
    if let Some(a) = runs[0].alignment {
        println!(
            "seed {}: alignment {:.4} -> {:.4}, floor {:.4}",
            runs[0].seed, a.initial.alignment, a.trained.alignment, a.floor
        );
    }
    println!("artifacts in {}", config.out_dir.display());
    Ok(())
}
