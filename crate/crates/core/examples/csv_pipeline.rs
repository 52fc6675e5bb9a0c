//! Writes a synthetic benchmark to CSV and runs the full pipeline from those
//! files, the same way external features and prototypes would be used.
//!
//! ```text
//! cargo run --release --example csv_pipeline
//! ```

use zsl_expand::experiment::{generate_data, run_pipeline, ExperimentConfig};

fn main() -> zsl_expand::Result<()> {
    let root = std::env::temp_dir().join("zsl-expand-csv");
    let synthetic = ExperimentConfig {
        m_seen: 20,
        v_unseen: 5,
        cluster_spread: 0.8,
        seeds: vec![11],
        out_dir: root.join("data"),
        ..ExperimentConfig::default()
    };
    let dir = generate_data(&synthetic)?.remove(0);
    println!("benchmark written to {}", dir.display());

    let config = ExperimentConfig {
        source: "csv".into(),
        prototypes_path: Some(dir.join("prototypes.csv")),
        train_path: Some(dir.join("train.csv")),
        test_path: Some(dir.join("test.csv")),
        epochs: 80,
        projection_epochs: 80,
        out_dir: root.join("run"),
        ..synthetic
    };
    print!("{}", config.to_toml());
    let runs = run_pipeline(&config)?;
    let r = &runs[0];
    println!("k = {}, Hit@1 {:.3}", r.latent_dim, r.report.hit1());
    for (id, acc) in r.report.class_ids.iter().zip(&r.report.per_class_accuracy) {
        println!("  {id:<12} {acc:.3}");
    }
    Ok(())
}
