//! Varies the number of expanded dimensions and reports alignment and
//! accuracy per size.
//!
//! ```text
//! cargo run --release --example expansion_sweep
//! ```

use zsl_expand::experiment::{run_expansion_sweep, ExperimentConfig};

fn main() -> zsl_expand::Result<()> {
    let config = ExperimentConfig {
        epochs: 60,
        projection_epochs: 60,
        seeds: vec![1, 2],
        out_dir: std::env::temp_dir().join("zsl-expand-sweep"),
        ..ExperimentConfig::default()
    };
    let table = run_expansion_sweep(&config, &[2, 4, 8, 16])?;
    println!("{:>3} {:>10} {:>10} {:>8}", "k", "initial", "final", "Hit@1");
    for r in &table.rows {
        println!(
            "{:>3} {:>10.4} {:>10.4} {:>8.3}",
            r.k, r.mean_initial_alignment, r.mean_final_alignment, r.mean_hit_at_1
        );
    }
    Ok(())
}
