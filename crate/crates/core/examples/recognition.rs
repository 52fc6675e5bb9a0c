//! Zero-shot recognition with predefined prototypes only: trains the linear
//! projection on seen classes and scores it on unseen ones.
//!
//! ```text
//! cargo run --release --example recognition
//! ```

use zsl_expand::data::{generate_synthetic, Segment, SyntheticSpec};
use zsl_expand::recognition::{evaluate, train_projection, Metric, ProjectionConfig, UnseenPrototypes};

fn main() -> zsl_expand::Result<()> {
    let bench = generate_synthetic(&SyntheticSpec {
        cluster_spread: 1.0,
        ..SyntheticSpec::default()
    })?;
    let candidates = UnseenPrototypes::from_table(&bench.prototypes, Segment::Predefined)?;

    for tied in [false, true] {
        let config = ProjectionConfig {
            tied,
            epochs: 100,
            ..ProjectionConfig::default()
        };
        let model = train_projection(&bench.train, bench.prototypes.predefined(), &config)?;
        for metric in [Metric::Cosine, Metric::Euclidean] {
            let report = evaluate(&model, &bench.test, &candidates, 3, metric)?;
            let hits: Vec<String> = report.hit_at_k.iter().map(|h| format!("{h:.3}")).collect();
            println!(
                "{:<6} {:<9} Hit@1..3 {}",
                if tied { "tied" } else { "untied" },
                metric.name(),
                hits.join(" ")
            );
        }
    }
    Ok(())
}
