//! Expands the seen prototypes with a trained autoencoder and rebuilds each
//! unseen prototype from its nearest seen neighbors.
//!
//! ```text
//! cargo run --release --example prototype_update
//! ```

use ndarray::Axis;
use zsl_expand::data::{class_centers, generate_synthetic, Segment, SyntheticSpec};
use zsl_expand::expansion::{train_expansion, AlignmentContext, ExpansionConfig, Variant};
use zsl_expand::mds::embed_centers;
use zsl_expand::prototypes::{update_prototypes, NeighborMetric, UpdateOptions};

fn main() -> zsl_expand::Result<()> {
    let spec = SyntheticSpec {
        m_seen: 12,
        v_unseen: 4,
        d: 24,
        n: 5,
        ..SyntheticSpec::default()
    };
    let bench = generate_synthetic(&spec)?;
    let train = &bench.train;
    let k = 3;
    let manifold = embed_centers(class_centers(train)?.view(), spec.n + k)?;
    let seen = train.classes().seen();
    let ctx = AlignmentContext::new(bench.prototypes.predefined().select(Axis(0), &seen), &manifold)?;
    let config = ExpansionConfig {
        variant: Variant::Ae,
        latent_dim: k,
        hidden: vec![32],
        epochs: 60,
        ..ExpansionConfig::default()
    };
    let (model, _) = train_expansion(train, &ctx, &config)?;

    let options = UpdateOptions {
        neighbors: 4,
        metric: NeighborMetric::Euclidean,
        normalize_search: false,
    };
    let (table, solutions) = update_prototypes(&model, train, &bench.prototypes, options)?;
    let classes = table.classes();
    let expanded = table.segment(Segment::Expanded)?;
    for (&c, sol) in classes.unseen().iter().zip(&solutions) {
        let names: Vec<&str> = sol.neighbors.iter().map(|&p| classes.get(seen[p]).id.as_str()).collect();
        let theta: Vec<String> = sol.theta.iter().map(|t| format!("{t:+.3}")).collect();
        println!("{}  neighbors {}", classes.get(c).id, names.join(","));
        println!("    theta [{}]  residual {:.4}", theta.join(" "), sol.residual);
        println!("    expanded {:.3}", expanded.row(c));
    }
    Ok(())
}
