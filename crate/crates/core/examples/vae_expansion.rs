//! Trains the expansion network on a synthetic benchmark and prints the loss
//! curves together with the smallest alignment loss the data allows.
//!
//! ```text
//! cargo run --release --example vae_expansion
//! ```

use ndarray::Axis;
use zsl_expand::data::{class_centers, generate_synthetic, l2_normalize_rows, SyntheticSpec};
use zsl_expand::expansion::{evaluate_expansion, train_expansion, AlignmentContext, ExpansionConfig, Variant};
use zsl_expand::mds::embed_centers;

fn main() -> zsl_expand::Result<()> {
    let bench = generate_synthetic(&SyntheticSpec::default())?;
    let train = bench.train.with_features(l2_normalize_rows(bench.train.features()))?;
    let n = bench.prototypes.n();
    let k = 6;

    let centers = class_centers(&train)?;
    let manifold = embed_centers(centers.view(), n + k)?;
    let seen = train.classes().seen();
    let ctx = AlignmentContext::new(bench.prototypes.predefined().select(Axis(0), &seen), &manifold)?;

    let config = ExpansionConfig {
        variant: Variant::Vae,
        latent_dim: k,
        epochs: 100,
        ..ExpansionConfig::default()
    };
    let (model, trace) = train_expansion(&train, &ctx, &config)?;
    println!("{:>5} {:>12} {:>10} {:>10} {:>10}", "epoch", "reconstruct", "kl", "align", "total");
    for e in trace.epochs.iter().filter(|e| e.epoch == 1 || e.epoch % 20 == 0) {
        println!(
            "{:>5} {:>12.5} {:>10.5} {:>10.5} {:>10.4}",
            e.epoch, e.reconstruction, e.kl, e.alignment, e.total
        );
    }

    let trained = evaluate_expansion(&model, &train, &ctx, config.weights)?;
    let floor = ctx.alignment_floor(&train.seen_positions()?);
    println!("full-data alignment at mu: {:.4} (floor {floor:.4})", trained.alignment);
    Ok(())
}
