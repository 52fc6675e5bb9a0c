//! Checks the analytic gradients of the expansion and projection losses
//! against central differences, for both activations.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use zsl_expand::experiment::{run_grad_check, ExperimentConfig};

fn main() -> zsl_expand::Result<()> {
    for activation in ["tanh", "relu"] {
        let config = ExperimentConfig {
            m_seen: 6,
            v_unseen: 2,
            d: 16,
            n: 4,
            neighbors: 4,
            hidden: vec![10],
            activation: activation.into(),
            sweep_k: vec![2],
            out_dir: std::env::temp_dir().join(format!("zsl-expand-gradcheck-{activation}")),
            ..ExperimentConfig::default()
        };
        for e in run_grad_check(&config, 6, 500)? {
            println!(
                "{activation:<5} {:<18} {:>4} coords  max rel err {:.2e}  {}",
                e.target,
                e.report.checked,
                e.report.max_relative_error,
                if e.report.passed() { "ok" } else { "FAILED" }
            );
        }
    }
    Ok(())
}
