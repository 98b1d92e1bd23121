//! Closed-form KL divergence to the similarity prior versus a sampling
//! estimate, and the prior mean built from prototype similarities.
//!
//! cargo run --release --example kl_monte_carlo

use fscil::losses::{kl_to_prior, prior_mean, similarity_scores};
use fscil::mathcore::RandomStream;
use fscil::model::{GaussianStats, PrototypeClassifier};

fn main() -> fscil::Result<()> {
    let mut stream = RandomStream::new(0, "example/kl");
    let d = 3;
    let classifier = PrototypeClassifier::random(d, &[0, 1, 2, 3], &mut stream)?;
    let f = stream.draw_normal(d)?;
    let weights = similarity_scores(&f, &classifier, 2)?;
    let mu_tilde = prior_mean(&weights, &classifier)?;
    println!("similarity weights (own class 2): {:.4?}", weights.weights);
    println!("prior mean: {mu_tilde:.4?}");

    let stats = GaussianStats {
        mu_hat: stream.draw_normal(d)?,
        logvar_hat: vec![-0.5, 0.0, 0.7],
    };
    let closed = kl_to_prior(&stats, &mu_tilde)?;
    let std = stats.std_dev();
    for draws in [1_000, 10_000, 100_000, 1_000_000] {
        let mut total = 0.0;
        for _ in 0..draws {
            for k in 0..d {
                let eps = stream.normal();
                let z = stats.mu_hat[k] + std[k] * eps;
                total +=
                    -0.5 * stats.logvar_hat[k] - 0.5 * eps * eps + 0.5 * (z - mu_tilde[k]).powi(2);
            }
        }
        let sampled = total / draws as f64;
        println!(
            "{draws:>9} draws: sampled {sampled:.5}, closed form {closed:.5}, gap {:.1e}",
            (sampled - closed).abs()
        );
    }
    Ok(())
}
