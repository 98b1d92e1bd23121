//! The covariance constraint pulls predicted log-variances toward zero.
//! Prints the loss along a log-variance sweep, then the mean |log σ̂²| of
//! base models trained with and without it.
//!
//! cargo run --release --example covariance_constraint

use fscil::data::{generate_synthetic, split_sessions, SplitConfig, SyntheticConfig};
use fscil::losses::ccl_loss;
use fscil::protocol::{train_base, TrainConfig};

fn main() -> fscil::Result<()> {
    for lv in [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0] {
        println!("logvar {lv:+.1}: ccl {:.5}", ccl_loss(&[vec![lv]])?);
    }
    println!();
    for seed in 0..5 {
        let data = generate_synthetic(&SyntheticConfig {
            seed,
            ..Default::default()
        })?;
        let sessions = split_sessions(
            &data,
            &SplitConfig {
                seed,
                ..Default::default()
            },
        )?;
        let mean_abs = |gamma: f64| -> fscil::Result<f64> {
            let cfg = TrainConfig {
                seed,
                gamma,
                ..Default::default()
            };
            train_base(&cfg, &sessions[0])?.mean_abs_logvar(&sessions[0].train)
        };
        println!(
            "seed {seed}: mean |logvar| γ=0 {:.4}, γ=0.01 {:.4}",
            mean_abs(0.0)?,
            mean_abs(0.01)?
        );
    }
    Ok(())
}
