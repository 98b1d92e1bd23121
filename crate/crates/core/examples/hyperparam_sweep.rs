//! Final-session accuracy over a (γ, α) grid. Each γ trains one base model
//! that is shared across the α values.
//!
//! cargo run --release --example hyperparam_sweep

use fscil::data::{generate_synthetic, split_sessions, SplitConfig, SyntheticConfig};
use fscil::protocol::{sweep_hyperparams, TrainConfig};

fn main() -> fscil::Result<()> {
    let data = generate_synthetic(&SyntheticConfig::default())?;
    let sessions = split_sessions(&data, &SplitConfig::default())?;
    let grid = [0.0, 1e-3, 0.01, 0.1];
    let sweep = sweep_hyperparams(&TrainConfig::default(), &sessions, &grid, &grid)?;
    print!("{:>8}", "γ \\ α");
    for a in &sweep.alphas {
        print!("{a:>8}");
    }
    println!();
    for (g, row) in sweep.gammas.iter().zip(&sweep.final_acc) {
        print!("{g:>8}");
        for acc in row {
            print!("{:>8.2}", 100.0 * acc);
        }
        println!();
    }
    Ok(())
}
