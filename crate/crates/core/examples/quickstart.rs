//! Trains a base model on synthetic blobs, runs four incremental sessions
//! with semantic perturbation learning and prints per-session accuracy.
//!
//! cargo run --release --example quickstart

use fscil::data::{generate_synthetic, split_sessions, SplitConfig, SyntheticConfig};
use fscil::metrics::{emit_table, ResultRow, TableFormat};
use fscil::protocol::{run_experiment, TrainConfig};

fn main() -> fscil::Result<()> {
    let seed = 0;
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
    for s in &sessions {
        println!(
            "session {}: classes {:?}, {} train / {} test",
            s.session_index,
            s.label_set,
            s.train.len(),
            s.test.len()
        );
    }

    let cfg = TrainConfig {
        seed,
        ..Default::default()
    };
    let reports = run_experiment(&cfg, &sessions)?;
    println!();
    print!(
        "{}",
        emit_table(
            &[ResultRow::new("ccl+spl", seed, &reports)?],
            TableFormat::Text
        )?
    );
    Ok(())
}
