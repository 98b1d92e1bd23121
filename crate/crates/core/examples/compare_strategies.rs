//! Compares the cross-entropy baseline against the covariance constraint
//! combined with each incremental strategy, over several seeds.
//!
//! cargo run --release --example compare_strategies -- 5

use fscil::cli::run_methods;
use fscil::config::RunConfig;
use fscil::metrics::{emit_comparison, TableFormat};

fn main() -> fscil::Result<()> {
    let n_seeds: u64 = std::env::args()
        .nth(1)
        .map_or(Ok(5), |s| s.parse())
        .expect("seed count");
    let cfg = RunConfig::default();
    let mut rows = Vec::new();
    for seed in 0..n_seeds {
        let sessions = fscil::cli::sessions_for(&cfg, seed)?;
        rows.extend(
            run_methods(&cfg, seed, &sessions)?
                .into_iter()
                .map(|r| r.row),
        );
    }
    print!("{}", emit_comparison(&rows, TableFormat::Text)?);
    Ok(())
}
