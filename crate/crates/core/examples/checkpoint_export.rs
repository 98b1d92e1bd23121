//! Saves a trained network, reloads it and exports test-set embeddings as
//! CSV. Reloading the checkpoint reproduces every parameter exactly.
//!
//! cargo run --release --example checkpoint_export -- /tmp/fscil-example

use std::path::PathBuf;

use fscil::data::{
    export_embeddings_csv, generate_synthetic, load_embeddings_csv, split_sessions, SplitConfig,
    SyntheticConfig,
};
use fscil::model::{load_checkpoint, save_checkpoint};
use fscil::protocol::{run_from_base, seen_test_samples, train_base, Strategy, TrainConfig};

fn main() -> fscil::Result<()> {
    let dir = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "fscil-example".into()),
    );
    let data = generate_synthetic(&SyntheticConfig::default())?;
    let sessions = split_sessions(&data, &SplitConfig::default())?;
    let cfg = TrainConfig::default();
    let base = train_base(&cfg, &sessions[0])?;
    let (_, state) = run_from_base(&base, &sessions, &cfg, Strategy::Spl)?;

    let ckpt = dir.join("spl.ckpt");
    save_checkpoint(&state.network(), &ckpt)?;
    let net = load_checkpoint(&ckpt)?;
    println!(
        "checkpoint {}: {} parameters, exact round trip: {}",
        ckpt.display(),
        net.parameter_count(),
        net.parameters() == state.network().parameters()
    );

    let test = seen_test_samples(&sessions, sessions.len() - 1);
    let out = dir.join("embeddings.csv");
    export_embeddings_csv(&net.extractor, &test, &out)?;
    let rows = load_embeddings_csv(&out)?;
    println!(
        "{}: {} rows of {} features",
        out.display(),
        rows.len(),
        rows[0].input.len()
    );
    Ok(())
}
