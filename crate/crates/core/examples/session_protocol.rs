//! Walks the session loop by hand: the extractor stays frozen, old
//! prototypes never move and every session adds exactly its own classes.
//!
//! cargo run --release --example session_protocol

use fscil::data::{generate_synthetic, split_sessions, SplitConfig, SyntheticConfig};
use fscil::metrics::evaluate;
use fscil::protocol::{incremental_update, seen_test_samples, train_base, Strategy, TrainConfig};

fn main() -> fscil::Result<()> {
    let data = generate_synthetic(&SyntheticConfig::default())?;
    let sessions = split_sessions(&data, &SplitConfig::default())?;
    let cfg = TrainConfig::default();

    let base = train_base(&cfg, &sessions[0])?;
    let last = base
        .session_log
        .last()
        .expect("base training logs every epoch");
    println!(
        "base training: {} epochs, final loss {:.4} {:?}",
        last.epoch + 1,
        last.loss,
        last.components
    );

    let mut state = base.clone();
    for (t, session) in sessions.iter().enumerate().skip(1) {
        let before = state.classifier.clone();
        state = incremental_update(&state, session, &cfg, Strategy::Spl)?;
        let moved = before
            .class_ids()
            .iter()
            .zip(before.prototypes())
            .filter(|(c, w)| {
                state.classifier.prototypes()[state.classifier.index_of(**c).unwrap()] != **w
            })
            .count();
        let r = evaluate(&state, t, &seen_test_samples(&sessions, t))?;
        println!(
            "session {t}: {} prototypes, {moved} old moved, extractor frozen: {}, acc {:.2} (old {:.2}, new {:.2})",
            state.classifier.len(),
            state.extractor == base.extractor,
            100.0 * r.acc_overall,
            100.0 * r.acc_base_classes,
            100.0 * r.acc_new_classes.unwrap_or(0.0)
        );
    }
    Ok(())
}
