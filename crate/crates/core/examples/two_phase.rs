//! Two-phase training on the synthetic desk corpus: both paths are
//! pretrained on their own 60% sub-collection, composed into all three
//! parallel variants, and trained jointly on the 40% sub-collections. A
//! stacked baseline trains on everything for comparison.
//!
//! ```sh
//! cargo run --release --example two_phase -- [tokens_per_corpus] [out_dir]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use parapath::config::{presets, ConnectionKind};
use parapath::data::synth::desk_store;
use parapath::trainer::{run_phase2, Regimen, TrainReport};

fn summary(name: &str, r: &TrainReport) {
    println!(
        "{name:<24} steps {:>4}  ce {:.3} -> {:.3}",
        r.steps.len(),
        r.initial_ce().unwrap_or(f64::NAN),
        r.final_ce().unwrap_or(f64::NAN)
    );
}

fn main() -> parapath::Result<()> {
    let mut args = std::env::args().skip(1);
    let tokens: usize = args.next().map(|s| s.parse().expect("token count")).unwrap_or(100_000);
    let out_dir = args.next().map(PathBuf::from);
    if let Some(d) = &out_dir {
        std::fs::create_dir_all(d)?;
    }

    let started = Instant::now();
    let (tok, store, _) = desk_store(tokens, 256, 42)?;
    let vocab = tok.vocab_size();
    println!("vocab {vocab}, {} chunks", store.len());
    if let Some(d) = &out_dir {
        tok.save(&d.join("tokenizer.json"))?;
    }

    let composites = [ConnectionKind::ShareLinear, ConnectionKind::GumbelV1, ConnectionKind::GumbelV2]
        .map(|k| presets::desk_parallel(k).with_vocab(vocab))
        .to_vec();
    let reg = Regimen {
        store,
        composites,
        baseline: Some(presets::desk_base().with_vocab(vocab)),
        train: presets::desk_train(),
        out_dir,
    };
    let art = run_phase2(&reg)?;
    summary("path1", &art.path1.1);
    summary("path2", &art.path2.1);
    for (kind, _, r) in &art.composites {
        summary(kind.as_str(), r);
    }
    if let Some((_, r)) = &art.baseline {
        summary("baseline", r);
    }
    println!("elapsed {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
