//! Synthetic story and math corpora, tokenized and cut into two epochs of
//! 256-token chunks with a per-epoch 60/40 split, written as chunk stores.
//!
//! ```sh
//! cargo run --release --example pretokenize -- [tokens_per_corpus] [out_dir]
//! ```

use std::path::PathBuf;

use parapath::data::synth::{desk_corpora, desk_tokenizer};
use parapath::data::{pretokenize, Role};

fn main() -> parapath::Result<()> {
    let mut args = std::env::args().skip(1);
    let tokens: usize = args.next().map(|s| s.parse().expect("token count")).unwrap_or(20_000);
    let out = args.next().map(PathBuf::from);
    let corpora = desk_corpora(tokens, 42);
    let tok = desk_tokenizer(&corpora);
    println!("vocab {} ({})", tok.vocab_size(), &tok.fingerprint()[..12]);
    for c in &corpora {
        let (store, rows) = pretokenize(c, &tok, 256, 0.6, 42)?;
        for r in &rows {
            println!(
                "{:<5} epoch {} offset {:>3}: {} chunks ({} sub60, {} sub40), {} of {} tokens dropped",
                r.corpus.as_str(),
                r.epoch,
                r.offset,
                r.chunks,
                r.sub60,
                r.sub40,
                r.remainder,
                r.stream_tokens
            );
        }
        for role in [Role::Path1, Role::Path2, Role::Composite] {
            let n = store.indices(|t| t.epoch == 1 && role.accepts(t)).len();
            println!("  {:<9} epoch 1 chunks: {n}", role.as_str());
        }
        if let Some(dir) = &out {
            std::fs::create_dir_all(dir)?;
            store.save(&dir.join(format!("{}.chunks", c.domain)))?;
        }
    }
    if let Some(dir) = &out {
        tok.save(&dir.join("tokenizer.json"))?;
    }
    Ok(())
}
