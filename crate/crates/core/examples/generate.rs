//! Greedy and temperature-sampled continuations with the top next-token
//! predictions at every step. Given a checkpoint and tokenizer it uses
//! them; otherwise it briefly trains a path model on the story corpus.
//!
//! ```sh
//! cargo run --release --example generate -- [model.ckpt tokenizer.json] ["prompt"]
//! ```

use std::path::Path;

use parapath::analysis::{generate, SampleMode};
use parapath::checkpoint::Checkpoint;
use parapath::config::presets;
use parapath::data::synth::desk_store;
use parapath::data::{Role, ToyTokenizer};
use parapath::trainer::train_model;
use parapath::RngState;

fn main() -> parapath::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (model, tok, prompt) = if args.len() >= 2 {
        let model = Checkpoint::load(Path::new(&args[0]))?.model;
        let tok = ToyTokenizer::load(Path::new(&args[1]))?;
        (model, tok, args.get(2).cloned())
    } else {
        let (tok, store, _) = desk_store(20_000, 64, 42)?;
        let mut config = presets::desk_path().with_vocab(tok.vocab_size());
        config.max_seq_len = 64;
        let mut train = presets::desk_train();
        train.epochs = 1;
        let (model, report) = train_model(&config, &train, Role::Path1, &store, None)?;
        println!("trained {} steps, ce {:.3}\n", report.steps.len(), report.final_ce().unwrap_or(f64::NAN));
        (model, tok, args.first().cloned())
    };
    let prompt = prompt.unwrap_or_else(|| "once upon a time".into());
    let greedy = generate(&model, &tok, &prompt, 8, SampleMode::Greedy, 3, &mut RngState::new(0))?;
    print!("{}", greedy.to_text());
    let sampled = generate(&model, &tok, &prompt, 8, SampleMode::Temperature(0.8), 3, &mut RngState::new(1))?;
    println!("\nsampled at 0.8: {}", sampled.continuation);
    Ok(())
}
