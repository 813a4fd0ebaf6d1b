//! Routing and dominance analysis of composite models over labelled
//! prompts. Given the output directory of the `two_phase` example it reads
//! the trained composites; otherwise it analyzes freshly composed ones.
//!
//! ```sh
//! cargo run --release --example analyze -- [out_dir]
//! ```

use std::path::PathBuf;

use parapath::analysis::analyze;
use parapath::checkpoint::Checkpoint;
use parapath::composer::{compose, CompositionPlan, PathSource};
use parapath::config::{presets, ConnectionKind};
use parapath::data::synth::{desk_prompts, desk_store};
use parapath::data::ToyTokenizer;
use parapath::model::Model;
use parapath::RngState;

const KINDS: [ConnectionKind; 3] = [ConnectionKind::ShareLinear, ConnectionKind::GumbelV1, ConnectionKind::GumbelV2];

fn fresh(tok: &ToyTokenizer, kind: ConnectionKind) -> parapath::Result<Model<f32>> {
    let target = presets::desk_parallel(kind).with_vocab(tok.vocab_size());
    let path = target.path_model();
    let sources = ["path1", "path2"].map(|n| PathSource { name: n.into(), config: path.clone() });
    let p1 = Model::build(&path, &mut RngState::new(1))?;
    let p2 = Model::build(&path, &mut RngState::new(2))?;
    compose(&CompositionPlan::new(target, sources.to_vec()), &[&p1, &p2], &mut RngState::new(3))
}

fn main() -> parapath::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from);
    let tok = match &dir {
        Some(d) => ToyTokenizer::load(&d.join("tokenizer.json"))?,
        None => desk_store(20_000, 256, 42)?.0,
    };
    let prompts = desk_prompts();
    for kind in KINDS {
        let model = match &dir {
            Some(d) => Checkpoint::load(&d.join(format!("composite_{}.ckpt", kind.as_str())))?.model,
            None => fresh(&tok, kind)?,
        };
        let report = analyze(&model, &tok, &prompts)?;
        println!("== {}\n{}", kind.as_str(), report.to_text());
    }
    Ok(())
}
