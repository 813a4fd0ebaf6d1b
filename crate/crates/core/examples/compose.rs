//! Builds a composite parallel model from two path models by weight surgery
//! and prints where every tensor came from. Path checkpoints may be given;
//! otherwise two fresh desk-scale paths are used.
//!
//! ```sh
//! cargo run --example compose -- [gumbel_v1|gumbel_v2|share_linear] [path1.ckpt path2.ckpt]
//! ```

use std::path::Path;

use parapath::checkpoint::Checkpoint;
use parapath::composer::{compose, validate_plan, CompositionPlan, PathSource};
use parapath::config::{presets, ConnectionKind};
use parapath::model::{Model, Provenance};
use parapath::RngState;

fn main() -> parapath::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let kind = match args.first().map(String::as_str) {
        Some("share_linear") => ConnectionKind::ShareLinear,
        Some("gumbel_v2") => ConnectionKind::GumbelV2,
        _ => ConnectionKind::GumbelV1,
    };
    let (p1, p2) = match (args.get(1), args.get(2)) {
        (Some(a), Some(b)) => (Checkpoint::load(Path::new(a))?.model, Checkpoint::load(Path::new(b))?.model),
        _ => {
            let c = presets::desk_path().with_vocab(120);
            (
                Model::<f32>::build(&c, &mut RngState::new(1))?,
                Model::<f32>::build(&c, &mut RngState::new(2))?,
            )
        }
    };
    let target = presets::desk_parallel(kind).with_vocab(p1.config.vocab_size);
    let plan = CompositionPlan::new(
        target.clone(),
        vec![
            PathSource { name: "path1".into(), config: p1.config.clone() },
            PathSource { name: "path2".into(), config: p2.config.clone() },
        ],
    );
    let report = validate_plan(&plan);
    for c in &report.conflicts {
        println!("conflict: {c}");
    }
    let composite = compose(&plan, &[&p1, &p2], &mut RngState::new(7))?;
    let (mut reused, mut concat, mut fresh) = (0, 0, 0);
    for (name, p) in composite.params.iter() {
        match &p.provenance {
            Provenance::Reused { path, source } => {
                reused += p.tensor.numel();
                if name.ends_with("attn.wq") {
                    println!("{name:<32} <- path{} {source}", path + 1);
                }
            }
            Provenance::Concatenated { sources } => {
                concat += p.tensor.numel();
                println!("{name:<32} <- concat {}", sources.join(" + "));
            }
            Provenance::Fresh { .. } => fresh += p.tensor.numel(),
        }
    }
    println!(
        "{}: {} parameters ({reused} reused, {concat} concatenated, {fresh} fresh)",
        kind.as_str(),
        composite.count_params().total
    );

    let mut wrong = target;
    wrong.vocab_size += 1;
    let bad = CompositionPlan::new(wrong, plan.paths.clone());
    for c in validate_plan(&bad).conflicts {
        println!("mismatched target rejected: {c}");
    }
    Ok(())
}
