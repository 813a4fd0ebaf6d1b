//! Itemized parameter counts for every preset, plus the closed-form count of
//! one connection layer at full scale.
//!
//! ```sh
//! cargo run --example count_params -- [preset]
//! ```

use parapath::config::{presets, ConnectionKind};
use parapath::model::param_report;
use parapath::parallel::{parallel_layer_param_count, ConnectionRole};

fn main() {
    let only = std::env::args().nth(1);
    for name in presets::NAMES {
        if only.as_deref().is_some_and(|o| o != *name) {
            continue;
        }
        let c = presets::by_name(name).expect("known preset");
        let r = param_report(&c);
        println!("== {name} ({}, vocab {})", c.connection.as_str(), c.vocab_size);
        print!("{}", r.to_text());
    }
    if only.is_none() {
        for kind in [ConnectionKind::ShareLinear, ConnectionKind::GumbelV1, ConnectionKind::GumbelV2] {
            let n = parallel_layer_param_count(kind, 2, 128, 512, 256, ConnectionRole::Inter);
            println!("{:<14} one parallel layer (k=2, d'=128): {n}", kind.as_str());
        }
    }
}
