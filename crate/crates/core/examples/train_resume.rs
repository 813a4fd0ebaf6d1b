//! Trains a path model, pauses partway, round-trips the full trainer state
//! through checkpoint bytes and resumes. The resumed run reproduces the
//! uninterrupted loss trajectory bit for bit.
//!
//! ```sh
//! cargo run --release --example train_resume -- [pause_step]
//! ```

use parapath::checkpoint::Checkpoint;
use parapath::config::presets;
use parapath::data::synth::desk_store;
use parapath::data::Role;
use parapath::model::Model;
use parapath::trainer::Trainer;
use parapath::RngState;

fn main() -> parapath::Result<()> {
    let pause: usize = std::env::args().nth(1).map(|s| s.parse().expect("pause step")).unwrap_or(6);
    let (tok, store, _) = desk_store(20_000, 64, 3)?;
    let mut config = presets::desk_path().with_vocab(tok.vocab_size());
    config.max_seq_len = 64;
    let mut train = presets::desk_train();
    train.max_steps = Some(16);
    let model = Model::<f32>::build(&config, &mut RngState::new(5))?;

    let mut straight = Trainer::new(model.clone(), train.clone(), Role::Path1)?;
    let full = straight.run(&store, None, None, None)?;

    let mut first = Trainer::new(model, train, Role::Path1)?;
    let head = first.run(&store, Some(pause), None, None)?;
    let bytes = first.checkpoint().to_bytes();
    println!("paused at step {pause}; checkpoint {} bytes", bytes.len());
    let mut second = Trainer::resume(Checkpoint::from_bytes(&bytes)?)?;
    let tail = second.run(&store, None, None, None)?;

    let resumed: Vec<f64> = head.steps.iter().chain(&tail.steps).map(|s| s.total).collect();
    let reference: Vec<f64> = full.steps.iter().map(|s| s.total).collect();
    for (s, (a, b)) in reference.iter().zip(&resumed).enumerate() {
        println!("step {:>2}  straight {a:.6}  resumed {b:.6}", s + 1);
    }
    let same = reference == resumed && straight.model.params.iter().zip(second.model.params.iter()).all(|(a, b)| a.1.tensor.same_values(&b.1.tensor));
    println!("bit-exact: {same}");
    Ok(())
}
