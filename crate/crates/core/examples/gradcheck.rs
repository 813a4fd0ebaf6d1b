//! Finite-difference check of a full parallel model: analytic gradients in
//! f32 and f64 against central differences in f64, with routing noise frozen
//! by re-seeding the forward RNG on every evaluation.
//!
//! ```sh
//! cargo run --example gradcheck -- [share_linear|gumbel_v1|gumbel_v2]
//! ```

use parapath::config::{presets, ConnectionKind, ModelConfig};
use parapath::gradcheck::{check_gradients, GradCheckConfig, Objective};
use parapath::losses::{cross_entropy, total_loss, LossConfig};
use parapath::model::{forward_with, Model, ModelWeights, ParamId};
use parapath::parallel::{ForwardCtx, RoutingMode};
use parapath::{Float, Graph, Result, RngState, SeqLayout, Tensor, Var};

struct Loss {
    config: ModelConfig,
    weights: ModelWeights<ParamId>,
    tokens: Vec<u32>,
    targets: Vec<u32>,
}

impl Objective for Loss {
    fn eval<T: Float>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
        let mut rng = RngState::new(99);
        let mut ctx = ForwardCtx {
            routing: RoutingMode::Sample,
            tau: 1.0,
            hard: false,
            dropout_path: 0.0,
            rng: &mut rng,
        };
        let layout = SeqLayout { batch: 2, seq: 4 };
        let out = forward_with(&self.config, &self.weights, g, inputs, &self.tokens, layout, &mut ctx)?;
        let ce = cross_entropy(g, out.logits, &self.targets)?;
        Ok(total_loss(g, ce, &out.routing_pis(), &LossConfig::default())?.0)
    }
}

fn main() -> Result<()> {
    let kind = match std::env::args().nth(1).as_deref() {
        Some("share_linear") => ConnectionKind::ShareLinear,
        Some("gumbel_v2") => ConnectionKind::GumbelV2,
        _ => ConnectionKind::GumbelV1,
    };
    let mut c = presets::desk_parallel(kind).with_vocab(13);
    c.d_model = 8;
    c.d_path = 4;
    c.head_dim = 2;
    c.heads_layer = 4;
    c.heads_path = 2;
    c.ff_layer = 8;
    c.ff_path = 6;
    c.max_seq_len = 4;
    c.init_std = 0.3;
    let model = Model::<f32>::build(&c, &mut RngState::new(1))?;
    let loss = Loss {
        config: c,
        weights: model.weights.clone(),
        tokens: vec![1, 5, 2, 7, 3, 3, 9, 12],
        targets: vec![5, 2, 7, 0, 3, 9, 12, 4],
    };
    let f32_inputs: Vec<Tensor<f32>> = model.params.iter().map(|(_, p)| p.tensor.clone()).collect();
    let f64_inputs: Vec<Tensor<f64>> = f32_inputs.iter().map(|t| t.cast()).collect();
    let names: Vec<&str> = model.params.iter().map(|(n, _)| n).collect();
    for (label, report) in [
        ("f32", check_gradients(&loss, &f32_inputs, &GradCheckConfig { step: 1e-5, floor: 1e-2, ..Default::default() })?),
        ("f64", check_gradients(&loss, &f64_inputs, &GradCheckConfig { step: 1e-5, floor: 1e-6, ..Default::default() })?),
    ] {
        let (i, e, a, n) = report.worst.expect("checked elements");
        println!(
            "{} {label}: {} elements, max rel err {:.2e} ({}[{e}]: analytic {a:.6e}, numeric {n:.6e})",
            kind.as_str(),
            report.checked,
            report.max_rel_err,
            names[i]
        );
    }
    Ok(())
}
