//! Gumbel-Softmax routing on its own: soft weights under temperature
//! annealing with frozen noise, straight-through hard routing, and the forced
//! one-hot override that reproduces a single path or the combined slot.
//!
//! ```sh
//! cargo run --example gumbel_routing
//! ```

use parapath::parallel::{gumbel_softmax, gumbel_v1_forward, ForwardCtx, RoutingMode};
use parapath::{Graph, Result, RngState, Tensor};

fn main() -> Result<()> {
    let logits = Tensor::<f64>::from_f64(&[1, 3], &[0.8, 0.2, -0.4])?;
    let noise = RngState::new(3).gumbel_noise::<f64>(&[1, 3]);
    println!("{:>6}  {:>24}  argmax", "tau", "pi");
    for tau in [4.0, 2.0, 1.0, 0.5, 0.1] {
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let rw = gumbel_softmax(&mut g, l, tau, false, Some(&noise))?;
        let pi: Vec<String> = g.value(rw.pi).data().iter().map(|p| format!("{p:.3}")).collect();
        println!("{tau:>6}  {:>24}  {}", pi.join(" "), rw.selected[0]);
    }

    let mut g = Graph::new();
    let l = g.param(logits.clone());
    let rw = gumbel_softmax(&mut g, l, 1.0, true, Some(&noise))?;
    println!("hard forward {:?}, soft {:?}", g.value(rw.mix).data(), g.value(rw.pi).data());

    let mut rng = RngState::new(5);
    let (n, d, k) = (4, 6, 2);
    for slot in 0..=k {
        let mut g = Graph::<f64>::new();
        let outs: Vec<_> = (0..k).map(|_| g.constant(rng.normal_tensor(&[n, d], 1.0))).collect();
        let combine = g.constant(rng.normal_tensor(&[k * d, d], 0.3));
        let router = g.constant(rng.normal_tensor(&[d, k + 1], 0.3));
        let mut r = RngState::new(0);
        let mut ctx = ForwardCtx {
            routing: RoutingMode::Forced(slot),
            tau: 1.0,
            hard: false,
            dropout_path: 0.0,
            rng: &mut r,
        };
        let (y, x_comb, _) = gumbel_v1_forward(&mut g, &outs, combine, router, &mut ctx)?;
        let target = if slot < k { outs[slot] } else { x_comb };
        let diff = g.value(y).max_abs_diff(g.value(target)).unwrap_or(f64::NAN);
        let label = if slot < k { format!("path {}", slot + 1) } else { "combined".into() };
        println!("forced {label}: max |y - target| = {diff:.1e}");
    }
    Ok(())
}
