//! Training objective: token cross-entropy plus the two routing regularisers.
//!
//! ```text
//! L_entropy = -(1/N) Σ_b Σ_t Σ_i π_{b,t,i} log π_{b,t,i}
//! π̄_i       =  (1/N) Σ_b Σ_t π_{b,t,i}
//! L_load    = -Σ_i π̄_i log π̄_i
//! L_total   =  L_CE + s_e λ_e L_entropy + s_l λ_l L_load
//! ```
//!
//! Sums over `i` run over all `k + 1` slots. With several routed layers the
//! two regularisers are averaged across layers.

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Float;

/// Floor applied to probabilities inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_entropy: f64,
    pub lambda_load: f64,
    pub sign_entropy: i8,
    pub sign_load: i8,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_entropy: 0.01,
            lambda_load: 0.01,
            sign_entropy: 1,
            sign_load: 1,
        }
    }
}

impl From<&TrainConfig> for LossConfig {
    fn from(t: &TrainConfig) -> Self {
        LossConfig {
            lambda_entropy: t.lambda_entropy,
            lambda_load: t.lambda_load,
            sign_entropy: t.sign_entropy,
            sign_load: t.sign_load,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub entropy: f64,
    pub load: f64,
    pub total: f64,
    pub lambda_entropy: f64,
    pub lambda_load: f64,
    pub sign_entropy: i8,
    pub sign_load: i8,
}

pub fn cross_entropy<T: Float>(g: &mut Graph<T>, logits: Var, targets: &[u32]) -> Result<Var> {
    let t: Vec<usize> = targets.iter().map(|&x| x as usize).collect();
    g.cross_entropy(logits, &t)
}

fn neg_plogp_sum<T: Float>(g: &mut Graph<T>, p: Var) -> Result<Var> {
    let floored = g.clamp_min(p, LOG_FLOOR);
    let logp = g.log(floored);
    let plogp = g.mul(p, logp)?;
    let s = g.sum(plogp);
    Ok(g.scale(s, -1.0))
}

/// Mean per-token routing entropy of `pi` (N × slots).
pub fn entropy_loss<T: Float>(g: &mut Graph<T>, pi: Var) -> Result<Var> {
    let (n, _) = g.value(pi).dims2()?;
    let s = neg_plogp_sum(g, pi)?;
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Entropy of the batch-mean routing distribution.
pub fn load_balance_loss<T: Float>(g: &mut Graph<T>, pi: Var) -> Result<Var> {
    let mean = g.mean_axis(pi, 0)?;
    neg_plogp_sum(g, mean)
}

/// Assembles the total loss from the cross-entropy node and the soft routing
/// weights of every routed layer.
pub fn total_loss<T: Float>(g: &mut Graph<T>, ce: Var, pis: &[Var], cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    if cfg.lambda_entropy < 0.0 || cfg.lambda_load < 0.0 {
        return Err(Error::config("lambda", "loss weights must be ≥ 0"));
    }
    let ce_v = g.value(ce).data()[0].as_f64();
    let mut breakdown = LossBreakdown {
        ce: ce_v,
        entropy: 0.0,
        load: 0.0,
        total: ce_v,
        lambda_entropy: cfg.lambda_entropy,
        lambda_load: cfg.lambda_load,
        sign_entropy: cfg.sign_entropy,
        sign_load: cfg.sign_load,
    };
    if pis.is_empty() {
        return Ok((ce, breakdown));
    }
    let layers = pis.len() as f64;
    let mut ent_sum: Option<Var> = None;
    let mut load_sum: Option<Var> = None;
    for &pi in pis {
        let e = entropy_loss(g, pi)?;
        let l = load_balance_loss(g, pi)?;
        ent_sum = Some(match ent_sum {
            None => e,
            Some(a) => g.add(a, e)?,
        });
        load_sum = Some(match load_sum {
            None => l,
            Some(a) => g.add(a, l)?,
        });
    }
    let ent = g.scale(ent_sum.expect("non-empty"), 1.0 / layers);
    let load = g.scale(load_sum.expect("non-empty"), 1.0 / layers);
    let we = g.scale(ent, cfg.sign_entropy as f64 * cfg.lambda_entropy);
    let wl = g.scale(load, cfg.sign_load as f64 * cfg.lambda_load);
    let t = g.add(ce, we)?;
    let total = g.add(t, wl)?;
    breakdown.entropy = g.value(ent).data()[0].as_f64();
    breakdown.load = g.value(load).data()[0].as_f64();
    breakdown.total = g.value(total).data()[0].as_f64();
    Ok((total, breakdown))
}
