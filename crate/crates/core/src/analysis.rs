//! Inspection of trained models: per-layer routing traces for Gumbel
//! connections, cosine-similarity dominance for Share Linear connections,
//! path utilization against prompt domains, and text generation with
//! next-token probability reports.
//!
//! Traces probe the last prompt token by default and always use noise-free
//! routing, so they are pure functions of the parameters and the prompt.

use serde::Serialize;

use crate::config::ConnectionKind;
use crate::data::{Domain, ToyTokenizer, EOS};
use crate::error::{Error, Result};
use crate::graph::{Graph, SeqLayout};
use crate::model::{eval_ctx, Model};
use crate::parallel::{argmax, ConnectionRole, RoutingMode};
use crate::rng::RngState;
use crate::tensor::{Float, Tensor};

/// Slot label: `Path_1 … Path_k`, then `Combined`.
pub fn slot_name(slot: usize, k: usize) -> String {
    if slot >= k {
        "Combined".into()
    } else {
        format!("Path_{}", slot + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoutingTrace {
    /// Probed position within the (possibly truncated) prompt.
    pub position: usize,
    /// Argmax slot per routed layer (0-based; `k` is the combined slot).
    pub selections: Vec<usize>,
    /// Routing weights per layer at the probed position.
    pub pi: Vec<Vec<f64>>,
    /// Argmax slot per layer for every position, when requested.
    pub per_token: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DominanceTrace {
    /// Path with the highest mean cosine similarity, per compared layer.
    pub dominant: Vec<usize>,
    /// Mean cosine of each path output with the fused output, per layer.
    pub scores: Vec<Vec<f64>>,
}

fn truncate_left(tokens: &[u32], max: usize) -> &[u32] {
    &tokens[tokens.len().saturating_sub(max)..]
}

/// Routing trace of a Gumbel model. `routing` defaults to noise-free
/// softmax; pass [`RoutingMode::Forced`] to pin a slot.
pub fn trace_routing<T: Float>(
    model: &Model<T>,
    tokens: &[u32],
    routing: Option<RoutingMode>,
    per_token: bool,
) -> Result<RoutingTrace> {
    if !model.config.connection.is_gumbel() {
        return Err(Error::Contract(format!(
            "routing traces need a Gumbel connection, model uses {}; use trace_dominance",
            model.config.connection.as_str()
        )));
    }
    if tokens.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    let tokens = truncate_left(tokens, model.config.max_seq_len);
    let (_, pis) = model.eval_logits(tokens, Some(routing.unwrap_or(RoutingMode::Deterministic)))?;
    let position = tokens.len() - 1;
    let pi: Vec<Vec<f64>> = pis.iter().map(|p| p.row(position).iter().map(|v| v.as_f64()).collect()).collect();
    let selections = pis.iter().map(|p| argmax(p.row(position))).collect();
    let per_token = per_token.then(|| {
        (0..tokens.len())
            .map(|r| pis.iter().map(|p| argmax(p.row(r))).collect())
            .collect()
    });
    Ok(RoutingTrace {
        position,
        selections,
        pi,
        per_token,
    })
}

/// Mean over rows of `cos(path_i, y)` for each path.
pub fn dominance_scores<T: Float>(paths: &[Tensor<T>], y: &Tensor<T>) -> Result<Vec<f64>> {
    let mut g = Graph::<T>::new();
    let yv = g.constant(y.clone());
    paths
        .iter()
        .map(|p| {
            let pv = g.constant(p.clone());
            let c = g.cosine_similarity(pv, yv)?;
            let m = g.mean(c);
            Ok(g.value(m).data()[0].as_f64())
        })
        .collect()
}

/// Dominance trace of a Share Linear model over the connections that map
/// back to path width (the expanding final connection is not comparable).
pub fn trace_dominance<T: Float>(model: &Model<T>, tokens: &[u32]) -> Result<DominanceTrace> {
    if model.config.connection != ConnectionKind::ShareLinear {
        return Err(Error::Contract(format!(
            "dominance traces need a share_linear model, model uses {}; use trace_routing",
            model.config.connection.as_str()
        )));
    }
    if tokens.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    let tokens = truncate_left(tokens, model.config.max_seq_len);
    let mut rng = RngState::derived(0, "eval");
    let mut ctx = eval_ctx(&model.config, &mut rng);
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g);
    let out = model.forward(&mut g, &vars, tokens, SeqLayout::single(tokens.len()), &mut ctx)?;
    let mut scores = Vec::new();
    for layer in out.layers.iter().filter(|l| l.role == ConnectionRole::Inter) {
        let paths: Vec<Tensor<T>> = layer.path_outputs.iter().map(|v| g.value(*v).clone()).collect();
        scores.push(dominance_scores(&paths, g.value(layer.fused))?);
    }
    let dominant = scores
        .iter()
        .map(|s| {
            let s: Vec<f64> = s.clone();
            argmax(&s)
        })
        .collect();
    Ok(DominanceTrace { dominant, scores })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UtilizationReport {
    pub k: usize,
    /// Percentage of cells selecting each path.
    pub path_shares: Vec<f64>,
    pub combined_share: f64,
    /// Percentage of cells selecting the path of the prompt's domain.
    pub accuracy: f64,
    pub cells: usize,
    pub correct: usize,
}

/// Aggregates selections over every (prompt, layer) cell. A cell is correct
/// when it selects the path pretrained on the prompt's domain; the combined
/// slot never counts as correct.
pub fn utilization(selections: &[Vec<usize>], domains: &[Domain], k: usize) -> Result<UtilizationReport> {
    if selections.len() != domains.len() {
        return Err(Error::Input(format!(
            "{} traces for {} domain labels",
            selections.len(),
            domains.len()
        )));
    }
    let mut counts = vec![0usize; k + 1];
    let mut correct = 0;
    for (sel, d) in selections.iter().zip(domains) {
        for &s in sel {
            counts[s.min(k)] += 1;
            if s == d.path_index() {
                correct += 1;
            }
        }
    }
    let cells: usize = counts.iter().sum();
    let pct = |n: usize| if cells == 0 { 0.0 } else { 100.0 * n as f64 / cells as f64 };
    Ok(UtilizationReport {
        k,
        path_shares: counts[..k].iter().map(|&c| pct(c)).collect(),
        combined_share: pct(counts[k]),
        accuracy: pct(correct),
        cells,
        correct,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub prompt: String,
    pub domain: Domain,
    pub selections: Vec<usize>,
    /// Routing weights (Gumbel) or cosine scores (Share Linear) per layer.
    pub scores: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub connection: ConnectionKind,
    pub k: usize,
    pub rows: Vec<TraceRow>,
    pub utilization: UtilizationReport,
}

#[derive(Serialize)]
struct CellRecord<'a> {
    connection: &'a str,
    prompt: &'a str,
    domain: Domain,
    layer: usize,
    selection: String,
    correct: bool,
    scores: &'a [f64],
}

impl AnalysisReport {
    /// Prompt × layer selection table with share and accuracy footer.
    pub fn to_text(&self) -> String {
        let layers = self.rows.iter().map(|r| r.selections.len()).max().unwrap_or(0);
        let mut s = format!("Path selection by parallel layer ({})\n", self.connection.as_str());
        s.push_str(&format!("{:<56} {:<6}", "Prompt", "Domain"));
        for l in 0..layers {
            s.push_str(&format!(" {:<9}", format!("Layer {}", l + 1)));
        }
        s.push('\n');
        for r in &self.rows {
            let p: String = r.prompt.chars().take(54).collect();
            s.push_str(&format!("{p:<56} {:<6}", r.domain.as_str()));
            for &sel in &r.selections {
                s.push_str(&format!(" {:<9}", slot_name(sel, self.k)));
            }
            s.push('\n');
        }
        let u = &self.utilization;
        for (i, share) in u.path_shares.iter().enumerate() {
            s.push_str(&format!("{:<10} {share:.1}%\n", slot_name(i, self.k)));
        }
        s.push_str(&format!("{:<10} {:.1}%\n", "Combined", u.combined_share));
        s.push_str(&format!("{:<10} {:.1}% ({}/{})\n", "Accuracy", u.accuracy, u.correct, u.cells));
        s
    }

    /// One JSON record per prompt × layer cell.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            for (l, &sel) in r.selections.iter().enumerate() {
                let rec = CellRecord {
                    connection: self.connection.as_str(),
                    prompt: &r.prompt,
                    domain: r.domain,
                    layer: l + 1,
                    selection: slot_name(sel, self.k),
                    correct: sel == r.domain.path_index(),
                    scores: &r.scores[l],
                };
                s.push_str(&serde_json::to_string(&rec).expect("record serializes"));
                s.push('\n');
            }
        }
        s
    }
}

/// Traces every prompt and aggregates utilization.
pub fn analyze<T: Float>(model: &Model<T>, tok: &ToyTokenizer, prompts: &[(String, Domain)]) -> Result<AnalysisReport> {
    let kind = model.config.connection;
    let k = model.config.k_paths;
    let mut rows = Vec::new();
    for (prompt, domain) in prompts {
        let tokens = tok.tokenize(prompt);
        let (selections, scores) = match kind {
            ConnectionKind::ShareLinear => {
                let t = trace_dominance(model, &tokens)?;
                (t.dominant, t.scores)
            }
            k if k.is_gumbel() => {
                let t = trace_routing(model, &tokens, None, false)?;
                (t.selections, t.pi)
            }
            _ => return Err(Error::Contract("analysis needs a parallel model".into())),
        };
        rows.push(TraceRow {
            prompt: prompt.clone(),
            domain: *domain,
            selections,
            scores,
        });
    }
    let sel: Vec<Vec<usize>> = rows.iter().map(|r| r.selections.clone()).collect();
    let dom: Vec<Domain> = rows.iter().map(|r| r.domain).collect();
    Ok(AnalysisReport {
        connection: kind,
        k,
        utilization: utilization(&sel, &dom, k)?,
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SampleMode {
    Greedy,
    /// Temperature sampling; a temperature of zero is greedy.
    Temperature(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenStep {
    pub token: u32,
    pub piece: String,
    /// Most probable next tokens with their probabilities.
    pub top: Vec<(String, f64)>,
    /// Probability mass over the full vocabulary (1 up to rounding).
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Generation {
    pub prompt: String,
    pub continuation: String,
    pub steps: Vec<GenStep>,
    /// Set when the context had to be truncated from the left.
    pub truncated: bool,
}

impl Generation {
    pub fn to_text(&self) -> String {
        let mut s = format!("Prompt: {}\nContinuation: {}\n", self.prompt, self.continuation);
        if self.truncated {
            s.push_str("warning: context exceeded max_seq_len and was truncated from the left\n");
        }
        for (i, st) in self.steps.iter().enumerate() {
            s.push_str(&format!("Step {}: {:?}\nNext token predictions:\n", i + 1, st.piece));
            for (p, prob) in &st.top {
                s.push_str(&format!("  {:<16} {:>5.1}%\n", format!("{p:?}"), 100.0 * prob));
            }
        }
        s
    }
}

fn softmax_f64<T: Float>(row: &[T], temperature: f64) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| ((v.as_f64() - max) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Autoregressive continuation of `prompt`, recording the top-`top_n`
/// next-token distribution at every step.
pub fn generate<T: Float>(
    model: &Model<T>,
    tok: &ToyTokenizer,
    prompt: &str,
    max_new_tokens: usize,
    mode: SampleMode,
    top_n: usize,
    rng: &mut RngState,
) -> Result<Generation> {
    let mut tokens = tok.tokenize(prompt);
    if tokens.is_empty() {
        tokens.push(EOS);
    }
    let max = model.config.max_seq_len;
    let mut truncated = false;
    let mut steps = Vec::new();
    let mut generated = Vec::new();
    for _ in 0..max_new_tokens {
        if tokens.len() > max {
            truncated = true;
            tokens.drain(..tokens.len() - max);
        }
        let (logits, _) = model.eval_logits(&tokens, None)?;
        let last = logits.row(tokens.len() - 1);
        let probs = softmax_f64(last, 1.0);
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let piece = |id: usize| tok.piece(id as u32).unwrap_or("<?>").to_string();
        let next = match mode {
            SampleMode::Temperature(t) if t > 0.0 => {
                let p = softmax_f64(last, t);
                let u = rng.uniform();
                let mut acc = 0.0;
                let mut pick = p.len() - 1;
                for (i, q) in p.iter().enumerate() {
                    acc += q;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            }
            _ => order[0],
        };
        steps.push(GenStep {
            token: next as u32,
            piece: piece(next),
            top: order.iter().take(top_n).map(|&i| (piece(i), probs[i])).collect(),
            mass: probs.iter().sum(),
        });
        tokens.push(next as u32);
        generated.push(next as u32);
        if next as u32 == EOS {
            break;
        }
    }
    Ok(Generation {
        prompt: prompt.to_string(),
        continuation: tok.detokenize(&generated),
        steps,
        truncated,
    })
}
