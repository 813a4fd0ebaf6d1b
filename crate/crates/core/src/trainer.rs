//! Optimization: AdamW with decoupled weight decay, a cosine learning-rate
//! schedule, gradient accumulation, resumable training and the two-phase
//! regimen (pretrain paths, compose, train the composite jointly).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::composer::{compose, CompositionPlan, PathSource};
use crate::config::{ConnectionKind, ModelConfig, TrainConfig};
use crate::data::{make_batches, ChunkStore, Role};
use crate::error::{Error, Result};
use crate::graph::{Graph, SeqLayout};
use crate::losses::{cross_entropy, total_loss, LossBreakdown, LossConfig};
use crate::model::{train_ctx, Model, ParamStore};
use crate::rng::{RngSnapshot, RngState};
use crate::tensor::{Float, Tensor};

/// `½·lr_max·(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let s = step.min(total) as f64 / total as f64;
    0.5 * lr_max * (1.0 + (std::f64::consts::PI * s).cos())
}

/// Linear warmup over `warmup_steps`, then cosine decay over the rest.
pub fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let w = cfg.warmup_steps;
    if step < w {
        return cfg.lr * (step + 1) as f64 / w as f64;
    }
    cosine_lr(step - w, total.saturating_sub(w), cfg.lr)
}

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Float = f32> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update. Every gradient is checked before anything changes.
pub fn adamw_step<T: Float>(
    params: &mut ParamStore<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract("gradient and optimizer state must cover every parameter".into()));
    }
    for ((name, _), g) in params.iter().zip(grads) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name} is not finite")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let [b1, b2] = cfg.betas;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let decay = 1.0 - lr * cfg.weight_decay;
    for (((_, p), g), (m, v)) in params
        .tensors_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            let gi = gi.as_f64();
            let mn = b1 * mi.as_f64() + (1.0 - b1) * gi;
            let vn = b2 * vi.as_f64() + (1.0 - b2) * gi * gi;
            *mi = T::of(mn);
            *vi = T::of(vn);
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + cfg.adam_eps);
            *w = T::of(w.as_f64() * decay - update);
        }
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
pub fn clip_gradients<T: Float>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for v in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *v = T::of(v.as_f64() * s);
        }
    }
    norm
}

/// Per-step record written to the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: u8,
    pub lr: f64,
    pub ce: f64,
    pub entropy: f64,
    pub load: f64,
    pub total: f64,
    pub tokens_per_sec: f64,
    /// Share of argmax selections per routing slot over all routed layers.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub utilization: Option<Vec<f64>>,
}

impl StepLog {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log serializes")
    }

    /// Same record without the wall-clock field, for reproducibility checks.
    pub fn losses(&self) -> (usize, f64, f64, f64, f64, f64) {
        (self.step, self.lr, self.ce, self.entropy, self.load, self.total)
    }
}

/// Where a trainer is in its schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub role: Role,
    /// Epoch in progress (1-based).
    pub epoch: u8,
    /// Next accumulation group within the epoch.
    pub group: usize,
    pub step: usize,
    pub rng: RngSnapshot,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub role: Role,
    pub steps: Vec<StepLog>,
    /// Chunk indices consumed per epoch, in training order.
    pub consumed: Vec<Vec<usize>>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn initial_ce(&self) -> Option<f64> {
        self.steps.first().map(|s| s.ce)
    }

    /// Mean CE of the last (up to) five steps.
    pub fn final_ce(&self) -> Option<f64> {
        let n = self.steps.len().min(5);
        (n > 0).then(|| self.steps[self.steps.len() - n..].iter().map(|s| s.ce).sum::<f64>() / n as f64)
    }
}

/// Gradient of the mean-token loss over a set of chunks, each trimmed to
/// `input → next token` pairs; the loss is scaled by `scale`.
pub fn batch_gradients<T: Float>(
    model: &Model<T>,
    store: &ChunkStore,
    batch: &[usize],
    step: usize,
    scale: f64,
    loss_cfg: &LossConfig,
    rng: &mut RngState,
) -> Result<(Vec<Vec<T>>, LossBreakdown, Option<Vec<usize>>)> {
    let seq = store.seq_len - 1;
    let mut inputs = Vec::with_capacity(batch.len() * seq);
    let mut targets = Vec::with_capacity(batch.len() * seq);
    for &i in batch {
        let c = store.chunk(i);
        inputs.extend_from_slice(&c[..seq]);
        targets.extend_from_slice(&c[1..]);
    }
    let layout = SeqLayout {
        batch: batch.len(),
        seq,
    };
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g);
    let mut ctx = train_ctx(&model.config, step, rng);
    let out = model.forward(&mut g, &vars, &inputs, layout, &mut ctx)?;
    let ce = cross_entropy(&mut g, out.logits, &targets)?;
    let (total, breakdown) = total_loss(&mut g, ce, &out.routing_pis(), loss_cfg)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("loss is {} at step {step}", breakdown.total)));
    }
    let scaled = g.scale(total, scale);
    g.backward(scaled)?;
    let counts = if out.layers.iter().any(|l| l.routing.is_some()) {
        let slots = model.config.k_paths + 1;
        let mut c = vec![0usize; slots];
        for r in out.layers.iter().filter_map(|l| l.routing.as_ref()) {
            for &s in &r.selected {
                c[s] += 1;
            }
        }
        Some(c)
    } else {
        None
    };
    Ok((model.params.gradients(&g, &vars), breakdown, counts))
}

pub struct Trainer {
    pub model: Model<f32>,
    pub cfg: TrainConfig,
    pub loss_cfg: LossConfig,
    pub optimizer: AdamState<f32>,
    pub state: TrainState,
    rng: RngState,
    pub log: Vec<StepLog>,
    consumed: Vec<Vec<usize>>,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig, role: Role) -> Result<Self> {
        cfg.validate()?;
        let rng = RngState::derived(cfg.seed, &format!("train:{}", role.as_str()));
        Ok(Trainer {
            optimizer: AdamState::new(&model.params),
            loss_cfg: LossConfig::from(&cfg),
            state: TrainState {
                role,
                epoch: 1,
                group: 0,
                step: 0,
                rng: rng.snapshot(),
            },
            model,
            cfg,
            rng,
            log: Vec::new(),
            consumed: Vec::new(),
        })
    }

    /// Continues from a training checkpoint.
    pub fn resume(ck: Checkpoint) -> Result<Self> {
        let cfg = ck
            .train
            .ok_or_else(|| Error::Checkpoint("checkpoint has no train config".into()))?;
        let state = ck
            .state
            .ok_or_else(|| Error::Checkpoint("checkpoint has no trainer state".into()))?;
        let optimizer = ck
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        Ok(Trainer {
            loss_cfg: LossConfig::from(&cfg),
            rng: RngState::restore(state.rng),
            state,
            model: ck.model,
            cfg,
            optimizer,
            log: Vec::new(),
            consumed: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut state = self.state.clone();
        state.rng = self.rng.snapshot();
        Checkpoint {
            model: self.model.clone(),
            train: Some(self.cfg.clone()),
            state: Some(state),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    fn epoch_batches(&self, store: &ChunkStore, epoch: u8) -> Result<Vec<Vec<usize>>> {
        let role = self.state.role;
        let idx = role.select(store, epoch)?;
        role.verify(store, &idx)?;
        let mut rng = RngState::derived(self.cfg.seed, &format!("batches:{}:{epoch}", role.as_str()));
        make_batches(&idx, self.cfg.batch_size, &mut rng)
    }

    fn groups(&self, batches: usize) -> usize {
        batches.div_ceil(self.cfg.grad_accum_steps)
    }

    /// Optimizer steps of the full schedule.
    pub fn total_steps(&self, store: &ChunkStore) -> Result<usize> {
        let mut n = 0;
        for e in 1..=self.cfg.epochs as u8 {
            n += self.groups(self.epoch_batches(store, e)?.len());
        }
        Ok(self.cfg.max_steps.map_or(n, |m| m.min(n)))
    }

    fn check_store(&self, store: &ChunkStore) -> Result<()> {
        if store.seq_len < 2 || store.seq_len - 1 > self.model.config.max_seq_len {
            return Err(Error::Data(format!(
                "chunks of {} tokens do not fit max_seq_len {}",
                store.seq_len, self.model.config.max_seq_len
            )));
        }
        if let Some(t) = store.max_token() {
            if t as usize >= self.model.config.vocab_size {
                return Err(Error::Data(format!(
                    "chunk token {t} exceeds model vocab {}",
                    self.model.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Trains until the schedule ends or `pause_at` optimizer steps have
    /// been taken. Step lines go to `log` as they are produced; with
    /// `ckpt_dir`, a checkpoint is written at each epoch boundary.
    pub fn run(
        &mut self,
        store: &ChunkStore,
        pause_at: Option<usize>,
        ckpt_dir: Option<(&Path, &str)>,
        mut log: Option<&mut dyn Write>,
    ) -> Result<TrainReport> {
        self.check_store(store)?;
        let total = self.total_steps(store)?;
        let mut checkpoints = Vec::new();
        while (self.state.epoch as usize) <= self.cfg.epochs {
            let epoch = self.state.epoch;
            let batches = self.epoch_batches(store, epoch)?;
            let groups: Vec<&[Vec<usize>]> = batches.chunks(self.cfg.grad_accum_steps).collect();
            while self.state.group < groups.len() {
                if self.state.step >= total || pause_at.is_some_and(|p| self.state.step >= p) {
                    return Ok(self.report(checkpoints));
                }
                let group = groups[self.state.group];
                let line = self.train_group(store, group, epoch, total)?;
                if let Some(w) = log.as_deref_mut() {
                    writeln!(w, "{}", line.to_line())?;
                }
                self.log.push(line);
                self.state.group += 1;
            }
            self.state.epoch += 1;
            self.state.group = 0;
            if let Some((dir, name)) = ckpt_dir {
                let path = dir.join(format!("{name}-epoch{epoch}.ckpt"));
                self.checkpoint().save(&path)?;
                checkpoints.push(path);
            }
        }
        Ok(self.report(checkpoints))
    }

    fn report(&self, checkpoints: Vec<PathBuf>) -> TrainReport {
        TrainReport {
            role: self.state.role,
            steps: self.log.clone(),
            consumed: self.consumed.clone(),
            checkpoints,
        }
    }

    fn train_group(&mut self, store: &ChunkStore, group: &[Vec<usize>], epoch: u8, total: usize) -> Result<StepLog> {
        let started = Instant::now();
        let step = self.state.step;
        let scale = 1.0 / group.len() as f64;
        let mut acc: Option<Vec<Vec<f32>>> = None;
        let mut sums = [0.0f64; 4];
        let mut counts: Option<Vec<usize>> = None;
        let mut tokens = 0usize;
        for batch in group {
            self.state.role.verify(store, batch)?;
            let (grads, b, c) =
                batch_gradients(&self.model, store, batch, step, scale, &self.loss_cfg, &mut self.rng)?;
            acc = Some(match acc {
                None => grads,
                Some(mut a) => {
                    for (x, y) in a.iter_mut().zip(&grads) {
                        for (p, q) in x.iter_mut().zip(y) {
                            *p += *q;
                        }
                    }
                    a
                }
            });
            for (s, v) in sums.iter_mut().zip([b.ce, b.entropy, b.load, b.total]) {
                *s += v * scale;
            }
            if let Some(c) = c {
                let into = counts.get_or_insert_with(|| vec![0; c.len()]);
                for (a, b) in into.iter_mut().zip(c) {
                    *a += b;
                }
            }
            tokens += batch.len() * (store.seq_len - 1);
            let e = epoch as usize - 1;
            if self.consumed.len() <= e {
                self.consumed.resize(e + 1, Vec::new());
            }
            self.consumed[e].extend_from_slice(batch);
        }
        let mut grads = acc.expect("non-empty group");
        if let Some(c) = self.cfg.grad_clip {
            clip_gradients(&mut grads, c);
        }
        let lr = lr_at(&self.cfg, step, total);
        adamw_step(&mut self.model.params, &grads, &mut self.optimizer, lr, &self.cfg)?;
        self.state.step += 1;
        let secs = started.elapsed().as_secs_f64().max(1e-9);
        let utilization = counts.map(|c| {
            let n: usize = c.iter().sum();
            c.iter().map(|&x| x as f64 / n.max(1) as f64).collect()
        });
        Ok(StepLog {
            step: step + 1,
            epoch,
            lr,
            ce: sums[0],
            entropy: sums[1],
            load: sums[2],
            total: sums[3],
            tokens_per_sec: tokens as f64 / secs,
            utilization,
        })
    }
}

/// Trains a fresh model of `config` for `role`.
pub fn train_model(
    config: &ModelConfig,
    train: &TrainConfig,
    role: Role,
    store: &ChunkStore,
    out: Option<(&Path, &str)>,
) -> Result<(Model<f32>, TrainReport)> {
    let kind = config.connection.as_str();
    let mut init = RngState::derived(train.seed, &format!("init:{}:{kind}", role.as_str()));
    let model = Model::build(config, &mut init)?;
    train_built(model, train, role, store, out)
}

fn train_built(
    model: Model<f32>,
    train: &TrainConfig,
    role: Role,
    store: &ChunkStore,
    out: Option<(&Path, &str)>,
) -> Result<(Model<f32>, TrainReport)> {
    let mut t = Trainer::new(model, train.clone(), role)?;
    let mut file = match out {
        Some((dir, name)) => Some(std::fs::File::create(dir.join(format!("{name}.log")))?),
        None => None,
    };
    let report = t.run(store, None, out, file.as_mut().map(|f| f as &mut dyn Write))?;
    if let Some((dir, name)) = out {
        Checkpoint::of_model(t.model.clone()).save(&dir.join(format!("{name}.ckpt")))?;
    }
    Ok((t.model, report))
}

/// Inputs of the two-phase regimen.
#[derive(Clone, Debug)]
pub struct Regimen {
    pub store: ChunkStore,
    /// Target configs of the composite models (one per connection kind).
    pub composites: Vec<ModelConfig>,
    /// Optional stacked baseline trained on every chunk.
    pub baseline: Option<ModelConfig>,
    pub train: TrainConfig,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct Phase2Artifacts {
    pub path1: (Model<f32>, TrainReport),
    pub path2: (Model<f32>, TrainReport),
    pub composites: Vec<(ConnectionKind, Model<f32>, TrainReport)>,
    pub baseline: Option<(Model<f32>, TrainReport)>,
}

/// Pretrains both paths on their 60% sub-collections, composes each target
/// and trains the composites on the 40% sub-collections.
pub fn run_phase2(reg: &Regimen) -> Result<Phase2Artifacts> {
    let first = reg
        .composites
        .first()
        .ok_or_else(|| Error::config("composites", "at least one composite config is required"))?;
    let path_cfg = first.path_model();
    for c in &reg.composites {
        if c.path_model() != path_cfg {
            return Err(Error::config("composites", "all composites must share one path config"));
        }
    }
    let out = |name: &'static str| reg.out_dir.as_deref().map(|d| (d, name));
    let path1 = train_model(&path_cfg, &reg.train, Role::Path1, &reg.store, out("path1"))?;
    let path2 = train_model(&path_cfg, &reg.train, Role::Path2, &reg.store, out("path2"))?;
    let mut composites = Vec::new();
    for target in &reg.composites {
        let kind = target.connection;
        let plan = CompositionPlan::new(
            target.clone(),
            vec![
                PathSource {
                    name: "path1".into(),
                    config: path_cfg.clone(),
                },
                PathSource {
                    name: "path2".into(),
                    config: path_cfg.clone(),
                },
            ],
        );
        let mut rng = RngState::derived(reg.train.seed, &format!("compose:{}", kind.as_str()));
        let model = compose(&plan, &[&path1.0, &path2.0], &mut rng)?;
        let name: &'static str = match kind {
            ConnectionKind::ShareLinear => "composite_share_linear",
            ConnectionKind::GumbelV1 => "composite_gumbel_v1",
            ConnectionKind::GumbelV2 => "composite_gumbel_v2",
            ConnectionKind::None => "composite",
        };
        if let Some((dir, _)) = out(name) {
            Checkpoint::of_model(model.clone()).save(&dir.join(format!("{name}-composed.ckpt")))?;
        }
        let (m, r) = train_built(model, &reg.train, Role::Composite, &reg.store, out(name))?;
        composites.push((kind, m, r));
    }
    let baseline = match &reg.baseline {
        Some(c) => Some(train_model(c, &reg.train, Role::Baseline, &reg.store, out("baseline"))?),
        None => None,
    };
    Ok(Phase2Artifacts {
        path1,
        path2,
        composites,
        baseline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 1.0), 1.0);
        assert!(cosine_lr(100, 100, 1.0).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 1.0) - 0.5).abs() < 1e-15);
    }

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.push(
            "w",
            Tensor::scalar(v),
            crate::model::Provenance::Fresh { init: "test".into() },
        )
        .unwrap();
        p
    }

    #[test]
    fn zero_gradient_cases() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = scalar_store(0.7);
        let mut s = AdamState::new(&p);
        adamw_step(&mut p, &[vec![0.0]], &mut s, 1e-2, &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        adamw_step(&mut p, &[vec![0.0]], &mut s, 1e-2, &cfg).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.7 * (1.0 - 1e-3)).abs() < 1e-15);
    }

    #[test]
    fn single_step_matches_closed_form() {
        let cfg = TrainConfig::default();
        let mut p = scalar_store(0.5);
        let mut s = AdamState::new(&p);
        adamw_step(&mut p, &[vec![1.0]], &mut s, 1e-3, &cfg).unwrap();
        // m̂ = v̂ = 1 after bias correction.
        let expect = 0.5 * (1.0 - 1e-3 * 0.1) - 1e-3 * 1.0 / (1.0 + 1e-5);
        assert!((p.get("w").unwrap().data()[0] - expect).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn nan_gradient_aborts_without_change() {
        let cfg = TrainConfig::default();
        let mut p = scalar_store(0.5);
        let mut s = AdamState::new(&p);
        assert!(matches!(
            adamw_step(&mut p, &[vec![f64::NAN]], &mut s, 1e-3, &cfg),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(p.get("w").unwrap().data()[0], 0.5);
        assert_eq!(s.step, 0);
    }
}
