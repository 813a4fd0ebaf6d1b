//! Acceptance run: every criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use parapath::analysis::{analyze, slot_name, utilization, AnalysisReport};
use parapath::checkpoint::Checkpoint;
use parapath::composer::{compose, CompositionPlan, PathSource};
use parapath::config::{presets, ConnectionKind, TrainConfig};
use parapath::data::synth::{desk_corpora, desk_prompts, desk_store};
use parapath::data::{build_stream, ChunkStore, Domain, Role, SubCollection, ToyTokenizer};
use parapath::losses::{cross_entropy, entropy_loss, load_balance_loss, total_loss, LossConfig};
use parapath::model::{param_report, Model, Provenance};
use parapath::parallel::{
    gumbel_softmax, gumbel_v1_forward, gumbel_v2_forward, ForwardCtx, RoutingMode,
};
use parapath::trainer::{run_phase2, Phase2Artifacts, Regimen, StepLog, TrainReport, Trainer};
use parapath::{Graph, RngState, SeqLayout, Tensor};

type Outcome = Result<String, String>;

const DESK_TOKENS: usize = 100_000;
const SEQ_LEN: usize = 256;
const SEED: u64 = 42;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

fn criterion_counts() -> Outcome {
    let count = |c: parapath::config::ModelConfig| param_report(&c).total as f64;
    let base256 = count(presets::base_256());
    let base192 = count(presets::base_192());
    let path = count(presets::path());
    let mut parts = vec![
        format!("base_256 {:.2}M", base256 / 1e6),
        format!("base_192 {:.2}M", base192 / 1e6),
        format!("path {:.2}M", path / 1e6),
    ];
    ensure(within(base256, 32e6, 0.1), || format!("base_256 {base256} not within 10% of 32M"))?;
    ensure(within(base192, 22.5e6, 0.1), || format!("base_192 {base192} not within 10% of 22.5M"))?;
    ensure(within(path, 13.5e6, 0.1), || format!("path {path} not within 10% of 13.5M"))?;
    for kind in [ConnectionKind::ShareLinear, ConnectionKind::GumbelV1, ConnectionKind::GumbelV2] {
        let p = count(presets::parallel(kind));
        parts.push(format!("{} {:.2}M", kind.as_str(), p / 1e6));
        ensure(within(p, 28.5e6, 0.1), || format!("{} {p} not within 10% of 28.5M", kind.as_str()))?;
        ensure(p < base256, || format!("{} {p} is not below base_256 {base256}", kind.as_str()))?;
    }
    Ok(parts.join(", "))
}

fn criterion_gradients() -> Outcome {
    let mut worst_prim: f64 = 0.0;
    let mut checked = 0;
    for &p in common::PRIMS {
        for seed in 0..5 {
            let r = common::check_prim(p, seed).map_err(|e| format!("{p:?} seed {seed}: {e}"))?;
            ensure(r.passes(common::GRAD_TOL), || {
                format!("{p:?} seed {seed}: rel err {:.2e} at {:?}", r.max_rel_err, r.worst)
            })?;
            worst_prim = worst_prim.max(r.max_rel_err);
            checked += r.checked;
        }
    }
    let mut worst_model: f64 = 0.0;
    for kind in [ConnectionKind::None, ConnectionKind::ShareLinear, ConnectionKind::GumbelV1, ConnectionKind::GumbelV2] {
        for seed in 0..5 {
            let r = common::check_model::<f32>(kind, seed).map_err(|e| format!("{kind:?} seed {seed}: {e}"))?;
            ensure(r.passes(common::GRAD_TOL), || {
                format!("{kind:?} seed {seed}: rel err {:.2e} at {:?}", r.max_rel_err, r.worst)
            })?;
            worst_model = worst_model.max(r.max_rel_err);
            checked += r.checked;
        }
    }
    Ok(format!(
        "{} primitives and 4 model variants x 5 seeds, {checked} elements; worst primitive {worst_prim:.2e}, worst model {worst_model:.2e}",
        common::PRIMS.len()
    ))
}

fn criterion_routing() -> Outcome {
    let mut rng = RngState::new(7);
    for draw in 0..10_000 {
        let slots = 2 + rng.below(4);
        let rows = 1 + rng.below(3);
        let scale = [0.1, 1.0, 10.0, 50.0][rng.below(4)];
        let logits = rng.uniform_tensor::<f32>(&[rows, slots], -scale, scale);
        let noise = rng.gumbel_noise::<f32>(&[rows, slots]);
        let tau = 0.01 + rng.uniform() * 10.0;
        let mut g = Graph::<f32>::new();
        let l = g.constant(logits);
        let rw = gumbel_softmax(&mut g, l, tau, draw % 2 == 0, Some(&noise)).map_err(|e| e.to_string())?;
        for v in [rw.pi, rw.mix] {
            for r in 0..rows {
                let row = g.value(v).row(r);
                let sum: f32 = row.iter().sum();
                ensure(row.iter().all(|&p| p >= 0.0) && (sum - 1.0).abs() < 1e-5, || {
                    format!("draw {draw}: row {row:?} is off the simplex")
                })?;
            }
        }
    }

    let (k, d, n) = (2, 6, 5);
    let mut worst: f64 = 0.0;
    for (variant, seed) in [("v1", 1u64), ("v2", 2)] {
        let mut rng = RngState::new(seed);
        for slot in 0..=k {
            let mut g = Graph::<f64>::new();
            let outs: Vec<_> = (0..k).map(|_| g.constant(rng.normal_tensor(&[n, d], 1.0))).collect();
            let combine = g.constant(rng.normal_tensor(&[k * d, d], 0.5));
            let router_shape = if variant == "v1" { [d, k + 1] } else { [k * d, k + 1] };
            let router = g.constant(rng.normal_tensor(&router_shape, 0.5));
            let mut r2 = RngState::new(0);
            let mut ctx = ForwardCtx {
                routing: RoutingMode::Forced(slot),
                tau: 1.0,
                hard: false,
                dropout_path: 0.0,
                rng: &mut r2,
            };
            let (y, xc, _) = if variant == "v1" {
                gumbel_v1_forward(&mut g, &outs, combine, router, &mut ctx)
            } else {
                gumbel_v2_forward(&mut g, &outs, router, combine, &mut ctx)
            }
            .map_err(|e| e.to_string())?;
            let expect = if slot < k { outs[slot] } else { xc };
            let diff = g.value(y).max_abs_diff(g.value(expect)).unwrap_or(f64::INFINITY);
            ensure(diff < 1e-6, || format!("{variant} forced slot {slot}: diff {diff:.2e}"))?;
            worst = worst.max(diff);
        }
    }

    let mut rng = RngState::new(11);
    for _ in 0..200 {
        let logits = rng.uniform_tensor::<f64>(&[1, 3], -3.0, 3.0);
        let noise = rng.gumbel_noise::<f64>(&[1, 3]);
        let mut prev_max = 0.0;
        let mut first = None;
        for tau in [4.0, 2.0, 1.0, 0.5, 0.25, 0.1, 0.05] {
            let mut g = Graph::<f64>::new();
            let l = g.constant(logits.clone());
            let rw = gumbel_softmax(&mut g, l, tau, false, Some(&noise)).map_err(|e| e.to_string())?;
            let sel = rw.selected[0];
            let max = g.value(rw.pi).data().iter().cloned().fold(0.0, f64::max);
            ensure(*first.get_or_insert(sel) == sel, || "argmax changed under annealing".into())?;
            ensure(max >= prev_max - 1e-12, || format!("max pi fell from {prev_max} to {max}"))?;
            prev_max = max;
        }
    }
    Ok(format!(
        "10^4 draws on the simplex; forced one-hot worst diff {worst:.1e}; annealing argmax-stable over 200 draws"
    ))
}

fn criterion_losses() -> Outcome {
    let mut g = Graph::<f64>::new();
    let u = g.constant(Tensor::full(&[4, 3], 1.0 / 3.0));
    let e = entropy_loss(&mut g, u).map_err(|e| e.to_string())?;
    let ev = g.value(e).data()[0];
    ensure((ev - 3f64.ln()).abs() < 1e-6, || format!("entropy(uniform 3) = {ev}"))?;

    let mut rng = RngState::new(3);
    for b in 0..1000 {
        let rows = 1 + rng.below(8);
        let slots = 2 + rng.below(3);
        let scale = [0.5, 3.0, 20.0][rng.below(3)];
        let mut g = Graph::<f64>::new();
        let x = g.constant(rng.uniform_tensor(&[rows, slots], -scale, scale));
        let pi = g.softmax(x, 1).map_err(|e| e.to_string())?;
        let e = entropy_loss(&mut g, pi).map_err(|e| e.to_string())?;
        let l = load_balance_loss(&mut g, pi).map_err(|e| e.to_string())?;
        let (e, l) = (g.value(e).data()[0], g.value(l).data()[0]);
        let hi = (slots as f64).ln() + 1e-9;
        ensure((-1e-12..=hi).contains(&e) && (-1e-12..=hi).contains(&l), || {
            format!("batch {b}: entropy {e} load {l} outside [0, ln {slots}]")
        })?;
        ensure(l >= e - 1e-9, || format!("batch {b}: load {l} < entropy {e}"))?;
    }

    let cfg = LossConfig::from(&TrainConfig::default());
    ensure(cfg.lambda_entropy == 0.01 && cfg.lambda_load == 0.01, || "default lambdas are not 0.01".into())?;
    let mut g = Graph::<f64>::new();
    let logits = g.constant(rng.normal_tensor(&[6, 7], 1.0));
    let ce = cross_entropy(&mut g, logits, &[0, 1, 2, 3, 4, 5]).map_err(|e| e.to_string())?;
    let mut pis = Vec::new();
    for _ in 0..3 {
        let x = g.constant(rng.normal_tensor(&[6, 3], 1.0));
        pis.push(g.softmax(x, 1).map_err(|e| e.to_string())?);
    }
    let (total, br) = total_loss(&mut g, ce, &pis, &cfg).map_err(|e| e.to_string())?;
    let mut ent = 0.0;
    let mut load = 0.0;
    for &p in &pis {
        let rows: Vec<Vec<f64>> = (0..6).map(|r| g.value(p).row(r).to_vec()).collect();
        ent += rows.iter().map(|r| -r.iter().map(|q| q * q.ln()).sum::<f64>()).sum::<f64>() / 6.0;
        let mean: Vec<f64> = (0..3).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 6.0).collect();
        load += -mean.iter().map(|q| q * q.ln()).sum::<f64>();
    }
    let (ent, load) = (ent / 3.0, load / 3.0);
    let expect = g.value(ce).data()[0] + 0.01 * ent + 0.01 * load;
    let got = g.value(total).data()[0];
    ensure((got - expect).abs() < 1e-12 && (br.total - expect).abs() < 1e-12, || {
        format!("total {got} vs hand-assembled {expect}")
    })?;
    Ok(format!("entropy(uniform 3) = {ev:.9}; 10^3 batches bounded and Jensen-ordered; total loss matches CE + 0.01 H + 0.01 L"))
}

fn trained_paths(dir: &Path) -> Result<(Model<f32>, Model<f32>), String> {
    let load = |n: &str| Checkpoint::load(&dir.join(format!("{n}.ckpt"))).map(|c| c.model).map_err(|e| e.to_string());
    Ok((load("path1")?, load("path2")?))
}

fn criterion_composer(dir: &Path) -> Outcome {
    let (p1, p2) = trained_paths(dir)?;
    let vocab = p1.config.vocab_size;
    let mut checked = 0;
    for kind in [ConnectionKind::ShareLinear, ConnectionKind::GumbelV1, ConnectionKind::GumbelV2] {
        let target = presets::desk_parallel(kind).with_vocab(vocab);
        let plan = CompositionPlan::new(
            target,
            vec![
                PathSource { name: "path1".into(), config: p1.config.clone() },
                PathSource { name: "path2".into(), config: p2.config.clone() },
            ],
        );
        let m = compose(&plan, &[&p1, &p2], &mut RngState::new(5)).map_err(|e| e.to_string())?;
        let srcs = [&p1, &p2];
        for (name, p) in m.params.iter() {
            if let Provenance::Reused { path, source } = &p.provenance {
                let s = srcs[*path].params.get(source).ok_or_else(|| format!("{name}: source {source} missing"))?;
                ensure(p.tensor.same_values(s), || format!("{name} differs from path{} {source}", path + 1))?;
                checked += 1;
            }
        }
        let (emb, head) = (m.params.get("embedding").unwrap(), m.params.get("lm_head").unwrap());
        let d = p1.config.d_model;
        for t in 0..vocab {
            let row = emb.row(t);
            ensure(row[..d] == *p1.params.get("embedding").unwrap().row(t) && row[d..] == *p2.params.get("embedding").unwrap().row(t), || {
                format!("embedding row {t} is not [E1; E2]")
            })?;
        }
        for r in 0..2 * d {
            let (src, rr) = if r < d { (&p1, r) } else { (&p2, r - d) };
            ensure(head.row(r) == src.params.get("lm_head").unwrap().row(rr), || format!("lm_head row {r}"))?;
        }
    }

    let target = presets::desk_parallel(ConnectionKind::GumbelV1).with_vocab(vocab);
    let plan = CompositionPlan::new(
        target,
        vec![
            PathSource { name: "path1".into(), config: p1.config.clone() },
            PathSource { name: "path2".into(), config: p2.config.clone() },
        ],
    );
    let mut m = compose(&plan, &[&p1, &p2], &mut RngState::new(6)).map_err(|e| e.to_string())?;
    let dp = m.config.d_path;
    let names: Vec<String> = m.params.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let outer = name.starts_with("pre.") || name.starts_with("post.");
        let id = m.params.id(name).unwrap();
        if outer && (name.ends_with("attn.wo") || name.ends_with("ffn.w_down")) {
            m.params.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        if name == "down_proj" {
            let t = m.params.tensor_mut(id);
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            for i in 0..dp {
                t.data_mut()[i * dp + i] = 1.0;
            }
        }
    }
    let tokens: Vec<u32> = (0..24).map(|i| ((i * 7 + 3) % vocab) as u32).collect();
    let layout = SeqLayout::single(tokens.len());
    let hidden = |model: &Model<f32>, routing: RoutingMode| -> Result<Tensor<f32>, String> {
        let mut rng = RngState::new(0);
        let mut ctx = ForwardCtx { routing, tau: 1.0, hard: false, dropout_path: 0.0, rng: &mut rng };
        let mut g = Graph::new();
        let vars = model.params.bind(&mut g);
        let out = model.forward(&mut g, &vars, &tokens, layout, &mut ctx).map_err(|e| e.to_string())?;
        Ok(g.value(out.hidden).clone())
    };
    let hc = hidden(&m, RoutingMode::Forced(0))?;
    let hp = hidden(&p1, RoutingMode::Deterministic)?;
    let mut diff: f64 = 0.0;
    for r in 0..tokens.len() {
        for (a, b) in hc.row(r)[..dp].iter().zip(hp.row(r)) {
            diff = diff.max((a - b).abs() as f64);
        }
    }
    ensure(diff < 1e-5, || format!("pass-through oracle diff {diff:.2e}"))?;
    Ok(format!("{checked} reused tensors bit-equal; embedding/lm_head exact concatenations; pass-through oracle diff {diff:.1e}"))
}

fn criterion_data(tok: &ToyTokenizer, store: &ChunkStore, art: &Phase2Artifacts, batch: usize) -> Outcome {
    let corpora = desk_corpora(DESK_TOKENS, SEED);
    let streams: Vec<Vec<u32>> = corpora.iter().map(|c| build_stream(c, tok).unwrap()).collect();
    ensure((0..store.len()).all(|i| store.chunk(i).len() == SEQ_LEN), || "a chunk is not 256 tokens".into())?;
    for (ci, c) in corpora.iter().enumerate() {
        let mut offsets = Vec::new();
        for epoch in 1..=2u8 {
            let idx = store.indices(|t| t.corpus == c.domain && t.epoch == epoch);
            let mut starts: Vec<usize> = idx.iter().map(|&i| store.tag(i).start as usize).collect();
            starts.sort_unstable();
            ensure(starts.windows(2).all(|w| w[1] >= w[0] + SEQ_LEN), || {
                format!("{} epoch {epoch}: overlapping chunks", c.domain)
            })?;
            offsets.push(starts[0] % SEQ_LEN);
            for &i in &idx {
                let s = store.tag(i).start as usize;
                ensure(store.chunk(i) == &streams[ci][s..s + SEQ_LEN], || {
                    format!("chunk {i} is not a slice of the {} stream", c.domain)
                })?;
            }
            let sixty: BTreeSet<usize> = idx.iter().copied().filter(|&i| store.tag(i).sub == SubCollection::Sixty).collect();
            let forty: BTreeSet<usize> = idx.iter().copied().filter(|&i| store.tag(i).sub == SubCollection::Forty).collect();
            ensure(sixty.is_disjoint(&forty) && sixty.len() + forty.len() == idx.len(), || "60/40 not a partition".into())?;
            let expect = (0.6 * idx.len() as f64).round() as usize;
            ensure(sixty.len() == expect, || format!("{} epoch {epoch}: sub60 has {} of {}", c.domain, sixty.len(), idx.len()))?;
        }
        ensure(offsets[0] != offsets[1], || format!("{}: epochs share an offset", c.domain))?;
    }

    let check_role = |role: Role, r: &TrainReport| -> Result<(), String> {
        for (e, consumed) in r.consumed.iter().enumerate() {
            let epoch = e as u8 + 1;
            let set: BTreeSet<usize> = consumed.iter().copied().collect();
            ensure(set.len() == consumed.len(), || format!("{role:?}: duplicate chunk in epoch {epoch}"))?;
            let eligible: BTreeSet<usize> = store.indices(|t| t.epoch == epoch && role.accepts(t)).into_iter().collect();
            ensure(set.is_subset(&eligible), || format!("{role:?}: consumed a chunk outside its role"))?;
            ensure(eligible.len() - set.len() < batch, || {
                format!("{role:?}: {} eligible chunks unused beyond the partial batch", eligible.len() - set.len())
            })?;
        }
        Ok(())
    };
    check_role(Role::Path1, &art.path1.1)?;
    check_role(Role::Path2, &art.path2.1)?;
    for (_, _, r) in &art.composites {
        check_role(Role::Composite, r)?;
        let only40 = r.consumed.iter().flatten().all(|&i| store.tag(i).sub == SubCollection::Forty);
        ensure(only40, || "composite consumed a sub60 chunk".into())?;
    }
    let (_, base) = art.baseline.as_ref().ok_or("no baseline")?;
    check_role(Role::Baseline, base)?;
    let all = store.len();
    let used: usize = base.consumed.iter().map(Vec::len).sum();
    Ok(format!(
        "{all} chunks of 256; epochs span-disjoint with distinct offsets; 60/40 partitions exact; composites sub40 only; baseline consumed {used}/{all}"
    ))
}

fn losses(r: &TrainReport) -> Vec<(usize, f64, f64, f64, f64, f64)> {
    r.steps.iter().map(StepLog::losses).collect()
}

fn summary(art: &Phase2Artifacts) -> Vec<(String, &TrainReport)> {
    let mut v = vec![("path1".to_string(), &art.path1.1), ("path2".to_string(), &art.path2.1)];
    for (k, _, r) in &art.composites {
        v.push((k.as_str().to_string(), r));
    }
    if let Some((_, r)) = &art.baseline {
        v.push(("baseline".to_string(), r));
    }
    v
}

fn criterion_smoke(a: &Phase2Artifacts, b: &Phase2Artifacts, secs: f64) -> Outcome {
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for ((name, ra), (_, rb)) in summary(a).into_iter().zip(summary(b)) {
        let (i, f) = (ra.initial_ce().unwrap_or(f64::NAN), ra.final_ce().unwrap_or(f64::NAN));
        parts.push(format!("{name} {i:.2}->{f:.2}"));
        if !(f.is_finite() && f < 0.7 * i) {
            failures.push(format!("{name}: final CE {f:.3} not below 0.7 x {i:.3}"));
        }
        if ra.steps.iter().any(|s| !s.total.is_finite()) {
            failures.push(format!("{name}: non-finite loss"));
        }
        if losses(ra) != losses(rb) {
            failures.push(format!("{name}: rerun trajectory differs"));
        }
    }
    if secs > 900.0 {
        failures.push(format!("pipeline took {secs:.0}s"));
    }
    if failures.is_empty() {
        Ok(format!("{}; rerun bit-exact; {secs:.0}s per pipeline", parts.join(", ")))
    } else {
        Err(failures.join("; "))
    }
}

fn analysis_reports(dir: &Path, tok: &ToyTokenizer) -> Result<Vec<AnalysisReport>, String> {
    let prompts = desk_prompts();
    ["composite_share_linear", "composite_gumbel_v1", "composite_gumbel_v2"]
        .iter()
        .map(|n| {
            let m = Checkpoint::load(&dir.join(format!("{n}.ckpt"))).map_err(|e| e.to_string())?.model;
            analyze(&m, tok, &prompts).map_err(|e| e.to_string())
        })
        .collect()
}

fn criterion_analysis(reports: &[AnalysisReport]) -> Outcome {
    let mut parts = Vec::new();
    for rep in reports {
        let u = &rep.utilization;
        let sum = u.path_shares.iter().sum::<f64>() + u.combined_share;
        ensure((sum - 100.0).abs() <= 0.1, || format!("{}: shares sum to {sum}", rep.connection.as_str()))?;
        let entries = if rep.connection == ConnectionKind::ShareLinear { 2 } else { 3 };
        ensure(rep.rows.iter().all(|r| r.selections.len() == entries), || {
            format!("{}: traces do not have {entries} entries", rep.connection.as_str())
        })?;
        let (mut cells, mut correct) = (0usize, 0usize);
        for line in rep.to_jsonl().lines() {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
            let domain = Domain::parse(v["domain"].as_str().unwrap()).map_err(|e| e.to_string())?;
            let expected = slot_name(domain.path_index(), rep.k);
            cells += 1;
            if v["selection"].as_str() == Some(expected.as_str()) {
                correct += 1;
            }
        }
        let recount = 100.0 * correct as f64 / cells as f64;
        ensure(cells == u.cells && correct == u.correct && recount == u.accuracy, || {
            format!("{}: accuracy {} vs recount {recount}", rep.connection.as_str(), u.accuracy)
        })?;
        let sel: Vec<Vec<usize>> = rep.rows.iter().map(|r| r.selections.clone()).collect();
        let dom: Vec<Domain> = rep.rows.iter().map(|r| r.domain).collect();
        ensure(utilization(&sel, &dom, rep.k).map_err(|e| e.to_string())? == *u, || "utilization not reproducible".into())?;
        ensure(rep.to_text().contains("Accuracy"), || "table footer missing".into())?;
        parts.push(format!("{} acc {:.1}% ({entries} entries)", rep.connection.as_str(), u.accuracy));
    }
    Ok(parts.join(", "))
}

fn criterion_determinism(
    dir_a: &Path,
    dir_b: &Path,
    store: &ChunkStore,
    train: &TrainConfig,
    path1: &(Model<f32>, TrainReport),
    reports: (&[AnalysisReport], &[AnalysisReport]),
) -> Outcome {
    let mut files = 0;
    for entry in std::fs::read_dir(dir_a).map_err(|e| e.to_string())? {
        let p = entry.map_err(|e| e.to_string())?.path();
        if p.extension().and_then(|e| e.to_str()) != Some("ckpt") {
            continue;
        }
        let bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
        let again = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?.to_bytes();
        ensure(again == bytes, || format!("{} does not round-trip", p.display()))?;
        let other = std::fs::read(dir_b.join(p.file_name().unwrap())).map_err(|e| e.to_string())?;
        ensure(other == bytes, || format!("{} differs between reruns", p.display()))?;
        files += 1;
    }
    for (ra, rb) in reports.0.iter().zip(reports.1) {
        ensure(ra.to_text() == rb.to_text() && ra.to_jsonl() == rb.to_jsonl(), || "analysis reports differ between reruns".into())?;
    }

    let cfg = presets::desk_parallel(ConnectionKind::GumbelV1).with_vocab(path1.0.config.vocab_size).path_model();
    let mut init = RngState::derived(train.seed, &format!("init:path1:{}", cfg.connection.as_str()));
    let model = Model::build(&cfg, &mut init).map_err(|e| e.to_string())?;
    let mut t = Trainer::new(model, train.clone(), Role::Path1).map_err(|e| e.to_string())?;
    let pause = path1.1.steps.len() / 2 + 1;
    let first = t.run(store, Some(pause), None, None).map_err(|e| e.to_string())?;
    let bytes = t.checkpoint().to_bytes();
    drop(t);
    let ck = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let mut t = Trainer::resume(ck).map_err(|e| e.to_string())?;
    let second = t.run(store, None, None, None).map_err(|e| e.to_string())?;
    let mut joined = losses(&first);
    joined.extend(losses(&second));
    ensure(joined == losses(&path1.1), || "resumed loss trajectory differs".into())?;
    let same = t.model.params.iter().zip(path1.0.params.iter()).all(|((_, a), (_, b))| a.tensor.same_values(&b.tensor));
    ensure(same, || "resumed parameters differ from uninterrupted training".into())?;
    Ok(format!(
        "{files} checkpoints round-trip and match across reruns; analysis reports identical; resume at step {pause} bit-exact"
    ))
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let report = |n: u8, name: &'static str, o: Outcome, results: &mut Vec<(u8, &str, Outcome)>| {
        match &o {
            Ok(m) => println!("criterion {n} PASS  {name}: {m}"),
            Err(m) => println!("criterion {n} FAIL  {name}: {m}"),
        }
        results.push((n, name, o));
    };
    report(1, "parameter counts", criterion_counts(), &mut results);
    report(2, "gradient suite", criterion_gradients(), &mut results);
    report(3, "routing invariants", criterion_routing(), &mut results);
    report(4, "loss oracles", criterion_losses(), &mut results);

    let (tok, store, _) = desk_store(DESK_TOKENS, SEQ_LEN, SEED).expect("desk corpus");
    let vocab = tok.vocab_size();
    let train = TrainConfig { seed: SEED, ..presets::desk_train() };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut runs = Vec::new();
    let mut secs = 0.0f64;
    for dir in &dirs {
        let t0 = Instant::now();
        let reg = Regimen {
            store: store.clone(),
            composites: [ConnectionKind::ShareLinear, ConnectionKind::GumbelV1, ConnectionKind::GumbelV2]
                .map(|k| presets::desk_parallel(k).with_vocab(vocab))
                .to_vec(),
            baseline: Some(presets::desk_base().with_vocab(vocab)),
            train: train.clone(),
            out_dir: Some(dir.path().to_path_buf()),
        };
        runs.push(run_phase2(&reg));
        secs = secs.max(t0.elapsed().as_secs_f64());
    }
    let (a, b) = match (runs.remove(0), runs.remove(0)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => {
            for (n, name) in [(5, "composer equivalence"), (6, "data protocol"), (7, "phase-2 smoke test"), (8, "analysis pipeline"), (9, "determinism and persistence")] {
                report(n, name, Err(format!("pipeline failed: {e}")), &mut results);
            }
            std::process::exit(1);
        }
    };

    report(5, "composer equivalence", criterion_composer(dirs[0].path()), &mut results);
    report(6, "data protocol", criterion_data(&tok, &store, &a, train.batch_size), &mut results);
    report(7, "phase-2 smoke test", criterion_smoke(&a, &b, secs), &mut results);
    let ra = analysis_reports(dirs[0].path(), &tok);
    let rb = analysis_reports(dirs[1].path(), &tok);
    match (&ra, &rb) {
        (Ok(ra), Ok(rb)) => {
            report(8, "analysis pipeline", criterion_analysis(ra), &mut results);
            report(
                9,
                "determinism and persistence",
                criterion_determinism(dirs[0].path(), dirs[1].path(), &store, &train, &a.path1, (ra, rb)),
                &mut results,
            );
        }
        (Err(e), _) | (_, Err(e)) => {
            report(8, "analysis pipeline", Err(e.clone()), &mut results);
            report(9, "determinism and persistence", Err(e.clone()), &mut results);
        }
    }

    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!(
        "acceptance: {} of {} criteria passed in {:.0}s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
