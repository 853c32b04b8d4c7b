//! File-based stage orchestration.
//!
//! Each stage reads its inputs from files written by earlier stages and
//! writes its artifacts (plus the resolved [`RunConfig`]) under one output
//! directory, so any stage can be rerun independently and any artifact can
//! be reproduced from (config, seed):
//!
//! | stage        | reads                         | writes |
//! |--------------|-------------------------------|--------|
//! | gen-demos    | —                             | `demos-<script>.jsonl`, `demos-<script>.manifest.json` |
//! | segment      | demos                         | `segments-<script>.jsonl`, `distances-<script>.csv` |
//! | calibrate-c  | demos + segments              | `c-last-<script>.json` |
//! | train-favae  | demos + segments              | `favae-<script>.ckpt`, `favae-<script>.csv` |
//! | traverse     | favae ckpt                    | `traversal.jsonl` |
//! | train-policy | favae ckpt (famarl agent)     | `policy-<agent>.ckpt`, `curve-<agent>.csv` |
//! | evaluate     | policy ckpt (+ favae ckpt)    | `eval-<agent>.json` |

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::env::{AgentState, PrimitiveAction, WorldConfig};
use crate::favae::{
    self, choose_input_len, pad_segment, split_overlong, FavaeModel, LadderConfig, PaddedSegment,
};
use crate::policy::{self, EvalReport, PolicyKind, PolicyModel, UpdateLog};
use crate::scripts::{generate_corpus, ScriptKind};
use crate::segmentation::{segment_corpus, MacroSegment};
use crate::trajectory::{read_jsonl, write_jsonl, EpisodeMeta};
use crate::{Error, Result};

/// Fig. 6-style default traversal values.
pub const DEFAULT_TRAVERSAL_VALUES: [f64; 4] = [-3.0, -1.0, 1.0, 3.0];

pub fn demos_jsonl(out: &Path, kind: ScriptKind) -> PathBuf {
    out.join(format!("demos-{}.jsonl", kind.name()))
}

pub fn demos_manifest(out: &Path, kind: ScriptKind) -> PathBuf {
    out.join(format!("demos-{}.manifest.json", kind.name()))
}

pub fn segments_jsonl(out: &Path, kind: ScriptKind) -> PathBuf {
    out.join(format!("segments-{}.jsonl", kind.name()))
}

pub fn distances_csv(out: &Path, kind: ScriptKind) -> PathBuf {
    out.join(format!("distances-{}.csv", kind.name()))
}

pub fn favae_ckpt(out: &Path, kind: ScriptKind) -> PathBuf {
    out.join(format!("favae-{}.ckpt", kind.name()))
}

pub fn favae_csv(out: &Path, kind: ScriptKind) -> PathBuf {
    out.join(format!("favae-{}.csv", kind.name()))
}

pub fn c_last_json(out: &Path, kind: ScriptKind) -> PathBuf {
    out.join(format!("c-last-{}.json", kind.name()))
}

pub fn policy_ckpt(out: &Path, agent: &str) -> PathBuf {
    out.join(format!("policy-{agent}.ckpt"))
}

pub fn curve_csv(out: &Path, agent: &str) -> PathBuf {
    out.join(format!("curve-{agent}.csv"))
}

pub fn eval_json(out: &Path, agent: &str) -> PathBuf {
    out.join(format!("eval-{agent}.json"))
}

pub fn traversal_jsonl(out: &Path) -> PathBuf {
    out.join("traversal.jsonl")
}

fn write_resolved(out: &Path, cfg: &RunConfig, stage: &str) -> Result<()> {
    cfg.save(&out.join(format!("config.{stage}.json")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoManifest {
    pub script: String,
    pub count: usize,
    pub seed: u64,
    pub world: WorldConfig,
    pub episodes: Vec<EpisodeMeta>,
}

/// Per-script episode seed base, so different experts draw distinct worlds.
fn script_seed(cfg: &RunConfig, kind: ScriptKind) -> u64 {
    let idx = ScriptKind::ALL.iter().position(|k| *k == kind).unwrap() as u64;
    cfg.seed.wrapping_add(idx.wrapping_mul(100_000))
}

pub fn gen_demos(out: &Path, cfg: &RunConfig, kinds: &[ScriptKind]) -> Result<()> {
    cfg.validate()?;
    if kinds.is_empty() {
        return Err(Error::usage("gen-demos needs at least one script kind"));
    }
    fs::create_dir_all(out)?;
    for &kind in kinds {
        let seed = script_seed(cfg, kind);
        let corpus = generate_corpus(kind, &cfg.world, cfg.demos_per_script, seed)?;
        write_jsonl(&demos_jsonl(out, kind), &corpus.trajectories)?;
        let manifest = DemoManifest {
            script: kind.name().to_string(),
            count: corpus.count,
            seed,
            world: cfg.world,
            episodes: corpus
                .trajectories
                .iter()
                .enumerate()
                .map(|(id, t)| EpisodeMeta {
                    id,
                    map_size: t.map_size,
                    start: t.start,
                    goal: t.goal,
                    len: t.len(),
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(demos_manifest(out, kind), text)?;
    }
    write_resolved(out, cfg, "gen-demos")
}

fn read_demo_actions(out: &Path, kind: ScriptKind) -> Result<Vec<Vec<PrimitiveAction>>> {
    let manifest_path = demos_manifest(out, kind);
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        Error::usage(format!(
            "cannot read {} (run gen-demos first): {e}",
            manifest_path.display()
        ))
    })?;
    let manifest: DemoManifest = serde_json::from_str(&text)?;
    let trajectories = read_jsonl(&demos_jsonl(out, kind), &manifest.episodes)?;
    Ok(trajectories.iter().map(|t| t.actions()).collect())
}

/// One line of the segment manifest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentLine {
    pub episode: usize,
    pub start: usize,
    pub end: usize,
}

pub fn segment(out: &Path, cfg: &RunConfig, kind: ScriptKind) -> Result<usize> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let episodes = read_demo_actions(out, kind)?;
    let (segments, _, distances) = segment_corpus(&episodes, &cfg.window, cfg.seed)?;

    let mut manifest = fs::File::create(segments_jsonl(out, kind))?;
    let mut count = 0usize;
    for per_ep in &segments {
        for s in per_ep {
            let line = SegmentLine {
                episode: s.episode,
                start: s.start,
                end: s.end,
            };
            serde_json::to_writer(&mut manifest, &line)?;
            manifest.write_all(b"\n")?;
            count += 1;
        }
    }

    let mut csv = fs::File::create(distances_csv(out, kind))?;
    writeln!(csv, "episode,index,distance")?;
    for (ep, d) in distances.iter().enumerate() {
        for (i, v) in d.iter().enumerate() {
            writeln!(csv, "{ep},{i},{v}")?;
        }
    }
    write_resolved(out, cfg, &format!("segment-{}", kind.name()))?;
    Ok(count)
}

/// Rebuild the macro segments from the demo actions and the segment manifest.
pub fn load_segments(out: &Path, kind: ScriptKind) -> Result<Vec<MacroSegment>> {
    let episodes = read_demo_actions(out, kind)?;
    let path = segments_jsonl(out, kind);
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::usage(format!(
            "cannot read {} (run segment first): {e}",
            path.display()
        ))
    })?;
    let mut segments = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let l: SegmentLine = serde_json::from_str(line)?;
        let ep = episodes
            .get(l.episode)
            .ok_or_else(|| Error::config(format!("manifest episode {} out of range", l.episode)))?;
        if l.start >= l.end || l.end > ep.len() {
            return Err(Error::config(format!(
                "segment {}..{} invalid for episode {} of length {}",
                l.start,
                l.end,
                l.episode,
                ep.len()
            )));
        }
        segments.push(MacroSegment {
            actions: ep[l.start..l.end].to_vec(),
            episode: l.episode,
            start: l.start,
            end: l.end,
        });
    }
    if segments.is_empty() {
        return Err(Error::usage("segment manifest is empty"));
    }
    Ok(segments)
}

/// Fit segments into the model's input length: pick the length if unset,
/// split overlong segments, and pad everything.
pub fn prepare_padded(
    segments: &[MacroSegment],
    settings_input_len: usize,
) -> Result<(Vec<PaddedSegment>, usize)> {
    let input_len = if settings_input_len == 0 {
        let lengths: Vec<usize> = segments.iter().map(|s| s.len()).collect();
        choose_input_len(&lengths)
    } else {
        settings_input_len
    };
    let mut padded = Vec::new();
    for s in segments {
        for piece in split_overlong(s, input_len) {
            padded.push(pad_segment(&piece, input_len)?);
        }
    }
    Ok((padded, input_len))
}

pub fn calibrate_c(out: &Path, cfg: &RunConfig, kind: ScriptKind) -> Result<Vec<f64>> {
    cfg.validate()?;
    let segments = load_segments(out, kind)?;
    let (padded, input_len) = prepare_padded(&segments, cfg.favae.input_len)?;
    let ladder = cfg.favae.to_ladder(input_len);
    let c_last = favae::calibrate_capacity(&padded, &ladder, cfg.seed)?;
    let mut text = serde_json::to_string_pretty(&c_last)?;
    text.push('\n');
    fs::write(c_last_json(out, kind), text)?;
    let mut resolved = cfg.clone();
    resolved.favae.input_len = input_len;
    resolved.favae.c_last = c_last.clone();
    write_resolved(out, &resolved, &format!("calibrate-c-{}", kind.name()))?;
    Ok(c_last)
}

pub fn train_favae(out: &Path, cfg: &RunConfig, kind: ScriptKind) -> Result<LadderConfig> {
    cfg.validate()?;
    let segments = load_segments(out, kind)?;
    let (padded, input_len) = prepare_padded(&segments, cfg.favae.input_len)?;
    let mut ladder = cfg.favae.to_ladder(input_len);
    if ladder.c_last.is_empty() {
        ladder.c_last = favae::calibrate_capacity(&padded, &ladder, cfg.seed)?;
    }
    let mut model = favae::train_favae(&padded, &ladder, cfg.seed)?;
    model.reference = Some(padded[0].clone());
    model.save(&favae_ckpt(out, kind))?;

    let mut csv = fs::File::create(favae_csv(out, kind))?;
    writeln!(csv, "epoch,recon,kl_0,kl_1,kl_2,c_0,c_1,c_2")?;
    for log in &model.training_log {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            log.epoch,
            log.recon,
            log.kl[0],
            log.kl[1],
            log.kl[2],
            log.scheduled_c[0],
            log.scheduled_c[1],
            log.scheduled_c[2]
        )?;
    }
    let mut resolved = cfg.clone();
    resolved.favae.input_len = input_len;
    resolved.favae.c_last = ladder.c_last.clone();
    write_resolved(out, &resolved, &format!("train-favae-{}", kind.name()))?;
    Ok(ladder)
}

/// One traversal trajectory step, tagged with the swept latent coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraversalLine {
    pub ladder: usize,
    pub index: usize,
    pub value: f64,
    pub t: usize,
    pub x: f64,
    pub y: f64,
    pub ax: f64,
    pub ay: f64,
}

/// Integrate a decoded macro from a canonical rest state at the map center.
pub fn rollout_decoded(
    world: &WorldConfig,
    actions: &[PrimitiveAction],
) -> Result<Vec<(f64, f64)>> {
    let m = world.map_size;
    let mut state = AgentState {
        position: [0.5 * m, 0.5 * m],
        velocity: [0.0, 0.0],
        // Goal outside reach so the rollout never terminates early.
        goal: [0.0, 0.0],
        walls: Vec::new(),
        map_size: m,
        step_count: 0,
        finished: false,
    };
    let mut positions = Vec::with_capacity(actions.len());
    for a in actions {
        let step = crate::env::step(&state, a, world)?;
        positions.push((step.next_state.position[0], step.next_state.position[1]));
        if step.done {
            break;
        }
        state = step.next_state;
    }
    Ok(positions)
}

pub fn traverse(
    out: &Path,
    cfg: &RunConfig,
    model_path: &Path,
    ladder: usize,
    index: usize,
    values: &[f64],
) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::usage("traverse needs at least one value"));
    }
    fs::create_dir_all(out)?;
    let model = FavaeModel::load(model_path)?;
    let base = model
        .reference
        .clone()
        .ok_or_else(|| Error::usage("model checkpoint carries no reference segment"))?;
    let sequences = favae::latent_traversal(&model, &base, ladder, index, values)?;
    let mut f = fs::File::create(traversal_jsonl(out))?;
    for (v, actions) in values.iter().zip(&sequences) {
        let positions = rollout_decoded(&cfg.world, actions)?;
        for (t, (a, p)) in actions.iter().zip(&positions).enumerate() {
            let line = TraversalLine {
                ladder,
                index,
                value: *v,
                t,
                x: p.0,
                y: p.1,
                ax: a.ax(),
                ay: a.ay(),
            };
            serde_json::to_writer(&mut f, &line)?;
            f.write_all(b"\n")?;
        }
    }
    write_resolved(out, cfg, "traverse")?;
    Ok(sequences.len())
}

/// CLI-facing agent names mapped to policy kinds.
pub fn agent_kind(agent: &str, favae: Option<&FavaeModel>) -> Result<PolicyKind> {
    match agent {
        "famarl" => {
            let f = favae.ok_or_else(|| {
                Error::usage("--agent famarl requires --favae <checkpoint>")
            })?;
            Ok(PolicyKind::Latent {
                latent_dim: f.cfg.total_latent_dim(),
            })
        }
        "ppo" => Ok(PolicyKind::Primitive),
        // Small repetition set, as in FiGAR's continuous-control variant.
        "figar" => Ok(PolicyKind::Figar { max_repeat: 4 }),
        other => Err(Error::usage(format!(
            "unknown agent '{other}'; expected one of: famarl, ppo, figar"
        ))),
    }
}

pub fn write_curve(path: &Path, logs: &[UpdateLog]) -> Result<()> {
    let mut csv = fs::File::create(path)?;
    writeln!(
        csv,
        "update,cumulative_steps,mean_return,episodes,successes,mean_macro_len,entropy"
    )?;
    for l in logs {
        let ret = l
            .mean_return
            .map(|r| r.to_string())
            .unwrap_or_else(|| "nan".to_string());
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            l.update, l.cumulative_steps, ret, l.episodes, l.successes, l.mean_macro_len, l.entropy
        )?;
    }
    Ok(())
}

pub fn train_policy(
    out: &Path,
    cfg: &RunConfig,
    agent: &str,
    favae_path: Option<&Path>,
) -> Result<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let favae_model = favae_path.map(FavaeModel::load).transpose()?;
    let kind = agent_kind(agent, favae_model.as_ref())?;
    let (model, logs) =
        policy::train_policy(&cfg.world, kind, favae_model.as_ref(), &cfg.ppo, cfg.seed)?;
    let ckpt = policy_ckpt(out, agent);
    model.save(&ckpt)?;
    write_curve(&curve_csv(out, agent), &logs)?;
    write_resolved(out, cfg, &format!("train-policy-{agent}"))?;
    Ok(ckpt)
}

pub fn evaluate(
    out: &Path,
    cfg: &RunConfig,
    agent: &str,
    favae_path: Option<&Path>,
) -> Result<EvalReport> {
    cfg.validate()?;
    let model = PolicyModel::load(&policy_ckpt(out, agent))?;
    let favae_model = favae_path.map(FavaeModel::load).transpose()?;
    if matches!(model.kind, PolicyKind::Latent { .. }) && favae_model.is_none() {
        return Err(Error::usage(
            "evaluating a famarl policy requires --favae <checkpoint>",
        ));
    }
    let report = policy::evaluate(
        &cfg.world,
        &model,
        favae_model.as_ref(),
        cfg.eval_episodes,
        cfg.seed,
    )?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(eval_json(out, agent), text)?;
    write_resolved(out, cfg, &format!("evaluate-{agent}"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub checks: Vec<(String, bool)>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|(_, ok)| *ok)
    }
}

/// Fast invariant suite: environment determinism, gradient correctness,
/// segmentation tiling, decode length bounds, and reward replay.
pub fn check(cfg: &RunConfig) -> Result<CheckReport> {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut checks = Vec::new();

    // Environment determinism: two identically seeded rollouts agree bitwise.
    {
        let run = |seed: u64| -> Result<Vec<[f64; 2]>> {
            let mut w = cfg.world;
            w.seed = seed;
            let mut env = crate::env::ContinuousWorld::new(w)?;
            let mut s = env.reset();
            let mut trace = Vec::new();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..200 {
                let a = PrimitiveAction::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let step = env.step(&s, &a)?;
                trace.push(step.next_state.position);
                if step.done {
                    s = env.reset();
                } else {
                    s = step.next_state;
                }
            }
            Ok(trace)
        };
        checks.push(("env-determinism".to_string(), run(3)? == run(3)?));
    }

    // Gradient correctness on a small dense network.
    {
        let spec = crate::nn::NetworkSpec::new(
            vec![4],
            vec![
                crate::nn::Block::Dense { input: 4, output: 6 },
                crate::nn::Block::Tanh,
                crate::nn::Block::Dense { input: 6, output: 2 },
            ],
            5,
        )?;
        let params = spec.init_params();
        let x = crate::Tensor::from_vec(vec![0.3, -0.2, 0.8, 0.1]);
        let cache = crate::nn::forward_cached(&spec, &params, &x)?;
        // loss = sum(y^2)
        let gout = crate::Tensor::new(
            vec![2],
            cache.output().data().iter().map(|v| 2.0 * v).collect(),
        )?;
        let (grads, _) = crate::nn::backward(&spec, &params, &cache, &gout)?;
        let mut ok = true;
        let h = 1e-4;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let ti = rng.gen_range(0..grads.tensors.len());
            let ci = rng.gen_range(0..grads.tensors[ti].1.numel());
            let eval = |delta: f64| -> f64 {
                let mut p = params.clone();
                p.tensors[ti].1.data_mut()[ci] += delta;
                crate::nn::forward(&spec, &p, &x)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v * v)
                    .sum()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = grads.tensors[ti].1.data()[ci];
            if (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4) > 1e-3 {
                ok = false;
            }
        }
        checks.push(("gradient-check".to_string(), ok));
    }

    // Segmentation tiling on a synthetic corpus.
    {
        let (corpus, _) = crate::segmentation::synthetic_regime_corpus(5, 3, cfg.seed);
        let (segments, _, _) = segment_corpus(&corpus, &cfg.window, cfg.seed)?;
        let ok = segments.iter().zip(&corpus).all(|(segs, ep)| {
            let mut cursor = 0;
            for s in segs {
                if s.start != cursor {
                    return false;
                }
                cursor = s.end;
            }
            cursor == ep.len()
        });
        checks.push(("segmentation-tiling".to_string(), ok));
    }

    // Reward replay: logged macro reward sums replay exactly.
    {
        let model = PolicyModel::new(PolicyKind::Figar { max_repeat: 5 }, &cfg.ppo, cfg.seed)?;
        let transitions =
            policy::record_macro_transitions(&cfg.world, &model, None, 50, cfg.seed)?;
        let mut ok = true;
        for tr in &transitions {
            let mut s = tr.state.clone();
            let mut sum = 0.0;
            for a in &tr.actions {
                let step = crate::env::step(&s, a, &cfg.world)?;
                sum += step.reward;
                if step.done {
                    break;
                }
                s = step.next_state;
            }
            if sum != tr.r_tot {
                ok = false;
            }
        }
        checks.push(("reward-replay".to_string(), ok));
    }

    Ok(CheckReport { checks })
}
