//! Scripted expert policies for the Base task.
//!
//! Four variants. The non-pushed scripts phase their approach: first close the
//! horizontal error, then the vertical one. The pushed scripts keep a constant
//! vertical acceleration bias toward the goal side for the whole episode while
//! steering horizontally. A small seeded jitter is added to every action so the
//! corpus has diversity.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ContinuousWorld, Corner, PrimitiveAction, Task, WorldConfig};
use crate::trajectory::{StepRecord, Trajectory};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScriptKind {
    DownOnly,
    DownAndUp,
    PushedDownOnly,
    PushedDownAndUp,
}

impl ScriptKind {
    pub const ALL: [ScriptKind; 4] = [
        ScriptKind::DownOnly,
        ScriptKind::DownAndUp,
        ScriptKind::PushedDownOnly,
        ScriptKind::PushedDownAndUp,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "down-only" => Ok(ScriptKind::DownOnly),
            "down-and-up" => Ok(ScriptKind::DownAndUp),
            "pushed-down-only" => Ok(ScriptKind::PushedDownOnly),
            "pushed-down-and-up" => Ok(ScriptKind::PushedDownAndUp),
            other => Err(Error::usage(format!(
                "unknown script '{other}'; expected one of: down-only, down-and-up, pushed-down-only, pushed-down-and-up"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScriptKind::DownOnly => "down-only",
            ScriptKind::DownAndUp => "down-and-up",
            ScriptKind::PushedDownOnly => "pushed-down-only",
            ScriptKind::PushedDownAndUp => "pushed-down-and-up",
        }
    }

    fn pushed(&self) -> bool {
        matches!(self, ScriptKind::PushedDownOnly | ScriptKind::PushedDownAndUp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoCorpus {
    pub trajectories: Vec<Trajectory>,
    pub script: ScriptKind,
    pub count: usize,
}

/// Constant vertical acceleration magnitude for the pushed variants.
const PUSH_BIAS: f64 = 0.5;
/// Uniform action jitter amplitude.
const JITTER: f64 = 0.05;
/// Horizontal error (fraction of map) below which the non-pushed scripts
/// switch from the horizontal phase to the vertical phase.
const PHASE_SWITCH: f64 = 0.06;

/// One goal-reaching Base episode under the given script variant.
pub fn generate_demo(kind: ScriptKind, config: &WorldConfig, seed: u64) -> Result<Trajectory> {
    if config.task != Task::Base {
        return Err(Error::usage("expert scripts run on the Base task only"));
    }
    let mut cfg = *config;
    cfg.seed = seed;
    let mut env = ContinuousWorld::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5c41);

    let (agent, goal) = match kind {
        ScriptKind::DownOnly => {
            let agent = if rng.gen_bool(0.5) { Corner::Top } else { Corner::Bottom };
            (agent, Corner::Bottom)
        }
        ScriptKind::DownAndUp => {
            let agent = if rng.gen_bool(0.5) { Corner::Top } else { Corner::Bottom };
            let goal = if rng.gen_bool(0.5) { Corner::Top } else { Corner::Bottom };
            (agent, goal)
        }
        ScriptKind::PushedDownOnly => (Corner::Top, Corner::Bottom),
        ScriptKind::PushedDownAndUp => {
            if rng.gen_bool(0.5) {
                (Corner::Top, Corner::Bottom)
            } else {
                (Corner::Bottom, Corner::Top)
            }
        }
    };
    let mut state = env.reset_base_case(agent, goal);
    let start = state.position;
    let map_size = state.map_size;
    let goal_pos = state.goal;
    let cap = cfg.max_speed * map_size;

    let mut steps = Vec::new();
    loop {
        let a = script_action(kind, &state, cap, map_size, &mut rng);
        let result = env.step(&state, &a)?;
        steps.push(StepRecord {
            t: state.step_count,
            x: state.position[0],
            y: state.position[1],
            vx: state.velocity[0],
            vy: state.velocity[1],
            ax: a.ax(),
            ay: a.ay(),
            reward: result.reward,
            done: result.done,
        });
        if result.done {
            if result.done_reason != Some(crate::env::DoneReason::Goal) {
                return Err(Error::numerical(format!(
                    "script {} missed the goal (seed {seed})",
                    kind.name()
                )));
            }
            break;
        }
        state = result.next_state;
    }
    Ok(Trajectory {
        steps,
        map_size,
        start,
        goal: goal_pos,
    })
}

fn script_action(
    kind: ScriptKind,
    state: &crate::env::AgentState,
    cap: f64,
    map_size: f64,
    rng: &mut ChaCha8Rng,
) -> PrimitiveAction {
    let ex = state.goal[0] - state.position[0];
    let ey = state.goal[1] - state.position[1];
    let jx = rng.gen_range(-JITTER..JITTER);
    let jy = rng.gen_range(-JITTER..JITTER);

    // Desired velocity toward a target, saturating at the speed cap.
    let toward = |e: f64| (8.0 * e / map_size).clamp(-1.0, 1.0) * cap;

    let (ax, ay) = if kind.pushed() {
        let bias = if ey <= 0.0 { -PUSH_BIAS } else { PUSH_BIAS };
        // Stiff horizontal steering; it competes with the constant push for
        // the velocity direction under the speed cap.
        let ax = (toward(ex) - state.velocity[0]) * 20.0;
        (ax, bias)
    } else if ex.abs() > PHASE_SWITCH * map_size {
        // Horizontal phase: track the goal column, hold altitude.
        let ax = toward(ex) - state.velocity[0];
        let ay = -state.velocity[1];
        (ax, ay)
    } else {
        // Vertical phase.
        let ax = toward(ex) - state.velocity[0];
        let ay = toward(ey) - state.velocity[1];
        (ax, ay)
    };

    let mut ax = (ax + jx).clamp(-1.0, 1.0);
    let mut ay = (ay + jy).clamp(-1.0, 1.0);
    match kind {
        // No upward movements, ever.
        ScriptKind::DownOnly => ay = ay.min(0.0),
        // Strictly pushed toward the goal side at every step.
        ScriptKind::PushedDownOnly => ay = ay.min(-0.01),
        ScriptKind::PushedDownAndUp => {
            let ey_side = state.goal[1] - state.position[1];
            ay = if ey_side <= 0.0 { ay.min(-0.01) } else { ay.max(0.01) };
        }
        ScriptKind::DownAndUp => {}
    }
    // Keep the horizontal steering inside the clamp too.
    ax = ax.clamp(-1.0, 1.0);
    PrimitiveAction::new(ax, ay)
}

/// n demos under seeds derived as `seed + i`, so corpora with the same base
/// seed share a prefix.
pub fn generate_corpus(
    kind: ScriptKind,
    config: &WorldConfig,
    n: usize,
    seed: u64,
) -> Result<DemoCorpus> {
    if n < 1 {
        return Err(Error::usage("corpus size must be at least 1"));
    }
    let trajectories: Result<Vec<Trajectory>> = (0..n)
        .map(|i| generate_demo(kind, config, seed.wrapping_add(i as u64)))
        .collect();
    let trajectories = trajectories?;
    Ok(DemoCorpus {
        count: trajectories.len(),
        trajectories,
        script: kind,
    })
}
