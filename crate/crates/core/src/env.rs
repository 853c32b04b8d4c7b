//! ContinuousWorld: a point mass in a square map with two tasks.
//!
//! **Base** — open map, agent and goal placed at top or bottom corner
//! positions (4 vertical cases), side length redrawn per episode.
//! **Maze** — fixed side length, agent at top center, goal at bottom center,
//! four horizontal walls each pierced by one randomly placed gap.
//!
//! Dynamics: `v += a·dt` (components of `a` clamped to [-1, 1]), speed capped
//! at `max_speed·map_size`, `p += v·dt`. Motion is swept against walls and map
//! bounds; it stops at the first obstruction and the velocity component normal
//! to the obstruction is zeroed. Reward is the negative Euclidean distance to
//! the goal.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Base,
    Maze,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub task: Task,
    /// Side length in world units. For Base this is only the upper end of the
    /// per-episode range [2.5, map_size].
    pub map_size: f64,
    pub max_steps: u32,
    /// Goal radius as a fraction of the episode's map size.
    pub goal_radius: f64,
    pub dt: f64,
    /// Speed cap as a fraction of the episode's map size, per step.
    pub max_speed: f64,
    /// Gap width in each Maze wall, as a fraction of the map size.
    pub gap_width: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig::base(0)
    }
}

impl WorldConfig {
    pub fn base(seed: u64) -> Self {
        WorldConfig {
            task: Task::Base,
            map_size: 5.0,
            max_steps: 300,
            goal_radius: 0.1,
            dt: 1.0,
            max_speed: 0.04,
            gap_width: 0.2,
            seed,
        }
    }

    pub fn maze(seed: u64) -> Self {
        WorldConfig {
            task: Task::Maze,
            map_size: 2.5,
            ..WorldConfig::base(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.map_size <= 0.0 || self.max_steps == 0 || self.goal_radius <= 0.0 {
            return Err(Error::config("map_size, max_steps, goal_radius must be positive"));
        }
        if self.task == Task::Base && !(2.5..=5.0).contains(&self.map_size) {
            return Err(Error::config("Base map_size range is [2.5, 5]"));
        }
        if !(0.0..1.0).contains(&self.gap_width) || self.max_speed <= 0.0 || self.dt <= 0.0 {
            return Err(Error::config("bad dynamics parameters"));
        }
        Ok(())
    }

    /// Flat key=value form, one pair per line.
    pub fn to_kv(&self) -> String {
        let task = match self.task {
            Task::Base => "base",
            Task::Maze => "maze",
        };
        format!(
            "task={task}\nmap_size={}\nmax_steps={}\ngoal_radius={}\ndt={}\nmax_speed={}\ngap_width={}\nseed={}\n",
            self.map_size, self.max_steps, self.goal_radius, self.dt, self.max_speed, self.gap_width, self.seed
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = WorldConfig::base(0);
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("bad config line: {line}")))?;
            let parse = |v: &str| -> Result<f64> {
                v.parse()
                    .map_err(|_| Error::config(format!("bad number for {k}: {v}")))
            };
            match k {
                "task" => {
                    cfg.task = match v {
                        "base" => Task::Base,
                        "maze" => Task::Maze,
                        _ => return Err(Error::config(format!("unknown task: {v}"))),
                    }
                }
                "map_size" => cfg.map_size = parse(v)?,
                "max_steps" => {
                    cfg.max_steps = v
                        .parse()
                        .map_err(|_| Error::config(format!("bad integer for {k}: {v}")))?
                }
                "goal_radius" => cfg.goal_radius = parse(v)?,
                "dt" => cfg.dt = parse(v)?,
                "max_speed" => cfg.max_speed = parse(v)?,
                "gap_width" => cfg.gap_width = parse(v)?,
                "seed" => {
                    cfg.seed = v
                        .parse()
                        .map_err(|_| Error::config(format!("bad integer for {k}: {v}")))?
                }
                _ => return Err(Error::config(format!("unknown config key: {k}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A horizontal wall spanning the map at height `y`, open on (gap_x0, gap_x1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub y: f64,
    pub gap_x0: f64,
    pub gap_x1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DoneReason {
    Goal,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub goal: [f64; 2],
    pub walls: Vec<Wall>,
    /// Side length drawn for this episode.
    pub map_size: f64,
    pub step_count: u32,
    pub finished: bool,
}

impl AgentState {
    pub fn distance_to_goal(&self) -> f64 {
        let dx = self.position[0] - self.goal[0];
        let dy = self.position[1] - self.goal[1];
        (dx * dx + dy * dy).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimitiveAction {
    // Serialized compactly; accelerations are clamped to [-1, 1] on use.
    pub ax: OrderedF64,
    pub ay: OrderedF64,
}

// f64 wrapper so actions can live in Eq-requiring containers; actions are
// always finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OrderedF64(pub f64);
impl Eq for OrderedF64 {}

impl PrimitiveAction {
    pub fn new(ax: f64, ay: f64) -> Self {
        PrimitiveAction {
            ax: OrderedF64(ax),
            ay: OrderedF64(ay),
        }
    }
    pub fn ax(&self) -> f64 {
        self.ax.0
    }
    pub fn ay(&self) -> f64 {
        self.ay.0
    }
    pub fn clamped(&self) -> [f64; 2] {
        [self.ax.0.clamp(-1.0, 1.0), self.ay.0.clamp(-1.0, 1.0)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: AgentState,
    pub reward: f64,
    pub done: bool,
    pub done_reason: Option<DoneReason>,
}

/// Which vertical corner an entity starts in (Base task).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corner {
    Top,
    Bottom,
}

pub struct ContinuousWorld {
    pub config: WorldConfig,
    rng: ChaCha8Rng,
}

impl ContinuousWorld {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        Ok(ContinuousWorld {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
        })
    }

    pub fn reset(&mut self) -> AgentState {
        match self.config.task {
            Task::Base => {
                let agent = if self.rng.gen_bool(0.5) { Corner::Top } else { Corner::Bottom };
                let goal = if self.rng.gen_bool(0.5) { Corner::Top } else { Corner::Bottom };
                self.reset_base_case(agent, goal)
            }
            Task::Maze => self.reset_maze(),
        }
    }

    /// Base reset with the vertical corner of agent and goal pinned.
    ///
    /// The agent always starts on one side and the goal on the other; which
    /// side is which is mirrored at random so both horizontal directions
    /// appear in demonstrations.
    pub fn reset_base_case(&mut self, agent: Corner, goal: Corner) -> AgentState {
        assert_eq!(self.config.task, Task::Base, "corner reset is Base-only");
        let m = self.rng.gen_range(2.5..=self.config.map_size.max(2.5));
        let mirror = self.rng.gen_bool(0.5);
        let (ax, gx) = if mirror { (0.92, 0.08) } else { (0.08, 0.92) };
        // Anchors sit slightly inside the goal radius of the map edge so that
        // scripts which cannot brake (constant push) still finish by sliding
        // along the boundary.
        let corner_y = |c: Corner| match c {
            Corner::Top => 0.92 * m,
            Corner::Bottom => 0.08 * m,
        };
        AgentState {
            position: [ax * m, corner_y(agent)],
            velocity: [0.0, 0.0],
            goal: [gx * m, corner_y(goal)],
            walls: Vec::new(),
            map_size: m,
            step_count: 0,
            finished: false,
        }
    }

    fn reset_maze(&mut self) -> AgentState {
        let m = self.config.map_size;
        let gap = self.config.gap_width * m;
        // Zigzag corridor: gaps alternate between the outer thirds of the
        // map, so descending requires long committed traverses instead of a
        // lucky straight drop. Which side comes first, and the exact center
        // within each third, are drawn per episode.
        let first_left = self.rng.gen_bool(0.5);
        let walls = (1..=4)
            .map(|i| {
                let y = m * i as f64 / 5.0;
                let left = (i % 2 == 0) ^ first_left;
                let (lo, hi) = if left {
                    (gap / 2.0, m / 3.0)
                } else {
                    (2.0 * m / 3.0, m - gap / 2.0)
                };
                let c = self.rng.gen_range(lo..hi);
                Wall {
                    y,
                    gap_x0: c - gap / 2.0,
                    gap_x1: c + gap / 2.0,
                }
            })
            .collect();
        AgentState {
            position: [0.5 * m, 0.92 * m],
            velocity: [0.0, 0.0],
            goal: [0.5 * m, 0.08 * m],
            walls,
            map_size: m,
            step_count: 0,
            finished: false,
        }
    }

    pub fn step(&self, state: &AgentState, action: &PrimitiveAction) -> Result<StepResult> {
        step(state, action, &self.config)
    }

    /// Fixed-width observation vector for policies (10 values): position,
    /// velocity, goal (all map-normalized) plus the four gap centers
    /// (zero when there are no walls).
    pub fn observation(&self, state: &AgentState) -> Vec<f64> {
        observation(state, &self.config)
    }
}

pub const OBSERVATION_DIM: usize = 10;

pub fn observation(state: &AgentState, config: &WorldConfig) -> Vec<f64> {
    let m = state.map_size;
    let cap = config.max_speed * m;
    let mut obs = vec![
        state.position[0] / m,
        state.position[1] / m,
        state.velocity[0] / cap,
        state.velocity[1] / cap,
        state.goal[0] / m,
        state.goal[1] / m,
    ];
    for i in 0..4 {
        obs.push(match state.walls.get(i) {
            Some(w) => (w.gap_x0 + w.gap_x1) / 2.0 / m,
            None => 0.0,
        });
    }
    obs
}

/// One dynamics step. Pure in (state, action, config).
pub fn step(state: &AgentState, action: &PrimitiveAction, config: &WorldConfig) -> Result<StepResult> {
    if state.finished {
        return Err(Error::usage("step called on a finished episode"));
    }
    let m = state.map_size;
    let cap = config.max_speed * m;
    let a = action.clamped();
    let mut v = [
        state.velocity[0] + a[0] * config.dt,
        state.velocity[1] + a[1] * config.dt,
    ];
    let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if speed > cap {
        let s = cap / speed;
        v[0] *= s;
        v[1] *= s;
    }
    let p0 = state.position;
    let p1 = [p0[0] + v[0] * config.dt, p0[1] + v[1] * config.dt];

    let (pos, vel) = resolve_motion(p0, p1, v, m, &state.walls);

    let mut next = AgentState {
        position: pos,
        velocity: vel,
        goal: state.goal,
        walls: state.walls.clone(),
        map_size: m,
        step_count: state.step_count + 1,
        finished: false,
    };
    let dist = next.distance_to_goal();
    let reward = -dist;
    let mut done_reason = None;
    if dist <= config.goal_radius * m {
        done_reason = Some(DoneReason::Goal);
    } else if next.step_count >= config.max_steps {
        done_reason = Some(DoneReason::Timeout);
    }
    next.finished = done_reason.is_some();
    Ok(StepResult {
        done: next.finished,
        next_state: next,
        reward,
        done_reason,
    })
}

/// Sweep p0 -> p1 against map bounds and walls, collide-and-slide style:
/// advance to the first obstruction, zero the velocity (and remaining
/// displacement) component normal to it, and continue with the tangential
/// remainder. An agent pushed into a wall therefore still slides along it.
fn resolve_motion(
    p0: [f64; 2],
    p1: [f64; 2],
    v: [f64; 2],
    map_size: f64,
    walls: &[Wall],
) -> ([f64; 2], [f64; 2]) {
    let eps = 1e-9 * map_size;
    let mut pos = p0;
    let mut delta = [p1[0] - p0[0], p1[1] - p0[1]];
    let mut vel = v;
    // Two iterations suffice: after the second hit both axes are blocked.
    for _ in 0..2 {
        match earliest_hit(pos, delta, map_size, walls) {
            None => {
                pos = [pos[0] + delta[0], pos[1] + delta[1]];
                break;
            }
            Some((s, axis, surface)) => {
                pos = [pos[0] + s * delta[0], pos[1] + s * delta[1]];
                // Nudge back to the incoming side so the next sweep sees the
                // wall again.
                pos[axis] = (surface - eps * delta[axis].signum()).clamp(0.0, map_size);
                let rem = 1.0 - s;
                delta = [delta[0] * rem, delta[1] * rem];
                delta[axis] = 0.0;
                vel[axis] = 0.0;
                if delta[0] == 0.0 && delta[1] == 0.0 {
                    break;
                }
            }
        }
    }
    (pos, vel)
}

/// Earliest obstruction along pos -> pos + delta, as (hit time in (0, 1],
/// blocked axis, surface coordinate).
fn earliest_hit(
    pos: [f64; 2],
    delta: [f64; 2],
    map_size: f64,
    walls: &[Wall],
) -> Option<(f64, usize, f64)> {
    let [dx, dy] = delta;
    let p1 = [pos[0] + dx, pos[1] + dy];
    let mut best: Option<(f64, usize, f64)> = None;
    // s = 0 is a valid immediate hit (e.g. resting exactly on a surface while
    // pushed into it); the direction checks below only fire on motion toward
    // the surface.
    let mut consider = |s: f64, axis: usize, surface: f64| {
        if (0.0..=1.0).contains(&s) {
            match best {
                Some((bs, _, _)) if bs <= s => {}
                _ => best = Some((s, axis, surface)),
            }
        }
    };

    if dx < 0.0 && p1[0] < 0.0 {
        consider(-pos[0] / dx, 0, 0.0);
    }
    if dx > 0.0 && p1[0] > map_size {
        consider((map_size - pos[0]) / dx, 0, map_size);
    }
    if dy < 0.0 && p1[1] < 0.0 {
        consider(-pos[1] / dy, 1, 0.0);
    }
    if dy > 0.0 && p1[1] > map_size {
        consider((map_size - pos[1]) / dy, 1, map_size);
    }
    for w in walls {
        if dy == 0.0 {
            continue;
        }
        let crosses = (pos[1] - w.y) * (p1[1] - w.y) <= 0.0 && pos[1] != w.y;
        if !crosses {
            continue;
        }
        let s = (w.y - pos[1]) / dy;
        if !(0.0..=1.0).contains(&s) {
            continue;
        }
        let x_cross = pos[0] + s * dx;
        if x_cross > w.gap_x0 && x_cross < w.gap_x1 {
            continue; // passes through the gap
        }
        consider(s, 1, w.y);
    }
    best
}
