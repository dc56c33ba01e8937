//! Synthetic pixel environments: one controllable agent, a static tiled
//! background, an optional goal marker and constant-velocity distractor
//! sprites that ignore the agent's actions.
//!
//! Two families share the implementation: `DistractorGrid` (five discrete
//! moves) and `PointMass` (continuous `(dx, dy)` moves).

mod dataset;
mod render;

pub use dataset::{generate_transitions, FlowLabeling, Policy, TransitionStream};
pub use render::{oracle_agent_mask, oracle_flow, oracle_flow_layers, render};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of every sprite, in pixels.
pub const SPRITE: usize = 6;
/// Encoder patch size; frame dimensions must be multiples of it.
pub const PATCH: usize = 8;
/// Largest per-axis continuous move.
pub const MAX_CONTINUOUS_STEP: f32 = 3.0;
pub const N_DISCRETE_ACTIONS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlMode {
    Discrete5,
    Continuous2d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub height: usize,
    pub width: usize,
    pub n_distractors: usize,
    /// Per-axis distractor speed in pixels per step.
    pub distractor_speed: u32,
    /// Agent displacement per discrete move.
    pub agent_step: u32,
    pub control_mode: ControlMode,
    pub palette_seed: u64,
    pub goal_enabled: bool,
    /// Number of distinct task ids (goal marker colours).
    pub n_tasks: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::distractor_grid()
    }
}

impl EnvConfig {
    /// 32x32 discrete-control environment with three moving distractors.
    pub fn distractor_grid() -> Self {
        Self {
            height: 32,
            width: 32,
            n_distractors: 3,
            distractor_speed: 1,
            agent_step: 2,
            control_mode: ControlMode::Discrete5,
            palette_seed: 0,
            goal_enabled: true,
            n_tasks: 1,
        }
    }

    /// 32x32 continuous-control environment with static distractors.
    pub fn point_mass() -> Self {
        Self {
            control_mode: ControlMode::Continuous2d,
            distractor_speed: 0,
            ..Self::distractor_grid()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("frame dimensions must be positive".into()));
        }
        if self.height % PATCH != 0 || self.width % PATCH != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} is not a multiple of the {PATCH}-pixel patch",
                self.width, self.height
            )));
        }
        if self.agent_step < 1 {
            return Err(Error::Config("agent_step must be at least 1".into()));
        }
        if self.n_tasks == 0 {
            return Err(Error::Config("n_tasks must be at least 1".into()));
        }
        Ok(())
    }

    /// Largest valid top-left coordinate for a sprite.
    pub fn max_x(&self) -> f32 {
        (self.width - SPRITE) as f32
    }

    pub fn max_y(&self) -> f32 {
        (self.height - SPRITE) as f32
    }

    /// Positions reachable by discrete moves along one axis.
    fn grid_cells(&self, extent: usize) -> usize {
        (extent - SPRITE) / self.agent_step as usize + 1
    }

    /// Flow magnitude sensitivity matching the control regime.
    pub fn default_sigma(&self) -> f32 {
        match self.control_mode {
            ControlMode::Discrete5 => 0.01,
            ControlMode::Continuous2d => 0.05,
        }
    }

    pub fn horizon(&self) -> usize {
        self.height + self.width
    }
}

/// A physical action.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Action {
    /// 0 noop, 1 up, 2 down, 3 left, 4 right.
    Discrete(u8),
    Continuous(f32, f32),
}

impl Action {
    pub const NOOP: Action = Action::Discrete(0);
    pub const UP: Action = Action::Discrete(1);
    pub const DOWN: Action = Action::Discrete(2);
    pub const LEFT: Action = Action::Discrete(3);
    pub const RIGHT: Action = Action::Discrete(4);

    pub fn index(&self) -> Option<usize> {
        match self {
            Action::Discrete(i) => Some(*i as usize),
            Action::Continuous(..) => None,
        }
    }

    pub fn as_vec2(&self) -> Option<[f32; 2]> {
        match self {
            Action::Continuous(dx, dy) => Some([*dx, *dy]),
            Action::Discrete(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Distractor {
    pub x: f32,
    pub y: f32,
    pub vx: f32,
    pub vy: f32,
    pub color: [u8; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub config: EnvConfig,
    pub agent: (f32, f32),
    pub distractors: Vec<Distractor>,
    /// One colour per background tile, row-major over `PATCH`-sized tiles.
    pub background: Vec<[u8; 3]>,
    pub goal: Option<(f32, f32)>,
    pub task_id: usize,
    pub step_index: u32,
}

/// Colours reserved for the agent sprite: outer ring and core.
pub const AGENT_RING: [u8; 3] = [255, 255, 255];
pub const AGENT_CORE: [u8; 3] = [255, 64, 160];

const DISTRACTOR_COLORS: [[u8; 3]; 6] = [
    [220, 40, 40],
    [40, 170, 60],
    [60, 80, 230],
    [170, 70, 200],
    [210, 130, 50],
    [80, 200, 200],
];

pub const GOAL_COLORS: [[u8; 3]; 4] = [[250, 230, 20], [20, 240, 250], [250, 150, 0], [150, 250, 20]];

fn overlaps(a: (f32, f32), b: (f32, f32)) -> bool {
    (a.0 - b.0).abs() < SPRITE as f32 && (a.1 - b.1).abs() < SPRITE as f32
}

/// Deterministic initial state for `(config, seed)`.
pub fn env_reset(config: &EnvConfig, seed: u64) -> Result<EnvState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ config.palette_seed.rotate_left(32));
    let step = config.agent_step as f32;
    let cells_x = config.grid_cells(config.width);
    let cells_y = config.grid_cells(config.height);
    let agent = (
        rng.random_range(0..cells_x) as f32 * step,
        rng.random_range(0..cells_y) as f32 * step,
    );

    let goal = if config.goal_enabled {
        let mut g;
        loop {
            g = (
                rng.random_range(0..cells_x) as f32 * step,
                rng.random_range(0..cells_y) as f32 * step,
            );
            if g != agent || cells_x * cells_y == 1 {
                break;
            }
        }
        Some(g)
    } else {
        None
    };

    let mut palette_rng = ChaCha8Rng::seed_from_u64(config.palette_seed);
    let color_offset = palette_rng.random_range(0..DISTRACTOR_COLORS.len());

    let mut distractors = Vec::with_capacity(config.n_distractors);
    let mut occupied = vec![agent];
    let speed = config.distractor_speed as i32;
    for k in 0..config.n_distractors {
        let mut placed = None;
        for _ in 0..1000 {
            let p = (
                rng.random_range(0..=config.width - SPRITE) as f32,
                rng.random_range(0..=config.height - SPRITE) as f32,
            );
            if occupied.iter().all(|&o| !overlaps(o, p)) {
                placed = Some(p);
                break;
            }
        }
        let Some((x, y)) = placed else {
            return Err(Error::Config(format!(
                "cannot place {} non-overlapping distractors in a {}x{} frame",
                config.n_distractors, config.width, config.height
            )));
        };
        occupied.push((x, y));
        let (vx, vy) = if speed == 0 {
            (0, 0)
        } else {
            loop {
                let v = (rng.random_range(-1..=1) * speed, rng.random_range(-1..=1) * speed);
                if v != (0, 0) {
                    break v;
                }
            }
        };
        distractors.push(Distractor {
            x,
            y,
            vx: vx as f32,
            vy: vy as f32,
            color: DISTRACTOR_COLORS[(color_offset + k) % DISTRACTOR_COLORS.len()],
        });
    }

    let tiles = (config.width / PATCH) * (config.height / PATCH);
    let background = (0..tiles)
        .map(|_| {
            [
                rng.random_range(20..70u8),
                rng.random_range(20..70u8),
                rng.random_range(20..70u8),
            ]
        })
        .collect();

    let task_id = (seed % config.n_tasks as u64) as usize;
    Ok(EnvState {
        config: config.clone(),
        agent,
        distractors,
        background,
        goal,
        task_id,
        step_index: 0,
    })
}

/// Agent displacement an action requests, before border clamping.
pub fn action_displacement(config: &EnvConfig, action: &Action) -> Result<(f32, f32)> {
    let s = config.agent_step as f32;
    match (config.control_mode, action) {
        (ControlMode::Discrete5, Action::Discrete(i)) => match i {
            0 => Ok((0.0, 0.0)),
            1 => Ok((0.0, -s)),
            2 => Ok((0.0, s)),
            3 => Ok((-s, 0.0)),
            4 => Ok((s, 0.0)),
            _ => Err(Error::usage(format!("discrete action {i} out of range 0..5"))),
        },
        (ControlMode::Continuous2d, Action::Continuous(dx, dy)) => {
            let ok = |v: f32| v.is_finite() && v.abs() <= MAX_CONTINUOUS_STEP;
            if ok(*dx) && ok(*dy) {
                Ok((*dx, *dy))
            } else {
                Err(Error::usage(format!(
                    "continuous action ({dx}, {dy}) outside [-{MAX_CONTINUOUS_STEP}, {MAX_CONTINUOUS_STEP}]^2"
                )))
            }
        }
        (mode, a) => Err(Error::usage(format!("action {a:?} invalid for {mode:?} control"))),
    }
}

/// Advances the agent by `action` (clamped at the borders) and every
/// distractor by its velocity (bouncing at the borders).
pub fn env_step(state: &EnvState, action: &Action) -> Result<(EnvState, bool)> {
    let cfg = &state.config;
    let (dx, dy) = action_displacement(cfg, action)?;
    let mut next = state.clone();
    next.agent = (
        (state.agent.0 + dx).clamp(0.0, cfg.max_x()),
        (state.agent.1 + dy).clamp(0.0, cfg.max_y()),
    );
    for d in &mut next.distractors {
        (d.x, d.vx) = bounce(d.x, d.vx, cfg.max_x());
        (d.y, d.vy) = bounce(d.y, d.vy, cfg.max_y());
    }
    next.step_index += 1;
    let reached = reached_goal(&next);
    Ok((next, reached))
}

fn bounce(pos: f32, vel: f32, max: f32) -> (f32, f32) {
    let p = pos + vel;
    if p > max {
        (2.0 * max - p, -vel)
    } else if p < 0.0 {
        (-p, -vel)
    } else {
        (p, vel)
    }
}

pub fn reached_goal(state: &EnvState) -> bool {
    let Some(goal) = state.goal else { return false };
    match state.config.control_mode {
        ControlMode::Discrete5 => state.agent == goal,
        ControlMode::Continuous2d => {
            (state.agent.0 - goal.0).abs() <= 1.0 && (state.agent.1 - goal.1).abs() <= 1.0
        }
    }
}

/// Greedy expert: shrink the L1 distance to the goal, x axis first.
pub fn scripted_expert(state: &EnvState) -> Result<Action> {
    let Some((gx, gy)) = state.goal else {
        return Err(Error::usage("scripted expert needs goal_enabled"));
    };
    let (ax, ay) = state.agent;
    Ok(match state.config.control_mode {
        ControlMode::Discrete5 => {
            if gx > ax {
                Action::RIGHT
            } else if gx < ax {
                Action::LEFT
            } else if gy > ay {
                Action::DOWN
            } else if gy < ay {
                Action::UP
            } else {
                Action::NOOP
            }
        }
        ControlMode::Continuous2d => Action::Continuous(
            (gx - ax).clamp(-MAX_CONTINUOUS_STEP, MAX_CONTINUOUS_STEP),
            (gy - ay).clamp(-MAX_CONTINUOUS_STEP, MAX_CONTINUOUS_STEP),
        ),
    })
}

/// Uniformly random valid action.
pub fn random_action<R: Rng + ?Sized>(config: &EnvConfig, rng: &mut R) -> Action {
    match config.control_mode {
        ControlMode::Discrete5 => Action::Discrete(rng.random_range(0..N_DISCRETE_ACTIONS as u8)),
        ControlMode::Continuous2d => Action::Continuous(
            rng.random_range(-MAX_CONTINUOUS_STEP..=MAX_CONTINUOUS_STEP),
            rng.random_range(-MAX_CONTINUOUS_STEP..=MAX_CONTINUOUS_STEP),
        ),
    }
}

#[cfg(test)]
mod tests;
