use crate::envs::{EnvState, AGENT_CORE, AGENT_RING, GOAL_COLORS, PATCH, SPRITE};
use crate::error::{Error, Result};
use crate::flow::{FlowField, Mask, RgbImage};

/// Draw-order layer of the background.
pub const LAYER_BACKGROUND: u8 = 0;
pub const LAYER_GOAL: u8 = 1;
/// Distractor `k` sits on layer `LAYER_DISTRACTOR + k`.
pub const LAYER_DISTRACTOR: u8 = 2;
pub const LAYER_AGENT: u8 = 255;

fn pixel_pos(p: (f32, f32)) -> (usize, usize) {
    (p.0.round().max(0.0) as usize, p.1.round().max(0.0) as usize)
}

/// Calls `f(x, y, ring)` for every pixel of the sprite at `p`; `ring` marks
/// the 1-pixel outline.
fn for_sprite(p: (f32, f32), w: usize, h: usize, mut f: impl FnMut(usize, usize, bool)) {
    let (x0, y0) = pixel_pos(p);
    for dy in 0..SPRITE {
        for dx in 0..SPRITE {
            let (x, y) = (x0 + dx, y0 + dy);
            if x < w && y < h {
                let ring = dx == 0 || dy == 0 || dx == SPRITE - 1 || dy == SPRITE - 1;
                f(x, y, ring);
            }
        }
    }
}

/// Owner of each pixel: `(layer, sprite)` where sprite is `None` for the
/// background and the goal (both static), `Some(usize::MAX)` for the agent
/// and `Some(k)` for distractor `k`.
fn ownership(state: &EnvState) -> Vec<(u8, Option<usize>)> {
    let (w, h) = (state.config.width, state.config.height);
    let mut own = vec![(LAYER_BACKGROUND, None); w * h];
    if let Some(g) = state.goal {
        for_sprite(g, w, h, |x, y, ring| {
            if ring {
                own[y * w + x] = (LAYER_GOAL, None);
            }
        });
    }
    for (k, d) in state.distractors.iter().enumerate() {
        let layer = (LAYER_DISTRACTOR as usize + k).min(LAYER_AGENT as usize - 1) as u8;
        for_sprite((d.x, d.y), w, h, |x, y, _| own[y * w + x] = (layer, Some(k)));
    }
    for_sprite(state.agent, w, h, |x, y, _| {
        own[y * w + x] = (LAYER_AGENT, Some(usize::MAX))
    });
    own
}

/// Rasterizes the state: background tiles, goal outline, distractors, then
/// the agent on top.
pub fn render(state: &EnvState) -> RgbImage {
    let (w, h) = (state.config.width, state.config.height);
    let tiles_x = w / PATCH;
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            img.put(x, y, state.background[(y / PATCH) * tiles_x + x / PATCH]);
        }
    }
    if let Some(g) = state.goal {
        let c = GOAL_COLORS[state.task_id % GOAL_COLORS.len()];
        for_sprite(g, w, h, |x, y, ring| {
            if ring {
                img.put(x, y, c)
            }
        });
    }
    for d in &state.distractors {
        for_sprite((d.x, d.y), w, h, |x, y, _| img.put(x, y, d.color));
    }
    for_sprite(state.agent, w, h, |x, y, ring| {
        img.put(x, y, if ring { AGENT_RING } else { AGENT_CORE })
    });
    img
}

fn check_pair(state: &EnvState, next: &EnvState) -> Result<()> {
    if state.config != next.config || state.distractors.len() != next.distractors.len() {
        return Err(Error::usage("oracle flow needs two states of the same environment"));
    }
    Ok(())
}

/// Exact flow from `state` to `next`: each pixel carries the displacement of
/// the topmost sprite covering it in `state`, background and goal pixels
/// carry zero.
pub fn oracle_flow(state: &EnvState, next: &EnvState) -> Result<FlowField> {
    oracle_flow_layers(state, next).map(|(f, _)| f)
}

/// [`oracle_flow`] plus the per-pixel draw layer, usable as the depth map of
/// [`crate::flow::warp_layered`].
pub fn oracle_flow_layers(state: &EnvState, next: &EnvState) -> Result<(FlowField, Vec<u8>)> {
    check_pair(state, next)?;
    let (w, h) = (state.config.width, state.config.height);
    let own = ownership(state);
    let agent_d = (next.agent.0 - state.agent.0, next.agent.1 - state.agent.1);
    let mut flow = FlowField::zeros(w, h);
    let mut layers = Vec::with_capacity(w * h);
    for (i, &(layer, sprite)) in own.iter().enumerate() {
        let d = match sprite {
            None => (0.0, 0.0),
            Some(usize::MAX) => agent_d,
            Some(k) => {
                let (a, b) = (&state.distractors[k], &next.distractors[k]);
                (b.x - a.x, b.y - a.y)
            }
        };
        flow.u[i] = d.0;
        flow.v[i] = d.1;
        layers.push(layer);
    }
    Ok((flow, layers))
}

/// Footprint of the agent sprite in the rendered frame.
pub fn oracle_agent_mask(state: &EnvState) -> Mask {
    let (w, h) = (state.config.width, state.config.height);
    let mut m = Mask::new(w, h);
    for_sprite(state.agent, w, h, |x, y, _| m.data[y * w + x] = 1);
    m
}
