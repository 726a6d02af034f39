//! The TwoRoom / TwoRoomLarge environments: a controlled hidden Markov
//! process with pixel-style observations, privileged-state access for
//! evaluation, and the scripted oracle policy.
//!
//! Geometry: the grid is split by a 1-cell-thick vertical wall at the
//! horizontal midpoint with a single 1-cell doorway at mid-height. The left
//! half is the dark room, the right half the busy room holding the
//! particles. The agent starts at the fixed dark-room corner (0, 0).

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{sample_index, stream};
use rand_chacha::ChaCha8Rng;

pub const GREY: [f64; 3] = [0.5, 0.5, 0.5];
pub const WHITE: [f64; 3] = [1.0, 1.0, 1.0];
pub const BROWN: [f64; 3] = [0.55, 0.27, 0.07];
pub const BLACK: [f64; 3] = [0.0, 0.0, 0.0];
/// Particle palette: distinct hues so per-particle filtering stays exact.
pub const PARTICLE_COLORS: [[f64; 3]; 5] = [
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
];

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("step called after episode end (T = {0})")]
    EpisodeEnded(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Left,
    Right,
    Up,
    Down,
    Tag,
    NoOp,
}

impl Action {
    pub const COUNT: usize = 6;
    pub const ALL: [Action; 6] = [
        Action::Left,
        Action::Right,
        Action::Up,
        Action::Down,
        Action::Tag,
        Action::NoOp,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&a| a == self).unwrap()
    }

    pub fn from_index(i: usize) -> Action {
        Self::ALL[i]
    }
}

pub type Cell = (i32, i32);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoRoomConfig {
    pub grid_w: i32,
    pub grid_h: i32,
    /// Window side length in cells; odd.
    pub window: i32,
    pub n_particles: usize,
    pub episode_len: usize,
    pub particle_colors: Vec<[f64; 3]>,
    /// Pixel upsampling factor per cell.
    pub cell_pixels: usize,
}

impl TwoRoomConfig {
    /// Normal preset: 5x5 grid, 3x3 window, 2 particles, 30x30 pixels.
    pub fn normal() -> Self {
        Self {
            grid_w: 5,
            grid_h: 5,
            window: 3,
            n_particles: 2,
            episode_len: 100,
            particle_colors: PARTICLE_COLORS[..2].to_vec(),
            cell_pixels: 10,
        }
    }

    /// Large preset: 15x15 grid, 5x5 window, 5 particles, 30x30 pixels.
    pub fn large() -> Self {
        Self {
            grid_w: 15,
            grid_h: 15,
            window: 5,
            n_particles: 5,
            episode_len: 100,
            particle_colors: PARTICLE_COLORS.to_vec(),
            cell_pixels: 6,
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if self.window % 2 == 0 || self.window > self.grid_w.min(self.grid_h) {
            return Err(WorldError::Config(format!(
                "window must be odd and <= min(grid_w, grid_h), got {}",
                self.window
            )));
        }
        if self.n_particles < 1 || self.episode_len < 1 || self.cell_pixels < 1 {
            return Err(WorldError::Config(
                "n_particles, episode_len, cell_pixels must be >= 1".to_string(),
            ));
        }
        if self.particle_colors.len() < self.n_particles {
            return Err(WorldError::Config(format!(
                "{} particles need {} distinct colors",
                self.n_particles,
                self.particle_colors.len()
            )));
        }
        let geo = Geometry::new(self);
        if self.n_particles > geo.busy_cells.len() {
            return Err(WorldError::Config(format!(
                "{} particles exceed {} busy-room cells",
                self.n_particles,
                geo.busy_cells.len()
            )));
        }
        Ok(())
    }

    /// Observation shape `(3, window*cell_pixels, window*cell_pixels)`.
    pub fn observation_shape(&self) -> (usize, usize, usize) {
        let side = self.window as usize * self.cell_pixels;
        (3, side, side)
    }

    pub fn observation_len(&self) -> usize {
        let (c, h, w) = self.observation_shape();
        c * h * w
    }
}

/// Static room layout derived from a config.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub grid_w: i32,
    pub grid_h: i32,
    pub wall_x: i32,
    pub door_y: i32,
    /// Busy-room cells (the particle domain), row-major order.
    pub busy_cells: Vec<Cell>,
}

impl Geometry {
    pub fn new(cfg: &TwoRoomConfig) -> Self {
        let wall_x = cfg.grid_w / 2;
        let door_y = cfg.grid_h / 2;
        let mut busy_cells = Vec::new();
        for y in 0..cfg.grid_h {
            for x in wall_x + 1..cfg.grid_w {
                busy_cells.push((x, y));
            }
        }
        Self {
            grid_w: cfg.grid_w,
            grid_h: cfg.grid_h,
            wall_x,
            door_y,
            busy_cells,
        }
    }

    pub fn in_bounds(&self, (x, y): Cell) -> bool {
        x >= 0 && x < self.grid_w && y >= 0 && y < self.grid_h
    }

    pub fn is_wall(&self, (x, y): Cell) -> bool {
        x == self.wall_x && y != self.door_y
    }

    /// Cells the agent may occupy.
    pub fn agent_valid(&self, c: Cell) -> bool {
        self.in_bounds(c) && !self.is_wall(c)
    }

    /// Cells a particle may occupy: the busy room only.
    pub fn particle_valid(&self, c: Cell) -> bool {
        self.in_bounds(c) && c.0 > self.wall_x
    }

    pub fn busy_index(&self, c: Cell) -> Option<usize> {
        if !self.particle_valid(c) {
            return None;
        }
        let row_len = self.grid_w - self.wall_x - 1;
        Some((c.1 * row_len + (c.0 - self.wall_x - 1)) as usize)
    }

    /// Exact single-step particle transition kernel from `from`:
    /// one uniform draw over {up, down, left, right, stay}, one resample on
    /// a blocked draw, then fall back to stay.
    pub fn particle_kernel(&self, from: Cell) -> Vec<(Cell, f64)> {
        let moves = [(0, -1), (0, 1), (-1, 0), (1, 0), (0, 0)];
        let targets: Vec<Option<Cell>> = moves
            .iter()
            .map(|&(dx, dy)| {
                let t = (from.0 + dx, from.1 + dy);
                if self.particle_valid(t) {
                    Some(t)
                } else {
                    None
                }
            })
            .collect();
        let blocked = targets.iter().filter(|t| t.is_none()).count() as f64;
        let p_valid = 0.2 + blocked * 0.04; // 1/5 + (b/5)(1/5)
        let mut out: Vec<(Cell, f64)> = Vec::new();
        let mut add = |cell: Cell, p: f64| {
            if let Some(e) = out.iter_mut().find(|(c, _)| *c == cell) {
                e.1 += p;
            } else {
                out.push((cell, p));
            }
        };
        for t in targets[..4].iter().flatten() {
            add(*t, p_valid);
        }
        add(from, p_valid + blocked * blocked * 0.04);
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParticleState {
    pub pos: Cell,
    pub locked: bool,
    pub color_id: usize,
}

/// Privileged environment state; evaluation-only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrueState {
    pub agent_pos: Cell,
    pub particles: Vec<ParticleState>,
}

/// Normalized RGB observation `[3, side, side]`, values in `[0, 1]`.
pub type Observation = Array3<f64>;

/// What occupies a window cell, from the agent's viewpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellView {
    OutOfBounds,
    Wall,
    Floor,
    Agent,
    Particle { color_id: u8, locked: bool },
}

impl CellView {
    pub fn encode(self) -> u8 {
        match self {
            CellView::OutOfBounds => 0,
            CellView::Wall => 1,
            CellView::Floor => 2,
            CellView::Agent => 3,
            CellView::Particle { color_id, locked } => 4 + color_id * 2 + locked as u8,
        }
    }

    pub fn decode(code: u8) -> Self {
        match code {
            0 => CellView::OutOfBounds,
            1 => CellView::Wall,
            2 => CellView::Floor,
            3 => CellView::Agent,
            c => CellView::Particle {
                color_id: (c - 4) / 2,
                locked: (c - 4) % 2 == 1,
            },
        }
    }
}

pub struct TwoRoomEnv {
    pub cfg: TwoRoomConfig,
    pub geo: Geometry,
    state: TrueState,
    steps: usize,
    rng: ChaCha8Rng,
}

impl TwoRoomEnv {
    /// Reset with a seed: agent at the fixed dark-room corner, particles
    /// i.i.d. uniform over busy-room cells, unlocked.
    pub fn reset(cfg: TwoRoomConfig, seed: u64) -> Result<(Self, Observation), WorldError> {
        cfg.validate()?;
        let geo = Geometry::new(&cfg);
        let mut rng = stream(seed, &[0x7761]);
        let uniform: Vec<f64> = vec![1.0 / geo.busy_cells.len() as f64; geo.busy_cells.len()];
        let particles = (0..cfg.n_particles)
            .map(|i| ParticleState {
                pos: geo.busy_cells[sample_index(&mut rng, &uniform)],
                locked: false,
                color_id: i,
            })
            .collect();
        let state = TrueState {
            agent_pos: (0, 0),
            particles,
        };
        let env = Self {
            cfg,
            geo,
            state,
            steps: 0,
            rng,
        };
        let obs = env.observe();
        Ok((env, obs))
    }

    pub fn action_count(&self) -> usize {
        Action::COUNT
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn episode_ended(&self) -> bool {
        self.steps >= self.cfg.episode_len
    }

    /// Privileged state access; must never feed rewards or policy inputs.
    pub fn privileged_state(&self) -> &TrueState {
        &self.state
    }

    fn window_half(&self) -> i32 {
        self.cfg.window / 2
    }

    pub fn in_window(&self, c: Cell) -> bool {
        let (ax, ay) = self.state.agent_pos;
        (c.0 - ax).abs() <= self.window_half() && (c.1 - ay).abs() <= self.window_half()
    }

    /// Advance one step: agent motion, tag resolution, particle motion, and
    /// re-rendering, in that order.
    pub fn step(&mut self, a: Action) -> Result<Observation, WorldError> {
        if self.episode_ended() {
            return Err(WorldError::EpisodeEnded(self.cfg.episode_len));
        }
        self.steps += 1;
        let (ax, ay) = self.state.agent_pos;
        let target = match a {
            Action::Left => (ax - 1, ay),
            Action::Right => (ax + 1, ay),
            Action::Up => (ax, ay - 1),
            Action::Down => (ax, ay + 1),
            Action::Tag | Action::NoOp => (ax, ay),
        };
        if self.geo.agent_valid(target) {
            self.state.agent_pos = target;
        }
        if a == Action::Tag {
            let window: Vec<Cell> = self
                .state
                .particles
                .iter()
                .map(|p| p.pos)
                .filter(|&c| self.in_window(c))
                .collect();
            for p in &mut self.state.particles {
                if !p.locked && window.contains(&p.pos) {
                    p.locked = true;
                }
            }
        }
        // Unlocked particles take one kernel move each; locked never move.
        let moves = [(0, -1), (0, 1), (-1, 0), (1, 0), (0, 0)];
        for i in 0..self.state.particles.len() {
            if self.state.particles[i].locked {
                continue;
            }
            let from = self.state.particles[i].pos;
            let uniform5 = [0.2; 5];
            let mut next = from;
            for _attempt in 0..2 {
                let d = sample_index(&mut self.rng, &uniform5);
                let t = (from.0 + moves[d].0, from.1 + moves[d].1);
                if self.geo.particle_valid(t) {
                    next = t;
                    break;
                }
                next = from;
            }
            self.state.particles[i].pos = next;
        }
        Ok(self.observe())
    }

    /// What each window cell shows, row-major over the window.
    pub fn window_codes(&self) -> Vec<u8> {
        let h = self.window_half();
        let (ax, ay) = self.state.agent_pos;
        let mut out = Vec::with_capacity((self.cfg.window * self.cfg.window) as usize);
        for wy in -h..=h {
            for wx in -h..=h {
                let c = (ax + wx, ay + wy);
                let view = if !self.geo.in_bounds(c) {
                    CellView::OutOfBounds
                } else if self.geo.is_wall(c) {
                    CellView::Wall
                } else if c == self.state.agent_pos {
                    CellView::Agent
                } else {
                    // Lowest color id wins when particles overlap.
                    self.state
                        .particles
                        .iter()
                        .filter(|p| p.pos == c)
                        .min_by_key(|p| p.color_id)
                        .map(|p| CellView::Particle {
                            color_id: p.color_id as u8,
                            locked: p.locked,
                        })
                        .unwrap_or(CellView::Floor)
                };
                out.push(view.encode());
            }
        }
        out
    }

    pub fn observe(&self) -> Observation {
        render_codes(&self.cfg, &self.window_codes())
    }

    /// Particles currently inside the window, excluding any hidden under
    /// the agent: `(color_id, cell, locked)`.
    pub fn visible_particles(&self) -> Vec<(usize, Cell, bool)> {
        self.state
            .particles
            .iter()
            .filter(|p| self.in_window(p.pos) && p.pos != self.state.agent_pos)
            .map(|p| (p.color_id, p.pos, p.locked))
            .collect()
    }

    /// All in-bounds window cells (including the agent's own cell).
    pub fn window_cells(&self) -> Vec<Cell> {
        let h = self.window_half();
        let (ax, ay) = self.state.agent_pos;
        let mut out = Vec::new();
        for wy in -h..=h {
            for wx in -h..=h {
                let c = (ax + wx, ay + wy);
                if self.geo.in_bounds(c) {
                    out.push(c);
                }
            }
        }
        out
    }

    /// What each cell of the whole grid shows, row-major; the replay
    /// renderer's input.
    pub fn grid_codes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity((self.geo.grid_w * self.geo.grid_h) as usize);
        for y in 0..self.geo.grid_h {
            for x in 0..self.geo.grid_w {
                let c = (x, y);
                let view = if self.geo.is_wall(c) {
                    CellView::Wall
                } else if c == self.state.agent_pos {
                    CellView::Agent
                } else {
                    self.state
                        .particles
                        .iter()
                        .filter(|p| p.pos == c)
                        .min_by_key(|p| p.color_id)
                        .map(|p| CellView::Particle {
                            color_id: p.color_id as u8,
                            locked: p.locked,
                        })
                        .unwrap_or(CellView::Floor)
                };
                out.push(view.encode());
            }
        }
        out
    }

    /// Window cells where an unhidden particle would have been seen:
    /// in-bounds, non-wall, and not the agent's own cell.
    pub fn observed_cells(&self) -> Vec<Cell> {
        let h = self.window_half();
        let (ax, ay) = self.state.agent_pos;
        let mut out = Vec::new();
        for wy in -h..=h {
            for wx in -h..=h {
                let c = (ax + wx, ay + wy);
                if self.geo.in_bounds(c) && !self.geo.is_wall(c) && c != (ax, ay) {
                    out.push(c);
                }
            }
        }
        out
    }
}

/// Expand window codes into the pixel observation.
pub fn render_codes(cfg: &TwoRoomConfig, codes: &[u8]) -> Observation {
    let w = cfg.window as usize;
    render_cells(cfg, codes, w, w)
}

/// Expand cell codes of a `w x h` region into pixels.
pub fn render_cells(cfg: &TwoRoomConfig, codes: &[u8], w: usize, h: usize) -> Observation {
    let cp = cfg.cell_pixels;
    let mut img = Array3::zeros((3, h * cp, w * cp));
    for (i, &code) in codes.iter().enumerate() {
        let (cy, cx) = (i / w, i % w);
        let color = match CellView::decode(code) {
            CellView::OutOfBounds => BLACK,
            CellView::Wall => BROWN,
            CellView::Floor => GREY,
            CellView::Agent => WHITE,
            CellView::Particle { color_id, locked } => {
                let base = cfg.particle_colors[color_id as usize];
                if locked {
                    [base[0] * 0.5, base[1] * 0.5, base[2] * 0.5]
                } else {
                    base
                }
            }
        };
        for ch in 0..3 {
            for py in 0..cp {
                for px in 0..cp {
                    img[(ch, cy * cp + py, cx * cp + px)] = color[ch];
                }
            }
        }
    }
    img
}

/// Write an observation as a binary PPM (P6) image.
pub fn write_ppm(obs: &Observation, path: &std::path::Path) -> std::io::Result<()> {
    use std::io::Write;
    let (_, h, w) = obs.dim();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = (obs[(ch, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8;
                f.write_all(&[v])?;
            }
        }
    }
    Ok(())
}

/// Scripted oracle: tag any visible unlocked particle, else walk a shortest
/// path toward the nearest one; no-op once everything is locked.
/// Uses privileged state; evaluation only.
pub fn oracle_policy(env: &TwoRoomEnv) -> Action {
    let state = env.privileged_state();
    let unlocked: Vec<&ParticleState> =
        state.particles.iter().filter(|p| !p.locked).collect();
    if unlocked.is_empty() {
        return Action::NoOp;
    }
    if unlocked.iter().any(|p| env.in_window(p.pos)) {
        return Action::Tag;
    }
    // BFS over agent-valid cells from the agent position.
    let geo = &env.geo;
    let idx = |c: Cell| (c.1 * geo.grid_w + c.0) as usize;
    let n = (geo.grid_w * geo.grid_h) as usize;
    let mut dist = vec![u32::MAX; n];
    let mut first_step = vec![Action::NoOp; n];
    let mut queue = std::collections::VecDeque::new();
    dist[idx(state.agent_pos)] = 0;
    queue.push_back(state.agent_pos);
    let dirs = [
        (Action::Left, (-1, 0)),
        (Action::Right, (1, 0)),
        (Action::Up, (0, -1)),
        (Action::Down, (0, 1)),
    ];
    while let Some(c) = queue.pop_front() {
        for &(a, (dx, dy)) in &dirs {
            let t = (c.0 + dx, c.1 + dy);
            if geo.agent_valid(t) && dist[idx(t)] == u32::MAX {
                dist[idx(t)] = dist[idx(c)] + 1;
                first_step[idx(t)] = if dist[idx(c)] == 0 { a } else { first_step[idx(c)] };
                queue.push_back(t);
            }
        }
    }
    let target = unlocked
        .iter()
        .min_by_key(|p| (dist[idx(p.pos)], p.color_id))
        .unwrap();
    let a = first_step[idx(target.pos)];
    if dist[idx(target.pos)] == u32::MAX {
        Action::NoOp
    } else {
        a
    }
}
