//! Environments: a higher-order predator-prey grid world and one-step matrix games.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Largest joint-action table `oracle_optimal` will enumerate.
pub const MAX_GAME_ENTRIES: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentAction {
    Up,
    Down,
    Left,
    Right,
    Stay,
    Capture,
}

impl AgentAction {
    pub const ALL: [AgentAction; 6] = [
        AgentAction::Up,
        AgentAction::Down,
        AgentAction::Left,
        AgentAction::Right,
        AgentAction::Stay,
        AgentAction::Capture,
    ];

    pub fn from_index(a: usize) -> Result<Self> {
        Self::ALL.get(a).copied().ok_or(Error::OutOfRange { index: a, limit: 6 })
    }

    fn delta(self) -> (isize, isize) {
        match self {
            AgentAction::Up => (0, -1),
            AgentAction::Down => (0, 1),
            AgentAction::Left => (-1, 0),
            AgentAction::Right => (1, 0),
            AgentAction::Stay | AgentAction::Capture => (0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    pub agents: usize,
    pub prey: usize,
    pub capture_threshold: usize,
    pub capture_reward: f64,
    pub penalty: f64,
    pub step_reward: f64,
    pub time_limit: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            width: 10,
            height: 10,
            agents: 9,
            prey: 6,
            capture_threshold: 3,
            capture_reward: 10.0,
            penalty: -1.0,
            step_reward: 0.0,
            time_limit: 200,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("grid width and height must be positive".into()));
        }
        if self.agents == 0 || self.prey == 0 {
            return Err(Error::Config("grid needs at least one agent and one prey".into()));
        }
        if self.agents + self.prey > self.width * self.height {
            return Err(Error::Config(format!(
                "{} entities do not fit on a {}x{} grid",
                self.agents + self.prey,
                self.width,
                self.height
            )));
        }
        if self.capture_threshold == 0 {
            return Err(Error::Config("capture_threshold must be at least 1".into()));
        }
        if self.time_limit == 0 {
            return Err(Error::Config("time_limit must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    Captured { prey: usize, capturers: usize },
    FailedCapture { prey: usize, capturers: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    pub events: Vec<Event>,
}

type Cell = (usize, usize);

pub const VIEW_RADIUS: usize = 2;
pub const SENTINEL: f64 = -1.0;

#[derive(Debug, Clone)]
pub struct GridWorld {
    config: GridConfig,
    agents: Vec<Cell>,
    prey: Vec<Option<Cell>>,
    t: usize,
    rng: ChaCha8Rng,
}

impl GridWorld {
    pub fn new(config: GridConfig, seed: u64) -> Result<Self> {
        config.validate().map_err(|e| match e {
            Error::Config(msg) => Error::Env(msg),
            other => other,
        })?;
        let mut world = GridWorld {
            agents: Vec::new(),
            prey: Vec::new(),
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            config,
        };
        world.reset(seed);
        Ok(world)
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    /// Places all entities on distinct uniformly chosen cells.
    pub fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (self.config.width, self.config.height);
        let mut cells: Vec<Cell> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect();
        let total = self.config.agents + self.config.prey;
        let (chosen, _) = cells.partial_shuffle(&mut self.rng, total);
        self.agents = chosen[..self.config.agents].to_vec();
        self.prey = chosen[self.config.agents..].iter().map(|&c| Some(c)).collect();
        self.t = 0;
    }

    pub fn agent_positions(&self) -> &[Cell] {
        &self.agents
    }

    pub fn prey_positions(&self) -> &[Option<Cell>] {
        &self.prey
    }

    pub fn prey_left(&self) -> usize {
        self.prey.iter().flatten().count()
    }

    pub fn time(&self) -> usize {
        self.t
    }

    /// Overrides entity positions; used to build fixtures.
    pub fn set_positions(&mut self, agents: Vec<Cell>, prey: Vec<Option<Cell>>) -> Result<()> {
        if agents.len() != self.config.agents || prey.len() != self.config.prey {
            return Err(Error::Env("entity counts do not match the configuration".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for &c in agents.iter().chain(prey.iter().flatten()) {
            if c.0 >= self.config.width || c.1 >= self.config.height || !seen.insert(c) {
                return Err(Error::Env(format!("cell {c:?} is off-grid or shared")));
            }
        }
        self.agents = agents;
        self.prey = prey;
        Ok(())
    }

    fn occupied(&self, c: Cell) -> bool {
        self.agents.contains(&c) || self.prey.iter().flatten().any(|&p| p == c)
    }

    fn offset(&self, c: Cell, dx: isize, dy: isize) -> Option<Cell> {
        let x = c.0.checked_add_signed(dx)?;
        let y = c.1.checked_add_signed(dy)?;
        (x < self.config.width && y < self.config.height).then_some((x, y))
    }

    fn adjacent8(a: Cell, b: Cell) -> bool {
        a != b && a.0.abs_diff(b.0) <= 1 && a.1.abs_diff(b.1) <= 1
    }

    pub fn step(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        if actions.len() != self.agents.len() {
            return Err(Error::Env(format!("expected {} actions, got {}", self.agents.len(), actions.len())));
        }
        let actions: Vec<AgentAction> = actions.iter().map(|&a| AgentAction::from_index(a)).collect::<Result<_>>()?;
        if self.prey_left() == 0 || self.t >= self.config.time_limit {
            return Err(Error::Env("episode is over; reset first".into()));
        }

        for (i, act) in actions.iter().enumerate() {
            let (dx, dy) = act.delta();
            if (dx, dy) == (0, 0) {
                continue;
            }
            if let Some(target) = self.offset(self.agents[i], dx, dy) {
                if !self.occupied(target) {
                    self.agents[i] = target;
                }
            }
        }

        let mut reward = 0.0;
        let mut events = Vec::new();
        for k in 0..self.prey.len() {
            let Some(pos) = self.prey[k] else { continue };
            let capturers = actions
                .iter()
                .zip(&self.agents)
                .filter(|&(&a, &c)| a == AgentAction::Capture && Self::adjacent8(c, pos))
                .count();
            if capturers >= self.config.capture_threshold {
                self.prey[k] = None;
                reward += self.config.capture_reward;
                events.push(Event::Captured { prey: k, capturers });
            } else if capturers > 0 {
                reward += self.config.penalty;
                events.push(Event::FailedCapture { prey: k, capturers });
            }
        }
        reward += self.config.step_reward;

        for k in 0..self.prey.len() {
            let Some(pos) = self.prey[k] else { continue };
            let free: Vec<Cell> = [(0, -1), (0, 1), (-1, 0), (1, 0)]
                .iter()
                .filter_map(|&(dx, dy)| self.offset(pos, dx, dy))
                .filter(|&c| !self.occupied(c))
                .collect();
            if let Some(&c) = free.choose(&mut self.rng) {
                self.prey[k] = Some(c);
            }
        }

        self.t += 1;
        let done = self.prey_left() == 0 || self.t >= self.config.time_limit;
        Ok(StepOutcome { reward, done, events })
    }

    pub fn obs_dim(&self) -> usize {
        let side = 2 * VIEW_RADIUS + 1;
        2 * side * side
    }

    /// Agent channel then prey channel of the window centred on the agent, row by row.
    pub fn observe(&self, agent: usize) -> Result<Vec<f64>> {
        let me = *self.agents.get(agent).ok_or(Error::OutOfRange { index: agent, limit: self.agents.len() })?;
        let side = 2 * VIEW_RADIUS + 1;
        let mut obs = vec![0.0; 2 * side * side];
        let r = VIEW_RADIUS as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                let idx = ((dy + r) as usize) * side + (dx + r) as usize;
                match self.offset(me, dx, dy) {
                    None => {
                        obs[idx] = SENTINEL;
                        obs[side * side + idx] = SENTINEL;
                    }
                    Some(c) => {
                        if self.agents.contains(&c) {
                            obs[idx] = 1.0;
                        }
                        if self.prey.iter().flatten().any(|&p| p == c) {
                            obs[side * side + idx] = 1.0;
                        }
                    }
                }
            }
        }
        Ok(obs)
    }

    pub fn state_dim(&self) -> usize {
        2 * self.config.width * self.config.height
    }

    /// Full-grid agent and prey occupancy.
    pub fn state(&self) -> Vec<f64> {
        let cells = self.config.width * self.config.height;
        let mut s = vec![0.0; 2 * cells];
        for &(x, y) in &self.agents {
            s[y * self.config.width + x] = 1.0;
        }
        for &(x, y) in self.prey.iter().flatten() {
            s[cells + y * self.config.width + x] = 1.0;
        }
        s
    }
}

/// Cooperative one-shot game with a shared payoff table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixGame {
    payoff: DenseTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClimbConfig {
    pub agents: usize,
    pub actions: usize,
    pub success_reward: f64,
    pub penalty: f64,
    /// Multiply the penalty by the number of agents that tried to capture.
    pub scale_penalty: bool,
}

impl Default for ClimbConfig {
    fn default() -> Self {
        ClimbConfig { agents: 3, actions: 4, success_reward: 10.0, penalty: -1.5, scale_penalty: true }
    }
}

impl MatrixGame {
    pub fn new(payoff: DenseTensor) -> Result<Self> {
        if payoff.actions() < 2 || payoff.modes() == 0 {
            return Err(Error::Env("matrix game needs at least one agent and two actions".into()));
        }
        let size = (payoff.actions() as u128).pow(payoff.modes() as u32);
        if size > MAX_GAME_ENTRIES {
            return Err(Error::Budget { size, budget: MAX_GAME_ENTRIES });
        }
        Ok(MatrixGame { payoff })
    }

    /// Action 0 is "capture", the others are idle. Full participation earns
    /// the success reward; partial participation is penalised.
    pub fn climb(config: &ClimbConfig) -> Result<Self> {
        let (n, a) = (config.agents, config.actions);
        if n == 0 || a < 2 {
            return Err(Error::Env("climb game needs at least one agent and two actions".into()));
        }
        let size = (a as u128).pow(n as u32);
        if size > MAX_GAME_ENTRIES {
            return Err(Error::Budget { size, budget: MAX_GAME_ENTRIES });
        }
        let values = (0..size as usize)
            .map(|mut idx| {
                let mut k = 0;
                for _ in 0..n {
                    k += usize::from(idx % a == 0);
                    idx /= a;
                }
                if k == n {
                    config.success_reward
                } else if k == 0 {
                    0.0
                } else if config.scale_penalty {
                    config.penalty * k as f64
                } else {
                    config.penalty
                }
            })
            .collect();
        Self::new(DenseTensor::new(n, a, values)?)
    }

    pub fn n_agents(&self) -> usize {
        self.payoff.modes()
    }

    pub fn actions(&self) -> usize {
        self.payoff.actions()
    }

    pub fn payoff(&self, joint: &[usize]) -> Result<f64> {
        self.payoff.lookup(joint)
    }

    pub fn table(&self) -> &DenseTensor {
        &self.payoff
    }
}

/// Exhaustive best joint action; ties go to the first in row-major order.
pub fn oracle_optimal(game: &MatrixGame) -> (Vec<usize>, f64) {
    let (n, a) = (game.n_agents(), game.actions());
    let (best_idx, best) = game
        .table()
        .values()
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let mut joint = vec![0; n];
    let mut idx = best_idx;
    for slot in joint.iter_mut().rev() {
        *slot = idx % a;
        idx /= a;
    }
    (joint, best)
}

/// Environment selected by a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvConfig {
    PredatorPrey(GridConfig),
    Climb(ClimbConfig),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::PredatorPrey(GridConfig::default())
    }
}

#[derive(Debug, Clone)]
pub enum Env {
    Grid(Box<GridWorld>),
    Matrix { game: MatrixGame, finished: bool },
}

impl Env {
    pub fn from_config(config: &EnvConfig, seed: u64) -> Result<Self> {
        Ok(match config {
            EnvConfig::PredatorPrey(g) => Env::Grid(Box::new(GridWorld::new(g.clone(), seed)?)),
            EnvConfig::Climb(c) => Env::Matrix { game: MatrixGame::climb(c)?, finished: false },
        })
    }

    pub fn n_agents(&self) -> usize {
        match self {
            Env::Grid(g) => g.config().agents,
            Env::Matrix { game, .. } => game.n_agents(),
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            Env::Grid(_) => AgentAction::ALL.len(),
            Env::Matrix { game, .. } => game.actions(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Env::Grid(g) => g.obs_dim(),
            Env::Matrix { .. } => 1,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Env::Grid(g) => g.state_dim(),
            Env::Matrix { .. } => 1,
        }
    }

    pub fn episode_limit(&self) -> usize {
        match self {
            Env::Grid(g) => g.config().time_limit,
            Env::Matrix { .. } => 1,
        }
    }

    pub fn reset(&mut self, seed: u64) {
        match self {
            Env::Grid(g) => g.reset(seed),
            Env::Matrix { finished, .. } => *finished = false,
        }
    }

    pub fn observations(&self) -> Result<Vec<Vec<f64>>> {
        match self {
            Env::Grid(g) => (0..g.config().agents).map(|i| g.observe(i)).collect(),
            Env::Matrix { game, .. } => Ok(vec![vec![1.0]; game.n_agents()]),
        }
    }

    pub fn state(&self) -> Vec<f64> {
        match self {
            Env::Grid(g) => g.state(),
            Env::Matrix { .. } => vec![1.0],
        }
    }

    pub fn step(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        match self {
            Env::Grid(g) => g.step(actions),
            Env::Matrix { game, finished } => {
                if *finished {
                    return Err(Error::Env("episode is over; reset first".into()));
                }
                if actions.len() != game.n_agents() {
                    return Err(Error::Env(format!("expected {} actions, got {}", game.n_agents(), actions.len())));
                }
                let reward = game.payoff(actions)?;
                *finished = true;
                Ok(StepOutcome { reward, done: true, events: Vec::new() })
            }
        }
    }
}
