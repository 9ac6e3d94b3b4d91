use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Env, Quality, Step};
use crate::error::{Error, Result};
use crate::model::ActionSpace;

pub const KEYDOOR_ACTIONS: usize = 5;
const NOISE: f64 = 0.1;
/// Stay, up, down, left, right.
const MOVES: [(i64, i64); KEYDOOR_ACTIONS] = [(0, 0), (0, -1), (0, 1), (-1, 0), (1, 0)];

/// Grid world: pick up the key in the last column, then reach the door in the
/// first column. State is `[ax, ay, kx, ky, dx, dy, has_key]`.
#[derive(Clone, Debug)]
pub struct KeyDoor {
    grid: usize,
    max_len: usize,
    sparse: bool,
    agent: (i64, i64),
    key: (i64, i64),
    door: (i64, i64),
    has_key: bool,
    t: usize,
    earned: f64,
}

impl KeyDoor {
    pub fn new(grid: usize, max_len: usize, sparse: bool) -> Result<Self> {
        if grid < 4 {
            return Err(Error::Generation(format!("grid {grid} is smaller than 4")));
        }
        // Worst case shortest path: across to the key and back, plus a full column each way.
        let worst = 4 * (grid - 1);
        if max_len < worst {
            return Err(Error::Generation(format!(
                "max_len {max_len} cannot fit a worst-case solution of {worst} steps on a {grid}x{grid} grid"
            )));
        }
        Ok(Self {
            grid,
            max_len,
            sparse,
            agent: (0, 0),
            key: (0, 0),
            door: (0, 0),
            has_key: false,
            t: 0,
            earned: 0.0,
        })
    }

    fn state(&self) -> Vec<f64> {
        vec![
            self.agent.0 as f64,
            self.agent.1 as f64,
            self.key.0 as f64,
            self.key.1 as f64,
            self.door.0 as f64,
            self.door.1 as f64,
            if self.has_key { 1.0 } else { 0.0 },
        ]
    }

    fn shortest_path_action(&self) -> usize {
        let target = if self.has_key { self.door } else { self.key };
        let (dx, dy) = (target.0 - self.agent.0, target.1 - self.agent.1);
        match (dx.signum(), dy.signum()) {
            (1, _) => 4,
            (-1, _) => 3,
            (0, 1) => 2,
            (0, -1) => 1,
            _ => 0,
        }
    }
}

fn one_hot(i: usize) -> Vec<f64> {
    let mut v = vec![0.0; KEYDOOR_ACTIONS];
    v[i] = 1.0;
    v
}

impl Env for KeyDoor {
    fn state_dim(&self) -> usize {
        7
    }

    fn action_dim(&self) -> usize {
        KEYDOOR_ACTIONS
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let g = self.grid as i64;
        self.agent = (0, rng.random_range(0..g));
        self.key = (g - 1, rng.random_range(0..g));
        self.door = (0, rng.random_range(0..g));
        self.has_key = false;
        self.t = 0;
        self.earned = 0.0;
        self.state()
    }

    /// Takes the argmax of `action`, so one-hot vectors and logits both work.
    fn step(&mut self, action: &[f64]) -> Result<Step> {
        if action.len() != KEYDOOR_ACTIONS || action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Rollout(format!("invalid keydoor action {action:?}")));
        }
        let a = action
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if *v > action[best] { i } else { best });
        let g = self.grid as i64;
        let (mx, my) = MOVES[a];
        self.agent = ((self.agent.0 + mx).clamp(0, g - 1), (self.agent.1 + my).clamp(0, g - 1));
        self.t += 1;
        let mut reward = 0.0;
        let mut terminal = false;
        if !self.has_key && self.agent == self.key {
            self.has_key = true;
            reward += 0.5;
        }
        if self.has_key && self.agent == self.door {
            reward += 0.5;
            terminal = true;
        }
        self.earned += reward;
        let done = terminal || self.t >= self.max_len;
        if self.sparse {
            reward = if done { self.earned } else { 0.0 };
        }
        Ok(Step {
            state: self.state(),
            reward,
            done,
            terminal,
        })
    }

    fn behavior_action(&self, quality: Quality, episode_expert: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let expert = match quality {
            Quality::Random => false,
            Quality::Expert => true,
            Quality::Medium => episode_expert,
        };
        // The noise draw is made on every step so both halves consume the same stream shape.
        let noisy = rng.random_bool(NOISE);
        let uniform = rng.random_range(0..KEYDOOR_ACTIONS);
        if expert && !noisy {
            one_hot(self.shortest_path_action())
        } else {
            one_hot(uniform)
        }
    }
}
