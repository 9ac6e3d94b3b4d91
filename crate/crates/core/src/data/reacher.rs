use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Env, Quality, Step};
use crate::error::{Error, Result};
use crate::model::ActionSpace;

const KP: f64 = 2.0;
const KD: f64 = 3.0;
const MEDIUM_NOISE: f64 = 0.5;

/// Point mass chasing a goal. State is `[px, py, vx, vy, gx, gy]`.
#[derive(Clone, Debug)]
pub struct Reacher {
    max_len: usize,
    pos: [f64; 2],
    vel: [f64; 2],
    goal: [f64; 2],
    t: usize,
}

impl Reacher {
    pub fn new(max_len: usize) -> Self {
        Self {
            max_len,
            pos: [0.0; 2],
            vel: [0.0; 2],
            goal: [0.0; 2],
            t: 0,
        }
    }

    fn state(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1], self.goal[0], self.goal[1]]
    }

    fn expert(&self) -> [f64; 2] {
        std::array::from_fn(|i| (KP * (self.goal[i] - self.pos[i]) - KD * self.vel[i]).clamp(-1.0, 1.0))
    }
}

impl Env for Reacher {
    fn state_dim(&self) -> usize {
        6
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.pos = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        self.vel = [0.0; 2];
        self.goal = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        self.t = 0;
        self.state()
    }

    /// Actions are clipped to `[-1, 1]`.
    fn step(&mut self, action: &[f64]) -> Result<Step> {
        if action.len() != 2 || action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Rollout(format!("invalid reacher action {action:?}")));
        }
        for i in 0..2 {
            let a = action[i].clamp(-1.0, 1.0);
            self.pos[i] += 0.1 * self.vel[i];
            self.vel[i] = 0.9 * self.vel[i] + 0.1 * a;
        }
        self.t += 1;
        let reward = -((self.pos[0] - self.goal[0]).powi(2) + (self.pos[1] - self.goal[1]).powi(2)).sqrt();
        let done = self.t >= self.max_len;
        Ok(Step {
            state: self.state(),
            reward,
            done,
            terminal: false,
        })
    }

    fn behavior_action(&self, quality: Quality, _episode_expert: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match quality {
            Quality::Random => vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            Quality::Expert => self.expert().to_vec(),
            Quality::Medium => {
                let noise = Normal::new(0.0, MEDIUM_NOISE).expect("valid sigma");
                self.expert()
                    .iter()
                    .map(|a| (a + noise.sample(rng)).clamp(-1.0, 1.0))
                    .collect()
            }
        }
    }
}
