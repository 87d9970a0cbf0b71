//! A three-state chain rendered as constant-intensity frames, used to test
//! value learning against a value-iteration oracle: the optimal Q-values of
//! this MDP are short closed-form geometric expressions, so a correct TD
//! learner must land on them.
//!
//! Action 1 advances along the chain, action 0 stays put. Advancing out of
//! the last state pays +1 and ends the episode; everything else pays 0.
//! Episodes are capped so random exploration cannot run forever; with the
//! discount factors used in tests the cap's effect on the optimal values is
//! far below test tolerance.

use super::{check_action, check_live, Environment, Frame, Step};
use crate::error::Result;

pub const CHAIN_STATES: usize = 3;
pub const CHAIN_STEP_CAP: usize = 50;

pub struct ChainEnv {
    side: usize,
    state: usize,
    steps: usize,
    in_episode: bool,
}

impl ChainEnv {
    pub fn new(grid: usize, render_scale: usize, _seed: u64) -> Self {
        ChainEnv { side: grid * render_scale, state: 0, steps: 0, in_episode: false }
    }

    pub fn state(&self) -> usize {
        self.state
    }

    /// The intensity that renders for a given state; exposed so tests can
    /// construct specific-state observations directly.
    pub fn intensity(state: usize) -> u8 {
        (((state + 1) * 255) / (CHAIN_STATES + 1)) as u8
    }

    fn render(&self) -> Frame {
        Frame::filled(self.side, self.side, Self::intensity(self.state))
    }
}

impl Environment for ChainEnv {
    fn name(&self) -> &'static str {
        "chain"
    }

    fn num_actions(&self) -> usize {
        2
    }

    fn frame_shape(&self) -> (usize, usize) {
        (self.side, self.side)
    }

    fn reset(&mut self) -> Frame {
        self.state = 0;
        self.steps = 0;
        self.in_episode = true;
        self.render()
    }

    fn step(&mut self, action: usize) -> Result<Step> {
        check_live(self.in_episode)?;
        check_action(action, self.num_actions())?;
        self.steps += 1;
        let mut reward = 0.0;
        let mut terminal = false;
        if action == 1 {
            if self.state == CHAIN_STATES - 1 {
                reward = 1.0;
                terminal = true;
            } else {
                self.state += 1;
            }
        }
        if self.steps >= CHAIN_STEP_CAP {
            terminal = true;
        }
        if terminal {
            self.in_episode = false;
        }
        Ok(Step { frame: self.render(), reward, terminal })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advancing_three_times_pays_one() {
        let mut env = ChainEnv::new(12, 2, 0);
        env.reset();
        assert_eq!(env.step(1).unwrap().reward, 0.0);
        assert_eq!(env.step(1).unwrap().reward, 0.0);
        let s = env.step(1).unwrap();
        assert_eq!(s.reward, 1.0);
        assert!(s.terminal);
    }

    #[test]
    fn staying_forever_hits_the_cap_unrewarded() {
        let mut env = ChainEnv::new(12, 2, 0);
        env.reset();
        for i in 1..=CHAIN_STEP_CAP {
            let s = env.step(0).unwrap();
            assert_eq!(s.reward, 0.0);
            assert_eq!(s.terminal, i == CHAIN_STEP_CAP);
        }
    }

    #[test]
    fn frames_are_constant_and_distinct_per_state() {
        let mut env = ChainEnv::new(12, 2, 0);
        let f0 = env.reset();
        assert!(f0.pixels.iter().all(|&p| p == ChainEnv::intensity(0)));
        let f1 = env.step(1).unwrap().frame;
        assert!(f1.pixels.iter().all(|&p| p == ChainEnv::intensity(1)));
        assert_ne!(ChainEnv::intensity(0), ChainEnv::intensity(1));
        assert_ne!(ChainEnv::intensity(1), ChainEnv::intensity(2));
    }
}
