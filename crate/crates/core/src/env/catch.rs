//! Catch: a ball falls one row per step from a random top column; the
//! paddle on the bottom row moves left/stay/right to intercept. Reward is
//! withheld until the ball reaches the bottom row, then +1 for a catch and
//! -1 for a miss. Every episode lasts exactly `grid - 1` steps.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::{check_action, check_live, Environment, Frame, Step};
use crate::error::{Error, Result};
use crate::rng;

pub struct CatchEnv {
    grid: usize,
    render_scale: usize,
    rng: ChaCha12Rng,
    ball_row: usize,
    ball_col: usize,
    paddle_col: usize,
    in_episode: bool,
}

impl CatchEnv {
    pub fn new(grid: usize, render_scale: usize, seed: u64) -> Result<Self> {
        if grid < 5 {
            return Err(Error::config(format!("catch grid must be >= 5, got {grid}")));
        }
        if render_scale == 0 {
            return Err(Error::config("render_scale must be >= 1".to_string()));
        }
        Ok(CatchEnv {
            grid,
            render_scale,
            rng: rng::stream(seed, rng::streams::ENV),
            ball_row: 0,
            ball_col: 0,
            paddle_col: 0,
            in_episode: false,
        })
    }

    pub fn ball(&self) -> (usize, usize) {
        (self.ball_row, self.ball_col)
    }

    pub fn paddle_col(&self) -> usize {
        self.paddle_col
    }

    /// The provably optimal policy: walk toward the ball's column. The
    /// paddle starts at the center, so the worst-case distance grid/2 always
    /// fits in the grid-1 steps available.
    pub fn scripted_action(&self) -> usize {
        match self.ball_col.cmp(&self.paddle_col) {
            std::cmp::Ordering::Less => 0,
            std::cmp::Ordering::Equal => 1,
            std::cmp::Ordering::Greater => 2,
        }
    }

    fn render(&self) -> Frame {
        let side = self.grid * self.render_scale;
        let mut frame = Frame::filled(side, side, 0);
        frame.paint_cell(self.ball_row, self.ball_col, self.render_scale);
        frame.paint_cell(self.grid - 1, self.paddle_col, self.render_scale);
        frame
    }
}

impl Environment for CatchEnv {
    fn name(&self) -> &'static str {
        "catch"
    }

    fn num_actions(&self) -> usize {
        3
    }

    fn frame_shape(&self) -> (usize, usize) {
        let side = self.grid * self.render_scale;
        (side, side)
    }

    fn reset(&mut self) -> Frame {
        self.ball_row = 0;
        self.ball_col = self.rng.gen_range(0..self.grid);
        self.paddle_col = self.grid / 2;
        self.in_episode = true;
        self.render()
    }

    fn step(&mut self, action: usize) -> Result<Step> {
        check_live(self.in_episode)?;
        check_action(action, self.num_actions())?;
        match action {
            0 => self.paddle_col = self.paddle_col.saturating_sub(1),
            2 => self.paddle_col = (self.paddle_col + 1).min(self.grid - 1),
            _ => {}
        }
        self.ball_row += 1;
        let terminal = self.ball_row == self.grid - 1;
        let reward = if terminal {
            if self.ball_col == self.paddle_col {
                1.0
            } else {
                -1.0
            }
        } else {
            0.0
        };
        if terminal {
            self.in_episode = false;
        }
        Ok(Step { frame: self.render(), reward, terminal })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn episodes_always_last_grid_minus_one_steps() {
        let mut env = CatchEnv::new(12, 2, 3).unwrap();
        let mut action_rng = crate::rng::stream(99, 1);
        for _ in 0..200 {
            env.reset();
            let mut steps = 0;
            loop {
                let s = env.step(action_rng.gen_range(0..3)).unwrap();
                steps += 1;
                assert!(s.terminal == (steps == 11));
                if s.terminal {
                    break;
                }
                assert_eq!(s.reward, 0.0);
            }
        }
    }

    #[test]
    fn scripted_optimal_policy_always_catches() {
        let mut env = CatchEnv::new(12, 2, 4).unwrap();
        let mut total = 0.0;
        for _ in 0..1000 {
            env.reset();
            loop {
                let a = env.scripted_action();
                let s = env.step(a).unwrap();
                if s.terminal {
                    total += s.reward;
                    break;
                }
            }
        }
        assert_eq!(total / 1000.0, 1.0);
    }

    #[test]
    fn fixed_seed_replays_identically() {
        let run = |seed: u64| {
            let mut env = CatchEnv::new(12, 2, seed).unwrap();
            let mut trace = Vec::new();
            for _ in 0..5 {
                trace.push(env.reset());
                loop {
                    let s = env.step(2).unwrap();
                    let done = s.terminal;
                    trace.push(s.frame);
                    if done {
                        break;
                    }
                }
            }
            trace
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }

    #[test]
    fn frames_are_blocks_of_full_brightness() {
        let mut env = CatchEnv::new(12, 2, 5).unwrap();
        let frame = env.reset();
        assert_eq!((frame.height, frame.width), (24, 24));
        let bright = frame.pixels.iter().filter(|&&p| p == 255).count();
        let dark = frame.pixels.iter().filter(|&&p| p == 0).count();
        // ball block + paddle block, each render_scale^2 pixels
        assert_eq!(bright, 2 * 4);
        assert_eq!(bright + dark, 24 * 24);
    }

    #[test]
    fn invalid_action_and_unstarted_episode_are_usage_errors() {
        let mut env = CatchEnv::new(12, 2, 6).unwrap();
        assert!(matches!(env.step(0), Err(Error::Usage(_))));
        env.reset();
        assert!(matches!(env.step(3), Err(Error::Usage(_))));
        // run to terminal, then step again
        loop {
            if env.step(1).unwrap().terminal {
                break;
            }
        }
        assert!(matches!(env.step(1), Err(Error::Usage(_))));
    }

    #[test]
    fn tiny_grids_are_rejected() {
        assert!(matches!(CatchEnv::new(4, 2, 0), Err(Error::Config(_))));
        assert!(matches!(CatchEnv::new(12, 0, 0), Err(Error::Config(_))));
    }
}
