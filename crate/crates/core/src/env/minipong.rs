//! MiniPong: single-player wall-pong. The ball starts next to the paddle
//! column moving away, reflects off the top, bottom, and right walls, and
//! the rally (one episode) ends when it returns to column 0, where a
//! two-cell paddle moving up/stay/down must intercept it: +1 on a catch,
//! -1 on a miss.
//!
//! The outbound-then-return trajectory gives every rally 2*grid - 3 steps,
//! long enough that a tracking policy can always close the worst-case
//! initial gap before the ball comes back.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::{check_action, check_live, Environment, Frame, Step};
use crate::error::{Error, Result};
use crate::rng;

pub struct MiniPongEnv {
    grid: usize,
    render_scale: usize,
    rng: ChaCha12Rng,
    ball_row: usize,
    ball_col: usize,
    vel_row: isize,
    vel_col: isize,
    /// Top row of the two-cell paddle in column 0.
    paddle_top: usize,
    in_episode: bool,
}

impl MiniPongEnv {
    pub fn new(grid: usize, render_scale: usize, seed: u64) -> Result<Self> {
        if grid < 5 {
            return Err(Error::config(format!("minipong grid must be >= 5, got {grid}")));
        }
        if render_scale == 0 {
            return Err(Error::config("render_scale must be >= 1".to_string()));
        }
        Ok(MiniPongEnv {
            grid,
            render_scale,
            rng: rng::stream(seed, rng::streams::ENV),
            ball_row: 0,
            ball_col: 0,
            vel_row: 1,
            vel_col: 1,
            paddle_top: 0,
            in_episode: false,
        })
    }

    pub fn ball(&self) -> (usize, usize) {
        (self.ball_row, self.ball_col)
    }

    pub fn velocity(&self) -> (isize, isize) {
        (self.vel_row, self.vel_col)
    }

    pub fn paddle_top(&self) -> usize {
        self.paddle_top
    }

    /// Tracking policy aimed at where the ball will be after this step.
    /// The paddle moves before the ball, so tracking the current row always
    /// trails a receding ball by one cell; the next row is exactly
    /// predictable because bounces only happen on landing.
    pub fn scripted_action(&self) -> usize {
        let target = (self.ball_row as isize + self.vel_row).clamp(0, self.grid as isize - 1);
        if target < self.paddle_top as isize {
            0
        } else if target > self.paddle_top as isize + 1 {
            2
        } else {
            1
        }
    }

    fn render(&self) -> Frame {
        let side = self.grid * self.render_scale;
        let mut frame = Frame::filled(side, side, 0);
        frame.paint_cell(self.ball_row, self.ball_col, self.render_scale);
        frame.paint_cell(self.paddle_top, 0, self.render_scale);
        frame.paint_cell(self.paddle_top + 1, 0, self.render_scale);
        frame
    }
}

impl Environment for MiniPongEnv {
    fn name(&self) -> &'static str {
        "minipong"
    }

    fn num_actions(&self) -> usize {
        3
    }

    fn frame_shape(&self) -> (usize, usize) {
        let side = self.grid * self.render_scale;
        (side, side)
    }

    fn reset(&mut self) -> Frame {
        self.ball_row = self.rng.gen_range(1..self.grid - 1);
        self.ball_col = 1;
        self.vel_row = if self.rng.gen_bool(0.5) { 1 } else { -1 };
        self.vel_col = 1;
        self.paddle_top = self.grid / 2 - 1;
        self.in_episode = true;
        self.render()
    }

    fn step(&mut self, action: usize) -> Result<Step> {
        check_live(self.in_episode)?;
        check_action(action, self.num_actions())?;
        match action {
            0 => self.paddle_top = self.paddle_top.saturating_sub(1),
            2 => self.paddle_top = (self.paddle_top + 1).min(self.grid - 2),
            _ => {}
        }
        self.ball_row = (self.ball_row as isize + self.vel_row) as usize;
        self.ball_col = (self.ball_col as isize + self.vel_col) as usize;
        if self.ball_row == 0 {
            self.vel_row = 1;
        } else if self.ball_row == self.grid - 1 {
            self.vel_row = -1;
        }
        if self.ball_col == self.grid - 1 {
            self.vel_col = -1;
        }
        let terminal = self.ball_col == 0;
        let reward = if terminal {
            if self.ball_row == self.paddle_top || self.ball_row == self.paddle_top + 1 {
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
