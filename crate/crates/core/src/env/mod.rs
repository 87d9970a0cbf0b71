//! Desk-scale pixel environments standing in for ATARI games, plus the
//! preprocessing and transduction pipeline that turns their frames into
//! teacher observations and single-bit student features.
//!
//! Environments are pure state machines: construction seed plus action
//! sequence determines every frame, reward, and terminal flag, which is what
//! makes episode logs replayable in tests.

mod catch;
mod chain;
mod minipong;
pub mod log;
mod pipeline;

pub use catch::CatchEnv;
pub use chain::ChainEnv;
pub use minipong::MiniPongEnv;
pub use pipeline::{bilinear_resize, preprocess, transduce, transduce_bits, FrameStack, STACK};

use crate::error::{Error, Result};

/// One grayscale screen.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn filled(height: usize, width: usize, v: u8) -> Self {
        Frame { height, width, pixels: vec![v; height * width] }
    }

    /// Paints one logical grid cell as a `scale`-by-`scale` bright block.
    fn paint_cell(&mut self, row: usize, col: usize, scale: usize) {
        for y in row * scale..(row + 1) * scale {
            for x in col * scale..(col + 1) * scale {
                self.pixels[y * self.width + x] = 255;
            }
        }
    }
}

/// What one environment step returns.
#[derive(Clone, Debug)]
pub struct Step {
    pub frame: Frame,
    pub reward: f64,
    pub terminal: bool,
}

pub trait Environment {
    fn name(&self) -> &'static str;
    fn num_actions(&self) -> usize;
    /// `(height, width)` of rendered frames.
    fn frame_shape(&self) -> (usize, usize);
    /// Starts a new episode and returns its first frame.
    fn reset(&mut self) -> Frame;
    /// Applies one action. Stepping a terminal (or never-reset) episode or
    /// passing an out-of-range action is a usage error.
    fn step(&mut self, action: usize) -> Result<Step>;
}

pub(crate) fn check_action(action: usize, n: usize) -> Result<()> {
    if action >= n {
        return Err(Error::usage(format!("action {action} out of range (0..{n})")));
    }
    Ok(())
}

pub(crate) fn check_live(in_episode: bool) -> Result<()> {
    if !in_episode {
        return Err(Error::usage("step called outside an episode; call reset first".to_string()));
    }
    Ok(())
}

/// Environment registry used by the CLI and by evaluation workers.
pub fn make_env(
    name: &str,
    grid: usize,
    render_scale: usize,
    seed: u64,
) -> Result<Box<dyn Environment>> {
    match name {
        "catch" => Ok(Box::new(CatchEnv::new(grid, render_scale, seed)?)),
        "minipong" => Ok(Box::new(MiniPongEnv::new(grid, render_scale, seed)?)),
        "chain" => Ok(Box::new(ChainEnv::new(grid, render_scale, seed))),
        other => Err(Error::config(format!(
            "unknown environment {other:?} (expected catch, minipong, or chain)"
        ))),
    }
}

/// Everything needed to rebuild an environment plus its observation
/// pipeline deterministically: training loops, evaluation workers, and
/// replay-from-checkpoint all construct instances through this.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvSpec {
    pub name: String,
    pub grid: usize,
    pub render_scale: usize,
    /// Optional preprocessing resize as `(height, width)`.
    pub resize: Option<(usize, usize)>,
}

impl EnvSpec {
    pub fn build(&self, seed: u64) -> Result<Box<dyn Environment>> {
        let env = make_env(&self.name, self.grid, self.render_scale, seed)?;
        if let Some((h, w)) = self.resize {
            if h == 0 || w == 0 {
                return Err(Error::config("resize dimensions must be positive".to_string()));
            }
        }
        Ok(env)
    }

    pub fn preprocess(&self, frame: &Frame) -> crate::Tensor {
        pipeline::preprocess(frame, self.resize)
    }

    /// Shape of stacked observations, `[4, H, W]`.
    pub fn obs_shape(&self) -> Result<[usize; 3]> {
        let env = self.build(0)?;
        let (h, w) = self.resize.unwrap_or(env.frame_shape());
        Ok([STACK, h, w])
    }
}
