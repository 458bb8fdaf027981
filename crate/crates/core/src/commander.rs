//! Goal-conditioned MDP for stroke planning.
//!
//! State is the imaginary canvas plus the pen position; an action is a
//! (down, dx, dy) triple in [0,1]^3 decoded into a pen-down flag and an
//! offset inside a fixed square reach boundary; the reward is the
//! similarity delta between consecutive canvases against the goal image.

use serde::{Deserialize, Serialize};

use crate::canvas::{
    rasterize_segment_into, round_half_up, Canvas, PixelCoord, StrokeRecord,
};
use crate::error::{Error, Result};
use crate::similarity::SimilarityProvider;

/// Stroke command: pen-down indicator plus normalized offsets. Values are
/// clamped into [0,1] on construction; 0/1 map to the leftmost/bottom and
/// rightmost/top edge of the reach boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrokeCommand {
    down: f64,
    dx: f64,
    dy: f64,
}

impl StrokeCommand {
    pub fn new(down: f64, dx: f64, dy: f64) -> Self {
        let clamp = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        Self { down: clamp(down), dx: clamp(dx), dy: clamp(dy) }
    }

    pub fn down(&self) -> f64 {
        self.down
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    /// Strictly greater than 0.5 draws; 0.5 itself only repositions.
    pub fn pen_down(&self) -> bool {
        self.down > 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommanderEpisodeConfig {
    pub episode_length: u32,
    /// Side length of the square reach boundary, in pixels (even, >= 2).
    pub boundary_side: u32,
    /// Starting pen position; canvas center when absent.
    pub start_pos: Option<PixelCoord>,
}

impl Default for CommanderEpisodeConfig {
    fn default() -> Self {
        Self { episode_length: 50, boundary_side: 10, start_pos: None }
    }
}

impl CommanderEpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episode_length < 1 {
            return Err(Error::InvalidValue("episode_length must be >= 1".into()));
        }
        if self.boundary_side < 2 || self.boundary_side % 2 != 0 {
            return Err(Error::InvalidValue(format!(
                "boundary_side must be even and >= 2, got {}",
                self.boundary_side
            )));
        }
        Ok(())
    }

    pub fn start_for(&self, width: u32, height: u32) -> PixelCoord {
        self.start_pos.unwrap_or(PixelCoord::new(width / 2, height / 2))
    }
}

/// Planner state: imaginary canvas, pen position, step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct CommanderState {
    pub canvas: Canvas,
    pub pos: PixelCoord,
    pub t: u32,
}

/// A decoded stroke command. The continuous offset (pixel units) drives
/// physical execution; the rounded offset drives the imaginary canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedCommand {
    pub pen_down: bool,
    /// (dx - 0.5) * L, (dy - 0.5) * L, unrounded.
    pub offset_continuous: (f64, f64),
    /// Same offset rounded half-up to whole pixels.
    pub offset_px: (i32, i32),
}

/// Map a command to its pen flag and reach-boundary offset.
pub fn decode_offset(cmd: &StrokeCommand, cfg: &CommanderEpisodeConfig) -> DecodedCommand {
    let l = cfg.boundary_side as f64;
    let fx = (cmd.dx - 0.5) * l;
    let fy = (cmd.dy - 0.5) * l;
    DecodedCommand {
        pen_down: cmd.pen_down(),
        offset_continuous: (fx, fy),
        offset_px: (round_half_up(fx) as i32, round_half_up(fy) as i32),
    }
}

/// Clamp `pos + offset` into the canvas.
pub fn apply_offset(pos: PixelCoord, offset: (i32, i32), width: u32, height: u32) -> PixelCoord {
    let x = (pos.x as i64 + offset.0 as i64).clamp(0, width as i64 - 1) as u32;
    let y = (pos.y as i64 + offset.1 as i64).clamp(0, height as i64 - 1) as u32;
    PixelCoord::new(x, y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommanderStep {
    pub reward: f64,
    pub done: bool,
    /// Pixel the pen ended on (the rounded, clamped target).
    pub target: PixelCoord,
    pub pen_down: bool,
}

/// Planner observation features: canvas cells followed by the one-hot pen
/// position channel. Shared by training and deployment so the layouts can
/// never drift apart.
pub fn commander_state_features(canvas: &Canvas, pos: PixelCoord) -> Vec<f64> {
    let mut feats = Vec::with_capacity(2 * canvas.cells().len());
    feats.extend(canvas.cells().iter().map(|&v| v as f64));
    let n = canvas.cells().len();
    let mut one_hot = vec![0.0; n];
    one_hot[(pos.y * canvas.width() + pos.x) as usize] = 1.0;
    feats.extend(one_hot);
    feats
}

pub fn commander_goal_features(goal: &Canvas) -> Vec<f64> {
    goal.cells().iter().map(|&v| v as f64).collect()
}

/// Map a policy-space action (components in (-1, 1)) onto a stroke command
/// (components in [0, 1]).
pub fn command_from_policy_action(action: &[f64]) -> StrokeCommand {
    let scale = |v: f64| (v + 1.0) * 0.5;
    StrokeCommand::new(scale(action[0]), scale(action[1]), scale(action[2]))
}

/// One planning episode over a fixed goal image.
#[derive(Debug, Clone)]
pub struct CommanderEnv {
    cfg: CommanderEpisodeConfig,
    goal: Canvas,
    state: CommanderState,
    done: bool,
    trace: Vec<StrokeRecord>,
}

impl CommanderEnv {
    /// Start an episode: blank canvas, pen at the start position, t = 0.
    pub fn reset(goal: Canvas, cfg: CommanderEpisodeConfig) -> Result<Self> {
        cfg.validate()?;
        let canvas = Canvas::new(goal.width(), goal.height())?;
        let pos = cfg.start_for(goal.width(), goal.height());
        if !canvas.contains(pos) {
            return Err(Error::OutOfBounds(format!(
                "start position ({}, {}) outside {}x{} canvas",
                pos.x,
                pos.y,
                goal.width(),
                goal.height()
            )));
        }
        Ok(Self {
            cfg,
            goal,
            state: CommanderState { canvas, pos, t: 0 },
            done: false,
            trace: Vec::new(),
        })
    }

    pub fn state(&self) -> &CommanderState {
        &self.state
    }

    pub fn goal(&self) -> &Canvas {
        &self.goal
    }

    pub fn config(&self) -> &CommanderEpisodeConfig {
        &self.cfg
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Stroke records for the episode so far, with per-step rewards.
    pub fn trace(&self) -> &[StrokeRecord] {
        &self.trace
    }

    /// Draw (or reposition) one stroke and score it as the similarity delta
    /// against the goal. Stepping a finished episode is an error.
    pub fn step(
        &mut self,
        cmd: &StrokeCommand,
        similarity: &SimilarityProvider,
    ) -> Result<CommanderStep> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let decoded = decode_offset(cmd, &self.cfg);
        let target = apply_offset(
            self.state.pos,
            decoded.offset_px,
            self.state.canvas.width(),
            self.state.canvas.height(),
        );
        let before = similarity.score(&self.state.canvas, &self.goal)?;
        rasterize_segment_into(&mut self.state.canvas, self.state.pos, target, decoded.pen_down)?;
        let after = similarity.score(&self.state.canvas, &self.goal)?;
        let reward = after - before;

        self.trace.push(StrokeRecord {
            down: decoded.pen_down,
            from: self.state.pos,
            to: target,
            reward: Some(reward),
        });
        self.state.pos = target;
        self.state.t += 1;
        self.done = self.state.t == self.cfg.episode_length;
        Ok(CommanderStep { reward, done: self.done, target, pen_down: decoded.pen_down })
    }
}
