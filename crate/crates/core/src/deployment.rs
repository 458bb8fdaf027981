//! Hierarchical composition of the two policies.
//!
//! Each step the planner proposes a stroke on its imaginary canvas, the
//! executor realizes it on the kinematic chain, the reached pentip pose is
//! perturbed by an execution-noise model, and the simulated real canvas
//! receives ink wherever the pen is in contact with the surface. With
//! synchronization on, the imaginary canvas and pen position are updated
//! from the real reached pixel, so the two canvases stay identical by
//! construction; without it the planner trusts its own commanded targets
//! and the canvases drift apart under noise.
//!
//! All deployment poses are expressed in the canvas frame: centimeters,
//! origin at pixel (0, 0), z = 0 on the drawing surface.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::canvas::{
    physical_to_pixel, pixel_to_physical, rasterize_segment_into, Canvas, CanvasMapping,
    PhysicalCoord, PixelCoord,
};
use crate::commander::{
    command_from_policy_action, commander_goal_features, commander_state_features, decode_offset,
    CommanderEpisodeConfig, StrokeCommand,
};
use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, JointVector, KinematicChain, PenPose};
use crate::nn::GaussianPolicy;
use crate::stroker::{
    action_from_policy, execute_action, stroker_goal_features, stroker_state_features,
    StrokerAction, StrokerConfig, StrokerGoal,
};

/// Gaussian execution-error model applied to the reached pentip pose.
/// Zero sigmas mean perfect execution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub pos_sigma_cm: f64,
    pub rot_sigma_rad: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { pos_sigma_cm: 0.0, rot_sigma_rad: 0.0, seed: 0 }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if self.pos_sigma_cm < 0.0 || self.rot_sigma_rad < 0.0 {
            return Err(Error::InvalidValue("noise sigmas must be >= 0".into()));
        }
        Ok(())
    }

    pub fn sampler(&self) -> NoiseSampler {
        NoiseSampler {
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            pos_sigma: self.pos_sigma_cm,
            rot_sigma: self.rot_sigma_rad,
        }
    }
}

pub struct NoiseSampler {
    rng: ChaCha8Rng,
    pos_sigma: f64,
    rot_sigma: f64,
}

impl NoiseSampler {
    pub fn perturb(&mut self, pose: PenPose) -> PenPose {
        if self.pos_sigma == 0.0 && self.rot_sigma == 0.0 {
            return pose;
        }
        let mut draw = |sigma: f64| -> f64 {
            let z: f64 = self.rng.sample(StandardNormal);
            z * sigma
        };
        PenPose {
            position: PhysicalCoord::new(
                pose.position.x + draw(self.pos_sigma),
                pose.position.y + draw(self.pos_sigma),
                pose.position.z + draw(self.pos_sigma),
            ),
            roll: pose.roll + draw(self.rot_sigma),
            pitch: pose.pitch + draw(self.rot_sigma),
        }
    }
}

/// True when the pen is touching the surface: |z| within the threshold
/// (closed boundary).
pub fn contact_test(pose: &PenPose, threshold_cm: f64) -> bool {
    pose.position.z.abs() <= threshold_cm
}

/// Stroke-planning policy as used at deployment.
pub trait CommanderActor {
    fn act(&mut self, canvas: &Canvas, pos: PixelCoord, goal: &Canvas) -> Result<StrokeCommand>;
}

/// Trained planner wrapper (deterministic policy mode).
pub struct PolicyCommander {
    pub policy: GaussianPolicy,
}

impl CommanderActor for PolicyCommander {
    fn act(&mut self, canvas: &Canvas, pos: PixelCoord, goal: &Canvas) -> Result<StrokeCommand> {
        let mut feats = commander_state_features(canvas, pos);
        feats.extend(commander_goal_features(goal));
        let obs = ndarray::Array2::from_shape_vec((1, feats.len()), feats)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        let action = self.policy.deterministic(obs.view())?;
        Ok(command_from_policy_action(action.row(0).as_slice().expect("contiguous row")))
    }
}

/// Scripted planner for tests: replays a fixed command sequence.
pub struct ScriptedCommander {
    pub commands: Vec<StrokeCommand>,
    pub next: usize,
}

impl CommanderActor for ScriptedCommander {
    fn act(&mut self, _canvas: &Canvas, _pos: PixelCoord, _goal: &Canvas) -> Result<StrokeCommand> {
        let cmd = self.commands[self.next % self.commands.len()];
        self.next += 1;
        Ok(cmd)
    }
}

/// Result of executing one stroke, before execution noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecutedStroke {
    /// Reached pentip pose in the canvas frame.
    pub reached: PenPose,
    pub action: Option<StrokerAction>,
}

/// Low-level stroke execution: tracks its own arm/pen state between calls.
pub trait StrokeExecutor {
    /// Controller's current pentip estimate (canvas frame).
    fn pen_pose(&self) -> PenPose;
    fn execute(&mut self, goal: &StrokerGoal) -> Result<ExecutedStroke>;
}

/// Trained joint-space executor: runs the policy for one step on the chain.
pub struct PolicyStrokerExecutor {
    pub policy: GaussianPolicy,
    pub chain: KinematicChain,
    pub cfg: StrokerConfig,
    pub joints: JointVector,
    /// World-frame cm position of canvas pixel (0,0) at surface height.
    pub canvas_origin_cm: [f64; 3],
}

impl PolicyStrokerExecutor {
    fn to_canvas_frame(&self, pose: PenPose) -> PenPose {
        PenPose {
            position: PhysicalCoord::new(
                pose.position.x - self.canvas_origin_cm[0],
                pose.position.y - self.canvas_origin_cm[1],
                pose.position.z - self.canvas_origin_cm[2],
            ),
            roll: pose.roll,
            pitch: pose.pitch,
        }
    }
}

impl StrokeExecutor for PolicyStrokerExecutor {
    fn pen_pose(&self) -> PenPose {
        let pose = forward_kinematics(&self.chain, &self.joints).expect("joints within limits");
        self.to_canvas_frame(pose)
    }

    fn execute(&mut self, goal: &StrokerGoal) -> Result<ExecutedStroke> {
        let mut feats = stroker_state_features(&self.joints);
        feats.extend(stroker_goal_features(goal));
        let obs = ndarray::Array2::from_shape_vec((1, feats.len()), feats)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        let policy_action = self.policy.deterministic(obs.view())?;
        let action = action_from_policy(
            policy_action.row(0).as_slice().expect("contiguous row"),
            self.cfg.delta_max,
        );
        let (joints, pose) = execute_action(&self.chain, &self.joints, &action, &self.cfg)?;
        self.joints = joints;
        Ok(ExecutedStroke { reached: self.to_canvas_frame(pose), action: Some(action) })
    }
}

/// Oracle executor that reaches every goal exactly: planar displacement is
/// added to the current pose, z goes straight to the goal height, rotation
/// snaps to the preferred tilt.
pub struct PerfectStrokerExecutor {
    pub pose: PenPose,
}

impl PerfectStrokerExecutor {
    pub fn starting_at(position: PhysicalCoord) -> Self {
        Self { pose: PenPose { position, roll: 0.1, pitch: 0.1 } }
    }
}

impl StrokeExecutor for PerfectStrokerExecutor {
    fn pen_pose(&self) -> PenPose {
        self.pose
    }

    fn execute(&mut self, goal: &StrokerGoal) -> Result<ExecutedStroke> {
        self.pose = PenPose {
            position: PhysicalCoord::new(
                self.pose.position.x + goal.target[0],
                self.pose.position.y + goal.target[1],
                goal.target[2],
            ),
            roll: self.pose.roll,
            pitch: self.pose.pitch,
        };
        Ok(ExecutedStroke { reached: self.pose, action: None })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeploymentConfig {
    pub mapping: CanvasMapping,
    pub commander: CommanderEpisodeConfig,
    /// Pen-up hover height above the surface, cm.
    pub hover_height_cm: f64,
    pub contact_threshold_cm: f64,
    pub sync: bool,
}

impl Default for DeploymentConfig {
    fn default() -> Self {
        Self {
            mapping: CanvasMapping::default(),
            commander: CommanderEpisodeConfig::default(),
            hover_height_cm: 1.0,
            contact_threshold_cm: 0.2,
            sync: true,
        }
    }
}

/// Sketch trace header: everything a replay needs besides the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub width: u32,
    pub height: u32,
    pub mapping: CanvasMapping,
    pub sync: bool,
    pub contact_threshold_cm: f64,
    pub start_pos: PixelCoord,
    pub initial_pen: PenPose,
}

/// One deployment step. `reached` is the noisy real pose (canvas frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u32,
    pub command: StrokeCommand,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action: Option<StrokerAction>,
    pub reached: PenPose,
    pub commanded_px: PixelCoord,
    pub synced_px: PixelCoord,
    pub contact: bool,
    pub imaginary_hash: String,
    pub real_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchTrace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

impl SketchTrace {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let head = serde_json::to_string(&self.header)
            .map_err(|e| Error::InvalidValue(format!("trace header serialize: {e}")))?;
        writeln!(w, "{head}")?;
        for r in &self.records {
            let line = serde_json::to_string(r)
                .map_err(|e| Error::InvalidValue(format!("trace record serialize: {e}")))?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 1, msg: "empty trace".into() })?;
        let header: TraceHeader = serde_json::from_str(&first?)
            .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
            records.push(rec);
        }
        Ok(Self { header, records })
    }
}

#[derive(Debug, Clone)]
pub struct SketchOutcome {
    pub real: Canvas,
    pub imaginary: Canvas,
    pub trace: SketchTrace,
}

fn pen_pixel(pose: &PenPose, mapping: &CanvasMapping) -> Result<PixelCoord> {
    physical_to_pixel(
        PhysicalCoord::new(pose.position.x, pose.position.y, 0.0),
        mapping,
    )
}

/// Run one full sketch episode.
///
/// Per step: the planner acts on (imaginary canvas, pen position, target);
/// its command becomes the executor's goal (planar displacement anchored at
/// the current imaginary pixel center, z = surface or hover); the reached
/// pose is perturbed by the noise model; the real canvas receives the
/// segment between consecutive real pixels whenever the pen is in contact.
/// With sync the imaginary canvas follows the real pixel and contact state,
/// otherwise the commanded target and pen flag.
pub fn sketch(
    target: &Canvas,
    commander: &mut dyn CommanderActor,
    executor: &mut dyn StrokeExecutor,
    noise: &NoiseModel,
    cfg: &DeploymentConfig,
) -> Result<SketchOutcome> {
    cfg.commander.validate()?;
    cfg.mapping.validate()?;
    noise.validate()?;
    let n = cfg.mapping.pixels_per_side;
    if target.width() != n || target.height() != n {
        return Err(Error::DimensionMismatch(format!(
            "target {}x{} does not match configured {n}x{n} canvas",
            target.width(),
            target.height()
        )));
    }
    let mut sampler = noise.sampler();
    let mut imaginary = Canvas::new(n, n)?;
    let mut real = Canvas::new(n, n)?;

    let initial_pen = executor.pen_pose();
    let start_pos = pen_pixel(&initial_pen, &cfg.mapping)?;
    let mut pos_im = start_pos;
    let mut prev_real_px = start_pos;

    let max_center = cfg.mapping.max_center_cm();
    let mut records = Vec::with_capacity(cfg.commander.episode_length as usize);

    for step in 0..cfg.commander.episode_length {
        let command = commander.act(&imaginary, pos_im, target)?;
        let decoded = decode_offset(&command, &cfg.commander);
        let commanded_px = crate::commander::apply_offset(
            pos_im,
            decoded.offset_px,
            imaginary.width(),
            imaginary.height(),
        );

        // physical target: continuous offset anchored at the current
        // imaginary pixel center, clamped to the canvas extent
        let anchor = pixel_to_physical(pos_im, &cfg.mapping)?;
        let cmpp = cfg.mapping.cm_per_pixel();
        let target_x = (anchor.x + decoded.offset_continuous.0 * cmpp).clamp(0.0, max_center);
        let target_y = (anchor.y + decoded.offset_continuous.1 * cmpp).clamp(0.0, max_center);
        let target_z = if decoded.pen_down { 0.0 } else { cfg.hover_height_cm };

        let pen = executor.pen_pose();
        let goal = StrokerGoal {
            command,
            target: [target_x - pen.position.x, target_y - pen.position.y, target_z],
        };
        let executed = executor.execute(&goal)?;
        let real_pose = sampler.perturb(executed.reached);
        let real_px = pen_pixel(&real_pose, &cfg.mapping)?;
        let contact = contact_test(&real_pose, cfg.contact_threshold_cm);

        rasterize_segment_into(&mut real, prev_real_px, real_px, contact)?;
        prev_real_px = real_px;

        let synced_px = if cfg.sync { real_px } else { commanded_px };
        if cfg.sync {
            rasterize_segment_into(&mut imaginary, pos_im, real_px, contact)?;
            pos_im = real_px;
        } else {
            rasterize_segment_into(&mut imaginary, pos_im, commanded_px, decoded.pen_down)?;
            pos_im = commanded_px;
        }

        records.push(TraceRecord {
            step,
            command,
            action: executed.action,
            reached: real_pose,
            commanded_px,
            synced_px,
            contact,
            imaginary_hash: imaginary.content_hash(),
            real_hash: real.content_hash(),
        });
    }

    let trace = SketchTrace {
        header: TraceHeader {
            width: n,
            height: n,
            mapping: cfg.mapping,
            sync: cfg.sync,
            contact_threshold_cm: cfg.contact_threshold_cm,
            start_pos,
            initial_pen,
        },
        records,
    };
    Ok(SketchOutcome { real, imaginary, trace })
}

/// Rebuild both canvases from a trace. The recorded per-step hashes are
/// verified along the way; a mismatch means the trace is corrupt.
pub fn replay_trace(trace: &SketchTrace) -> Result<(Canvas, Canvas)> {
    let h = &trace.header;
    let mut imaginary = Canvas::new(h.width, h.height)?;
    let mut real = Canvas::new(h.width, h.height)?;
    let mut pos_im = h.start_pos;
    let mut prev_real_px = h.start_pos;
    for rec in &trace.records {
        let real_px = pen_pixel(&rec.reached, &h.mapping)?;
        let contact = contact_test(&rec.reached, h.contact_threshold_cm);
        if contact != rec.contact || real_px != rec.synced_px && h.sync {
            return Err(Error::InvalidValue(format!(
                "trace record {} inconsistent with its header",
                rec.step
            )));
        }
        rasterize_segment_into(&mut real, prev_real_px, real_px, contact)?;
        prev_real_px = real_px;
        if h.sync {
            rasterize_segment_into(&mut imaginary, pos_im, real_px, contact)?;
            pos_im = real_px;
        } else {
            rasterize_segment_into(&mut imaginary, pos_im, rec.commanded_px, rec.command.pen_down())?;
            pos_im = rec.commanded_px;
        }
        if imaginary.content_hash() != rec.imaginary_hash || real.content_hash() != rec.real_hash {
            return Err(Error::InvalidValue(format!(
                "replay hash mismatch at step {}",
                rec.step
            )));
        }
    }
    Ok((imaginary, real))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commander::CommanderEnv;
    use crate::similarity::SimilarityProvider;
    use rand::Rng;

    fn small_cfg(sync: bool) -> DeploymentConfig {
        DeploymentConfig {
            mapping: CanvasMapping { pixels_per_side: 16, centimeters_per_side: 8.0 },
            commander: CommanderEpisodeConfig {
                episode_length: 20,
                boundary_side: 6,
                start_pos: None,
            },
            hover_height_cm: 1.0,
            contact_threshold_cm: 0.2,
            sync,
        }
    }

    fn random_commands(n: usize, seed: u64) -> Vec<StrokeCommand> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                StrokeCommand::new(
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                )
            })
            .collect()
    }

    fn perfect_executor_at_center(cfg: &DeploymentConfig) -> PerfectStrokerExecutor {
        let center = PixelCoord::new(cfg.mapping.pixels_per_side / 2, cfg.mapping.pixels_per_side / 2);
        let pos = pixel_to_physical(center, &cfg.mapping).unwrap();
        PerfectStrokerExecutor::starting_at(PhysicalCoord::new(pos.x, pos.y, 1.0))
    }

    #[test]
    fn contact_examples() {
        let pose = |z: f64| PenPose { position: PhysicalCoord::new(0.0, 0.0, z), roll: 0.0, pitch: 0.0 };
        assert!(contact_test(&pose(0.0), 0.2));
        assert!(!contact_test(&pose(1.0), 0.2));
        assert!(contact_test(&pose(0.2), 0.2)); // closed boundary
        assert!(contact_test(&pose(-0.15), 0.2));
    }

    #[test]
    fn perfect_execution_matches_commander_rollout_bit_exactly() {
        let cfg = small_cfg(true);
        let commands = random_commands(20, 4);
        let target = {
            let mut c = Canvas::new(16, 16).unwrap();
            for x in 3..12 {
                c.set(PixelCoord::new(x, 8), true).unwrap();
            }
            c
        };

        // pure planner rollout on the imaginary environment
        let mut env = CommanderEnv::reset(target.clone(), cfg.commander).unwrap();
        let sim = SimilarityProvider::L2;
        for cmd in &commands {
            env.step(cmd, &sim).unwrap();
        }
        let planner_canvas = env.state().canvas.clone();

        for sync in [true, false] {
            let cfg = small_cfg(sync);
            let mut commander = ScriptedCommander { commands: commands.clone(), next: 0 };
            let mut executor = perfect_executor_at_center(&cfg);
            let noise = NoiseModel::default();
            let out = sketch(&target, &mut commander, &mut executor, &noise, &cfg).unwrap();
            assert_eq!(out.real, planner_canvas, "sync = {sync}");
            assert_eq!(out.imaginary, planner_canvas, "sync = {sync}");
        }
    }

    #[test]
    fn sync_keeps_canvases_identical_under_any_noise() {
        let cfg = small_cfg(true);
        for (seed, sigma) in [(1u64, 0.3), (2, 1.0), (3, 2.5)] {
            let mut commander = ScriptedCommander { commands: random_commands(20, seed), next: 0 };
            let mut executor = perfect_executor_at_center(&cfg);
            let noise = NoiseModel { pos_sigma_cm: sigma, rot_sigma_rad: 0.1, seed };
            let out = sketch(
                &Canvas::new(16, 16).unwrap(),
                &mut commander,
                &mut executor,
                &noise,
                &cfg,
            )
            .unwrap();
            assert_eq!(out.real, out.imaginary);
            // and at every intermediate step, via the recorded hashes
            for rec in &out.trace.records {
                assert_eq!(rec.imaginary_hash, rec.real_hash);
            }
        }
    }

    #[test]
    fn without_sync_canvases_disagree_more_than_with_sync() {
        let mut sync_disagreement = 0.0;
        let mut nosync_disagreement = 0.0;
        for seed in 0..20u64 {
            for sync in [true, false] {
                let cfg = small_cfg(sync);
                let mut commander =
                    ScriptedCommander { commands: random_commands(20, 1000 + seed), next: 0 };
                let mut executor = perfect_executor_at_center(&cfg);
                let noise = NoiseModel { pos_sigma_cm: 1.0, rot_sigma_rad: 0.0, seed };
                let out = sketch(
                    &Canvas::new(16, 16).unwrap(),
                    &mut commander,
                    &mut executor,
                    &noise,
                    &cfg,
                )
                .unwrap();
                let disagreement = out.real.mean_squared_diff(&out.imaginary).unwrap();
                if sync {
                    sync_disagreement += disagreement;
                } else {
                    nosync_disagreement += disagreement;
                }
            }
        }
        assert_eq!(sync_disagreement, 0.0);
        assert!(nosync_disagreement > sync_disagreement);
    }

    #[test]
    fn trace_replay_reproduces_canvases_bit_exactly() {
        let cfg = small_cfg(true);
        let mut commander = ScriptedCommander { commands: random_commands(20, 7), next: 0 };
        let mut executor = perfect_executor_at_center(&cfg);
        let noise = NoiseModel { pos_sigma_cm: 0.7, rot_sigma_rad: 0.05, seed: 7 };
        let target = Canvas::new(16, 16).unwrap();
        let out = sketch(&target, &mut commander, &mut executor, &noise, &cfg).unwrap();

        let (im, real) = replay_trace(&out.trace).unwrap();
        assert_eq!(im, out.imaginary);
        assert_eq!(real, out.real);

        // and across a serialization round trip
        let mut buf = Vec::new();
        out.trace.write(&mut buf).unwrap();
        let back = SketchTrace::read(&buf[..]).unwrap();
        assert_eq!(back, out.trace);
        let (im2, real2) = replay_trace(&back).unwrap();
        assert_eq!(im2, out.imaginary);
        assert_eq!(real2, out.real);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let cfg = small_cfg(true);
        let mut commander = ScriptedCommander { commands: random_commands(5, 1), next: 0 };
        let mut executor = perfect_executor_at_center(&cfg);
        let noise = NoiseModel::default();
        let bad = Canvas::new(8, 8).unwrap();
        assert!(sketch(&bad, &mut commander, &mut executor, &noise, &cfg).is_err());
    }

    #[test]
    fn noise_model_validation_and_zero_passthrough() {
        assert!(NoiseModel { pos_sigma_cm: -0.1, rot_sigma_rad: 0.0, seed: 0 }.validate().is_err());
        let mut sampler = NoiseModel::default().sampler();
        let pose = PenPose { position: PhysicalCoord::new(1.0, 2.0, 3.0), roll: 0.1, pitch: 0.2 };
        assert_eq!(sampler.perturb(pose), pose);
    }
}
