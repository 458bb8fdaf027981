//! Forward kinematics for a configurable 6-joint serial chain.
//!
//! Chains are described by one Denavit-Hartenberg row per link plus a rigid
//! pentip extension from the flange. Link lengths and offsets are meters;
//! pose positions are returned in centimeters (the canvas unit). The pen is
//! rotationally symmetric, so orientation is reported as roll/pitch only.

use nalgebra::{Matrix3, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::canvas::PhysicalCoord;
use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 6;

/// Six joint angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointVector(pub [f64; NUM_JOINTS]);

impl JointVector {
    pub fn zeros() -> Self {
        Self([0.0; NUM_JOINTS])
    }
}

/// One Denavit-Hartenberg row: `a` (link length, m), `alpha` (twist, rad),
/// `d` (offset, m), `theta_offset` (rad, added to the joint variable).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhParams {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    pub theta_offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLimit {
    pub lo: f64,
    pub hi: f64,
}

/// Serial 6-joint chain description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicChain {
    pub links: [DhParams; NUM_JOINTS],
    pub limits: [JointLimit; NUM_JOINTS],
    /// Rigid flange-to-pentip translation in the flange frame, meters.
    pub pentip_offset: [f64; 3],
}

impl KinematicChain {
    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.links.iter().enumerate() {
            if ![l.a, l.alpha, l.d, l.theta_offset].iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidValue(format!("link {i} has non-finite parameters")));
            }
        }
        for (i, lim) in self.limits.iter().enumerate() {
            if !lim.lo.is_finite() || !lim.hi.is_finite() || lim.lo >= lim.hi {
                return Err(Error::InvalidValue(format!(
                    "joint {i} limits must satisfy lo < hi, got [{}, {}]",
                    lim.lo, lim.hi
                )));
            }
        }
        if !self.pentip_offset.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidValue("pentip offset must be finite".into()));
        }
        Ok(())
    }

    pub fn check_limits(&self, joints: &JointVector) -> Result<()> {
        for i in 0..NUM_JOINTS {
            let j = joints.0[i];
            let lim = &self.limits[i];
            if !j.is_finite() || j < lim.lo || j > lim.hi {
                return Err(Error::JointLimits(format!(
                    "joint {i} = {j} outside [{}, {}]",
                    lim.lo, lim.hi
                )));
            }
        }
        Ok(())
    }

    /// Clamp joints into the limit box.
    pub fn clamp_joints(&self, joints: &JointVector) -> JointVector {
        let mut out = *joints;
        for i in 0..NUM_JOINTS {
            out.0[i] = out.0[i].clamp(self.limits[i].lo, self.limits[i].hi);
        }
        out
    }

    /// Total reach (sum of link lengths, offsets, and pentip extension), meters.
    pub fn reach_m(&self) -> f64 {
        let links: f64 = self.links.iter().map(|l| l.a.abs() + l.d.abs()).sum();
        let tip = self.pentip_offset.iter().map(|v| v * v).sum::<f64>().sqrt();
        links + tip
    }

    /// Built-in default chain with UR5e-like proportions and a 15 cm rigid
    /// pen extension. Shipped as plain configuration; any 6-joint chain file
    /// can replace it.
    pub fn default_desk_chain() -> Self {
        let half_pi = std::f64::consts::FRAC_PI_2;
        let links = [
            DhParams { a: 0.0, alpha: half_pi, d: 0.1625, theta_offset: 0.0 },
            DhParams { a: -0.425, alpha: 0.0, d: 0.0, theta_offset: 0.0 },
            DhParams { a: -0.3922, alpha: 0.0, d: 0.0, theta_offset: 0.0 },
            DhParams { a: 0.0, alpha: half_pi, d: 0.1333, theta_offset: 0.0 },
            DhParams { a: 0.0, alpha: -half_pi, d: 0.0997, theta_offset: 0.0 },
            DhParams { a: 0.0, alpha: 0.0, d: 0.0996, theta_offset: 0.0 },
        ];
        let tau = std::f64::consts::TAU;
        let limits = [JointLimit { lo: -tau, hi: tau }; NUM_JOINTS];
        Self { links, limits, pentip_offset: [0.0, 0.0, 0.15] }
    }

    pub fn load_toml(text: &str) -> Result<Self> {
        let file: ChainFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("chain file: {e}")))?;
        if file.link.len() != NUM_JOINTS {
            return Err(Error::Config(format!(
                "chain file must describe exactly {NUM_JOINTS} links, got {}",
                file.link.len()
            )));
        }
        let mut links = [DhParams { a: 0.0, alpha: 0.0, d: 0.0, theta_offset: 0.0 }; NUM_JOINTS];
        let mut limits = [JointLimit { lo: 0.0, hi: 0.0 }; NUM_JOINTS];
        for (i, row) in file.link.iter().enumerate() {
            links[i] =
                DhParams { a: row.a, alpha: row.alpha, d: row.d, theta_offset: row.theta_offset };
            limits[i] = JointLimit { lo: row.limit[0], hi: row.limit[1] };
        }
        let chain = Self { links, limits, pentip_offset: file.pentip_offset };
        chain.validate()?;
        Ok(chain)
    }

    pub fn load_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::load_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        let file = ChainFile {
            pentip_offset: self.pentip_offset,
            link: self
                .links
                .iter()
                .zip(&self.limits)
                .map(|(l, lim)| LinkRow {
                    a: l.a,
                    alpha: l.alpha,
                    d: l.d,
                    theta_offset: l.theta_offset,
                    limit: [lim.lo, lim.hi],
                })
                .collect(),
        };
        toml::to_string(&file).expect("chain serialization cannot fail")
    }
}

#[derive(Serialize, Deserialize)]
struct ChainFile {
    pentip_offset: [f64; 3],
    link: Vec<LinkRow>,
}

#[derive(Serialize, Deserialize)]
struct LinkRow {
    a: f64,
    alpha: f64,
    d: f64,
    theta_offset: f64,
    limit: [f64; 2],
}

/// Pentip pose: position in centimeters (world frame) plus the pen's
/// roll/pitch. Yaw is discarded because the pen is rotationally symmetric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenPose {
    pub position: PhysicalCoord,
    pub roll: f64,
    pub pitch: f64,
}

/// Roll/pitch extracted from a rotation matrix. `gimbal_lock` is set when
/// pitch is within 1e-6 of +-pi/2; roll is then fixed at 0 by convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RollPitch {
    pub roll: f64,
    pub pitch: f64,
    pub gimbal_lock: bool,
}

/// Homogeneous transform for one DH row at joint angle `theta`:
/// RotZ(theta + offset) * TransZ(d) * TransX(a) * RotX(alpha).
pub fn link_transform(dh: &DhParams, theta: f64) -> Matrix4<f64> {
    let t = theta + dh.theta_offset;
    let (st, ct) = t.sin_cos();
    let (sa, ca) = dh.alpha.sin_cos();
    Matrix4::new(
        ct, -st * ca, st * sa, dh.a * ct, //
        st, ct * ca, -ct * sa, dh.a * st, //
        0.0, sa, ca, dh.d, //
        0.0, 0.0, 0.0, 1.0,
    )
}

/// Extract intrinsic roll (about x) and pitch (about y) from a rotation
/// matrix, discarding yaw. The matrix must be orthonormal with determinant 1
/// within 1e-6.
pub fn euler_roll_pitch(rot: &Matrix3<f64>) -> Result<RollPitch> {
    let should_be_identity = rot.transpose() * rot;
    let mut max_dev: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            max_dev = max_dev.max((should_be_identity[(i, j)] - target).abs());
        }
    }
    if max_dev > 1e-6 || (rot.determinant() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidValue(format!(
            "not a proper rotation matrix (orthonormality deviation {max_dev:.2e}, det {})",
            rot.determinant()
        )));
    }
    // ZYX convention: R = Rz(yaw) * Ry(pitch) * Rx(roll); bottom row is
    // (-sin p, cos p sin r, cos p cos r).
    let pitch = (-rot[(2, 0)]).asin();
    let gimbal = (pitch.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-6;
    let roll = if gimbal { 0.0 } else { rot[(2, 1)].atan2(rot[(2, 2)]) };
    Ok(RollPitch { roll, pitch, gimbal_lock: gimbal })
}

/// Build a rotation matrix from roll/pitch with yaw = 0 (inverse of
/// [`euler_roll_pitch`] away from gimbal lock).
pub fn rotation_from_roll_pitch(roll: f64, pitch: f64) -> Matrix3<f64> {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    // Ry(pitch) * Rx(roll)
    Matrix3::new(
        cp,
        sp * sr,
        sp * cr, //
        0.0,
        cr,
        -sr, //
        -sp,
        cp * sr,
        cp * cr,
    )
}

/// Pose of the pentip for the given joints: composes the per-link transforms
/// in order, applies the pentip extension, and reports position (cm) plus
/// roll/pitch. Joints outside the chain's limits are rejected.
pub fn forward_kinematics(chain: &KinematicChain, joints: &JointVector) -> Result<PenPose> {
    chain.check_limits(joints)?;
    let mut t = Matrix4::<f64>::identity();
    for i in 0..NUM_JOINTS {
        t *= link_transform(&chain.links[i], joints.0[i]);
    }
    let tip = t
        * Vector4::new(chain.pentip_offset[0], chain.pentip_offset[1], chain.pentip_offset[2], 1.0);
    let rot = t.fixed_view::<3, 3>(0, 0).into_owned();
    let rp = euler_roll_pitch(&rot)?;
    Ok(PenPose {
        position: PhysicalCoord::new(tip[0] * 100.0, tip[1] * 100.0, tip[2] * 100.0),
        roll: rp.roll,
        pitch: rp.pitch,
    })
}
