//! Rigid-body poses, the disentangled 13+13 action catalog, the initial-pose
//! noise model, and per-DoF error decomposition.
//!
//! Conventions, fixed across the crate:
//! - Rotations are unit quaternions `(w, x, y, z)`, canonicalized to `w >= 0`
//!   after every composition so pose comparison is deterministic.
//! - Rotation deltas compose on the left (`dq * q`) and act about the
//!   object's own center along camera-frame axes, so translation is never
//!   touched by a rotation op and vice versa.
//! - Euler decomposition is intrinsic x-y-z: `R = Rx(a) * Ry(b) * Rz(c)`.

use nalgebra::{Quaternion, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Error;
use crate::Result;

/// Number of ops per action head: 6 axes x 2 magnitudes + identity.
pub const ACTION_COUNT: usize = 13;
/// Catalog index of the no-op in either head.
pub const IDENTITY_ACTION: usize = 12;

/// Object pose: rotation (unit quaternion) + camera-frame translation in
/// meters. `t.z > 0` is required for anything that renders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub q: UnitQuaternion<f64>,
    pub t: Vector3<f64>,
}

/// Flip the quaternion sign so the scalar part is non-negative.
fn canonicalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            q: UnitQuaternion::identity(),
            t: Vector3::zeros(),
        }
    }

    /// Builds a pose, renormalizing and canonicalizing the rotation.
    pub fn new(q: UnitQuaternion<f64>, t: Vector3<f64>) -> Self {
        let qn = UnitQuaternion::new_normalize(q.into_inner());
        Pose {
            q: canonicalize(qn),
            t,
        }
    }

    /// Builds from raw components `(qw, qx, qy, qz, tx, ty, tz)`.
    ///
    /// Quaternions already unit within 1e-9 are kept bit-exact (so text
    /// round trips reproduce the pose exactly); anything else is normalized.
    pub fn from_parts(qw: f64, qx: f64, qy: f64, qz: f64, tx: f64, ty: f64, tz: f64) -> Self {
        let raw = Quaternion::new(qw, qx, qy, qz);
        let q = if (raw.norm() - 1.0).abs() <= 1e-9 {
            UnitQuaternion::new_unchecked(raw)
        } else {
            UnitQuaternion::new_normalize(raw)
        };
        Pose {
            q: canonicalize(q),
            t: Vector3::new(tx, ty, tz),
        }
    }

    /// Applies a delta: rotation `dq * q` (renormalized, canonicalized),
    /// translation `t + dt`. `dq` must be unit.
    pub fn compose(&self, dq: &UnitQuaternion<f64>, dt: &Vector3<f64>) -> Pose {
        let q = UnitQuaternion::new_normalize((dq * self.q).into_inner());
        Pose {
            q: canonicalize(q),
            t: self.t + dt,
        }
    }

    /// Maps an object-frame point into the camera frame: `R x + t`.
    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.q * x + self.t
    }

    /// Angle in radians between this rotation and another.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.q.angle_to(&other.q)
    }

    /// Text form `qw qx qy qz tx ty tz` (shortest round-trip decimals).
    pub fn to_line(&self) -> String {
        let q = self.q.quaternion();
        format!(
            "{} {} {} {} {} {} {}",
            q.w, q.i, q.j, q.k, self.t.x, self.t.y, self.t.z
        )
    }

    /// Parses the 7-number line form. Normalizes the quaternion.
    pub fn parse_line(s: &str) -> Result<Pose> {
        let vals: Vec<f64> = s
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| Error::Parse {
                    line: 1,
                    msg: format!("bad number `{tok}` in pose line"),
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != 7 {
            return Err(Error::Parse {
                line: 1,
                msg: format!("pose line needs 7 numbers, got {}", vals.len()),
            });
        }
        let norm = (vals[0] * vals[0] + vals[1] * vals[1] + vals[2] * vals[2] + vals[3] * vals[3])
            .sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::Parse {
                line: 1,
                msg: "pose quaternion has near-zero norm".into(),
            });
        }
        Ok(Pose::from_parts(
            vals[0], vals[1], vals[2], vals[3], vals[4], vals[5], vals[6],
        ))
    }
}

impl serde::Serialize for Pose {
    /// Serializes as the canonical `qw qx qy qz tx ty tz` line.
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_line())
    }
}

impl<'de> serde::Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let line = String::deserialize(d)?;
        Pose::parse_line(&line).map_err(serde::de::Error::custom)
    }
}

/// Quaternion for intrinsic x-y-z Euler angles: `R = Rx(ax) * Ry(ay) * Rz(az)`.
pub fn quat_from_euler_xyz(ax: f64, ay: f64, az: f64) -> UnitQuaternion<f64> {
    let qx = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), ax);
    let qy = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), ay);
    let qz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), az);
    qx * qy * qz
}

/// Recovers `(ax, ay, az)` with `R = Rx(ax) * Ry(ay) * Rz(az)`.
///
/// `ay` lands in `[-pi/2, pi/2]`; near the gimbal singularity (`|ay|` at
/// 90 degrees) `az` is pinned to 0 and `ax` absorbs the remainder.
pub fn euler_xyz_from_quat(q: &UnitQuaternion<f64>) -> (f64, f64, f64) {
    let m = q.to_rotation_matrix();
    let m = m.matrix();
    let sy = m[(0, 2)].clamp(-1.0, 1.0);
    if sy.abs() > 1.0 - 1e-12 {
        let ay = sy.asin();
        let ax = m[(1, 0)].atan2(m[(1, 1)]);
        (ax, ay, 0.0)
    } else {
        let ay = sy.asin();
        let ax = (-m[(1, 2)]).atan2(m[(2, 2)]);
        let az = (-m[(0, 1)]).atan2(m[(0, 0)]);
        (ax, ay, az)
    }
}

/// One rotation op: a precomputed delta quaternion plus its descriptor.
#[derive(Debug, Clone, Copy)]
pub struct RotOp {
    /// 0=x, 1=y, 2=z; identity op uses 0.
    pub axis: usize,
    /// +1.0 or -1.0; identity op uses 0.0.
    pub sign: f64,
    /// Degrees; 0 for the identity op.
    pub magnitude_deg: f64,
    pub delta: UnitQuaternion<f64>,
}

/// One translation op: a camera-frame delta vector plus its descriptor.
#[derive(Debug, Clone, Copy)]
pub struct TransOp {
    pub axis: usize,
    pub sign: f64,
    /// Meters; 0 for the identity op.
    pub magnitude: f64,
    pub delta: Vector3<f64>,
}

/// The handcrafted action set: 13 rotation ops and 13 translation ops.
///
/// Layout: index `m*6 + axis*2 + s` with magnitude `m` (0 small, 1 large),
/// axis in x/y/z order, sign `s` (0 is `+`, 1 is `-`); index 12 is the no-op.
#[derive(Debug, Clone)]
pub struct ActionCatalog {
    pub rot_ops: Vec<RotOp>,
    pub trans_ops: Vec<TransOp>,
    pub rot_small_deg: f64,
    pub rot_large_deg: f64,
    pub trans_small: f64,
    pub trans_large: f64,
}

fn axis_vector(axis: usize) -> Vector3<f64> {
    match axis {
        0 => Vector3::x(),
        1 => Vector3::y(),
        _ => Vector3::z(),
    }
}

impl ActionCatalog {
    pub fn new(rot_small_deg: f64, rot_large_deg: f64, trans_small: f64, trans_large: f64) -> Self {
        assert!(
            rot_small_deg > 0.0 && rot_large_deg > 0.0 && trans_small > 0.0 && trans_large > 0.0,
            "action magnitudes must be positive"
        );
        let mut rot_ops = Vec::with_capacity(ACTION_COUNT);
        let mut trans_ops = Vec::with_capacity(ACTION_COUNT);
        for (mag_deg, mag_m) in [(rot_small_deg, trans_small), (rot_large_deg, trans_large)] {
            for axis in 0..3 {
                for sign in [1.0, -1.0] {
                    let angle = sign * mag_deg.to_radians();
                    let unit = Unit::new_unchecked(axis_vector(axis));
                    rot_ops.push(RotOp {
                        axis,
                        sign,
                        magnitude_deg: mag_deg,
                        delta: UnitQuaternion::from_axis_angle(&unit, angle),
                    });
                    trans_ops.push(TransOp {
                        axis,
                        sign,
                        magnitude: mag_m,
                        delta: axis_vector(axis) * (sign * mag_m),
                    });
                }
            }
        }
        rot_ops.push(RotOp {
            axis: 0,
            sign: 0.0,
            magnitude_deg: 0.0,
            delta: UnitQuaternion::identity(),
        });
        trans_ops.push(TransOp {
            axis: 0,
            sign: 0.0,
            magnitude: 0.0,
            delta: Vector3::zeros(),
        });
        debug_assert_eq!(rot_ops.len(), ACTION_COUNT);
        ActionCatalog {
            rot_ops,
            trans_ops,
            rot_small_deg,
            rot_large_deg,
            trans_small,
            trans_large,
        }
    }

    /// Index of the op with the opposite axis sign and equal magnitude.
    /// The identity maps to itself.
    pub fn inverse_index(&self, idx: usize) -> usize {
        assert!(idx < ACTION_COUNT, "action index {idx} out of range");
        if idx == IDENTITY_ACTION {
            IDENTITY_ACTION
        } else {
            idx ^ 1
        }
    }
}

impl Default for ActionCatalog {
    /// Small/large steps sized so large ops close the initial noise gap in a
    /// few steps and small ops do the final alignment.
    fn default() -> Self {
        ActionCatalog::new(2.0, 10.0, 0.005, 0.02)
    }
}

/// Applies one rotation op and one translation op to a pose.
///
/// The two components never interact: rotation ops multiply the orientation
/// on the left and leave `t` bit-identical; translation ops add a camera-frame
/// delta and leave `q` bit-identical. Identity indices leave their component
/// untouched (no renormalization round trip).
pub fn apply_action(p: &Pose, rot_idx: usize, trans_idx: usize, cat: &ActionCatalog) -> Pose {
    assert!(rot_idx < ACTION_COUNT, "rotation index {rot_idx} out of range");
    assert!(
        trans_idx < ACTION_COUNT,
        "translation index {trans_idx} out of range"
    );
    let q = if rot_idx == IDENTITY_ACTION {
        p.q
    } else {
        canonicalize(UnitQuaternion::new_normalize(
            (cat.rot_ops[rot_idx].delta * p.q).into_inner(),
        ))
    };
    let t = if trans_idx == IDENTITY_ACTION {
        p.t
    } else {
        p.t + cat.trans_ops[trans_idx].delta
    };
    Pose { q, t }
}

/// Gaussian noise model for initial poses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Per-axis std dev of the Euler perturbation, degrees.
    pub rot_sigma_deg: f64,
    /// Per-axis std dev of the translation perturbation, meters.
    pub trans_sigma: Vector3<f64>,
    /// Per-axis rejection bound, degrees; the whole rotation triple is
    /// redrawn when any axis exceeds it.
    pub rot_reject_deg: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            rot_sigma_deg: 15.0,
            trans_sigma: Vector3::new(0.02, 0.02, 0.05),
            rot_reject_deg: 45.0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.rot_sigma_deg >= 0.0) {
            problems.push("noise.rot_sigma_deg must be >= 0".to_string());
        }
        if !(self.trans_sigma.x >= 0.0 && self.trans_sigma.y >= 0.0 && self.trans_sigma.z >= 0.0) {
            problems.push("noise.trans_sigma components must be >= 0".to_string());
        }
        if !(self.rot_reject_deg > self.rot_sigma_deg) {
            problems.push("noise.rot_reject_deg must exceed noise.rot_sigma_deg".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Cap on rejection-sampling retries before clamping to the bound.
const MAX_REJECTION_ITERS: usize = 1000;

/// Draws a noisy initial pose around `gt`.
///
/// Rotation: per-axis Euler angles from `N(0, rot_sigma^2)`, the triple
/// redrawn while any axis exceeds `rot_reject_deg` in magnitude (clamped
/// after 1000 redraws so the loop terminates). Translation: independent
/// per-axis `N(0, trans_sigma^2)`. Zero sigmas reproduce `gt` exactly.
pub fn sample_initial_pose<R: Rng + ?Sized>(gt: &Pose, cfg: &NoiseConfig, rng: &mut R) -> Pose {
    let rot_dist = Normal::new(0.0, cfg.rot_sigma_deg).expect("valid rot sigma");
    let mut angles_deg = [0.0f64; 3];
    let mut accepted = false;
    for _ in 0..MAX_REJECTION_ITERS {
        for a in &mut angles_deg {
            *a = rot_dist.sample(rng);
        }
        if angles_deg.iter().all(|a| a.abs() <= cfg.rot_reject_deg) {
            accepted = true;
            break;
        }
    }
    if !accepted {
        for a in &mut angles_deg {
            *a = a.clamp(-cfg.rot_reject_deg, cfg.rot_reject_deg);
        }
    }

    let q = if angles_deg.iter().all(|a| *a == 0.0) {
        gt.q
    } else {
        let dq = quat_from_euler_xyz(
            angles_deg[0].to_radians(),
            angles_deg[1].to_radians(),
            angles_deg[2].to_radians(),
        );
        canonicalize(UnitQuaternion::new_normalize((dq * gt.q).into_inner()))
    };

    let mut t = gt.t;
    for axis in 0..3 {
        let sigma = cfg.trans_sigma[axis];
        if sigma > 0.0 {
            let dist = Normal::new(0.0, sigma).expect("valid trans sigma");
            t[axis] += dist.sample(rng);
        }
    }
    Pose { q, t }
}

/// Signed pose error split into its six degrees of freedom.
///
/// Translation errors are `est - gt` per camera axis (meters). Rotation
/// errors are the intrinsic x-y-z Euler angles of the relative rotation
/// `est.q * gt.q^-1`, in degrees, reported as azimuth (x), elevation (y),
/// in-plane (z).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PerDofError {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub d_azimuth_deg: f64,
    pub d_elevation_deg: f64,
    pub d_inplane_deg: f64,
}

pub fn per_dof_error(gt: &Pose, est: &Pose) -> PerDofError {
    let dt = est.t - gt.t;
    let q_rel = est.q * gt.q.inverse();
    let (ax, ay, az) = euler_xyz_from_quat(&q_rel);
    PerDofError {
        dx: dt.x,
        dy: dt.y,
        dz: dt.z,
        d_azimuth_deg: ax.to_degrees(),
        d_elevation_deg: ay.to_degrees(),
        d_inplane_deg: az.to_degrees(),
    }
}
