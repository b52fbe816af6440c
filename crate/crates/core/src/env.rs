//! The pose-refinement MDP: scene setup, episode reset with a noisy initial
//! pose, step transitions (apply action, render, reward, terminate), and the
//! 4-channel mask-space observation.
//!
//! The observation replaces an RGB render with a crop of four aligned
//! channels: target mask, current rendered mask, the reference bounding box
//! as a filled mask, and the signed difference target - current. The crop
//! window is the union bounding box of the three spatial inputs expanded by
//! 20% (10% per side, integer ceil), clipped to the image, and resampled to
//! the observation resolution by nearest neighbor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::pose::{apply_action, sample_initial_pose, ActionCatalog, NoiseConfig, Pose};
use crate::raster::{mask_bbox, mask_centroid, render_mask, BBox, CameraIntrinsics, Mask, Mesh};
use crate::reward::{iou, reward_center, reward_goal, reward_iou_diff, reward_total, RewardConfig};
use crate::Result;

/// Where the observation's reference box comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BBoxSource {
    /// The ground-truth mask's bounding box (training).
    GroundTruth,
    /// The bounding box of the initial pose's rendering (test time, when no
    /// ground-truth box exists).
    InitialPoseProjection,
}

/// Immutable per-scene data; the ground-truth mask and its derived geometry
/// are rendered once at construction.
#[derive(Debug, Clone)]
pub struct Scene {
    pub mesh: Mesh,
    pub intrinsics: CameraIntrinsics,
    pub gt_pose: Pose,
    pub gt_mask: Mask,
    pub gt_bbox: BBox,
    pub gt_centroid: (f64, f64),
    /// Marks objects whose metric evaluation should use closest-point
    /// matching (ADD-S).
    pub symmetric: bool,
}

impl Scene {
    pub fn new(
        mesh: Mesh,
        intrinsics: CameraIntrinsics,
        gt_pose: Pose,
        symmetric: bool,
    ) -> Result<Scene> {
        intrinsics.validate()?;
        let gt_mask = render_mask(&mesh, &gt_pose, &intrinsics)
            .map_err(|e| Error::SceneSetup(format!("ground-truth render failed: {e}")))?;
        if gt_mask.is_empty() {
            return Err(Error::SceneSetup(
                "ground-truth pose renders an empty mask".into(),
            ));
        }
        let gt_bbox = mask_bbox(&gt_mask)?;
        let gt_centroid = mask_centroid(&gt_mask)?;
        Ok(Scene {
            mesh,
            intrinsics,
            gt_pose,
            gt_mask,
            gt_bbox,
            gt_centroid,
            symmetric,
        })
    }
}

/// Environment knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub max_episode_len: usize,
    /// Side length of the square observation grid.
    pub obs_resolution: usize,
    pub bbox_source: BBoxSource,
    pub noise: NoiseConfig,
    pub reward: RewardConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            max_episode_len: 50,
            obs_resolution: 64,
            bbox_source: BBoxSource::GroundTruth,
            noise: NoiseConfig::default(),
            reward: RewardConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_episode_len < 1 {
            return Err(Error::Config("env.max_episode_len must be >= 1".into()));
        }
        if self.obs_resolution < 2 {
            return Err(Error::Config("env.obs_resolution must be >= 2".into()));
        }
        self.noise.validate()?;
        self.reward.validate()
    }
}

/// Mutable per-episode state.
#[derive(Debug, Clone)]
pub struct EnvState {
    /// Steps taken so far.
    pub k: usize,
    pub cur_pose: Pose,
    pub cur_mask: Mask,
    pub cur_iou: f64,
    /// Reference box fixed at reset per [`BBoxSource`].
    pub bbox_for_obs: BBox,
    pub done: bool,
    /// Centroid of the most recent nonempty rendering; keeps the
    /// centralization reward defined while the object is out of frame.
    pub last_centroid: Option<(f64, f64)>,
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    /// IoU reached the goal threshold.
    GoalReached,
    /// The object moved to or behind the camera plane and cannot render.
    BehindCamera,
    /// Step budget exhausted (truncation, not a terminal MDP state).
    TimeLimit,
}

/// Result of one environment step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub reward: f64,
    pub r_i: f64,
    pub r_c: f64,
    pub r_g: f64,
    pub iou: f64,
    pub done: bool,
    pub termination: Option<Termination>,
}

const MAX_RESET_ATTEMPTS: usize = 20;

/// Starts an episode: samples a noisy initial pose that renders a nonempty
/// mask (up to 20 attempts), fixes the observation box, and zeroes counters.
pub fn reset<R: Rng + ?Sized>(scene: &Scene, cfg: &EnvConfig, rng: &mut R) -> Result<EnvState> {
    for _ in 0..MAX_RESET_ATTEMPTS {
        let pose = sample_initial_pose(&scene.gt_pose, &cfg.noise, rng);
        let mask = match render_mask(&scene.mesh, &pose, &scene.intrinsics) {
            Ok(m) => m,
            Err(Error::BehindCamera { .. }) => continue,
            Err(e) => return Err(e),
        };
        if mask.is_empty() {
            continue;
        }
        let bbox_for_obs = match cfg.bbox_source {
            BBoxSource::GroundTruth => scene.gt_bbox,
            BBoxSource::InitialPoseProjection => mask_bbox(&mask)?,
        };
        let cur_iou = iou(&mask, &scene.gt_mask);
        let last_centroid = Some(mask_centroid(&mask)?);
        return Ok(EnvState {
            k: 0,
            cur_pose: pose,
            cur_mask: mask,
            cur_iou,
            bbox_for_obs,
            done: false,
            last_centroid,
        });
    }
    Err(Error::SceneSetup(format!(
        "initial pose rendered an empty mask {MAX_RESET_ATTEMPTS} times"
    )))
}

/// Advances the episode by one action pair.
///
/// The new pose is rendered and rewarded (IoU difference + weighted
/// centralization and goal components). The episode ends on goal IoU, on a
/// pose that cannot render (behind the camera; rewarded on an empty mask),
/// or on the step limit. Stepping a finished episode is a contract
/// violation.
pub fn step(
    state: &mut EnvState,
    a_rot: usize,
    a_trans: usize,
    scene: &Scene,
    cfg: &EnvConfig,
    cat: &ActionCatalog,
) -> StepOutcome {
    assert!(!state.done, "step() called on a finished episode");

    let new_pose = apply_action(&state.cur_pose, a_rot, a_trans, cat);
    let (new_mask, behind_camera) = match render_mask(&scene.mesh, &new_pose, &scene.intrinsics) {
        Ok(m) => (m, false),
        Err(Error::BehindCamera { .. }) => (
            Mask::new(scene.intrinsics.width, scene.intrinsics.height),
            true,
        ),
        Err(e) => unreachable!("render can only fail on camera-plane violations: {e}"),
    };

    let new_iou = iou(&new_mask, &scene.gt_mask);
    let r_i = reward_iou_diff(state.cur_iou, new_iou, &cfg.reward);
    if !new_mask.is_empty() {
        state.last_centroid = Some(mask_centroid(&new_mask).expect("nonempty mask"));
    }
    let r_c = match state.last_centroid {
        Some(c) => reward_center(c, scene.gt_centroid),
        None => 0.0,
    };
    let r_g = reward_goal(new_iou, &cfg.reward);
    let reward = reward_total(r_i, r_c, r_g, &cfg.reward);

    state.k += 1;
    state.cur_pose = new_pose;
    state.cur_mask = new_mask;
    state.cur_iou = new_iou;

    let termination = if new_iou >= cfg.reward.iou_thr {
        Some(Termination::GoalReached)
    } else if behind_camera {
        Some(Termination::BehindCamera)
    } else if state.k >= cfg.max_episode_len {
        Some(Termination::TimeLimit)
    } else {
        None
    };
    state.done = termination.is_some();

    StepOutcome {
        reward,
        r_i,
        r_c,
        r_g,
        iou: new_iou,
        done: state.done,
        termination,
    }
}

/// The observation: `4 * res * res` values in {-1, 0, 1}, channel-major.
/// Channels: target mask, current mask, reference box, target - current.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObsGrid {
    pub res: usize,
    pub data: Vec<i8>,
}

/// Number of observation channels.
pub const OBS_CHANNELS: usize = 4;

impl ObsGrid {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Converts to the float grid consumed by the policy network.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Computes the crop window used by [`observe`]: union bbox of the target
/// mask, the current mask (when nonempty), and the reference box, expanded
/// by 10% per side (integer ceil) and clipped to the image.
pub fn crop_window(state: &EnvState, scene: &Scene) -> BBox {
    let mut window = scene.gt_bbox.union(&state.bbox_for_obs);
    if !state.cur_mask.is_empty() {
        let cur = mask_bbox(&state.cur_mask).expect("nonempty mask");
        window = window.union(&cur);
    }
    let margin_u = window.width().div_ceil(10);
    let margin_v = window.height().div_ceil(10);
    BBox {
        u_min: window.u_min.saturating_sub(margin_u),
        v_min: window.v_min.saturating_sub(margin_v),
        u_max: (window.u_max + margin_u).min(scene.intrinsics.width - 1),
        v_max: (window.v_max + margin_v).min(scene.intrinsics.height - 1),
    }
}

/// Assembles the 4-channel observation for the current state.
pub fn observe(state: &EnvState, scene: &Scene, cfg: &EnvConfig) -> ObsGrid {
    let window = crop_window(state, scene);
    let res = cfg.obs_resolution;
    let mut data = vec![0i8; OBS_CHANNELS * res * res];
    let win_w = window.width() as f64;
    let win_h = window.height() as f64;

    for j in 0..res {
        // Nearest-neighbor source row for output row j.
        let sv = window.v_min
            + (((j as f64 + 0.5) * win_h / res as f64).floor() as u32).min(window.height() - 1);
        for i in 0..res {
            let su = window.u_min
                + (((i as f64 + 0.5) * win_w / res as f64).floor() as u32).min(window.width() - 1);
            let g = scene.gt_mask.get(su, sv) as i8;
            let r = state.cur_mask.get(su, sv) as i8;
            let b = state.bbox_for_obs.contains(su, sv) as i8;
            let at = j * res + i;
            data[at] = g;
            data[res * res + at] = r;
            data[2 * res * res + at] = b;
            data[3 * res * res + at] = g - r;
        }
    }
    ObsGrid { res, data }
}

/// One line of the episode trajectory log (JSON Lines).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub a_rot: usize,
    pub a_trans: usize,
    pub r_i: f64,
    pub r_c: f64,
    pub r_g: f64,
    pub reward: f64,
    pub iou: f64,
    pub pose: String,
}

impl StepRecord {
    pub fn from_outcome(
        k: usize,
        a_rot: usize,
        a_trans: usize,
        out: &StepOutcome,
        pose: &Pose,
    ) -> StepRecord {
        StepRecord {
            k,
            a_rot,
            a_trans,
            r_i: out.r_i,
            r_c: out.r_c,
            r_g: out.r_g,
            reward: out.reward,
            iou: out.iou,
            pose: pose.to_line(),
        }
    }
}
