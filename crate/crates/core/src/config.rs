//! Flat run configuration: one `section.key = value` per line, `#`
//! comments, unknown keys rejected. The effective configuration (defaults
//! plus overrides) dumps back to the same grammar and re-parses to an
//! identical value, so a run can always be reproduced from its dump.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::env::{BBoxSource, EnvConfig, Scene};
use crate::error::Error;
use crate::optim::OptimConfig;
use crate::policy::{HeadMode, PolicyConfig};
use crate::pose::{ActionCatalog, Pose};
use crate::raster::{CameraIntrinsics, Mesh};
use crate::Result;

/// Scene description as stored in config files.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub mesh_path: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// `qw qx qy qz tx ty tz`.
    pub gt_pose: String,
    pub symmetric: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            mesh_path: String::new(),
            fx: 480.0,
            fy: 480.0,
            cx: 64.0,
            cy: 64.0,
            width: 128,
            height: 128,
            gt_pose: "1 0 0 0 0 0 0.6".to_string(),
            symmetric: false,
        }
    }
}

impl SceneConfig {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        }
    }

    /// Loads the mesh and builds the scene (renders the target mask once).
    pub fn build(&self) -> Result<Scene> {
        if self.mesh_path.is_empty() {
            return Err(Error::Config("scene.mesh_path is not set".into()));
        }
        let mesh = Mesh::load_obj(Path::new(&self.mesh_path))?;
        let gt_pose = Pose::parse_line(&self.gt_pose)?;
        Scene::new(mesh, self.intrinsics(), gt_pose, self.symmetric)
    }
}

/// Step magnitudes of the action catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionsConfig {
    pub rot_small_deg: f64,
    pub rot_large_deg: f64,
    pub trans_small: f64,
    pub trans_large: f64,
}

impl Default for ActionsConfig {
    fn default() -> Self {
        ActionsConfig {
            rot_small_deg: 2.0,
            rot_large_deg: 10.0,
            trans_small: 0.005,
            trans_large: 0.02,
        }
    }
}

impl ActionsConfig {
    pub fn catalog(&self) -> ActionCatalog {
        ActionCatalog::new(
            self.rot_small_deg,
            self.rot_large_deg,
            self.trans_small,
            self.trans_large,
        )
    }
}

/// Evaluation knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub step_checkpoints: Vec<usize>,
    pub iou_success_threshold: f64,
    pub proj2d_px: f64,
    pub add_diameter_frac: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            step_checkpoints: vec![0, 5, 10, 20, 50],
            iou_success_threshold: 0.9,
            proj2d_px: 5.0,
            add_diameter_frac: 0.1,
        }
    }
}

/// The complete run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    /// Evaluation episode count.
    pub episodes: usize,
    /// Training environment-step budget.
    pub max_steps: u64,
    pub scene: SceneConfig,
    pub env: EnvConfig,
    pub actions: ActionsConfig,
    /// Policy architecture; `obs_channels`/`obs_res` follow the env
    /// observation and are not config keys.
    pub policy: PolicyConfig,
    pub optim: OptimConfig,
    pub eval: EvalSection,
    /// Checkpoint cadence in optimization batches.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "out".to_string(),
            episodes: 200,
            max_steps: 200_000,
            scene: SceneConfig::default(),
            env: EnvConfig::default(),
            actions: ActionsConfig::default(),
            policy: PolicyConfig::default(),
            optim: OptimConfig::default(),
            eval: EvalSection::default(),
            checkpoint_every: 20,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| {
        Error::Config(format!(
            "key {key}: cannot parse `{value}` as {}",
            std::any::type_name::<T>()
        ))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(Error::Config(format!(
            "key {key}: expected true/false, got `{other}`"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split_whitespace()
        .map(|tok| {
            tok.parse::<T>().map_err(|_| {
                Error::Config(format!("key {key}: bad list element `{tok}`"))
            })
        })
        .collect()
}

fn fmt_list<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

impl RunConfig {
    /// Applies one `section.key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "run.seed" => self.seed = parse_num(key, v)?,
            "run.out_dir" => self.out_dir = v.to_string(),
            "run.episodes" => self.episodes = parse_num(key, v)?,
            "run.max_steps" => self.max_steps = parse_num(key, v)?,

            "scene.mesh_path" => self.scene.mesh_path = v.to_string(),
            "scene.fx" => self.scene.fx = parse_num(key, v)?,
            "scene.fy" => self.scene.fy = parse_num(key, v)?,
            "scene.cx" => self.scene.cx = parse_num(key, v)?,
            "scene.cy" => self.scene.cy = parse_num(key, v)?,
            "scene.width" => self.scene.width = parse_num(key, v)?,
            "scene.height" => self.scene.height = parse_num(key, v)?,
            "scene.gt_pose" => self.scene.gt_pose = v.to_string(),
            "scene.symmetric" => self.scene.symmetric = parse_bool(key, v)?,

            "env.max_episode_len" => self.env.max_episode_len = parse_num(key, v)?,
            "env.obs_resolution" => self.env.obs_resolution = parse_num(key, v)?,
            "env.bbox_source" => {
                self.env.bbox_source = match v {
                    "ground_truth" => BBoxSource::GroundTruth,
                    "initial_pose_projection" => BBoxSource::InitialPoseProjection,
                    other => {
                        return Err(Error::Config(format!(
                            "env.bbox_source: `{other}` is not ground_truth|initial_pose_projection"
                        )))
                    }
                }
            }

            "actions.rot_small_deg" => self.actions.rot_small_deg = parse_num(key, v)?,
            "actions.rot_large_deg" => self.actions.rot_large_deg = parse_num(key, v)?,
            "actions.trans_small" => self.actions.trans_small = parse_num(key, v)?,
            "actions.trans_large" => self.actions.trans_large = parse_num(key, v)?,

            "noise.rot_sigma_deg" => self.env.noise.rot_sigma_deg = parse_num(key, v)?,
            "noise.trans_sigma" => {
                let xs: Vec<f64> = parse_list(key, v)?;
                if xs.len() != 3 {
                    return Err(Error::Config(format!(
                        "noise.trans_sigma needs 3 numbers, got {}",
                        xs.len()
                    )));
                }
                self.env.noise.trans_sigma = Vector3::new(xs[0], xs[1], xs[2]);
            }
            "noise.rot_reject_deg" => self.env.noise.rot_reject_deg = parse_num(key, v)?,

            "reward.alpha" => self.env.reward.alpha = parse_num(key, v)?,
            "reward.beta" => self.env.reward.beta = parse_num(key, v)?,
            "reward.x_thr" => self.env.reward.x_thr = parse_num(key, v)?,
            "reward.iou_thr" => self.env.reward.iou_thr = parse_num(key, v)?,
            "reward.sigma_c" => self.env.reward.sigma_c = parse_num(key, v)?,
            "reward.sigma_g" => self.env.reward.sigma_g = parse_num(key, v)?,

            "policy.head_mode" => {
                self.policy.head_mode = match v {
                    "discrete13" => HeadMode::Discrete13,
                    "continuous" => HeadMode::Continuous,
                    other => {
                        return Err(Error::Config(format!(
                            "policy.head_mode: `{other}` is not discrete13|continuous"
                        )))
                    }
                }
            }
            "policy.conv_channels" => self.policy.conv_channels = parse_list(key, v)?,
            "policy.fc_units" => self.policy.fc_units = parse_num(key, v)?,
            "policy.value_units" => self.policy.value_units = parse_num(key, v)?,
            "policy.sigma_r" => self.policy.sigma_r = parse_num(key, v)?,
            "policy.sigma_t" => self.policy.sigma_t = parse_num(key, v)?,

            "optim.gamma" => self.optim.gamma = parse_num(key, v)?,
            "optim.clip_eps" => self.optim.clip_eps = parse_num(key, v)?,
            "optim.lambda_v" => self.optim.lambda_v = parse_num(key, v)?,
            "optim.lambda_e" => self.optim.lambda_e = parse_num(key, v)?,
            "optim.lr_on" => self.optim.lr_on = parse_num(key, v)?,
            "optim.lr_off" => self.optim.lr_off = parse_num(key, v)?,
            "optim.rho_bar" => self.optim.rho_bar = parse_num(key, v)?,
            "optim.c_bar" => self.optim.c_bar = parse_num(key, v)?,
            "optim.n_step" => self.optim.n_step = parse_num(key, v)?,
            "optim.on_off_ratio" => self.optim.on_off_ratio = parse_num(key, v)?,
            "optim.epochs" => self.optim.epochs = parse_num(key, v)?,
            "optim.minibatch" => self.optim.minibatch = parse_num(key, v)?,
            "optim.batch_size" => self.optim.batch_size = parse_num(key, v)?,
            "optim.replay_capacity" => self.optim.replay_capacity = parse_num(key, v)?,
            "optim.momentum" => self.optim.momentum = parse_num(key, v)?,
            "optim.adv_norm" => self.optim.adv_norm = parse_bool(key, v)?,
            "optim.off_segments" => self.optim.off_segments = parse_num(key, v)?,
            "optim.checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,

            "eval.step_checkpoints" => self.eval.step_checkpoints = parse_list(key, v)?,
            "eval.iou_success_threshold" => {
                self.eval.iou_success_threshold = parse_num(key, v)?
            }
            "eval.proj2d_px" => self.eval.proj2d_px = parse_num(key, v)?,
            "eval.add_diameter_frac" => self.eval.add_diameter_frac = parse_num(key, v)?,

            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a full config text over the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies config text onto the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("expected `section.key = value`, got `{line}`"),
                });
            };
            self.set(key.trim(), value).map_err(|e| Error::Parse {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Canonical dump of every key; `parse(dump(x)) == x`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# effective run configuration");
        let _ = writeln!(s, "run.seed = {}", self.seed);
        let _ = writeln!(s, "run.out_dir = {}", self.out_dir);
        let _ = writeln!(s, "run.episodes = {}", self.episodes);
        let _ = writeln!(s, "run.max_steps = {}", self.max_steps);
        let _ = writeln!(s, "scene.mesh_path = {}", self.scene.mesh_path);
        let _ = writeln!(s, "scene.fx = {}", self.scene.fx);
        let _ = writeln!(s, "scene.fy = {}", self.scene.fy);
        let _ = writeln!(s, "scene.cx = {}", self.scene.cx);
        let _ = writeln!(s, "scene.cy = {}", self.scene.cy);
        let _ = writeln!(s, "scene.width = {}", self.scene.width);
        let _ = writeln!(s, "scene.height = {}", self.scene.height);
        let _ = writeln!(s, "scene.gt_pose = {}", self.scene.gt_pose);
        let _ = writeln!(s, "scene.symmetric = {}", self.scene.symmetric);
        let _ = writeln!(s, "env.max_episode_len = {}", self.env.max_episode_len);
        let _ = writeln!(s, "env.obs_resolution = {}", self.env.obs_resolution);
        let _ = writeln!(
            s,
            "env.bbox_source = {}",
            match self.env.bbox_source {
                BBoxSource::GroundTruth => "ground_truth",
                BBoxSource::InitialPoseProjection => "initial_pose_projection",
            }
        );
        let _ = writeln!(s, "actions.rot_small_deg = {}", self.actions.rot_small_deg);
        let _ = writeln!(s, "actions.rot_large_deg = {}", self.actions.rot_large_deg);
        let _ = writeln!(s, "actions.trans_small = {}", self.actions.trans_small);
        let _ = writeln!(s, "actions.trans_large = {}", self.actions.trans_large);
        let _ = writeln!(s, "noise.rot_sigma_deg = {}", self.env.noise.rot_sigma_deg);
        let _ = writeln!(
            s,
            "noise.trans_sigma = {} {} {}",
            self.env.noise.trans_sigma.x, self.env.noise.trans_sigma.y, self.env.noise.trans_sigma.z
        );
        let _ = writeln!(s, "noise.rot_reject_deg = {}", self.env.noise.rot_reject_deg);
        let _ = writeln!(s, "reward.alpha = {}", self.env.reward.alpha);
        let _ = writeln!(s, "reward.beta = {}", self.env.reward.beta);
        let _ = writeln!(s, "reward.x_thr = {}", self.env.reward.x_thr);
        let _ = writeln!(s, "reward.iou_thr = {}", self.env.reward.iou_thr);
        let _ = writeln!(s, "reward.sigma_c = {}", self.env.reward.sigma_c);
        let _ = writeln!(s, "reward.sigma_g = {}", self.env.reward.sigma_g);
        let _ = writeln!(
            s,
            "policy.head_mode = {}",
            match self.policy.head_mode {
                HeadMode::Discrete13 => "discrete13",
                HeadMode::Continuous => "continuous",
            }
        );
        let _ = writeln!(
            s,
            "policy.conv_channels = {}",
            fmt_list(&self.policy.conv_channels)
        );
        let _ = writeln!(s, "policy.fc_units = {}", self.policy.fc_units);
        let _ = writeln!(s, "policy.value_units = {}", self.policy.value_units);
        let _ = writeln!(s, "policy.sigma_r = {}", self.policy.sigma_r);
        let _ = writeln!(s, "policy.sigma_t = {}", self.policy.sigma_t);
        let _ = writeln!(s, "optim.gamma = {}", self.optim.gamma);
        let _ = writeln!(s, "optim.clip_eps = {}", self.optim.clip_eps);
        let _ = writeln!(s, "optim.lambda_v = {}", self.optim.lambda_v);
        let _ = writeln!(s, "optim.lambda_e = {}", self.optim.lambda_e);
        let _ = writeln!(s, "optim.lr_on = {}", self.optim.lr_on);
        let _ = writeln!(s, "optim.lr_off = {}", self.optim.lr_off);
        let _ = writeln!(s, "optim.rho_bar = {}", self.optim.rho_bar);
        let _ = writeln!(s, "optim.c_bar = {}", self.optim.c_bar);
        let _ = writeln!(s, "optim.n_step = {}", self.optim.n_step);
        let _ = writeln!(s, "optim.on_off_ratio = {}", self.optim.on_off_ratio);
        let _ = writeln!(s, "optim.epochs = {}", self.optim.epochs);
        let _ = writeln!(s, "optim.minibatch = {}", self.optim.minibatch);
        let _ = writeln!(s, "optim.batch_size = {}", self.optim.batch_size);
        let _ = writeln!(s, "optim.replay_capacity = {}", self.optim.replay_capacity);
        let _ = writeln!(s, "optim.momentum = {}", self.optim.momentum);
        let _ = writeln!(s, "optim.adv_norm = {}", self.optim.adv_norm);
        let _ = writeln!(s, "optim.off_segments = {}", self.optim.off_segments);
        let _ = writeln!(s, "optim.checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(
            s,
            "eval.step_checkpoints = {}",
            fmt_list(&self.eval.step_checkpoints)
        );
        let _ = writeln!(
            s,
            "eval.iou_success_threshold = {}",
            self.eval.iou_success_threshold
        );
        let _ = writeln!(s, "eval.proj2d_px = {}", self.eval.proj2d_px);
        let _ = writeln!(s, "eval.add_diameter_frac = {}", self.eval.add_diameter_frac);
        s
    }

    /// The policy configuration with observation shape tied to the env.
    pub fn policy_for_env(&self) -> PolicyConfig {
        PolicyConfig {
            obs_channels: crate::env::OBS_CHANNELS,
            obs_res: self.env.obs_resolution,
            ..self.policy.clone()
        }
    }

    /// Validates all sections, collecting every problem. With
    /// `check_paths`, referenced files must exist.
    pub fn validate(&self, check_paths: bool) -> Result<()> {
        let mut problems = Vec::new();
        let mut note = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        };
        note(self.scene.intrinsics().validate());
        note(self.env.validate());
        note(self.policy_for_env().validate());
        note(self.optim.validate());
        if self.episodes == 0 {
            problems.push("run.episodes must be >= 1".to_string());
        }
        if Pose::parse_line(&self.scene.gt_pose).is_err() {
            problems.push(format!("scene.gt_pose is not a valid pose line: `{}`", self.scene.gt_pose));
        }
        if self.eval.step_checkpoints.is_empty() {
            problems.push("eval.step_checkpoints must not be empty".to_string());
        }
        if !(self.eval.iou_success_threshold > 0.0 && self.eval.iou_success_threshold <= 1.0) {
            problems.push("eval.iou_success_threshold must be in (0,1]".to_string());
        }
        if self.actions.rot_small_deg <= 0.0
            || self.actions.rot_large_deg <= 0.0
            || self.actions.trans_small <= 0.0
            || self.actions.trans_large <= 0.0
        {
            problems.push("actions.* magnitudes must be positive".to_string());
        }
        if check_paths {
            if self.scene.mesh_path.is_empty() {
                problems.push("scene.mesh_path is not set".to_string());
            } else if !Path::new(&self.scene.mesh_path).exists() {
                problems.push(format!("scene.mesh_path does not exist: {}", self.scene.mesh_path));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
