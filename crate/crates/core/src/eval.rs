//! Greedy policy evaluation: rollouts over noisy initializations, accuracy
//! at step checkpoints, and per-frame timing.
//!
//! Rollouts use per-head argmax actions with ties broken uniformly at
//! random, so an untrained all-zero head degrades to a uniform-random
//! policy. Episodes that terminate early keep their final pose for later
//! checkpoints (refinement has stopped). Pose accuracy at a checkpoint uses
//! the reprojection pass rule; IoU success tracks whether the goal IoU was
//! reached by that step.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::env::{observe, reset, step, EnvConfig, Scene, StepRecord};
use crate::metrics::{
    aggregate, diameter, evaluate_pose, subsample_points, AccuracySummary, MetricReport,
    MetricThresholds,
};
use crate::policy::PolicyParams;
use crate::pose::{ActionCatalog, Pose};
use crate::Result;

const PURPOSE_EVAL_BASE: u64 = 0x2000_0000;

/// Evaluation options.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub episodes: usize,
    pub seed: u64,
    /// Steps at which accuracy is reported; 0 means the initial pose.
    pub step_checkpoints: Vec<usize>,
    /// IoU counting as task success when reached within the episode.
    pub iou_success_threshold: f64,
    pub thresholds: MetricThresholds,
    /// Cap on metric points (deterministic subsample of mesh vertices).
    pub max_metric_points: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            episodes: 200,
            seed: 0,
            step_checkpoints: vec![0, 5, 10, 20, 50],
            iou_success_threshold: 0.9,
            thresholds: MetricThresholds::default(),
            max_metric_points: 2000,
        }
    }
}

/// Result of one greedy episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeEval {
    pub initial_iou: f64,
    pub end_iou: f64,
    pub best_iou: f64,
    /// First step (1-based) at which IoU reached the success threshold.
    pub success_step: Option<usize>,
    pub steps: usize,
    /// Metric report for the final pose.
    pub report: MetricReport,
    /// Pose at every requested checkpoint, episode-frozen after
    /// termination.
    pub checkpoint_poses: Vec<Pose>,
    /// IoU at every requested checkpoint.
    pub checkpoint_ious: Vec<f64>,
    /// Cumulative wall-clock milliseconds up to every checkpoint
    /// (excluded from determinism guarantees).
    pub checkpoint_ms: Vec<f64>,
    /// Full step log for trajectory dumps.
    #[serde(skip)]
    pub records: Vec<StepRecord>,
}

/// One row of the accuracy-vs-steps curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Reprojection pass rate at this checkpoint, percent.
    pub proj2d_acc_pct: f64,
    /// Fraction of episodes at or above the success IoU by this step,
    /// percent.
    pub iou_acc_pct: f64,
    /// Mean wall-clock milliseconds per frame to reach this checkpoint.
    pub ms_per_frame: f64,
}

/// Aggregate evaluation output.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub episodes: Vec<EpisodeEval>,
    pub curve: Vec<CurvePoint>,
    /// Fraction of episodes reaching the success IoU, percent.
    pub success_pct: f64,
    pub mean_end_iou: f64,
    pub mean_episode_len: f64,
    /// Final-pose aggregate accuracy.
    pub summary: AccuracySummary,
}

/// Runs greedy rollouts of `params` on `scene` over noisy initial poses.
pub fn evaluate(
    scene: &Scene,
    env_cfg: &EnvConfig,
    cat: &ActionCatalog,
    params: &PolicyParams,
    opts: &EvalOptions,
) -> Result<EvalResult> {
    assert!(opts.episodes >= 1, "need at least one evaluation episode");
    env_cfg.validate()?;
    let points = subsample_points(scene.mesh.vertices(), opts.max_metric_points);
    let model_diameter = diameter(&points);
    let mut episodes = Vec::with_capacity(opts.episodes);

    for e in 0..opts.episodes {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, PURPOSE_EVAL_BASE + e as u64));
        let mut state = reset(scene, env_cfg, &mut rng)?;
        let initial_iou = state.cur_iou;
        let mut best_iou = initial_iou;
        let mut success_step = if initial_iou >= opts.iou_success_threshold {
            Some(0)
        } else {
            None
        };

        // Per-step history: pose and IoU after k steps (index k), k=0 is
        // the initial state.
        let mut poses = vec![state.cur_pose];
        let mut ious = vec![initial_iou];
        let mut elapsed_ms = vec![0.0f64];
        let mut records = Vec::new();
        let start = Instant::now();
        while !state.done {
            let obs = observe(&state, scene, env_cfg);
            let out = params.forward(&obs.to_f64());
            let (a_rot, a_trans) = params.greedy_action(&out, cat, &mut rng);
            let outcome = step(&mut state, a_rot, a_trans, scene, env_cfg, cat);
            poses.push(state.cur_pose);
            ious.push(outcome.iou);
            elapsed_ms.push(start.elapsed().as_secs_f64() * 1e3);
            best_iou = best_iou.max(outcome.iou);
            if success_step.is_none() && outcome.iou >= opts.iou_success_threshold {
                success_step = Some(state.k);
            }
            records.push(StepRecord::from_outcome(
                state.k,
                a_rot,
                a_trans,
                &outcome,
                &state.cur_pose,
            ));
        }

        let at = |s: usize| s.min(poses.len() - 1);
        let checkpoint_poses: Vec<Pose> =
            opts.step_checkpoints.iter().map(|&s| poses[at(s)]).collect();
        let checkpoint_ious: Vec<f64> =
            opts.step_checkpoints.iter().map(|&s| ious[at(s)]).collect();
        let checkpoint_ms: Vec<f64> = opts
            .step_checkpoints
            .iter()
            .map(|&s| elapsed_ms[at(s)])
            .collect();

        let report = evaluate_pose(
            &points,
            &scene.intrinsics,
            &scene.gt_pose,
            &state.cur_pose,
            model_diameter,
            scene.symmetric,
            &opts.thresholds,
        );
        episodes.push(EpisodeEval {
            initial_iou,
            end_iou: state.cur_iou,
            best_iou,
            success_step,
            steps: state.k,
            report,
            checkpoint_poses,
            checkpoint_ious,
            checkpoint_ms,
            records,
        });
    }

    // Curve: accuracy per checkpoint across episodes.
    let mut curve = Vec::with_capacity(opts.step_checkpoints.len());
    for (ci, &s) in opts.step_checkpoints.iter().enumerate() {
        let mut proj_pass = 0usize;
        let mut iou_pass = 0usize;
        let mut ms_sum = 0.0;
        for ep in &episodes {
            let rep = evaluate_pose(
                &points,
                &scene.intrinsics,
                &scene.gt_pose,
                &ep.checkpoint_poses[ci],
                model_diameter,
                scene.symmetric,
                &opts.thresholds,
            );
            if rep.pass_proj2d {
                proj_pass += 1;
            }
            if ep.success_step.is_some_and(|k| k <= s) {
                iou_pass += 1;
            }
            ms_sum += ep.checkpoint_ms[ci];
        }
        let n = episodes.len() as f64;
        curve.push(CurvePoint {
            step: s,
            proj2d_acc_pct: 100.0 * proj_pass as f64 / n,
            iou_acc_pct: 100.0 * iou_pass as f64 / n,
            ms_per_frame: ms_sum / n,
        });
    }

    let n = episodes.len() as f64;
    let success_pct =
        100.0 * episodes.iter().filter(|e| e.success_step.is_some()).count() as f64 / n;
    let mean_end_iou = episodes.iter().map(|e| e.end_iou).sum::<f64>() / n;
    let mean_episode_len = episodes.iter().map(|e| e.steps as f64).sum::<f64>() / n;
    let reports: Vec<MetricReport> = episodes.iter().map(|e| e.report.clone()).collect();
    let summary = aggregate(&reports);
    Ok(EvalResult {
        episodes,
        curve,
        success_pct,
        mean_end_iou,
        mean_episode_len,
        summary,
    })
}
