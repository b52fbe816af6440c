//! Composite reinforced optimization: clipped-surrogate on-policy updates
//! plus off-policy V-trace value updates drawn from a priority replay
//! buffer, and the training loop that alternates them at a configured
//! ratio.
//!
//! Determinism: every stochastic choice flows from the master seed through
//! per-purpose derived streams (episode k gets its own stream keyed by its
//! global index). Gradient accumulation over a minibatch runs in a fixed
//! number of contiguous chunks whose partial sums combine in chunk order,
//! so results are bit-identical regardless of thread scheduling.
//!
//! Value targets at collection time are plain discounted reward sums to the
//! episode end plus a bootstrap value (zero on true termination, the final
//! state's value on time-limit truncation); no generalized-advantage
//! smoothing. Off-policy updates regress the value head on freshly computed
//! V-trace targets and never touch the policy-head parameters (those layers
//! are excluded from the update step entirely, momentum included).

use std::io::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::env::{observe, reset, step, EnvConfig, ObsGrid, Scene, Termination};
use crate::error::Error;
use crate::policy::{ActionTaken, OutputGrads, PolicyParams};
use crate::pose::ActionCatalog;
use crate::Result;

/// Fixed chunk count for deterministic parallel gradient accumulation.
const GRAD_CHUNKS: usize = 4;
/// Episodes launched per parallel collection wave.
const COLLECT_WAVE: usize = 4;
/// Seed-derivation purpose tags.
const PURPOSE_TRAIN_LOOP: u64 = 1;
const PURPOSE_EPISODE_BASE: u64 = 0x1000_0000;

/// One environment step as stored for optimization.
#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: ObsGrid,
    pub action: ActionTaken,
    /// Joint log-probability under the policy that sampled the action.
    pub logprob_behavior: f64,
    pub reward: f64,
    /// Value estimate at collection time.
    pub value_at_collect: f64,
    /// True termination (goal reached / behind camera); time-limit
    /// truncation leaves this false.
    pub done: bool,
}

/// One episode's ordered transitions plus the bootstrap for its final state.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    /// Observation of the state after the last transition; `None` when the
    /// episode truly terminated.
    pub bootstrap_obs: Option<ObsGrid>,
    /// Collection-time value of that state (0 on termination).
    pub bootstrap_value: f64,
    pub end_iou: f64,
}

impl Trajectory {
    fn assert_done_invariant(&self) {
        let n = self.transitions.len();
        for (i, t) in self.transitions.iter().enumerate() {
            assert!(
                !t.done || i == n - 1,
                "done=true allowed only on the final transition"
            );
        }
    }
}

/// Per-step advantages and value targets for one trajectory, computed as
/// finite discounted sums to the episode end:
/// `V_targ[k] = r_k + g r_{k+1} + ... + g^{K-k} V(s_K)` and
/// `A[k] = V_targ[k] - V(s_k)` with collection-time values.
pub fn compute_advantages(traj: &Trajectory, gamma: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(!traj.transitions.is_empty(), "empty trajectory");
    traj.assert_done_invariant();
    let n = traj.transitions.len();
    let terminal = traj.transitions[n - 1].done;
    let mut running = if terminal { 0.0 } else { traj.bootstrap_value };
    let mut v_targ = vec![0.0; n];
    let mut adv = vec![0.0; n];
    for k in (0..n).rev() {
        running = traj.transitions[k].reward + gamma * running;
        v_targ[k] = running;
        adv[k] = running - traj.transitions[k].value_at_collect;
    }
    (adv, v_targ)
}

/// A consecutive slice of one episode stored for off-policy reuse.
#[derive(Debug, Clone)]
pub struct Segment {
    pub transitions: Vec<Transition>,
    /// Observation of the state following the last transition; `None` when
    /// the segment ends the episode with a true termination.
    pub bootstrap_obs: Option<ObsGrid>,
}

/// Splits a trajectory into segments of at most `n_step` transitions.
/// Interior segments bootstrap from the next segment's first observation.
pub fn split_into_segments(traj: &Trajectory, n_step: usize) -> Vec<Segment> {
    assert!(n_step >= 1);
    let n = traj.transitions.len();
    let mut out = Vec::with_capacity(n.div_ceil(n_step));
    let mut start = 0;
    while start < n {
        let end = (start + n_step).min(n);
        let bootstrap_obs = if end < n {
            Some(traj.transitions[end].obs.clone())
        } else {
            traj.bootstrap_obs.clone()
        };
        out.push(Segment {
            transitions: traj.transitions[start..end].to_vec(),
            bootstrap_obs,
        });
        start = end;
    }
    out
}

struct ReplayItem {
    segment: Segment,
    priority: f64,
    seq: u64,
}

/// Bounded priority store of trajectory segments. Eviction removes the
/// lowest-priority item (oldest first on ties); sampling draws with
/// probability proportional to priority.
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<ReplayItem>,
    next_seq: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        assert!(capacity >= 1);
        ReplayBuffer {
            capacity,
            items: Vec::new(),
            next_seq: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Segment {
        &self.items[idx].segment
    }

    pub fn priority(&self, idx: usize) -> f64 {
        self.items[idx].priority
    }

    pub fn push(&mut self, segment: Segment, priority: f64) {
        assert!(priority >= 0.0 && priority.is_finite());
        if self.items.len() == self.capacity {
            let evict = self
                .items
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    (a.priority, a.seq)
                        .partial_cmp(&(b.priority, b.seq))
                        .unwrap()
                })
                .map(|(i, _)| i)
                .unwrap();
            self.items.remove(evict);
        }
        self.items.push(ReplayItem {
            segment,
            priority,
            seq: self.next_seq,
        });
        self.next_seq += 1;
    }

    pub fn update_priority(&mut self, idx: usize, priority: f64) {
        assert!(priority >= 0.0 && priority.is_finite());
        self.items[idx].priority = priority;
    }

    /// Draws `count` indices with probability proportional to priority.
    /// Without replacement the count is capped at the buffer size and every
    /// item can appear at most once. All-zero priorities degrade to uniform.
    pub fn sample_indices<R: Rng + ?Sized>(
        &self,
        count: usize,
        rng: &mut R,
        with_replacement: bool,
    ) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::EmptyReplay);
        }
        let mut weights: Vec<f64> = self.items.iter().map(|i| i.priority).collect();
        if weights.iter().all(|&w| w == 0.0) {
            weights.iter_mut().for_each(|w| *w = 1.0);
        }
        let n = if with_replacement {
            count
        } else {
            count.min(self.items.len())
        };
        let mut picked = Vec::with_capacity(n);
        let mut live = weights;
        for _ in 0..n {
            let total: f64 = live.iter().sum();
            let idx = if total <= 0.0 {
                // Only zero-weight items remain (without replacement).
                live.iter().position(|&w| w >= 0.0).unwrap()
            } else {
                let mut u = rng.random::<f64>() * total;
                let mut chosen = live.len() - 1;
                for (i, &w) in live.iter().enumerate() {
                    if w <= 0.0 {
                        continue;
                    }
                    u -= w;
                    if u < 0.0 {
                        chosen = i;
                        break;
                    }
                }
                chosen
            };
            picked.push(idx);
            if !with_replacement {
                live[idx] = -1.0;
            }
        }
        // Negative markers must never be returned.
        debug_assert!(picked.iter().all(|&i| i < self.items.len()));
        Ok(picked)
    }
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub gamma: f64,
    pub clip_eps: f64,
    pub lambda_v: f64,
    pub lambda_e: f64,
    pub lr_on: f64,
    pub lr_off: f64,
    pub rho_bar: f64,
    pub c_bar: f64,
    /// Segment length for replay and the V-trace horizon.
    pub n_step: usize,
    /// On-policy gradient steps per off-policy step; 0 disables the
    /// off-policy arm entirely.
    pub on_off_ratio: u32,
    pub epochs: usize,
    pub minibatch: usize,
    /// Transitions collected per optimization batch.
    pub batch_size: usize,
    /// Replay capacity in segments.
    pub replay_capacity: usize,
    pub momentum: f64,
    /// Normalize advantages per batch (subtract mean, divide by std+1e-8).
    pub adv_norm: bool,
    /// Segments per off-policy update.
    pub off_segments: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            gamma: 0.99,
            clip_eps: 0.2,
            lambda_v: 0.5,
            lambda_e: 0.001,
            lr_on: 1e-4,
            lr_off: 1e-4,
            rho_bar: 1.0,
            c_bar: 1.0,
            n_step: 8,
            on_off_ratio: 4,
            epochs: 1,
            minibatch: 64,
            batch_size: 256,
            replay_capacity: 512,
            momentum: 0.9,
            adv_norm: true,
            off_segments: 8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            problems.push(format!("optim.gamma must be in [0,1), got {}", self.gamma));
        }
        if !(self.clip_eps > 0.0) {
            problems.push("optim.clip_eps must be > 0".to_string());
        }
        if !(self.rho_bar >= self.c_bar && self.c_bar >= 0.0) {
            problems.push(format!(
                "optim requires rho_bar >= c_bar >= 0, got {} < {}",
                self.rho_bar, self.c_bar
            ));
        }
        if self.n_step == 0 || self.minibatch == 0 || self.batch_size == 0 || self.epochs == 0 {
            problems.push("optim: n_step/minibatch/batch_size/epochs must be >= 1".to_string());
        }
        if self.replay_capacity == 0 || self.off_segments == 0 {
            problems.push("optim: replay_capacity/off_segments must be >= 1".to_string());
        }
        if !(self.lr_on >= 0.0 && self.lr_off >= 0.0) {
            problems.push("optim: learning rates must be >= 0".to_string());
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            problems.push("optim.momentum must be in [0,1)".to_string());
        }
        if !(self.lambda_v >= 0.0 && self.lambda_e >= 0.0) {
            problems.push("optim: loss weights must be >= 0".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Plain SGD with momentum; the velocity buffer shares the parameter
/// layout.
pub struct SgdMomentum {
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(param_count: usize) -> SgdMomentum {
        SgdMomentum {
            velocity: vec![0.0; param_count],
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn velocity_mut(&mut self) -> &mut [f64] {
        &mut self.velocity
    }

    /// `v = momentum*v + g; p -= lr*v`, skipping any index inside `skip`
    /// ranges (used to freeze the policy heads during off-policy updates;
    /// skipped entries keep their velocity untouched as well).
    pub fn step(
        &mut self,
        params: &mut PolicyParams,
        grads: &[f64],
        lr: f64,
        momentum: f64,
        skip: &[Range<usize>],
    ) {
        assert_eq!(grads.len(), self.velocity.len());
        let data = params.data_mut();
        assert_eq!(grads.len(), data.len());
        let in_skip = |i: usize| skip.iter().any(|r| r.contains(&i));
        for i in 0..data.len() {
            if !skip.is_empty() && in_skip(i) {
                continue;
            }
            self.velocity[i] = momentum * self.velocity[i] + grads[i];
            data[i] -= lr * self.velocity[i];
        }
    }
}

/// One minibatch element for the on-policy update.
pub struct PpoSample<'a> {
    pub transition: &'a Transition,
    pub advantage: f64,
    pub v_target: f64,
}

/// Per-component losses of one update, reported at the pre-update
/// parameters. `l_clip` and `l_entropy` are the maximized quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_clip: f64,
    pub l_value: f64,
    pub l_entropy: f64,
}

fn check_finite(value: f64, component: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { component, value })
    }
}

/// Gradients of the on-policy loss
/// `-L_clip + lambda_v * L_value - lambda_e * entropy`
/// (mean over the batch), plus the loss breakdown. Exposed separately from
/// the update step so tests can compare gradients directly.
pub fn ppo_gradients(
    params: &PolicyParams,
    batch: &[PpoSample<'_>],
    cfg: &OptimConfig,
) -> Result<(Vec<f64>, LossBreakdown)> {
    assert!(!batch.is_empty(), "empty on-policy batch");
    let n = batch.len();
    let n_params = params.param_count();
    let chunk_len = n.div_ceil(GRAD_CHUNKS);
    let chunks: Vec<&[PpoSample]> = batch.chunks(chunk_len).collect();

    type PpoChunk = (Vec<f64>, f64, f64, f64);
    let partials: Vec<Result<PpoChunk>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut grads = vec![0.0; n_params];
            let mut sum_clip = 0.0;
            let mut sum_value = 0.0;
            let mut sum_entropy = 0.0;
            for s in chunk.iter() {
                let obs = s.transition.obs.to_f64();
                let cache = params.forward_cached(&obs);
                let out = &cache.out;
                let (lp, dlp_rot, dlp_trans) = params.logprob_and_grad(out, &s.transition.action);
                let (h, dh_rot, dh_trans) = params.entropy_and_grad(out);
                let ratio = (lp - s.transition.logprob_behavior).exp();
                let unclipped = ratio * s.advantage;
                let clipped =
                    ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * s.advantage;
                let surrogate = unclipped.min(clipped);
                let verr = out.value - s.v_target;

                sum_clip += check_finite(surrogate, "clip")?;
                sum_value += check_finite(verr * verr, "value")?;
                sum_entropy += check_finite(h, "entropy")?;

                // d(-surrogate)/d logprob: gradient flows only through the
                // unclipped arm; when the clipped arm is strictly smaller the
                // clamp is saturated and its derivative is zero.
                let g_lp = if unclipped <= clipped {
                    -s.advantage * ratio
                } else {
                    0.0
                };
                let scale = 1.0 / n as f64;
                let d_rot: Vec<f64> = dlp_rot
                    .iter()
                    .zip(&dh_rot)
                    .map(|(dl, dh)| scale * (g_lp * dl - cfg.lambda_e * dh))
                    .collect();
                let d_trans: Vec<f64> = dlp_trans
                    .iter()
                    .zip(&dh_trans)
                    .map(|(dl, dh)| scale * (g_lp * dl - cfg.lambda_e * dh))
                    .collect();
                let d_value = scale * cfg.lambda_v * 2.0 * verr;
                params.backward(
                    &cache,
                    &OutputGrads {
                        d_rot,
                        d_trans,
                        d_value,
                    },
                    &mut grads,
                );
            }
            Ok((grads, sum_clip, sum_value, sum_entropy))
        })
        .collect();

    let mut grads = vec![0.0; n_params];
    let (mut l_clip, mut l_value, mut l_entropy) = (0.0, 0.0, 0.0);
    for partial in partials {
        let (g, c, v, e) = partial?;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            *acc += gi;
        }
        l_clip += c;
        l_value += v;
        l_entropy += e;
    }
    let breakdown = LossBreakdown {
        l_clip: l_clip / n as f64,
        l_value: l_value / n as f64,
        l_entropy: l_entropy / n as f64,
    };
    Ok((grads, breakdown))
}

/// One on-policy gradient step. Returns the pre-update loss breakdown.
pub fn ppo_update(
    params: &mut PolicyParams,
    mom: &mut SgdMomentum,
    batch: &[PpoSample<'_>],
    cfg: &OptimConfig,
) -> Result<LossBreakdown> {
    let (grads, breakdown) = ppo_gradients(params, batch, cfg)?;
    mom.step(params, &grads, cfg.lr_on, cfg.momentum, &[]);
    Ok(breakdown)
}

/// n-step V-trace targets for one segment, backward recursion:
/// `v_k = V_k + delta_k + gamma * c_k * (v_{k+1} - V_{k+1})` with
/// `delta_k = rho_k (r_k + gamma V_{k+1} - V_k)` and truncated importance
/// weights `rho_k = min(rho_bar, ratio_k)`, `c_k = min(c_bar, ratio_k)`.
pub fn vtrace_targets(
    rewards: &[f64],
    values: &[f64],
    bootstrap_value: f64,
    ratios: &[f64],
    gamma: f64,
    rho_bar: f64,
    c_bar: f64,
) -> Vec<f64> {
    let n = rewards.len();
    assert_eq!(values.len(), n);
    assert_eq!(ratios.len(), n);
    assert!(rho_bar >= c_bar && c_bar >= 0.0);
    let mut targets = vec![0.0; n];
    let mut next_target = bootstrap_value;
    let mut next_value = bootstrap_value;
    for k in (0..n).rev() {
        let rho = ratios[k].min(rho_bar);
        let c = ratios[k].min(c_bar);
        let delta = rho * (rewards[k] + gamma * next_value - values[k]);
        let v = values[k] + delta + gamma * c * (next_target - next_value);
        targets[k] = v;
        next_target = v;
        next_value = values[k];
    }
    targets
}

/// One off-policy value update over sampled segments.
///
/// Recomputes values and current-policy log-probabilities on the stored
/// observations, forms V-trace targets (treated as constants), and takes a
/// squared-error gradient step on the value output only: both policy-head
/// layers are excluded from the parameter update. Returns the loss and the
/// refreshed per-segment priorities (mean absolute value error against the
/// new targets).
pub fn offpolicy_value_update(
    params: &mut PolicyParams,
    mom: &mut SgdMomentum,
    segments: &[&Segment],
    cfg: &OptimConfig,
) -> Result<(f64, Vec<f64>)> {
    assert!(!segments.is_empty(), "no segments sampled");
    let n_total: usize = segments.iter().map(|s| s.transitions.len()).sum();
    let n_params = params.param_count();
    let chunk_len = segments.len().div_ceil(GRAD_CHUNKS);
    let chunks: Vec<&[&Segment]> = segments.chunks(chunk_len).collect();
    let params_ref: &PolicyParams = params;

    type ChunkOut = (Vec<f64>, f64, Vec<f64>);
    let partials: Vec<Result<ChunkOut>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut grads = vec![0.0; n_params];
            let mut loss_sum = 0.0;
            let mut priorities = Vec::with_capacity(chunk.len());
            for seg in chunk.iter() {
                let caches: Vec<_> = seg
                    .transitions
                    .iter()
                    .map(|t| params_ref.forward_cached(&t.obs.to_f64()))
                    .collect();
                let values: Vec<f64> = caches.iter().map(|c| c.out.value).collect();
                let ratios: Vec<f64> = seg
                    .transitions
                    .iter()
                    .zip(&caches)
                    .map(|(t, c)| {
                        (params_ref.logprob_of(&c.out, &t.action) - t.logprob_behavior).exp()
                    })
                    .collect();
                let rewards: Vec<f64> = seg.transitions.iter().map(|t| t.reward).collect();
                let bootstrap = match &seg.bootstrap_obs {
                    Some(obs) => params_ref.forward(&obs.to_f64()).value,
                    None => 0.0,
                };
                let targets = vtrace_targets(
                    &rewards,
                    &values,
                    bootstrap,
                    &ratios,
                    cfg.gamma,
                    cfg.rho_bar,
                    cfg.c_bar,
                );
                let mut abs_err = 0.0;
                for (cache, &target) in caches.iter().zip(&targets) {
                    let verr = cache.out.value - target;
                    loss_sum += check_finite(verr * verr, "off_value")?;
                    abs_err += verr.abs();
                    let mut og = OutputGrads::zeros(params_ref.cfg());
                    og.d_value = 2.0 * verr / n_total as f64;
                    params_ref.backward(cache, &og, &mut grads);
                }
                priorities.push(abs_err / seg.transitions.len() as f64);
            }
            Ok((grads, loss_sum, priorities))
        })
        .collect();

    let mut grads = vec![0.0; n_params];
    let mut loss = 0.0;
    let mut priorities = Vec::with_capacity(segments.len());
    for partial in partials {
        let (g, l, p) = partial?;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            *acc += gi;
        }
        loss += l;
        priorities.extend(p);
    }
    let skip = params.head_param_ranges();
    mom.step(params, &grads, cfg.lr_off, cfg.momentum, &skip);
    Ok((loss / n_total as f64, priorities))
}

/// Rolls out one episode with the current (stochastic) policy.
pub fn collect_episode<R: Rng + ?Sized>(
    scene: &Scene,
    env_cfg: &EnvConfig,
    cat: &ActionCatalog,
    params: &PolicyParams,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut state = reset(scene, env_cfg, rng)?;
    let mut transitions = Vec::new();
    loop {
        let obs = observe(&state, scene, env_cfg);
        let out = params.forward(&obs.to_f64());
        let (action, logprob) = params.sample_action(&out, cat, rng);
        let (a_rot, a_trans) = action.indices();
        let outcome = step(&mut state, a_rot, a_trans, scene, env_cfg, cat);
        let terminal = matches!(
            outcome.termination,
            Some(Termination::GoalReached) | Some(Termination::BehindCamera)
        );
        transitions.push(Transition {
            obs,
            action,
            logprob_behavior: logprob,
            reward: outcome.reward,
            value_at_collect: out.value,
            done: terminal,
        });
        if state.done {
            let (bootstrap_obs, bootstrap_value) = if terminal {
                (None, 0.0)
            } else {
                let final_obs = observe(&state, scene, env_cfg);
                let v = params.forward(&final_obs.to_f64()).value;
                (Some(final_obs), v)
            };
            return Ok(Trajectory {
                transitions,
                bootstrap_obs,
                bootstrap_value,
                end_iou: state.cur_iou,
            });
        }
    }
}

/// One line of the training metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub update: u64,
    pub l_clip: f64,
    pub l_value: f64,
    pub l_entropy: f64,
    pub l_off: Option<f64>,
    pub mean_episode_end_iou: f64,
    pub mean_episode_len: f64,
    pub env_steps: u64,
}

/// Run-level options for [`train`].
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub seed: u64,
    pub total_env_steps: u64,
    /// Checkpoint file, written every `checkpoint_every` batches and at the
    /// end of training.
    pub checkpoint_path: Option<std::path::PathBuf>,
    pub checkpoint_every: u64,
    /// JSONL metrics stream.
    pub metrics_path: Option<std::path::PathBuf>,
}

/// Aggregate results of a training run.
pub struct TrainStats {
    pub records: Vec<MetricsRecord>,
    pub env_steps: u64,
    pub episodes: u64,
}

/// The composite optimization loop: collect a batch of episodes with the
/// current policy, run clipped-surrogate updates over it, store the
/// episodes' segments in the replay buffer, and run off-policy value
/// updates so the on:off gradient-step ratio stays at the configured value.
pub fn train(
    scenes: &[Scene],
    env_cfg: &EnvConfig,
    cat: &ActionCatalog,
    params: &mut PolicyParams,
    cfg: &OptimConfig,
    opts: &TrainOptions,
) -> Result<TrainStats> {
    assert!(!scenes.is_empty(), "train needs at least one scene");
    env_cfg.validate()?;
    cfg.validate()?;
    assert_eq!(
        params.cfg().obs_res,
        env_cfg.obs_resolution,
        "policy obs_res must match env obs_resolution"
    );

    let mut mom = SgdMomentum::new(params.param_count());
    let mut replay = ReplayBuffer::new(cfg.replay_capacity);
    let mut train_rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, PURPOSE_TRAIN_LOOP));

    let mut metrics_file = match &opts.metrics_path {
        Some(p) => Some(std::io::BufWriter::new(
            std::fs::File::create(p).map_err(|e| Error::io(p, e))?,
        )),
        None => None,
    };

    let mut records = Vec::new();
    let mut env_steps: u64 = 0;
    let mut episode_counter: u64 = 0;
    let mut update_index: u64 = 0;
    let mut on_steps: u64 = 0;
    let mut off_steps: u64 = 0;

    while env_steps < opts.total_env_steps {
        // Collect at least batch_size transitions in deterministic waves of
        // parallel episodes; each episode owns a stream keyed by its global
        // index so results do not depend on thread scheduling.
        let mut trajs: Vec<Trajectory> = Vec::new();
        let mut batch_steps = 0usize;
        {
            let params_ref: &PolicyParams = params;
            while batch_steps < cfg.batch_size {
                let wave: Vec<u64> =
                    (0..COLLECT_WAVE as u64).map(|i| episode_counter + i).collect();
                episode_counter += COLLECT_WAVE as u64;
                let wave_trajs: Vec<Result<Trajectory>> = wave
                    .par_iter()
                    .map(|&e| {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                            opts.seed,
                            PURPOSE_EPISODE_BASE + e,
                        ));
                        let scene = &scenes[(e as usize) % scenes.len()];
                        collect_episode(scene, env_cfg, cat, params_ref, &mut rng)
                    })
                    .collect();
                for t in wave_trajs {
                    let t = t?;
                    batch_steps += t.transitions.len();
                    trajs.push(t);
                }
            }
        }
        env_steps += batch_steps as u64;

        // Advantages and value targets from collection-time values.
        let mut advs: Vec<Vec<f64>> = Vec::with_capacity(trajs.len());
        let mut targs: Vec<Vec<f64>> = Vec::with_capacity(trajs.len());
        for t in &trajs {
            let (a, v) = compute_advantages(t, cfg.gamma);
            advs.push(a);
            targs.push(v);
        }
        if cfg.adv_norm {
            let flat: Vec<f64> = advs.iter().flatten().copied().collect();
            let mean = flat.iter().sum::<f64>() / flat.len() as f64;
            let var = flat.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / flat.len() as f64;
            let std = var.sqrt() + 1e-8;
            for a in advs.iter_mut().flatten() {
                *a = (*a - mean) / std;
            }
        }

        // On-policy epochs over shuffled minibatches.
        let index: Vec<(usize, usize)> = trajs
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| (0..t.transitions.len()).map(move |si| (ti, si)))
            .collect();
        let mut loss_acc = LossBreakdown {
            l_clip: 0.0,
            l_value: 0.0,
            l_entropy: 0.0,
        };
        let mut n_updates = 0u64;
        for _ in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..index.len()).collect();
            order.shuffle(&mut train_rng);
            for mb in order.chunks(cfg.minibatch) {
                let samples: Vec<PpoSample> = mb
                    .iter()
                    .map(|&i| {
                        let (ti, si) = index[i];
                        PpoSample {
                            transition: &trajs[ti].transitions[si],
                            advantage: advs[ti][si],
                            v_target: targs[ti][si],
                        }
                    })
                    .collect();
                let lb = ppo_update(params, &mut mom, &samples, cfg)?;
                loss_acc.l_clip += lb.l_clip;
                loss_acc.l_value += lb.l_value;
                loss_acc.l_entropy += lb.l_entropy;
                n_updates += 1;
            }
        }
        on_steps += n_updates;

        // Store segments with TD-error priorities from collection values.
        for (t, vt) in trajs.iter().zip(&targs) {
            let segments = split_into_segments(t, cfg.n_step);
            let mut at = 0usize;
            for seg in segments {
                let len = seg.transitions.len();
                let priority = seg
                    .transitions
                    .iter()
                    .enumerate()
                    .map(|(i, tr)| (tr.value_at_collect - vt[at + i]).abs())
                    .sum::<f64>()
                    / len as f64;
                replay.push(seg, priority);
                at += len;
            }
        }

        // Off-policy value updates at the configured on:off ratio.
        let mut l_off_sum = 0.0;
        let mut l_off_count = 0u64;
        if cfg.on_off_ratio > 0 {
            while off_steps * cfg.on_off_ratio as u64 + cfg.on_off_ratio as u64 <= on_steps {
                let idxs = replay.sample_indices(cfg.off_segments, &mut train_rng, false)?;
                let segs: Vec<&Segment> = idxs.iter().map(|&i| replay.get(i)).collect();
                let (l_off, priorities) = offpolicy_value_update(params, &mut mom, &segs, cfg)?;
                drop(segs);
                for (&i, &p) in idxs.iter().zip(&priorities) {
                    replay.update_priority(i, p);
                }
                l_off_sum += l_off;
                l_off_count += 1;
                off_steps += 1;
            }
        }

        // Parameters must stay finite after every update in the batch.
        if let Some(bad) = params.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                component: "parameters",
                value: *bad,
            });
        }

        let sum_iou: f64 = trajs.iter().map(|t| t.end_iou).sum();
        let sum_len: usize = trajs.iter().map(|t| t.transitions.len()).sum();
        let record = MetricsRecord {
            update: update_index,
            l_clip: loss_acc.l_clip / n_updates as f64,
            l_value: loss_acc.l_value / n_updates as f64,
            l_entropy: loss_acc.l_entropy / n_updates as f64,
            l_off: (l_off_count > 0).then(|| l_off_sum / l_off_count as f64),
            mean_episode_end_iou: sum_iou / trajs.len() as f64,
            mean_episode_len: sum_len as f64 / trajs.len() as f64,
            env_steps,
        };
        if let Some(f) = metrics_file.as_mut() {
            let line = serde_json::to_string(&record).expect("metrics serialize");
            writeln!(f, "{line}").map_err(|e| {
                Error::io(opts.metrics_path.clone().unwrap(), e)
            })?;
        }
        records.push(record);
        update_index += 1;

        if let Some(path) = &opts.checkpoint_path {
            if opts.checkpoint_every > 0 && update_index.is_multiple_of(opts.checkpoint_every) {
                save_checkpoint(path, params, &mom, opts.seed, &CheckpointCounters {
                    env_steps,
                    episodes: episode_counter,
                    updates: update_index,
                    train_rng_word_pos: train_rng.get_word_pos(),
                })?;
            }
        }
    }

    if let Some(f) = metrics_file.as_mut() {
        f.flush()
            .map_err(|e| Error::io(opts.metrics_path.clone().unwrap(), e))?;
    }
    if let Some(path) = &opts.checkpoint_path {
        save_checkpoint(path, params, &mom, opts.seed, &CheckpointCounters {
            env_steps,
            episodes: episode_counter,
            updates: update_index,
            train_rng_word_pos: train_rng.get_word_pos(),
        })?;
    }

    Ok(TrainStats {
        records,
        env_steps,
        episodes: episode_counter,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints: policy blob + momentum + RNG state, versioned.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"PRLCKPT\n";
const CKPT_VERSION: u32 = 1;

/// Progress counters stored in a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointCounters {
    pub env_steps: u64,
    pub episodes: u64,
    pub updates: u64,
    pub train_rng_word_pos: u128,
}

pub fn save_checkpoint(
    path: &Path,
    params: &PolicyParams,
    mom: &SgdMomentum,
    seed: u64,
    counters: &CheckpointCounters,
) -> Result<()> {
    let policy = params.to_bytes();
    let mut out = Vec::with_capacity(policy.len() + mom.velocity().len() * 8 + 96);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(policy.len() as u64).to_le_bytes());
    out.extend_from_slice(&policy);
    out.extend_from_slice(&(mom.velocity().len() as u64).to_le_bytes());
    for &v in mom.velocity() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&seed.to_le_bytes());
    out.extend_from_slice(&counters.env_steps.to_le_bytes());
    out.extend_from_slice(&counters.episodes.to_le_bytes());
    out.extend_from_slice(&counters.updates.to_le_bytes());
    out.extend_from_slice(&counters.train_rng_word_pos.to_le_bytes());
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub struct Checkpoint {
    pub params: PolicyParams,
    pub momentum: Vec<f64>,
    pub seed: u64,
    pub counters: CheckpointCounters,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let err = |offset: usize, msg: &str| Error::ParamParse {
        offset,
        msg: msg.to_string(),
    };
    let need = |pos: usize, n: usize| -> Result<()> {
        if pos + n > buf.len() {
            Err(err(pos, "truncated checkpoint"))
        } else {
            Ok(())
        }
    };
    let mut pos = 0usize;
    need(pos, 8)?;
    if &buf[..8] != CKPT_MAGIC {
        return Err(err(0, "bad checkpoint magic"));
    }
    pos += 8;
    need(pos, 4)?;
    let version = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CKPT_VERSION,
        });
    }
    pos += 4;
    need(pos, 8)?;
    let policy_len = u64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap()) as usize;
    pos += 8;
    need(pos, policy_len)?;
    let params = PolicyParams::from_bytes(&buf[pos..pos + policy_len])?;
    pos += policy_len;
    need(pos, 8)?;
    let mom_len = u64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap()) as usize;
    pos += 8;
    need(pos, mom_len * 8)?;
    let mut momentum = Vec::with_capacity(mom_len);
    for i in 0..mom_len {
        momentum.push(f64::from_le_bytes(
            buf[pos + i * 8..pos + i * 8 + 8].try_into().unwrap(),
        ));
    }
    pos += mom_len * 8;
    need(pos, 8 * 4 + 16)?;
    let seed = u64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap());
    pos += 8;
    let env_steps = u64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap());
    pos += 8;
    let episodes = u64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap());
    pos += 8;
    let updates = u64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap());
    pos += 8;
    let train_rng_word_pos = u128::from_le_bytes(buf[pos..pos + 16].try_into().unwrap());
    Ok(Checkpoint {
        params,
        momentum,
        seed,
        counters: CheckpointCounters {
            env_steps,
            episodes,
            updates,
            train_rng_word_pos,
        },
    })
}
