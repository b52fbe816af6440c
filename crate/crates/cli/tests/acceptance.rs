//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers (visible with `--nocapture`; the test name itself is
//! the pass/fail line otherwise).
//!
//! Criteria 7-10 train policies; they share one desk-scale configuration
//! (64x64 camera on the default asymmetric object, 32x32 observations, the
//! §-default reward stack) and reuse trained artifacts across criteria via
//! a process-wide cache.

use std::sync::OnceLock;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pose_rl::env::{observe, reset, step, BBoxSource, EnvConfig, Scene};
use pose_rl::eval::{evaluate, CurvePoint, EvalOptions};
use pose_rl::metrics::{add, add_s, diameter, proj2d};
use pose_rl::optim::{
    offpolicy_value_update, ppo_gradients, train, vtrace_targets, OptimConfig, PpoSample, Segment,
    SgdMomentum, TrainOptions, Transition,
};
use pose_rl::policy::{HeadMode, OutputGrads, PolicyConfig, PolicyParams};
use pose_rl::pose::{apply_action, ActionCatalog, Pose, ACTION_COUNT, IDENTITY_ACTION};
use pose_rl::raster::{render_mask, CameraIntrinsics, Mask, Mesh};
use pose_rl::reward::{map_f, RewardConfig};

// ---------------------------------------------------------------------------
// Shared desk-scale setup.
// ---------------------------------------------------------------------------

fn desk_camera() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 240.0,
        fy: 240.0,
        cx: 32.0,
        cy: 32.0,
        width: 64,
        height: 64,
    }
}

/// The default asymmetric object (corner-cut box) in front of the desk
/// camera.
fn desk_scene() -> Scene {
    let mesh = Mesh::corner_cut_box(0.05, 0.035, 0.025, 0.5);
    let gt = Pose::from_parts(1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.6);
    Scene::new(mesh, desk_camera(), gt, false).unwrap()
}

fn desk_env() -> EnvConfig {
    EnvConfig {
        obs_resolution: 32,
        ..EnvConfig::default()
    }
}

fn desk_policy_cfg(mode: HeadMode) -> PolicyConfig {
    PolicyConfig {
        obs_channels: 4,
        obs_res: 32,
        conv_channels: vec![6, 12, 24],
        fc_units: 128,
        value_units: 128,
        head_mode: mode,
        sigma_r: 0.1,
        sigma_t: 0.1,
    }
}

/// Fine small steps for the desk scale; large steps close the 45-degree /
/// 5 cm initial gap in a handful of moves.
fn desk_catalog() -> ActionCatalog {
    ActionCatalog::new(1.5, 10.0, 0.0025, 0.02)
}

fn desk_optim(seed_budget: u64) -> (OptimConfig, u64) {
    (
        OptimConfig {
            gamma: 0.9,
            lr_on: 5e-4,
            lr_off: 5e-4,
            epochs: 4,
            ..OptimConfig::default()
        },
        seed_budget,
    )
}

fn train_policy(
    scene: &Scene,
    env_cfg: &EnvConfig,
    cat: &ActionCatalog,
    mode: HeadMode,
    optim: &OptimConfig,
    seed: u64,
    budget: u64,
) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(pose_rl::derive_seed(seed, 0x11817));
    let mut params = PolicyParams::init(desk_policy_cfg(mode), &mut rng);
    let opts = TrainOptions {
        seed,
        total_env_steps: budget,
        checkpoint_path: None,
        checkpoint_every: 0,
        metrics_path: None,
    };
    train(&[scene.clone()], env_cfg, cat, &mut params, optim, &opts).unwrap();
    params
}

fn eval_policy(
    scene: &Scene,
    env_cfg: &EnvConfig,
    cat: &ActionCatalog,
    params: &PolicyParams,
    episodes: usize,
    seed: u64,
) -> pose_rl::eval::EvalResult {
    let eval_env = EnvConfig {
        bbox_source: BBoxSource::InitialPoseProjection,
        ..env_cfg.clone()
    };
    let opts = EvalOptions {
        episodes,
        seed,
        ..EvalOptions::default()
    };
    evaluate(scene, &eval_env, cat, params, &opts).unwrap()
}

/// Trained-vs-untrained outcomes shared by criteria 7 and 8.
struct SeedOutcome {
    seed: u64,
    trained_success_pct: f64,
    untrained_success_pct: f64,
    curve: Vec<CurvePoint>,
    env_steps_budget: u64,
}

static LEARNING_RUNS: OnceLock<Vec<SeedOutcome>> = OnceLock::new();

const LEARNING_SEEDS: [u64; 3] = [1, 2, 3];
const LEARNING_BUDGET: u64 = 150_000;
const EVAL_EPISODES: usize = 200;
const EVAL_SEED: u64 = 999;

fn learning_runs() -> &'static [SeedOutcome] {
    LEARNING_RUNS.get_or_init(|| {
        let scene = desk_scene();
        let env_cfg = desk_env();
        let cat = desk_catalog();
        let (optim, budget) = desk_optim(LEARNING_BUDGET);
        LEARNING_SEEDS
            .iter()
            .map(|&seed| {
                let untrained = {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(pose_rl::derive_seed(seed, 0x11817));
                    PolicyParams::init(desk_policy_cfg(HeadMode::Discrete13), &mut rng)
                };
                let base = eval_policy(&scene, &env_cfg, &cat, &untrained, EVAL_EPISODES, EVAL_SEED);
                let params = train_policy(
                    &scene,
                    &env_cfg,
                    &cat,
                    HeadMode::Discrete13,
                    &optim,
                    seed,
                    budget,
                );
                let trained = eval_policy(&scene, &env_cfg, &cat, &params, EVAL_EPISODES, EVAL_SEED);
                eprintln!(
                    "[learning] seed {seed}: untrained {:.1}% -> trained {:.1}% (mean end IoU {:.3})",
                    base.success_pct, trained.success_pct, trained.mean_end_iou
                );
                SeedOutcome {
                    seed,
                    trained_success_pct: trained.success_pct,
                    untrained_success_pct: base.success_pct,
                    curve: trained.curve.clone(),
                    env_steps_budget: budget,
                }
            })
            .collect()
    })
}

// ---------------------------------------------------------------------------
// Criterion 1: reward fidelity.
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_reward_fidelity() {
    let cfg = RewardConfig::default();
    assert!((map_f(1.0, &cfg) - 2.0).abs() < 1e-12);
    assert!((map_f(0.5, &cfg) - 0.05).abs() < 1e-12);

    // Telescoping over 100 random-action episodes in the real environment.
    let scene = desk_scene();
    let env_cfg = desk_env();
    let cat = ActionCatalog::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    for _ in 0..100 {
        let mut state = reset(&scene, &env_cfg, &mut rng).unwrap();
        let start = state.cur_iou;
        let mut sum_ri = 0.0;
        while !state.done {
            let out = step(
                &mut state,
                rng.random_range(0..ACTION_COUNT),
                rng.random_range(0..ACTION_COUNT),
                &scene,
                &env_cfg,
                &cat,
            );
            sum_ri += out.r_i;
        }
        let expected = map_f(state.cur_iou, &cfg) - map_f(start, &cfg);
        assert!(
            (sum_ri - expected).abs() < 1e-12,
            "telescoping broke: {sum_ri} vs {expected}"
        );
    }
    println!("ACCEPTANCE 1 PASS: map_f pinned values exact; IoU-difference reward telescopes over 100 episodes within 1e-12");
}

// ---------------------------------------------------------------------------
// Criterion 2: rasterizer oracle equivalence.
// ---------------------------------------------------------------------------

fn orient_i128(a: (i64, i64), b: (i64, i64), c: (i64, i64)) -> i128 {
    (b.0 - a.0) as i128 * (c.1 - a.1) as i128 - (b.1 - a.1) as i128 * (c.0 - a.0) as i128
}

/// Brute-force per-pixel oracle: every pixel against every triangle, using
/// the documented fill rule (1/256 snapping, pixel-center sampling,
/// top-left ownership).
fn oracle_render(mesh: &Mesh, pose: &Pose, k: &CameraIntrinsics) -> Mask {
    let projected = pose_rl::raster::project_points(k, pose, mesh.vertices()).unwrap();
    let snapped: Vec<(i64, i64)> = projected
        .iter()
        .map(|&(u, v)| ((u * 256.0).round() as i64, (v * 256.0).round() as i64))
        .collect();
    let mut mask = Mask::new(k.width, k.height);
    for py in 0..k.height as i64 {
        for px in 0..k.width as i64 {
            let s = (px * 256 + 128, py * 256 + 128);
            let mut covered = false;
            for tri in mesh.triangles() {
                let mut c = [
                    snapped[tri[0] as usize],
                    snapped[tri[1] as usize],
                    snapped[tri[2] as usize],
                ];
                let area = orient_i128(c[0], c[1], c[2]);
                if area == 0 {
                    continue;
                }
                if area < 0 {
                    c.swap(0, 1);
                }
                let mut inside = true;
                for e in 0..3 {
                    let a = c[(e + 1) % 3];
                    let b = c[(e + 2) % 3];
                    let w = orient_i128(a, b, s);
                    let top_left = (a.1 == b.1 && b.0 > a.0) || (b.1 < a.1);
                    if w < 0 || (w == 0 && !top_left) {
                        inside = false;
                        break;
                    }
                }
                if inside {
                    covered = true;
                    break;
                }
            }
            if covered {
                mask.set(px as u32, py as u32);
            }
        }
    }
    mask
}

fn random_mesh(rng: &mut ChaCha8Rng) -> Mesh {
    // Random point cloud with random triangles; closedness is irrelevant
    // to silhouette equivalence.
    let n = rng.random_range(5..12);
    let verts: Vec<Vector3<f64>> = (0..n)
        .map(|_| {
            Vector3::new(
                (rng.random::<f64>() - 0.5) * 0.12,
                (rng.random::<f64>() - 0.5) * 0.12,
                (rng.random::<f64>() - 0.5) * 0.12,
            )
        })
        .collect();
    let tris: Vec<[u32; 3]> = (0..rng.random_range(4..10))
        .map(|_| {
            [
                rng.random_range(0..n as u32),
                rng.random_range(0..n as u32),
                rng.random_range(0..n as u32),
            ]
        })
        .collect();
    Mesh::new(verts, tris).unwrap()
}

#[test]
fn criterion_02_rasterizer_oracle_equivalence() {
    let k = desk_camera();
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    for case in 0..20 {
        let mesh = match case % 3 {
            0 => Mesh::corner_cut_box(0.05, 0.035, 0.025, 0.5),
            1 => Mesh::axis_box(0.05, 0.035, 0.025),
            _ => random_mesh(&mut rng),
        };
        let axis = Vector3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        );
        let angle = (rng.random::<f64>() - 0.5) * 2.0 * std::f64::consts::PI;
        let q = if axis.norm() < 1e-9 {
            nalgebra::UnitQuaternion::identity()
        } else {
            nalgebra::UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
        };
        let pose = Pose::new(
            q,
            Vector3::new(
                (rng.random::<f64>() - 0.5) * 0.1,
                (rng.random::<f64>() - 0.5) * 0.1,
                0.4 + rng.random::<f64>() * 0.5,
            ),
        );
        let fast = render_mask(&mesh, &pose, &k).unwrap();
        let slow = oracle_render(&mesh, &pose, &k);
        assert_eq!(fast, slow, "case {case}: renderer diverged from the per-pixel oracle");
    }
    println!("ACCEPTANCE 2 PASS: 20/20 random mesh/pose cases bit-exact against the per-pixel barycentric oracle at 64x64");
}

// ---------------------------------------------------------------------------
// Criterion 3: gradient correctness on the full losses.
// ---------------------------------------------------------------------------

fn tiny_policy(mode: HeadMode, rng: &mut ChaCha8Rng) -> PolicyParams {
    let cfg = PolicyConfig {
        obs_channels: 4,
        obs_res: 8,
        conv_channels: vec![2],
        fc_units: 8,
        value_units: 8,
        head_mode: mode,
        sigma_r: 0.1,
        sigma_t: 0.1,
    };
    let mut params = PolicyParams::init(cfg, rng);
    for v in params.data_mut().iter_mut() {
        *v += (rng.random::<f64>() - 0.5) * 0.05;
    }
    assert!(params.param_count() <= 2000, "policy too large for the FD sweep");
    params
}

fn random_obs_grid(res: usize, rng: &mut ChaCha8Rng) -> pose_rl::env::ObsGrid {
    pose_rl::env::ObsGrid {
        res,
        data: (0..4 * res * res).map(|_| rng.random_range(-1i8..=1)).collect(),
    }
}

#[test]
fn criterion_03_gradient_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let cat = ActionCatalog::default();
    let cfg = OptimConfig {
        adv_norm: false,
        ..OptimConfig::default()
    };

    let params = tiny_policy(HeadMode::Discrete13, &mut rng);
    let mut transitions = Vec::new();
    let mut advs = Vec::new();
    let mut targs = Vec::new();
    for _ in 0..6 {
        let obs = random_obs_grid(8, &mut rng);
        let out = params.forward(&obs.to_f64());
        let (action, lp) = params.sample_action(&out, &cat, &mut rng);
        transitions.push(Transition {
            obs,
            action,
            logprob_behavior: lp - 0.05,
            reward: rng.random::<f64>(),
            value_at_collect: out.value,
            done: false,
        });
        advs.push(rng.random::<f64>() * 2.0 - 1.0);
        targs.push(rng.random::<f64>() * 2.0 - 1.0);
    }
    let samples: Vec<PpoSample> = transitions
        .iter()
        .zip(advs.iter().zip(&targs))
        .map(|(t, (&a, &v))| PpoSample {
            transition: t,
            advantage: a,
            v_target: v,
        })
        .collect();

    // Full on-policy loss: clipped surrogate + value + entropy terms.
    let (grads, _) = ppo_gradients(&params, &samples, &cfg).unwrap();
    let on_loss = |p: &PolicyParams| -> f64 {
        let mut total = 0.0;
        for s in &samples {
            let out = p.forward(&s.transition.obs.to_f64());
            let lp = p.logprob_of(&out, &s.transition.action);
            let (h, _, _) = p.entropy_and_grad(&out);
            let ratio = (lp - s.transition.logprob_behavior).exp();
            let unclipped = ratio * s.advantage;
            let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * s.advantage;
            let verr = out.value - s.v_target;
            total += -unclipped.min(clipped) + cfg.lambda_v * verr * verr - cfg.lambda_e * h;
        }
        total / samples.len() as f64
    };
    let on_err = max_fd_error(&params, &grads, on_loss);
    assert!(on_err < 1e-4, "on-policy FD error {on_err}");

    // Off-policy loss with frozen V-trace targets.
    let seg = Segment {
        transitions: transitions.clone(),
        bootstrap_obs: Some(random_obs_grid(8, &mut rng)),
    };
    let targets = {
        let values: Vec<f64> = seg
            .transitions
            .iter()
            .map(|t| params.forward(&t.obs.to_f64()).value)
            .collect();
        let ratios: Vec<f64> = seg
            .transitions
            .iter()
            .map(|t| {
                (params.logprob_of(&params.forward(&t.obs.to_f64()), &t.action)
                    - t.logprob_behavior)
                    .exp()
            })
            .collect();
        let rewards: Vec<f64> = seg.transitions.iter().map(|t| t.reward).collect();
        let bootstrap = params
            .forward(&seg.bootstrap_obs.as_ref().unwrap().to_f64())
            .value;
        vtrace_targets(
            &rewards, &values, bootstrap, &ratios, cfg.gamma, cfg.rho_bar, cfg.c_bar,
        )
    };
    // Analytic gradient from a unit-lr zero-momentum update against the
    // same frozen targets.
    let mut stepped = params.clone();
    let mut mom = SgdMomentum::new(stepped.param_count());
    let unit = OptimConfig {
        lr_off: 1.0,
        momentum: 0.0,
        ..cfg.clone()
    };
    offpolicy_value_update(&mut stepped, &mut mom, &[&seg], &unit).unwrap();
    let mut analytic: Vec<f64> = params
        .data()
        .iter()
        .zip(stepped.data())
        .map(|(a, b)| a - b)
        .collect();
    for r in params.head_param_ranges() {
        for i in r {
            analytic[i] = f64::NAN; // frozen by contract, excluded below
        }
    }
    let off_loss = |p: &PolicyParams| -> f64 {
        seg.transitions
            .iter()
            .zip(&targets)
            .map(|(t, &tv)| {
                let v = p.forward(&t.obs.to_f64()).value;
                (v - tv) * (v - tv)
            })
            .sum::<f64>()
            / seg.transitions.len() as f64
    };
    let off_err = max_fd_error(&params, &analytic, off_loss);
    assert!(off_err < 1e-4, "off-policy FD error {off_err}");

    println!(
        "ACCEPTANCE 3 PASS: finite-difference agreement on {} params; on-policy max rel err {on_err:.2e}, off-policy {off_err:.2e}",
        params.param_count()
    );
}

fn max_fd_error<F: Fn(&PolicyParams) -> f64>(
    params: &PolicyParams,
    analytic: &[f64],
    loss: F,
) -> f64 {
    let h = 1e-4;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.param_count() {
        if analytic[i].is_nan() {
            continue;
        }
        let orig = params.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = loss(&probe);
        probe.data_mut()[i] = orig - h;
        let down = loss(&probe);
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max((fd - analytic[i]).abs() / denom);
    }
    worst
}

// ---------------------------------------------------------------------------
// Criterion 4: V-trace reductions.
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_vtrace_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    // Unit ratios reproduce n-step bootstrap returns for lengths 1..8.
    for n in 1..=8usize {
        let rewards: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let bootstrap = rng.random::<f64>();
        let gamma = 0.95;
        let targets =
            vtrace_targets(&rewards, &values, bootstrap, &vec![1.0; n], gamma, 1.0, 1.0);
        for k in 0..n {
            let mut expect = 0.0;
            for l in k..n {
                expect += gamma.powi((l - k) as i32) * rewards[l];
            }
            expect += gamma.powi((n - k) as i32) * bootstrap;
            assert!((targets[k] - expect).abs() < 1e-9, "length {n} step {k}");
        }
    }
    // Zero truncation levels return the value estimates exactly.
    let rewards: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
    let values: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
    let ratios: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 3.0).collect();
    let targets = vtrace_targets(&rewards, &values, 0.3, &ratios, 0.99, 0.0, 0.0);
    assert_eq!(targets, values);

    // Random segments against the brute-force double-loop oracle.
    for _ in 0..200 {
        let n = rng.random_range(1..9);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let ratios: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.5).collect();
        let bootstrap = rng.random::<f64>() * 2.0 - 1.0;
        let gamma = rng.random::<f64>() * 0.99;
        let rho_bar = 1.0 + rng.random::<f64>();
        let c_bar = rho_bar * rng.random::<f64>();
        let targets =
            vtrace_targets(&rewards, &values, bootstrap, &ratios, gamma, rho_bar, c_bar);
        let value_at = |i: usize| if i == n { bootstrap } else { values[i] };
        for k in 0..n {
            let mut expect = values[k];
            for q in k..n {
                let rho = ratios[q].min(rho_bar);
                let delta = rho * (rewards[q] + gamma * value_at(q + 1) - values[q]);
                let mut prod = 1.0;
                for i in k..q {
                    prod *= ratios[i].min(c_bar);
                }
                expect += gamma.powi((q - k) as i32) * prod * delta;
            }
            assert!((targets[k] - expect).abs() < 1e-12);
        }
    }
    println!("ACCEPTANCE 4 PASS: V-trace matches n-step returns at unit ratios (1..8), collapses to V at zero truncation, and matches the brute-force oracle within 1e-12");
}

// ---------------------------------------------------------------------------
// Criterion 5: disentanglement and inverses.
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_disentanglement_and_inverses() {
    let cat = ActionCatalog::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    for _ in 0..10_000 {
        let axis = Vector3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        );
        let angle = (rng.random::<f64>() - 0.5) * 2.0 * std::f64::consts::PI;
        let q = if axis.norm() < 1e-9 {
            nalgebra::UnitQuaternion::identity()
        } else {
            nalgebra::UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
        };
        let p = Pose::new(
            q,
            Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() + 0.5,
            ),
        );
        let rot = rng.random_range(0..ACTION_COUNT);
        let trans = rng.random_range(0..ACTION_COUNT);

        // Rotation ops never alter translation, bit-exact.
        let r = apply_action(&p, rot, IDENTITY_ACTION, &cat);
        assert_eq!(p.t, r.t);
        // Translation ops never alter rotation, bit-exact.
        let s = apply_action(&p, IDENTITY_ACTION, trans, &cat);
        assert_eq!(p.q.into_inner(), s.q.into_inner());

        // Mirrored pairs cancel within 1e-9.
        let fwd = apply_action(&p, rot, trans, &cat);
        let back = apply_action(&fwd, cat.inverse_index(rot), cat.inverse_index(trans), &cat);
        assert!(back.rotation_angle_to(&p) < 1e-9);
        assert!((back.t - p.t).norm() < 1e-9);
    }
    println!("ACCEPTANCE 5 PASS: 10^4 random (pose, action) cases; rotation ops leave translation bit-identical and mirrored pairs cancel within 1e-9");
}

// ---------------------------------------------------------------------------
// Criterion 6: metric correctness.
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_metric_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(1006);
    let pts = Mesh::corner_cut_box(0.05, 0.035, 0.025, 0.5)
        .vertices()
        .to_vec();

    // Pure translation: ADD equals the displacement norm exactly.
    let gt = Pose::from_parts(0.9, 0.1, -0.2, 0.3, 0.0, 0.0, 0.6);
    let d = Vector3::new(0.01, -0.02, 0.03);
    let est = Pose { q: gt.q, t: gt.t + d };
    assert_eq!(add(&pts, &gt, &est), d.norm());

    // Unit-cube diameter.
    let cube = Mesh::axis_box(0.5, 0.5, 0.5).vertices().to_vec();
    assert!((diameter(&cube) - 3.0f64.sqrt()).abs() < 1e-12);

    // ADD-S <= ADD on 1e3 random pose pairs.
    for _ in 0..1000 {
        let mk = |rng: &mut ChaCha8Rng| {
            let axis = Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            );
            let angle = (rng.random::<f64>() - 0.5) * 2.0 * std::f64::consts::PI;
            let q = if axis.norm() < 1e-9 {
                nalgebra::UnitQuaternion::identity()
            } else {
                nalgebra::UnitQuaternion::from_axis_angle(
                    &nalgebra::Unit::new_normalize(axis),
                    angle,
                )
            };
            Pose::new(
                q,
                Vector3::new(
                    (rng.random::<f64>() - 0.5) * 0.2,
                    (rng.random::<f64>() - 0.5) * 0.2,
                    0.4 + rng.random::<f64>(),
                ),
            )
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        assert!(add_s(&pts, &a, &b) <= add(&pts, &a, &b) + 1e-12);
    }

    // Symmetric prism: half turn about the symmetry axis collapses ADD-S.
    let prism = Mesh::axis_box(0.04, 0.04, 0.08).vertices().to_vec();
    let gt = Pose::from_parts(1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.6);
    let half = nalgebra::UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::PI);
    let est = gt.compose(&half, &Vector3::zeros());
    let a = add(&prism, &gt, &est);
    let s = add_s(&prism, &gt, &est);
    assert!(a > 0.01 && s < 1e-9, "ADD {a}, ADD-S {s}");

    // Reprojection sanity on the same construction.
    assert_eq!(proj2d(&pts, &desk_camera(), &gt, &gt).unwrap(), 0.0);

    println!("ACCEPTANCE 6 PASS: ADD translation case exact, cube diameter sqrt(3) within 1e-12, ADD-S <= ADD on 10^3 cases, symmetric prism gives ADD-S ~ 0 with ADD > 0");
}

// ---------------------------------------------------------------------------
// Criterion 7: desk-scale learning.
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_desk_scale_learning() {
    let runs = learning_runs();
    let mut passes = 0;
    for r in runs {
        assert!(
            r.untrained_success_pct < 20.0,
            "seed {}: untrained policy too strong ({:.1}%)",
            r.seed,
            r.untrained_success_pct
        );
        assert!(r.env_steps_budget <= 200_000);
        if r.trained_success_pct >= 80.0 {
            passes += 1;
        }
    }
    let detail: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: {:.1}%", r.seed, r.trained_success_pct))
        .collect();
    assert!(
        passes >= 2,
        "desk-scale learning below bar on {} of 3 seeds ({})",
        3 - passes,
        detail.join(", ")
    );
    println!(
        "ACCEPTANCE 7 PASS: trained success {} vs untrained <20% on all seeds; {passes}/3 seeds at >= 80% within {} env steps",
        detail.join(", "),
        LEARNING_BUDGET
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: step-curve shape.
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_step_curve_shape() {
    let runs = learning_runs();
    let mut ok = 0;
    let mut detail = Vec::new();
    for r in runs {
        let acc = |step: usize| -> f64 {
            r.curve
                .iter()
                .find(|p| p.step == step)
                .map(|p| p.proj2d_acc_pct)
                .unwrap_or_else(|| panic!("no checkpoint at step {step}"))
        };
        let (a5, a20, a50) = (acc(5), acc(20), acc(50));
        detail.push(format!(
            "seed {}: acc@5={a5:.1}% acc@20={a20:.1}% acc@50={a50:.1}%",
            r.seed
        ));
        if a20 >= a5 && (a50 - a20).abs() <= 5.0 {
            ok += 1;
        }
    }
    assert!(
        ok >= 2,
        "step-curve shape violated on {} of 3 seeds ({})",
        3 - ok,
        detail.join("; ")
    );
    println!(
        "ACCEPTANCE 8 PASS: accuracy rises from step 5 to 20 and plateaus to step 50 within 5 points ({})",
        detail.join("; ")
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: optimization-strategy ablation.
// ---------------------------------------------------------------------------

const ABLATION_BUDGET: u64 = 30_000;
const ABLATION_EVAL_EPISODES: usize = 100;

#[test]
fn criterion_09_optimization_strategy_ablation() {
    let scene = desk_scene();
    let env_cfg = desk_env();
    let cat = desk_catalog();
    let (composite_cfg, budget) = desk_optim(ABLATION_BUDGET);
    let pure_cfg = OptimConfig {
        on_off_ratio: 0,
        ..composite_cfg.clone()
    };
    let mut wins = 0;
    let mut detail = Vec::new();
    for &seed in &LEARNING_SEEDS {
        let composite = train_policy(
            &scene,
            &env_cfg,
            &cat,
            HeadMode::Discrete13,
            &composite_cfg,
            seed,
            budget,
        );
        let pure = train_policy(
            &scene,
            &env_cfg,
            &cat,
            HeadMode::Discrete13,
            &pure_cfg,
            seed,
            budget,
        );
        let ev_c = eval_policy(&scene, &env_cfg, &cat, &composite, ABLATION_EVAL_EPISODES, EVAL_SEED);
        let ev_p = eval_policy(&scene, &env_cfg, &cat, &pure, ABLATION_EVAL_EPISODES, EVAL_SEED);
        detail.push(format!(
            "seed {seed}: composite {:.3} vs pure {:.3}",
            ev_c.mean_end_iou, ev_p.mean_end_iou
        ));
        if ev_c.mean_end_iou >= ev_p.mean_end_iou {
            wins += 1;
        }
    }
    assert!(
        wins >= 2,
        "composite arm behind pure on-policy on {} of 3 seeds ({})",
        3 - wins,
        detail.join("; ")
    );
    println!(
        "ACCEPTANCE 9 PASS: composite mean episode-end IoU >= pure on-policy on {wins}/3 seeds at matched {ABLATION_BUDGET}-step budgets ({})",
        detail.join("; ")
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: action-style ablation.
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_action_style_ablation() {
    let scene = desk_scene();
    let env_cfg = desk_env();
    let cat = desk_catalog();
    let (optim, budget) = desk_optim(ABLATION_BUDGET);
    let mut wins = 0;
    let mut detail = Vec::new();
    for &seed in &LEARNING_SEEDS {
        let discrete = train_policy(
            &scene,
            &env_cfg,
            &cat,
            HeadMode::Discrete13,
            &optim,
            seed,
            budget,
        );
        let continuous = train_policy(
            &scene,
            &env_cfg,
            &cat,
            HeadMode::Continuous,
            &optim,
            seed,
            budget,
        );
        let ev_d = eval_policy(&scene, &env_cfg, &cat, &discrete, ABLATION_EVAL_EPISODES, EVAL_SEED);
        let ev_c = eval_policy(
            &scene,
            &env_cfg,
            &cat,
            &continuous,
            ABLATION_EVAL_EPISODES,
            EVAL_SEED,
        );
        detail.push(format!(
            "seed {seed}: discrete {:.1}% vs continuous {:.1}%",
            ev_d.success_pct, ev_c.success_pct
        ));
        if ev_d.success_pct >= ev_c.success_pct {
            wins += 1;
        }
    }
    assert!(
        wins >= 2,
        "discrete head behind continuous on {} of 3 seeds ({})",
        3 - wins,
        detail.join("; ")
    );
    println!(
        "ACCEPTANCE 10 PASS: discrete success rate >= continuous on {wins}/3 seeds at matched {ABLATION_BUDGET}-step budgets ({})",
        detail.join("; ")
    );
}

// ---------------------------------------------------------------------------
// Criterion 11: command determinism.
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_command_determinism() {
    use std::process::Command;
    let bin = env!("CARGO_BIN_EXE_pose-rl");
    let base = std::env::temp_dir().join(format!("pose_rl_accept11_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&base);
    std::fs::create_dir_all(&base).unwrap();

    let fast: Vec<String> = [
        "scene.width=64",
        "scene.height=64",
        "scene.fx=240",
        "scene.fy=240",
        "scene.cx=32",
        "scene.cy=32",
        "env.obs_resolution=16",
        "env.max_episode_len=10",
        "policy.conv_channels=4 8",
        "policy.fc_units=32",
        "policy.value_units=32",
        "optim.batch_size=32",
        "optim.minibatch=16",
        "optim.off_segments=2",
        "run.max_steps=96",
        "run.episodes=6",
        "eval.step_checkpoints=0 2 5 10",
    ]
    .iter()
    .flat_map(|kv| ["--set".to_string(), kv.to_string()])
    .collect();

    let run = |args: &[&str], extra: &[String]| {
        let out = Command::new(bin).args(args).args(extra).output().unwrap();
        assert!(
            out.status.success(),
            "command {:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let bytes = |p: std::path::PathBuf| std::fs::read(&p).unwrap();

    // gen-scene twice.
    let g1 = base.join("g1");
    let g2 = base.join("g2");
    for g in [&g1, &g2] {
        let mut extra = fast.clone();
        extra.extend(["--seed".to_string(), "5".to_string()]);
        extra.extend(["--out".to_string(), g.display().to_string()]);
        run(&["gen-scene"], &extra);
    }
    assert_eq!(bytes(g1.join("mesh.obj")), bytes(g2.join("mesh.obj")));

    // train twice from the same scene.
    let cfg = g1.join("scene.cfg").display().to_string();
    let t1 = base.join("t1");
    let t2 = base.join("t2");
    for t in [&t1, &t2] {
        run(
            &["train", "--config", &cfg],
            &["--out".to_string(), t.display().to_string()],
        );
    }
    assert_eq!(
        bytes(t1.join("metrics.jsonl")),
        bytes(t2.join("metrics.jsonl")),
        "training metrics logs differ between identical runs"
    );
    assert_eq!(
        bytes(t1.join("checkpoint.bin")),
        bytes(t2.join("checkpoint.bin")),
        "checkpoints differ between identical runs"
    );

    // eval twice from the same checkpoint.
    let ckpt = t1.join("checkpoint.bin").display().to_string();
    let e1 = base.join("e1");
    let e2 = base.join("e2");
    for e in [&e1, &e2] {
        run(
            &["eval", "--config", &cfg, "--checkpoint", &ckpt],
            &["--out".to_string(), e.display().to_string()],
        );
    }
    assert_eq!(bytes(e1.join("reports.jsonl")), bytes(e2.join("reports.jsonl")));
    assert_eq!(
        bytes(e1.join("eval_summary.json")),
        bytes(e2.join("eval_summary.json"))
    );

    let _ = std::fs::remove_dir_all(&base);
    println!("ACCEPTANCE 11 PASS: gen-scene/train/eval reruns with fixed seeds produce byte-identical metrics logs, checkpoints, and reports");
}
