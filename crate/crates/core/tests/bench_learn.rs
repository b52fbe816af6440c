// Throwaway learning probe (will be removed).
use pose_rl::env::{BBoxSource, EnvConfig, Scene};
use pose_rl::eval::{evaluate, EvalOptions};
use pose_rl::optim::{train, OptimConfig, TrainOptions};
use pose_rl::policy::{HeadMode, PolicyConfig, PolicyParams};
use pose_rl::pose::{ActionCatalog, Pose};
use pose_rl::raster::{CameraIntrinsics, Mesh};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[test]
fn learn_probe() {
    let mesh = Mesh::corner_cut_box(0.05, 0.035, 0.025, 0.5);
    let k = CameraIntrinsics { fx: 240.0, fy: 240.0, cx: 32.0, cy: 32.0, width: 64, height: 64 };
    let gt = Pose::from_parts(1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.6);
    let scene = Scene::new(mesh, k, gt, false).unwrap();
    let cat = ActionCatalog::new(1.5, 10.0, 0.0025, 0.02);
    let env_cfg = EnvConfig { obs_resolution: 48, ..EnvConfig::default() };
    let pol_cfg = PolicyConfig {
        obs_channels: 4, obs_res: 48, conv_channels: vec![6, 12, 24],
        fc_units: 128, value_units: 128, head_mode: HeadMode::Discrete13,
        sigma_r: 0.1, sigma_t: 0.1,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = PolicyParams::init(pol_cfg.clone(), &mut rng);
    let cfg = OptimConfig { lr_on: 5e-4, lr_off: 1e-4, gamma: 0.3, epochs: 4, ..OptimConfig::default() };
    let opts = TrainOptions { seed: 1, total_env_steps: 150_000, checkpoint_path: None, checkpoint_every: 0, metrics_path: None };
    let t0 = Instant::now();
    let stats = train(&[scene.clone()], &env_cfg, &cat, &mut params, &cfg, &opts).unwrap();
    let wall = t0.elapsed().as_secs_f64();
    let n = stats.records.len();
    let probe: Vec<String> = [0, n/4, n/2, 3*n/4, n-1].iter().map(|&i| {
        let r = &stats.records[i];
        format!("u{} iou={:.2} H={:.1}", r.update, r.mean_episode_end_iou, r.l_entropy)
    }).collect();
    for (tag, src) in [("init_bbox", BBoxSource::InitialPoseProjection), ("gt_bbox", BBoxSource::GroundTruth)] {
        let eval_env = EnvConfig { bbox_source: src, ..env_cfg.clone() };
        let eval_opts = EvalOptions { episodes: 200, seed: 999, ..EvalOptions::default() };
        let ev = evaluate(&scene, &eval_env, &cat, &params, &eval_opts).unwrap();
        eprintln!(
            "planA 150k [{tag}]: {:.0}s success={:.1}% mean_iou={:.3} curve={:?} | {}",
            wall, ev.success_pct, ev.mean_end_iou,
            ev.curve.iter().map(|c| (c.step, c.iou_acc_pct as i32)).collect::<Vec<_>>(),
            probe.join(" | ")
        );
    }
}
