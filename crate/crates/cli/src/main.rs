//! Command-line harness: scene generation, training, evaluation, the
//! ablation suites, and mask/contour rendering.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime error,
//! 3 degenerate-result warning.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pose_rl::config::RunConfig;
use pose_rl::env::{BBoxSource, Scene};
use pose_rl::eval::{evaluate, EvalOptions, EvalResult};
use pose_rl::metrics::MetricThresholds;
use pose_rl::optim::{load_checkpoint, train, TrainOptions};
use pose_rl::policy::{HeadMode, PolicyParams};
use pose_rl::pose::Pose;
use pose_rl::raster::{mask_bbox, render_mask, Mesh};
use pose_rl::{derive_seed, Error as CoreError};

#[derive(Parser)]
#[command(
    name = "pose-rl",
    about = "Render-and-compare 6D pose refinement via reinforcement learning",
    version
)]
struct Cli {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides run.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides run.out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `section.key=value` overrides, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Writes a procedural scene: mesh OBJ plus a full config with the
    /// scene section filled in.
    GenScene(GenSceneArgs),
    /// Trains a policy on the configured scene.
    Train(TrainArgs),
    /// Evaluates a trained checkpoint with a greedy policy.
    Eval(EvalArgs),
    /// Runs one of the comparison suites: reward / action / optim.
    Ablate(AblateArgs),
    /// Renders a mask and its contour for a pose.
    Render(RenderArgs),
}

#[derive(Args)]
struct GenSceneArgs {
    /// Emit a square prism (rotationally symmetric about z) and set the
    /// symmetry flag used by the ADD-S pass rule.
    #[arg(long)]
    symmetric: bool,
    /// Object depth along the optical axis, meters.
    #[arg(long, default_value_t = 0.6)]
    depth: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Validate the config, build everything, roll one episode, exit.
    #[arg(long)]
    dry_run: bool,
    /// Optimization strategy: `composite` (default) or `on_policy_only`.
    #[arg(long)]
    optim: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Episode count; overrides run.episodes.
    #[arg(long)]
    episodes: Option<usize>,
    /// Observation box source at test time.
    #[arg(long, default_value = "initial_pose_projection")]
    bbox_source: String,
    /// Also dump per-step trajectory logs (episodes.jsonl).
    #[arg(long)]
    episode_log: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// One of: reward, action, optim.
    #[arg(long)]
    kind: String,
    /// Space-separated seed list; defaults to the run seed.
    #[arg(long)]
    seeds: Option<String>,
    /// Environment-step budget per arm; defaults to run.max_steps.
    #[arg(long)]
    budget: Option<u64>,
}

#[derive(Args)]
struct RenderArgs {
    /// Pose line `qw qx qy qz tx ty tz`; defaults to the scene ground
    /// truth.
    #[arg(long)]
    pose: Option<String>,
    /// Output file stem.
    #[arg(long, default_value = "render")]
    name: String,
}

/// Marker for errors that should exit with the usage code.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

enum CliOutcome {
    Success,
    Degenerate(String),
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(CliOutcome::Success) => 0,
        Ok(CliOutcome::Degenerate(msg)) => {
            eprintln!("warning: {msg}");
            3
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            classify(&err)
        }
    }
}

fn classify(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    if let Some(core) = err.downcast_ref::<CoreError>() {
        if matches!(core, CoreError::Config(_) | CoreError::Parse { .. }) {
            return 1;
        }
    }
    2
}

fn dispatch(cli: &Cli) -> anyhow::Result<CliOutcome> {
    match &cli.cmd {
        Cmd::GenScene(args) => cmd_gen_scene(cli, args),
        Cmd::Train(args) => cmd_train(cli, args),
        Cmd::Eval(args) => cmd_eval(cli, args),
        Cmd::Ablate(args) => cmd_ablate(cli, args),
        Cmd::Render(args) => cmd_render(cli, args),
    }
}

/// Assembles the effective config: defaults, then --config, then --set,
/// then --seed/--out.
fn effective_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    for item in &cli.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{item}`")))?;
        cfg.set(key.trim(), value).map_err(anyhow::Error::new)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    Ok(cfg)
}

fn ensure_out_dir(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&dir).with_context(|| format!("creating out dir {}", dir.display()))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn build_scene(cfg: &RunConfig) -> anyhow::Result<Scene> {
    cfg.scene.build().map_err(anyhow::Error::new)
}

// ---------------------------------------------------------------------------
// gen-scene
// ---------------------------------------------------------------------------

fn cmd_gen_scene(cli: &Cli, args: &GenSceneArgs) -> anyhow::Result<CliOutcome> {
    let mut cfg = effective_config(cli)?;
    let out = ensure_out_dir(&cfg)?;

    let mesh = if args.symmetric {
        Mesh::axis_box(0.04, 0.04, 0.08)
    } else {
        Mesh::corner_cut_box(0.05, 0.035, 0.025, 0.5)
    };
    // Ground-truth orientation drawn from the seed (uniform random
    // rotation); translation sits on the optical axis at the given depth.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x6E5))
;
    let q = loop {
        let raw = nalgebra::Quaternion::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        );
        if raw.norm() > 1e-3 {
            break nalgebra::UnitQuaternion::new_normalize(raw);
        }
    };
    let gt_pose = Pose::new(q, Vector3::new(0.0, 0.0, args.depth));

    let mesh_path = out.join("mesh.obj");
    write_text(&mesh_path, &mesh.to_obj_string())?;

    cfg.scene.mesh_path = mesh_path.display().to_string();
    cfg.scene.gt_pose = gt_pose.to_line();
    cfg.scene.symmetric = args.symmetric;

    // Prove the scene is usable before writing the config.
    let scene = build_scene(&cfg)?;
    let cfg_path = out.join("scene.cfg");
    write_text(&cfg_path, &cfg.dump())?;
    println!(
        "scene written: {} ({} vertices, {} triangles, target mask {} px)",
        cfg_path.display(),
        scene.mesh.vertices().len(),
        scene.mesh.triangles().len(),
        scene.gt_mask.area()
    );
    Ok(CliOutcome::Success)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(cli: &Cli, args: &TrainArgs) -> anyhow::Result<CliOutcome> {
    let mut cfg = effective_config(cli)?;
    match args.optim.as_deref() {
        None | Some("composite") => {}
        Some("on_policy_only") => cfg.optim.on_off_ratio = 0,
        Some(other) => {
            return Err(usage(format!(
                "--optim must be composite|on_policy_only, got `{other}`"
            )))
        }
    }
    cfg.validate(true).map_err(anyhow::Error::new)?;
    let out = ensure_out_dir(&cfg)?;
    write_text(&out.join("effective.cfg"), &cfg.dump())?;

    let scene = build_scene(&cfg)?;
    let cat = cfg.actions.catalog();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x11817));
    let mut params = PolicyParams::init(cfg.policy_for_env(), &mut rng);

    if args.dry_run {
        // One stochastic episode, logged step by step in the trajectory
        // format (k, actions, reward components, IoU, pose).
        let mut ep_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xD87));
        let mut state =
            pose_rl::env::reset(&scene, &cfg.env, &mut ep_rng).map_err(anyhow::Error::new)?;
        let mut log = String::new();
        let mut steps = 0usize;
        while !state.done {
            let obs = pose_rl::env::observe(&state, &scene, &cfg.env);
            let out_p = params.forward(&obs.to_f64());
            let (action, _) = params.sample_action(&out_p, &cat, &mut ep_rng);
            let (a_rot, a_trans) = action.indices();
            let outcome = pose_rl::env::step(&mut state, a_rot, a_trans, &scene, &cfg.env, &cat);
            let record = pose_rl::env::StepRecord::from_outcome(
                state.k,
                a_rot,
                a_trans,
                &outcome,
                &state.cur_pose,
            );
            log.push_str(&serde_json::to_string(&record).expect("record serializes"));
            log.push('\n');
            steps += 1;
        }
        write_text(&out.join("dry_run_episode.jsonl"), &log)?;
        println!("dry run ok: config valid, scene renders, one episode of {steps} steps collected");
        return Ok(CliOutcome::Success);
    }

    let opts = TrainOptions {
        seed: cfg.seed,
        total_env_steps: cfg.max_steps,
        checkpoint_path: Some(out.join("checkpoint.bin")),
        checkpoint_every: cfg.checkpoint_every,
        metrics_path: Some(out.join("metrics.jsonl")),
    };
    let stats = train(&[scene], &cfg.env, &cat, &mut params, &cfg.optim, &opts)
        .map_err(anyhow::Error::new)?;

    let last = stats.records.last();
    let mut summary = String::new();
    summary.push_str(&format!("env steps: {}\n", stats.env_steps));
    summary.push_str(&format!("episodes: {}\n", stats.episodes));
    summary.push_str(&format!("updates: {}\n", stats.records.len()));
    if let Some(r) = last {
        summary.push_str(&format!(
            "final batch: mean end IoU {:.4}, mean length {:.2}, L_clip {:.6}, L_value {:.6}, entropy {:.4}\n",
            r.mean_episode_end_iou, r.mean_episode_len, r.l_clip, r.l_value, r.l_entropy
        ));
    }
    summary.push_str("checkpoint: checkpoint.bin\nmetrics: metrics.jsonl\n");
    write_text(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(CliOutcome::Success)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn parse_bbox_source(s: &str) -> anyhow::Result<BBoxSource> {
    match s {
        "ground_truth" => Ok(BBoxSource::GroundTruth),
        "initial_pose_projection" => Ok(BBoxSource::InitialPoseProjection),
        other => Err(usage(format!(
            "--bbox-source must be ground_truth|initial_pose_projection, got `{other}`"
        ))),
    }
}

fn run_eval(
    cfg: &RunConfig,
    scene: &Scene,
    params: &PolicyParams,
    episodes: usize,
    eval_seed: u64,
    bbox_source: BBoxSource,
) -> anyhow::Result<EvalResult> {
    let mut env_cfg = cfg.env.clone();
    env_cfg.bbox_source = bbox_source;
    let cat = cfg.actions.catalog();
    let opts = EvalOptions {
        episodes,
        seed: eval_seed,
        step_checkpoints: cfg.eval.step_checkpoints.clone(),
        iou_success_threshold: cfg.eval.iou_success_threshold,
        thresholds: MetricThresholds {
            proj2d_px: cfg.eval.proj2d_px,
            add_diameter_frac: cfg.eval.add_diameter_frac,
        },
        max_metric_points: 2000,
    };
    evaluate(scene, &env_cfg, &cat, params, &opts).map_err(anyhow::Error::new)
}

fn curve_tsv(result: &EvalResult) -> String {
    let mut s = String::from("# step\taccuracy_pct\tms_per_frame\n");
    for p in &result.curve {
        s.push_str(&format!(
            "{}\t{}\t{:.3}\n",
            p.step, p.proj2d_acc_pct, p.ms_per_frame
        ));
    }
    s
}

fn eval_summary_json(result: &EvalResult) -> serde_json::Value {
    serde_json::json!({
        "episodes": result.episodes.len(),
        "success_pct": result.success_pct,
        "mean_end_iou": result.mean_end_iou,
        "mean_episode_len": result.mean_episode_len,
        "proj2d_acc_pct": result.summary.proj2d_pct,
        "add_acc_pct": result.summary.add_pct,
        "curve": result.curve.iter().map(|p| {
            serde_json::json!({
                "step": p.step,
                "proj2d_acc_pct": p.proj2d_acc_pct,
                "iou_acc_pct": p.iou_acc_pct,
            })
        }).collect::<Vec<_>>(),
    })
}

/// One-row accuracy table in the tab-separated reporting style.
fn summary_tsv(object: &str, result: &EvalResult) -> String {
    let mut s = String::from("# object\tepisodes\tProj.2D\tADD\tsuccess\tmean_end_iou\n");
    s.push_str(&format!(
        "{object}\t{}\t{}\t{}\t{}\t{:.6}\n",
        result.episodes.len(),
        result.summary.proj2d_pct,
        result.summary.add_pct,
        result.success_pct,
        result.mean_end_iou
    ));
    s
}

fn write_eval_outputs(
    out: &Path,
    result: &EvalResult,
    episode_log: bool,
) -> anyhow::Result<()> {
    let mut reports = String::new();
    for (i, ep) in result.episodes.iter().enumerate() {
        let mut line = serde_json::to_value(ep).expect("episode serializes");
        line.as_object_mut()
            .unwrap()
            .insert("episode".into(), serde_json::json!(i));
        // Timing is wall-clock noise; keep the metrics log reproducible.
        line.as_object_mut().unwrap().remove("checkpoint_ms");
        reports.push_str(&line.to_string());
        reports.push('\n');
    }
    write_text(&out.join("reports.jsonl"), &reports)?;
    write_text(&out.join("curve.tsv"), &curve_tsv(result))?;
    write_text(
        &out.join("eval_summary.json"),
        &format!("{}\n", eval_summary_json(result)),
    )?;
    if episode_log {
        let mut log = String::new();
        for (i, ep) in result.episodes.iter().enumerate() {
            for rec in &ep.records {
                let mut line = serde_json::to_value(rec).expect("record serializes");
                line.as_object_mut()
                    .unwrap()
                    .insert("episode".into(), serde_json::json!(i));
                log.push_str(&line.to_string());
                log.push('\n');
            }
        }
        write_text(&out.join("episodes.jsonl"), &log)?;
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> anyhow::Result<CliOutcome> {
    let mut cfg = effective_config(cli)?;
    if let Some(n) = args.episodes {
        cfg.episodes = n;
    }
    cfg.validate(true).map_err(anyhow::Error::new)?;
    let out = ensure_out_dir(&cfg)?;
    write_text(&out.join("effective.cfg"), &cfg.dump())?;

    let checkpoint = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let params = checkpoint.params;
    if params.cfg().obs_res != cfg.env.obs_resolution {
        return Err(usage(format!(
            "checkpoint/config shape mismatch: checkpoint expects {}x{} observations, config provides {}x{}",
            params.cfg().obs_res,
            params.cfg().obs_res,
            cfg.env.obs_resolution,
            cfg.env.obs_resolution
        )));
    }

    let scene = build_scene(&cfg)?;
    let bbox_source = parse_bbox_source(&args.bbox_source)?;
    let result = run_eval(&cfg, &scene, &params, cfg.episodes, cfg.seed, bbox_source)?;
    write_eval_outputs(&out, &result, args.episode_log)?;
    let object = Path::new(&cfg.scene.mesh_path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "object".to_string());
    write_text(&out.join("summary.tsv"), &summary_tsv(&object, &result))?;
    println!(
        "eval: {} episodes, success {:.1}%, mean end IoU {:.4}, Proj.2D acc {:.1}%",
        result.episodes.len(),
        result.success_pct,
        result.mean_end_iou,
        result.summary.proj2d_pct
    );
    Ok(CliOutcome::Success)
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

fn cmd_ablate(cli: &Cli, args: &AblateArgs) -> anyhow::Result<CliOutcome> {
    let base = effective_config(cli)?;
    base.validate(true).map_err(anyhow::Error::new)?;
    let out = ensure_out_dir(&base)?;

    let seeds: Vec<u64> = match &args.seeds {
        Some(s) => s
            .split_whitespace()
            .map(|tok| {
                tok.parse::<u64>()
                    .map_err(|_| usage(format!("bad seed `{tok}`")))
            })
            .collect::<anyhow::Result<_>>()?,
        None => vec![base.seed],
    };
    let budget = args.budget.unwrap_or(base.max_steps);

    // Each arm is a named transform of the base config.
    type ArmFn = Box<dyn Fn(&mut RunConfig)>;
    let arms: Vec<(String, ArmFn)> = match args.kind.as_str() {
        "reward" => {
            let sc = base.env.reward.sigma_c;
            let sg = base.env.reward.sigma_g;
            vec![
                ("r_i".to_string(), {
                    Box::new(|c: &mut RunConfig| {
                        c.env.reward.sigma_c = 0.0;
                        c.env.reward.sigma_g = 0.0;
                    }) as ArmFn
                }),
                ("r_i+g".to_string(), {
                    Box::new(move |c: &mut RunConfig| {
                        c.env.reward.sigma_c = 0.0;
                        c.env.reward.sigma_g = sg;
                    }) as ArmFn
                }),
                ("r_i+c".to_string(), {
                    Box::new(move |c: &mut RunConfig| {
                        c.env.reward.sigma_c = sc;
                        c.env.reward.sigma_g = 0.0;
                    }) as ArmFn
                }),
                ("r_i+g+c".to_string(), {
                    Box::new(move |c: &mut RunConfig| {
                        c.env.reward.sigma_c = sc;
                        c.env.reward.sigma_g = sg;
                    }) as ArmFn
                }),
            ]
        }
        "action" => vec![
            (
                "discrete".to_string(),
                Box::new(|c: &mut RunConfig| c.policy.head_mode = HeadMode::Discrete13) as ArmFn,
            ),
            (
                "continuous".to_string(),
                Box::new(|c: &mut RunConfig| c.policy.head_mode = HeadMode::Continuous) as ArmFn,
            ),
        ],
        "optim" => {
            let ratio = base.optim.on_off_ratio.max(1);
            vec![
                (
                    "composite".to_string(),
                    Box::new(move |c: &mut RunConfig| c.optim.on_off_ratio = ratio) as ArmFn,
                ),
                (
                    "on_policy".to_string(),
                    Box::new(|c: &mut RunConfig| c.optim.on_off_ratio = 0) as ArmFn,
                ),
            ]
        }
        other => {
            return Err(usage(format!(
                "--kind must be reward|action|optim, got `{other}`"
            )))
        }
    };

    let mut table = String::from("# kind\tarm\tseed\tenv_steps\tsuccess_pct\tmean_end_iou\tproj2d_acc_pct\n");
    let mut rows = Vec::new();
    for &seed in &seeds {
        for (name, mutate) in &arms {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.max_steps = budget;
            mutate(&mut cfg);
            let arm_dir = out.join(format!("{}_{}_s{}", args.kind, name, seed));
            fs::create_dir_all(&arm_dir)
                .with_context(|| format!("creating {}", arm_dir.display()))?;
            write_text(&arm_dir.join("effective.cfg"), &cfg.dump())?;

            let scene = build_scene(&cfg)?;
            let cat = cfg.actions.catalog();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x11817));
            let mut params = PolicyParams::init(cfg.policy_for_env(), &mut rng);
            let opts = TrainOptions {
                seed,
                total_env_steps: budget,
                checkpoint_path: Some(arm_dir.join("checkpoint.bin")),
                checkpoint_every: cfg.checkpoint_every,
                metrics_path: Some(arm_dir.join("metrics.jsonl")),
            };
            let stats = train(std::slice::from_ref(&scene), &cfg.env, &cat, &mut params, &cfg.optim, &opts)
                .map_err(anyhow::Error::new)?;

            // Identical evaluation stream across arms of the same seed.
            let result = run_eval(
                &cfg,
                &scene,
                &params,
                cfg.episodes,
                seed,
                BBoxSource::InitialPoseProjection,
            )?;
            write_eval_outputs(&arm_dir, &result, false)?;
            let row = format!(
                "{}\t{}\t{}\t{}\t{}\t{:.6}\t{}\n",
                args.kind,
                name,
                seed,
                stats.env_steps,
                result.success_pct,
                result.mean_end_iou,
                result.summary.proj2d_pct
            );
            print!("{row}");
            table.push_str(&row);
            rows.push((name.clone(), seed, result.success_pct, result.mean_end_iou));
        }
    }
    write_text(&out.join("comparison.tsv"), &table)?;
    println!("comparison written: {}", out.join("comparison.tsv").display());
    Ok(CliOutcome::Success)
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

fn cmd_render(cli: &Cli, args: &RenderArgs) -> anyhow::Result<CliOutcome> {
    let cfg = effective_config(cli)?;
    cfg.validate(true).map_err(anyhow::Error::new)?;
    let out = ensure_out_dir(&cfg)?;
    let scene = build_scene(&cfg)?;
    let pose = match &args.pose {
        Some(line) => Pose::parse_line(line).map_err(anyhow::Error::new)?,
        None => scene.gt_pose,
    };
    let mask = render_mask(&scene.mesh, &pose, &scene.intrinsics)
        .map_err(|e| anyhow!("render failed: {e}"))?;
    let pgm_path = out.join(format!("{}.pgm", args.name));
    mask.write_pgm(&pgm_path).map_err(anyhow::Error::new)?;
    let contour = mask.boundary_pixels();
    let mut contour_text = String::new();
    for (u, v) in &contour {
        contour_text.push_str(&format!("{u} {v}\n"));
    }
    write_text(&out.join(format!("{}_contour.txt", args.name)), &contour_text)?;
    println!(
        "rendered {} ({} px, {} contour points); bbox {:?}",
        pgm_path.display(),
        mask.area(),
        contour.len(),
        mask_bbox(&mask).map(|b| (b.u_min, b.v_min, b.u_max, b.v_max)).ok()
    );
    if mask.is_empty() {
        return Ok(CliOutcome::Degenerate(
            "rendered mask is empty (object outside the frame)".to_string(),
        ));
    }
    Ok(CliOutcome::Success)
}
