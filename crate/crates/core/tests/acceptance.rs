//! Acceptance suite. Each test prints one `criterion N ... PASS|FAIL|SKIP` line to stderr
//! (unbuffered, so it shows up even when output capture is on) and fails on FAIL.
//!
//! The MARS-backed checks run only when `FUSE_POSE_MARS_MANIFEST` points at a manifest;
//! `FUSE_POSE_MARS_HELD_MOVEMENT` and `FUSE_POSE_MARS_HELD_USER` select the leave-out pair.

use std::io::Write;
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use fuse_pose::data::{
    build_split, load_manifest, standardize_batch, synth_generate, tensorize, LabeledFrame, Recording, SplitSpec,
    SynthConfig, LABEL_DIM,
};
use fuse_pose::meta::{
    meta_train_cnn, outer_gradient, DiagonalQuadratic, GroupedPools, MetaConfig, MetaMode, OuterOptimizer,
    QuadraticBatch, TaskSample,
};
use fuse_pose::nn::{backward, forward, init_params, loss_l1, param_count, Batch, CnnConfig, CnnParams, Objective};
use fuse_pose::pointcloud::{ChannelStats, InputGrid};
use fuse_pose::train::{
    evaluate_mae, fine_tune, train_supervised, CurveSplit, EvalSet, FineTuneScope, OptimizerKind, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Status {
    Pass,
    Fail,
    Skip,
}

fn report(id: &str, name: &str, status: Status, detail: &str, elapsed: Duration) {
    let tag = match status {
        Status::Pass => "PASS",
        Status::Fail => "FAIL",
        Status::Skip => "SKIP",
    };
    let line = format!(
        "criterion {id} {name}: {tag} ({detail}; {:.1}s)\n",
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    if let Status::Fail = status {
        panic!("criterion {id} failed: {detail}");
    }
}

/// Runs the timed criteria one at a time so each runtime budget is measured in isolation.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(ok: bool) -> Status {
    if ok {
        Status::Pass
    } else {
        Status::Fail
    }
}

fn random_grid(rng: &mut ChaCha8Rng, g: usize, c: usize) -> InputGrid {
    let mut grid = InputGrid::zeros(g, g, c);
    grid.values.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    grid
}

/// Mean L1 loss evaluated sample by sample through `forward`, independent of `backward`.
fn reference_loss(params: &CnnParams, batch: &Batch) -> f64 {
    let total: f64 = batch
        .inputs
        .iter()
        .zip(&batch.targets)
        .map(|(x, t)| loss_l1(&forward(params, x).unwrap(), t).unwrap())
        .sum();
    total / batch.len() as f64
}

#[test]
fn criterion_1_gradient_oracle() {
    let _serial = serial();
    let start = Instant::now();
    let h = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut checked, mut matched, mut kinks) = (0usize, 0usize, 0usize);
    for trial in 0..20 {
        let config = CnnConfig {
            grid_size: 4,
            in_channels: if trial % 2 == 0 { 2 } else { 15 },
            conv1_out: rng.gen_range(1..=4),
            conv2_out: rng.gen_range(1..=4),
            kernel: 3,
            fc_hidden: 8,
            out_dim: 6,
        };
        let params = init_params(&config, trial).unwrap();
        let inputs = (0..3).map(|_| random_grid(&mut rng, 4, config.in_channels)).collect();
        let targets = (0..3).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let batch = Batch::new(inputs, targets).unwrap();
        let (_, grad) = backward(&params, &batch).unwrap();
        let base = reference_loss(&params, &batch);
        for i in 0..params.len() {
            let shifted = |d: f64| {
                let mut p = params.clone();
                p.as_mut_slice()[i] += d;
                reference_loss(&p, &batch)
            };
            let (up, down) = (shifted(h), shifted(-h));
            // One-sided slopes disagree when a ReLU or absolute-value kink lies within the step.
            let (fwd, bwd) = ((up - base) / h, (base - down) / h);
            if (fwd - bwd).abs() > 1e-6 * (1.0 + fwd.abs().max(bwd.abs())) {
                kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let denom = grad[i].abs().max(numeric.abs()).max(1e-6);
            checked += 1;
            if (grad[i] - numeric).abs() / denom <= 1e-3 {
                matched += 1;
            }
        }
    }
    let share = matched as f64 / checked as f64;
    report(
        "1",
        "gradient oracle",
        verdict(share >= 0.95 && checked > 0 && start.elapsed() < Duration::from_secs(60)),
        &format!("{matched}/{checked} coordinates within 1e-3 ({:.2}%), {kinks} kink-adjacent excluded", 100.0 * share),
        start.elapsed(),
    );
}

#[test]
fn criterion_2_maml_gradient_oracle() {
    let _serial = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let alpha = 0.1;
    let mut worst_closed: f64 = 0.0;
    let mut worst_fd: f64 = 0.0;
    let mut worst_alpha0: f64 = 0.0;
    let rel = |a: &[f64], b: &[f64]| -> f64 {
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        diff / norm
    };
    for _ in 0..20 {
        let dim = rng.gen_range(2..=8);
        let objective = DiagonalQuadratic { dim };
        let diag: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.2..3.0)).collect();
        let theta: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let task = TaskSample {
            support: QuadraticBatch::centered(diag.clone()),
            query: QuadraticBatch::centered(diag.clone()),
        };
        let got = outer_gradient(&objective, &theta, &task, alpha, MetaMode::SecondOrder, 1e-4).unwrap();
        let closed: Vec<f64> = (0..dim)
            .map(|i| {
                let shrink = 1.0 - alpha * diag[i];
                shrink * diag[i] * shrink * theta[i]
            })
            .collect();
        worst_closed = worst_closed.max(rel(&got.grad, &closed));

        // Finite differences of θ ↦ L_q(θ − α∇L_s(θ)).
        let meta_objective = |t: &[f64]| -> f64 {
            let (_, g) = objective.loss_and_grad(t, &task.support).unwrap();
            let adapted: Vec<f64> = t.iter().zip(&g).map(|(x, gi)| x - alpha * gi).collect();
            objective.loss(&adapted, &task.query).unwrap()
        };
        let h = 1e-5;
        let fd: Vec<f64> = (0..dim)
            .map(|i| {
                let mut up = theta.clone();
                up[i] += h;
                let mut down = theta.clone();
                down[i] -= h;
                (meta_objective(&up) - meta_objective(&down)) / (2.0 * h)
            })
            .collect();
        worst_fd = worst_fd.max(rel(&got.grad, &fd));

        let zero = outer_gradient(&objective, &theta, &task, 0.0, MetaMode::SecondOrder, 1e-4).unwrap();
        let (_, plain) = objective.loss_and_grad(&theta, &task.query).unwrap();
        worst_alpha0 = worst_alpha0.max(rel(&zero.grad, &plain));
    }
    report(
        "2",
        "MAML gradient oracle",
        verdict(
            worst_closed <= 1e-2
                && worst_fd <= 1e-2
                && worst_alpha0 <= 1e-14
                && start.elapsed() < Duration::from_secs(60),
        ),
        &format!(
            "worst relative error: closed form {worst_closed:.1e}, finite differences {worst_fd:.1e}, alpha=0 {worst_alpha0:.1e}"
        ),
        start.elapsed(),
    );
}

/// Standardized batches of a split, using statistics of its training pool.
struct Pools {
    train: Batch,
    validation: Batch,
    test_finetune: Batch,
    test_eval: Batch,
    original_test: Batch,
    train_groups: Vec<Batch>,
}

fn pools(recordings: &[Recording], spec: &SplitSpec, m: usize) -> Pools {
    let split = build_split(recordings, spec, m).unwrap();
    let raw = |p: &[LabeledFrame]| tensorize(p, 64, 8).unwrap();
    let train = raw(&split.train);
    let stats = ChannelStats::from_grids(train.inputs.iter()).unwrap();
    let st = |p: &[LabeledFrame]| standardize_batch(&raw(p), &stats).unwrap();
    let train = standardize_batch(&train, &stats).unwrap();
    let train_groups = fuse_pose::data::group_by_recording(&split.train)
        .into_iter()
        .map(|(_, idx)| train.select(&idx))
        .collect();
    Pools {
        validation: st(&split.validation),
        test_finetune: st(&split.test_finetune),
        test_eval: st(&split.test_eval),
        original_test: st(&split.original_test),
        train,
        train_groups,
    }
}

fn small_cnn(m: usize) -> CnnConfig {
    CnnConfig {
        grid_size: 8,
        in_channels: 5 * (2 * m + 1),
        conv1_out: 8,
        conv2_out: 8,
        kernel: 3,
        fc_hidden: 64,
        out_dim: LABEL_DIM,
    }
}

fn train_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        lr: 1e-3,
        optimizer: OptimizerKind::Adam,
        seed,
    }
}

#[test]
fn criterion_3_fusion_benefit() {
    let _serial = serial();
    let start = Instant::now();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let recordings = synth_generate(&SynthConfig {
            n_tasks: 5,
            frames_per_task: 400,
            points_per_frame: 12,
            noise_std: 0.05,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut mae = [0.0; 2];
        for m in 0..2 {
            let p = pools(&recordings, &SplitSpec::default(), m);
            let theta0 = init_params(&small_cnn(m), seed).unwrap();
            let (params, _) = train_supervised(&p.train, None, &train_cfg(30, seed), &theta0).unwrap();
            mae[m] = evaluate_mae(&params, &p.test_eval).unwrap().mae_avg;
        }
        if mae[1] < mae[0] {
            wins += 1;
        }
        rows.push(format!("{:.2}/{:.2}", mae[0], mae[1]));
    }
    report(
        "3",
        "frame-fusion benefit (synthetic)",
        verdict(wins >= 4 && start.elapsed() < Duration::from_secs(15 * 60)),
        &format!("M=1 better in {wins}/5 seeds; test MAE cm M=0/M=1: {}", rows.join(", ")),
        start.elapsed(),
    );
    mars_fusion_ordering();
}

fn mars_manifest() -> Option<PathBuf> {
    std::env::var_os("FUSE_POSE_MARS_MANIFEST").map(PathBuf::from)
}

/// Table-1 ordering on the real dataset with the full-size network.
fn mars_fusion_ordering() {
    let start = Instant::now();
    let Some(manifest) = mars_manifest() else {
        report("3", "fusion ordering on MARS", Status::Skip, "FUSE_POSE_MARS_MANIFEST not set", start.elapsed());
        return;
    };
    let (recordings, _) = load_manifest(&manifest).unwrap();
    let mut mae = Vec::new();
    for m in 0..=2 {
        let p = pools(&recordings, &SplitSpec::default(), m);
        let config = CnnConfig {
            in_channels: 5 * (2 * m + 1),
            ..CnnConfig::default()
        };
        let cfg = TrainConfig {
            seed: 0,
            ..TrainConfig::default()
        };
        let (params, _) =
            train_supervised(&p.train, Some(&p.validation), &cfg, &init_params(&config, 0).unwrap()).unwrap();
        mae.push(evaluate_mae(&params, &p.test_eval).unwrap().mae_avg);
    }
    let ok = mae[1] < mae[0] && mae[0] <= mae[2] && (mae[1] - 3.6).abs() <= 1.5;
    report(
        "3",
        "fusion ordering on MARS",
        verdict(ok),
        &format!("average MAE cm single {:.2}, fuse-3 {:.2}, fuse-5 {:.2}", mae[0], mae[1], mae[2]),
        start.elapsed(),
    );
}

/// Paired baseline / meta-learned runs on a held-out synthetic task, shared by criteria 4 and 5.
struct AdaptationRun {
    /// Held-out ("new") MAE after 5 fine-tune epochs from the meta init and after 20 from the baseline.
    meta_new_5: f64,
    base_new_20: f64,
    /// Original-split MAE before fine-tuning and after 50 epochs.
    meta_original: (f64, f64),
    base_original: (f64, f64),
}

const ADAPT_SEEDS: u64 = 5;
const HELD_TASK: u32 = 5;

fn adaptation_runs() -> &'static (Vec<AdaptationRun>, Duration) {
    static RUNS: OnceLock<(Vec<AdaptationRun>, Duration)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let _serial = serial();
        let start = Instant::now();
        let runs = (0..ADAPT_SEEDS).map(adaptation_run).collect();
        (runs, start.elapsed())
    })
}

fn adaptation_run(seed: u64) -> AdaptationRun {
    let recordings = synth_generate(&SynthConfig {
        n_tasks: HELD_TASK as usize + 1,
        frames_per_task: 400,
        points_per_frame: 12,
        noise_std: 0.05,
        body_radius: 0.2,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let p = pools(&recordings, &SplitSpec::leave_out(HELD_TASK, HELD_TASK), 1);
    assert_eq!(p.test_finetune.len(), 200);
    let theta0 = init_params(&small_cnn(1), seed).unwrap();

    let (baseline, _) = train_supervised(&p.train, Some(&p.validation), &train_cfg(30, seed), &theta0).unwrap();

    let meta_cfg = MetaConfig {
        alpha: 0.01,
        beta: 0.001,
        tasks_per_iteration: 4,
        frames_per_task: 100,
        iterations: 1000,
        mode: MetaMode::SecondOrder,
        outer_optimizer: OuterOptimizer::Adam,
        seed,
        ..MetaConfig::default()
    };
    let mut source = GroupedPools::new(p.train_groups.iter().collect()).unwrap();
    let meta = meta_train_cnn(&mut source, &meta_cfg, &theta0, &mut ()).unwrap();

    // Fine-tuning continues the inner loop: plain gradient steps at the inner rate on all 200 frames.
    let tune = TrainConfig {
        epochs: 50,
        batch_size: 200,
        lr: meta_cfg.alpha,
        optimizer: OptimizerKind::Sgd,
        seed,
    };
    let eval = [
        EvalSet {
            split: CurveSplit::Original,
            data: &p.original_test,
        },
        EvalSet {
            split: CurveSplit::New,
            data: &p.test_eval,
        },
    ];
    let at = |curve: &[fuse_pose::train::CurvePoint], epoch: usize, split: CurveSplit| {
        curve
            .iter()
            .find(|c| c.epoch == epoch && c.split == split)
            .map(|c| c.metrics.mae_avg)
            .unwrap()
    };
    let (_, base_curve) = fine_tune(&baseline, &p.test_finetune, FineTuneScope::AllLayers, &tune, &eval).unwrap();
    let (_, meta_curve) = fine_tune(&meta, &p.test_finetune, FineTuneScope::AllLayers, &tune, &eval).unwrap();
    AdaptationRun {
        meta_new_5: at(&meta_curve, 5, CurveSplit::New),
        base_new_20: at(&base_curve, 20, CurveSplit::New),
        meta_original: (
            evaluate_mae(&meta, &p.original_test).unwrap().mae_avg,
            at(&meta_curve, 50, CurveSplit::Original),
        ),
        base_original: (
            evaluate_mae(&baseline, &p.original_test).unwrap().mae_avg,
            at(&base_curve, 50, CurveSplit::Original),
        ),
    }
}

#[test]
fn criterion_4_adaptation_speed() {
    let (runs, elapsed) = adaptation_runs();
    let wins = runs.iter().filter(|r| r.meta_new_5 <= r.base_new_20).count();
    let detail: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.2}/{:.2}", r.meta_new_5, r.base_new_20))
        .collect();
    report(
        "4",
        "adaptation speed (synthetic)",
        verdict(wins >= 4 && *elapsed < Duration::from_secs(30 * 60)),
        &format!(
            "meta@5 <= baseline@20 in {wins}/{ADAPT_SEEDS} seeds; held-out MAE cm meta@5/baseline@20: {}",
            detail.join(", ")
        ),
        *elapsed,
    );
}

#[test]
fn criterion_5_forgetting_asymmetry() {
    let (runs, elapsed) = adaptation_runs();
    let rise = |(before, after): (f64, f64)| after - before;
    let wins = runs
        .iter()
        .filter(|r| rise(r.base_original) > rise(r.meta_original))
        .count();
    let detail: Vec<String> = runs
        .iter()
        .map(|r| format!("{:+.2}/{:+.2}", rise(r.base_original), rise(r.meta_original)))
        .collect();
    report(
        "5",
        "forgetting asymmetry (synthetic)",
        verdict(wins >= 4),
        &format!(
            "baseline forgets more in {wins}/{ADAPT_SEEDS} seeds; original-split MAE change cm baseline/meta after 50 epochs: {}",
            detail.join(", ")
        ),
        *elapsed,
    );
}

#[test]
fn criterion_6_determinism() {
    let _serial = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(
        &config,
        r#"
seed = 11
[data]
n_fixed = 16
grid = 4
split = "leave_out"
held_movement = 2
held_user = 2
finetune_frames = 20
[synth]
n_tasks = 3
frames_per_task = 60
[model]
conv1_out = 4
conv2_out = 4
fc_hidden = 16
[train]
epochs = 3
batch_size = 16
[meta]
iterations = 3
tasks_per_iteration = 2
frames_per_task = 20
[fine_tune]
epochs = 3
checkpoint = "meta.ckpt"
[evaluate]
checkpoints = ["baseline.ckpt", "meta.ckpt", "fine_tuned.ckpt"]
"#,
    )
    .unwrap();
    let commands = ["fuse", "synth", "train-baseline", "meta-train", "fine-tune", "evaluate"];
    let files = [
        "fuse_summary.csv",
        "channel_stats.csv",
        "baseline_curve.csv",
        "fine_tune_curve.csv",
        "metrics.csv",
        "baseline.ckpt",
        "meta.ckpt",
        "fine_tuned.ckpt",
        "synth/manifest.csv",
        "synth/task_000_frames.csv",
        "synth/task_002_labels.csv",
    ];
    let mut outputs: Vec<Vec<Vec<u8>>> = Vec::new();
    let mut metrics_per_command: Vec<Vec<Vec<u8>>> = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let mut per_command = Vec::new();
        for cmd in commands {
            let status = std::process::Command::new(env!("CARGO_BIN_EXE_fuse-pose"))
                .args([cmd, "--config"])
                .arg(&config)
                .arg("--out")
                .arg(&out)
                .env("RUST_LOG", "warn")
                .status()
                .unwrap();
            assert!(status.success(), "{cmd} failed");
            if let Ok(bytes) = std::fs::read(out.join("metrics.csv")) {
                per_command.push(bytes);
            }
        }
        metrics_per_command.push(per_command);
        outputs.push(files.iter().map(|f| std::fs::read(out.join(f)).unwrap()).collect());
    }
    let same_files = outputs[0] == outputs[1];
    let same_metrics = metrics_per_command[0] == metrics_per_command[1];
    report(
        "6",
        "determinism",
        verdict(same_files && same_metrics),
        &format!(
            "{} output files and {} metrics snapshots compared across two runs",
            files.len(),
            metrics_per_command[0].len()
        ),
        start.elapsed(),
    );
}

#[test]
fn criterion_7_split_cardinality() {
    let start = Instant::now();
    let Some(manifest) = mars_manifest() else {
        report("7", "split cardinality", Status::Skip, "FUSE_POSE_MARS_MANIFEST not set", start.elapsed());
        return;
    };
    let env_id = |key: &str, default: u32| -> u32 {
        std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
    };
    let movement = env_id("FUSE_POSE_MARS_HELD_MOVEMENT", 9);
    let user = env_id("FUSE_POSE_MARS_HELD_USER", 4);
    let (recordings, _) = load_manifest(&manifest).unwrap();
    let m = 1;
    let split = build_split(&recordings, &SplitSpec::leave_out(movement, user), m).unwrap();
    let c = split.counts();
    let held = recordings.iter().filter(|r| r.movement_id == movement && r.subject_id == user).count();
    let kept = recordings
        .iter()
        .filter(|r| r.movement_id != movement && r.subject_id != user)
        .count();
    let test = c.test_finetune + c.test_eval;
    let retained = c.train + c.validation + c.original_test;
    let tol_test = 2 * m * held;
    let tol_train = 2 * m * kept;
    let test_ok = test.abs_diff(749) <= tol_test;
    let train_ok = retained.abs_diff(29_225) <= tol_train || c.train.abs_diff(29_225) <= tol_train;
    report(
        "7",
        "split cardinality",
        verdict(test_ok && train_ok),
        &format!(
            "test {test} (749 +/- {tol_test}); retained {retained}, of which train {} validation {} original-test {} (29225 +/- {tol_train})",
            c.train, c.validation, c.original_test
        ),
        start.elapsed(),
    );
}

#[test]
fn criterion_8_parameter_accounting() {
    let start = Instant::now();
    let n = param_count(&CnnConfig::default());
    let built = init_params(&CnnConfig::default(), 0).unwrap().len();
    report(
        "8",
        "parameter accounting",
        verdict(n == 1_083_705 && built == n),
        &format!("closed form {n}, allocated {built}"),
        start.elapsed(),
    );
}
