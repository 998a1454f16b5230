//! Meta-train an initialization on all but one synthetic task, then fine-tune it and a
//! supervised baseline on 200 frames of the held-out task and compare both learning curves.
//!
//! Run with `cargo run --release --example meta_fine_tune [SEED] [ITERATIONS]`.
//! Writes `fine_tune_baseline.csv` and `fine_tune_meta.csv` to the system temp directory.

use fuse_pose::data::{
    build_split, group_by_recording, standardize_batch, synth_generate, tensorize, LabeledFrame, SplitSpec,
    SynthConfig, LABEL_DIM,
};
use fuse_pose::meta::{meta_train_cnn, GroupedPools, MetaConfig, MetaProgress, OuterOptimizer};
use fuse_pose::nn::{init_params, Batch, CnnConfig};
use fuse_pose::pointcloud::ChannelStats;
use fuse_pose::train::{
    evaluate_mae, fine_tune, train_supervised, write_curve_csv, CurveSplit, EvalSet, FineTuneScope, OptimizerKind,
    TrainConfig,
};

fn main() -> fuse_pose::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let iterations: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1000);

    let held = 5;
    let recordings = synth_generate(&SynthConfig {
        n_tasks: held as usize + 1,
        frames_per_task: 400,
        points_per_frame: 12,
        noise_std: 0.05,
        body_radius: 0.2,
        seed,
        ..SynthConfig::default()
    })?;
    let split = build_split(&recordings, &SplitSpec::leave_out(held, held), 1)?;
    let raw = |p: &[LabeledFrame]| tensorize(p, 64, 8);
    let train = raw(&split.train)?;
    let stats = ChannelStats::from_grids(train.inputs.iter())?;
    let train = standardize_batch(&train, &stats)?;
    let prep = |p: &[LabeledFrame]| -> fuse_pose::Result<Batch> { standardize_batch(&raw(p)?, &stats) };
    let (original, tune_set, new) = (prep(&split.original_test)?, prep(&split.test_finetune)?, prep(&split.test_eval)?);
    println!(
        "train {} frames from {} tasks; fine-tune {} and evaluate {} frames of task {held}",
        train.len(),
        held,
        tune_set.len(),
        new.len()
    );

    let config = CnnConfig {
        grid_size: 8,
        in_channels: 15,
        conv1_out: 8,
        conv2_out: 8,
        kernel: 3,
        fc_hidden: 64,
        out_dim: LABEL_DIM,
    };
    let theta0 = init_params(&config, seed)?;
    let supervised = TrainConfig {
        epochs: 30,
        batch_size: 32,
        lr: 1e-3,
        optimizer: OptimizerKind::Adam,
        seed,
    };
    let (baseline, _) = train_supervised(&train, None, &supervised, &theta0)?;

    let meta_cfg = MetaConfig {
        alpha: 0.01,
        tasks_per_iteration: 4,
        frames_per_task: 100,
        iterations,
        outer_optimizer: OuterOptimizer::Adam,
        seed,
        ..MetaConfig::default()
    };
    let groups: Vec<Batch> = group_by_recording(&split.train)
        .into_iter()
        .map(|(_, idx)| train.select(&idx))
        .collect();
    let mut progress: Vec<MetaProgress> = Vec::new();
    let meta = meta_train_cnn(&mut GroupedPools::new(groups.iter().collect())?, &meta_cfg, &theta0, &mut progress)?;
    if let (Some(first), Some(last)) = (progress.first(), progress.last()) {
        println!(
            "meta-training: query loss {:.4} -> {:.4} in {:.0}s",
            first.query_loss, last.query_loss, last.seconds
        );
    }

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
            data: &original,
        },
        EvalSet {
            split: CurveSplit::New,
            data: &new,
        },
    ];
    for (name, params) in [("baseline", &baseline), ("meta", &meta)] {
        let before = (evaluate_mae(params, &original)?.mae_avg, evaluate_mae(params, &new)?.mae_avg);
        let (_, curve) = fine_tune(params, &tune_set, FineTuneScope::AllLayers, &tune, &eval)?;
        let at = |epoch: usize, split: CurveSplit| {
            curve
                .iter()
                .find(|c| c.epoch == epoch && c.split == split)
                .map_or(f64::NAN, |c| c.metrics.mae_avg)
        };
        println!(
            "{name:>8}: new {:.2} -> {:.2} (5 ep) -> {:.2} (20 ep); original {:.2} -> {:.2} (50 ep)",
            before.1,
            at(5, CurveSplit::New),
            at(20, CurveSplit::New),
            before.0,
            at(50, CurveSplit::Original)
        );
        let mut csv = Vec::new();
        write_curve_csv(&mut csv, &curve)?;
        let path = std::env::temp_dir().join(format!("fine_tune_{name}.csv"));
        std::fs::write(&path, csv).map_err(|e| fuse_pose::Error::Io { path, source: e })?;
    }
    Ok(())
}
