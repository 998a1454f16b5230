//! Train the same CNN on single-frame and three-frame inputs and compare held-out error.
//!
//! Run with `cargo run --release --example fusion_benefit [SEED]`.

use fuse_pose::data::{build_split, standardize_batch, synth_generate, tensorize, SplitSpec, SynthConfig, LABEL_DIM};
use fuse_pose::nn::{init_params, save_checkpoint, Checkpoint, CnnConfig};
use fuse_pose::pointcloud::ChannelStats;
use fuse_pose::train::{evaluate_mae, train_supervised, OptimizerKind, TrainConfig};

fn main() -> fuse_pose::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let recordings = synth_generate(&SynthConfig {
        n_tasks: 5,
        frames_per_task: 400,
        points_per_frame: 12,
        noise_std: 0.05,
        seed,
        ..SynthConfig::default()
    })?;
    for m in [0, 1] {
        let split = build_split(&recordings, &SplitSpec::default(), m)?;
        let train = tensorize(&split.train, 64, 8)?;
        let stats = ChannelStats::from_grids(train.inputs.iter())?;
        let train = standardize_batch(&train, &stats)?;
        let val = standardize_batch(&tensorize(&split.validation, 64, 8)?, &stats)?;
        let test = standardize_batch(&tensorize(&split.test_eval, 64, 8)?, &stats)?;

        let config = CnnConfig {
            grid_size: 8,
            in_channels: 5 * (2 * m + 1),
            conv1_out: 8,
            conv2_out: 8,
            kernel: 3,
            fc_hidden: 64,
            out_dim: LABEL_DIM,
        };
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed,
        };
        let (params, curve) = train_supervised(&train, Some(&val), &cfg, &init_params(&config, seed)?)?;
        let last_val = curve.last().map(|p| p.metrics.mae_avg).unwrap_or(f64::NAN);
        let t = evaluate_mae(&params, &test)?;
        println!(
            "M = {m}: validation {last_val:.2} cm, test x {:.2} y {:.2} z {:.2} avg {:.2} cm",
            t.mae_x, t.mae_y, t.mae_z, t.mae_avg
        );
        let path = std::env::temp_dir().join(format!("fuse-pose-m{m}.ckpt"));
        save_checkpoint(&path, &Checkpoint { params, seed })?;
        println!("        checkpoint written to {}", path.display());
    }
    Ok(())
}
