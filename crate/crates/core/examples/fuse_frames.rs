//! Fuse neighbouring radar frames and tensorize them into network input grids.
//!
//! Run with `cargo run --example fuse_frames`.

use fuse_pose::data::{synth_generate, SynthConfig};
use fuse_pose::pointcloud::{canonicalize_frame, fuse_frames, to_grid, ChannelStats, DEFAULT_GRID, DEFAULT_N_FIXED};

fn main() -> fuse_pose::Result<()> {
    let recording = synth_generate(&SynthConfig {
        n_tasks: 1,
        frames_per_task: 20,
        points_per_frame: 40,
        ..SynthConfig::default()
    })?
    .remove(0);

    let first = canonicalize_frame(&recording.frames[0], DEFAULT_N_FIXED);
    println!("frame 0 has {} raw points; canonical form keeps {}", recording.frames[0].points.len(), first.len());
    println!("strongest return: {:?}", first[0]);

    for m in 0..=2 {
        let grids = (0..recording.len())
            .map(|k| to_grid(&fuse_frames(&recording.frames, k, m)?, DEFAULT_N_FIXED, DEFAULT_GRID))
            .collect::<fuse_pose::Result<Vec<_>>>()?;
        let stats = ChannelStats::from_grids(grids.iter())?;
        let g = &grids[0];
        let edge: Vec<usize> = fuse_frames(&recording.frames, 0, m)?.frames.iter().map(|f| f.index).collect();
        println!(
            "M = {m}: grid {}x{}x{}, frame 0 fuses frames {edge:?}, x-channel mean {:.3} m",
            g.height, g.width, g.channels, stats.mean[0]
        );
    }
    Ok(())
}
