//! Write a synthetic dataset in the CSV interchange format, load it back through the
//! manifest and build both split layouts.
//!
//! Run with `cargo run --example dataset_io [DIR]`.

use std::path::PathBuf;

use fuse_pose::data::{
    build_split, load_manifest, synth_generate, write_manifest, write_recording, ManifestEntry, SplitSpec,
    SynthConfig,
};

fn main() -> fuse_pose::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("fuse-pose-dataset"));
    let recordings = synth_generate(&SynthConfig {
        n_tasks: 4,
        frames_per_task: 300,
        ..SynthConfig::default()
    })?;

    let mut entries = Vec::new();
    for (i, rec) in recordings.iter().enumerate() {
        let frames = PathBuf::from(format!("rec_{i}_frames.csv"));
        let labels = PathBuf::from(format!("rec_{i}_labels.csv"));
        write_recording(rec, &dir.join(&frames), &dir.join(&labels))?;
        entries.push(ManifestEntry {
            subject_id: rec.subject_id,
            movement_id: rec.movement_id,
            frames_path: frames,
            labels_path: labels,
        });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &entries)?;
    println!("wrote {} recordings to {}", entries.len(), dir.display());

    let (loaded, report) = load_manifest(&manifest)?;
    println!(
        "loaded {} recordings, {} frames, {} unlabeled frames dropped",
        loaded.len(),
        loaded.iter().map(|r| r.len()).sum::<usize>(),
        report.dropped_frames
    );

    for (name, spec) in [("per-movement", SplitSpec::default()), ("leave-out 3/3", SplitSpec::leave_out(3, 3))] {
        let c = build_split(&loaded, &spec, 1)?.counts();
        println!(
            "{name:>14}: train {} validation {} original-test {} fine-tune {} eval {}",
            c.train, c.validation, c.original_test, c.test_finetune, c.test_eval
        );
    }
    Ok(())
}
