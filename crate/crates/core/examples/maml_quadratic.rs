//! Meta-train an initialization on a family of quadratic tasks, where the exact
//! second-order meta-gradient is known in closed form.
//!
//! Run with `cargo run --release --example maml_quadratic`.

use fuse_pose::meta::{
    meta_train, outer_gradient, DiagonalQuadratic, MetaConfig, MetaMode, MetaProgress, QuadraticBatch, TaskSample,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn main() -> fuse_pose::Result<()> {
    let dim = 4;
    let objective = DiagonalQuadratic { dim };
    let diag = vec![1.0, 2.0, 0.5, 4.0];
    let alpha = 0.1;

    // One task: the support and query halves share curvature but not minimizers.
    let task = TaskSample {
        support: QuadraticBatch {
            diag: diag.clone(),
            center: vec![1.0, -1.0, 0.5, 0.0],
        },
        query: QuadraticBatch {
            diag: diag.clone(),
            center: vec![1.2, -0.8, 0.4, 0.1],
        },
    };
    let theta = vec![0.0; dim];
    for mode in [MetaMode::FirstOrder, MetaMode::SecondOrder] {
        let g = outer_gradient(&objective, &theta, &task, alpha, mode, 1e-4)?;
        println!("{mode:?} meta-gradient: {:?}", g.grad.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());
    }
    // d/dθ L_q(θ - α A(θ - c_s)) = (I - αA) A (θ' - c_q).
    let exact: Vec<String> = (0..dim)
        .map(|i| {
            let adapted = theta[i] - alpha * diag[i] * (theta[i] - task.support.center[i]);
            format!("{:.4}", (1.0 - alpha * diag[i]) * diag[i] * (adapted - task.query.center[i]))
        })
        .collect();
    println!("closed-form meta-gradient:  {exact:?}");

    // A task family whose minimizers scatter around (1, -1, 0.5, 0).
    let mut source = |_: &MetaConfig, rng: &mut ChaCha8Rng| -> fuse_pose::Result<TaskSample<QuadraticBatch>> {
        let mut center = || -> Vec<f64> {
            [1.0, -1.0, 0.5, 0.0].iter().map(|c| c + rng.gen_range(-0.3..0.3)).collect()
        };
        let shared = center();
        Ok(TaskSample {
            support: QuadraticBatch {
                diag: diag.clone(),
                center: shared.clone(),
            },
            query: QuadraticBatch {
                diag: diag.clone(),
                center: shared,
            },
        })
    };
    let cfg = MetaConfig {
        alpha,
        beta: 0.05,
        tasks_per_iteration: 8,
        iterations: 200,
        ..MetaConfig::default()
    };
    let mut progress: Vec<MetaProgress> = Vec::new();
    let learned = meta_train(&objective, &mut source, &cfg, &theta, &mut progress)?;
    println!(
        "query loss {:.4} -> {:.4} over {} iterations; learned init {:?}",
        progress[0].query_loss,
        progress.last().map(|p| p.query_loss).unwrap_or_default(),
        cfg.iterations,
        learned.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
    );
    Ok(())
}
