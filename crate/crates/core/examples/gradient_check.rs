//! Compare analytic CNN gradients and Hessian-vector products against central differences.
//!
//! Run with `cargo run --release --example gradient_check`.

use fuse_pose::nn::{backward, forward, hvp, init_params, loss_l1, Batch, CnnConfig};
use fuse_pose::pointcloud::InputGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> fuse_pose::Result<()> {
    let config = CnnConfig {
        grid_size: 4,
        in_channels: 5,
        conv1_out: 4,
        conv2_out: 4,
        kernel: 3,
        fc_hidden: 16,
        out_dim: 9,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = init_params(&config, 7)?;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..8 {
        let mut g = InputGrid::zeros(4, 4, 5);
        g.values.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        inputs.push(g);
        targets.push((0..9).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }
    let batch = Batch::new(inputs, targets)?;
    let (loss, grad) = backward(&params, &batch)?;
    println!("{} parameters, mean L1 loss {loss:.6}", params.len());

    let mean_loss = |p: &fuse_pose::nn::CnnParams| -> fuse_pose::Result<f64> {
        let mut total = 0.0;
        for (x, t) in batch.inputs.iter().zip(&batch.targets) {
            total += loss_l1(&forward(p, x)?, t)?;
        }
        Ok(total / batch.len() as f64)
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let i = rng.gen_range(0..params.len());
        let mut plus = params.clone();
        plus.as_mut_slice()[i] += h;
        let mut minus = params.clone();
        minus.as_mut_slice()[i] -= h;
        let numeric = (mean_loss(&plus)? - mean_loss(&minus)?) / (2.0 * h);
        worst = worst.max((numeric - grad[i]).abs());
    }
    println!("largest gradient deviation over 20 random coordinates: {worst:.2e}");

    let v: Vec<f64> = (0..params.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let hv = hvp(&params, &batch, &v, 1e-4)?;
    let norm = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
    println!("Hessian-vector product norm along a random direction: {norm:.4e}");
    Ok(())
}
