use crate::error::{Error, Result};

/// A scalar loss over a flat parameter vector, evaluated on a batch.
///
/// Meta-training and the optimizers are written against this trait so they can be
/// checked on analytic surrogates as well as on the network.
pub trait Objective: Sync {
    type Batch: Sync;

    /// Length of the parameter vector.
    fn dim(&self) -> usize;

    fn loss(&self, theta: &[f64], batch: &Self::Batch) -> Result<f64>;

    fn loss_and_grad(&self, theta: &[f64], batch: &Self::Batch) -> Result<(f64, Vec<f64>)>;

    /// Hessian-vector product. Defaults to central differences of gradients.
    fn hvp(&self, theta: &[f64], batch: &Self::Batch, v: &[f64], eps: f64) -> Result<Vec<f64>> {
        finite_difference_hvp(self, theta, batch, v, eps)
    }
}

/// `(grad(θ + eps·v̂) − grad(θ − eps·v̂)) / (2·eps) · |v|` with `v̂ = v / |v|`.
///
/// Returns the zero vector when `|v| < 1e-12`.
pub fn finite_difference_hvp<O: Objective + ?Sized>(
    objective: &O,
    theta: &[f64],
    batch: &O::Batch,
    v: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    if v.len() != theta.len() || theta.len() != objective.dim() {
        return Err(Error::invalid_input(format!(
            "direction has {} entries, parameters {}, objective expects {}",
            v.len(),
            theta.len(),
            objective.dim()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid_input(format!("hvp step must be positive, got {eps}")));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Ok(vec![0.0; v.len()]);
    }
    let shifted = |sign: f64| -> Vec<f64> {
        theta
            .iter()
            .zip(v)
            .map(|(t, d)| t + sign * eps * d / norm)
            .collect()
    };
    let (_, g_plus) = objective.loss_and_grad(&shifted(1.0), batch)?;
    let (_, g_minus) = objective.loss_and_grad(&shifted(-1.0), batch)?;
    let scale = norm / (2.0 * eps);
    Ok(g_plus
        .iter()
        .zip(&g_minus)
        .map(|(a, b)| (a - b) * scale)
        .collect())
}
