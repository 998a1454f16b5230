//! Supervised training, online fine-tuning and MAE evaluation.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, Cnn, CnnParams, Objective};

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn with_betas(len: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            beta1,
            beta2,
            epsilon,
            ..AdamState::new(len)
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_update(state: &mut AdamState, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != grad.len() || state.v.len() != grad.len() {
        return Err(Error::invalid_input(format!(
            "adam lengths differ: params {}, grad {}, state {}",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        // With beta = 0 the correction factor is exactly one.
        let m_hat = if bc1 == 0.0 { state.m[i] } else { state.m[i] / bc1 };
        let v_hat = if bc2 == 0.0 { state.v[i] } else { state.v[i] / bc2 };
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Functional form of [`adam_update`].
pub fn adam_step(state: &AdamState, params: &[f64], grad: &[f64], lr: f64) -> Result<(AdamState, Vec<f64>)> {
    let mut state = state.clone();
    let mut params = params.to_vec();
    adam_update(&mut state, &mut params, grad, lr)?;
    Ok((state, params))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Which parameters fine-tuning may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneScope {
    #[default]
    AllLayers,
    /// Only the final dense layer's weights and bias.
    LastLayer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 128,
            lr: 0.001,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

/// Split label attached to a learning-curve row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveSplit {
    Original,
    New,
    Train,
    Val,
}

impl fmt::Display for CurveSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurveSplit::Original => "original",
            CurveSplit::New => "new",
            CurveSplit::Train => "train",
            CurveSplit::Val => "val",
        })
    }
}

/// Mean absolute errors in centimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub mae_x: f64,
    pub mae_y: f64,
    pub mae_z: f64,
    pub mae_avg: f64,
    pub per_joint: Vec<f64>,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub epoch: usize,
    pub split: CurveSplit,
    pub metrics: Metrics,
}

pub type LearningCurve = Vec<CurvePoint>;

/// Writes `epoch,split,mae_x,mae_y,mae_z,mae_avg` rows.
pub fn write_curve_csv<W: Write>(out: W, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_err = |e: csv::Error| Error::Numeric(format!("csv write failed: {e}"));
    w.write_record(["epoch", "split", "mae_x", "mae_y", "mae_z", "mae_avg"])
        .map_err(to_err)?;
    for p in curve {
        let m = &p.metrics;
        w.write_record([
            p.epoch.to_string(),
            p.split.to_string(),
            m.mae_x.to_string(),
            m.mae_y.to_string(),
            m.mae_z.to_string(),
            m.mae_avg.to_string(),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::Numeric(format!("csv flush failed: {e}")))?;
    Ok(())
}

/// Per-axis MAE in centimeters over every sample and joint.
///
/// Targets are laid out `j0_x, j0_y, j0_z, j1_x, ...` in meters.
pub fn evaluate_mae(params: &CnnParams, eval_set: &Batch) -> Result<Metrics> {
    if eval_set.is_empty() {
        return Err(Error::invalid_input("evaluation set is empty"));
    }
    let out_dim = params.config().out_dim;
    if out_dim % 3 != 0 {
        return Err(Error::invalid_input(format!(
            "output size {out_dim} is not a multiple of three"
        )));
    }
    let preds = Cnn::new(*params.config())?.predict(params.as_slice(), &eval_set.inputs)?;
    metrics_from_predictions(&preds, &eval_set.targets)
}

/// MAE metrics of precomputed predictions.
pub fn metrics_from_predictions(preds: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Metrics> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::invalid_input(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let dim = targets[0].len();
    if dim == 0 || dim % 3 != 0 {
        return Err(Error::invalid_input(format!("target size {dim} is not a positive multiple of three")));
    }
    let joints = dim / 3;
    let mut axis = [0.0f64; 3];
    let mut per_joint = vec![0.0; joints];
    for (p, t) in preds.iter().zip(targets) {
        if p.len() != dim || t.len() != dim {
            return Err(Error::invalid_input("ragged predictions or targets"));
        }
        for j in 0..joints {
            for a in 0..3 {
                let e = (p[3 * j + a] - t[3 * j + a]).abs();
                axis[a] += e;
                per_joint[j] += e;
            }
        }
    }
    let n = preds.len() as f64;
    let to_cm = 100.0;
    let [mae_x, mae_y, mae_z] = axis.map(|s| s / (n * joints as f64) * to_cm);
    for v in &mut per_joint {
        *v = *v / (n * 3.0) * to_cm;
    }
    let m = Metrics {
        mae_x,
        mae_y,
        mae_z,
        mae_avg: (mae_x + mae_y + mae_z) / 3.0,
        per_joint,
        epoch: 0,
    };
    if ![m.mae_x, m.mae_y, m.mae_z].iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite MAE".into()));
    }
    Ok(m)
}

/// A named evaluation pool recorded after every epoch.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub split: CurveSplit,
    pub data: &'a Batch,
}

/// Mask restricting updates to part of the parameter vector.
fn scope_range(params: &CnnParams, scope: FineTuneScope) -> std::ops::Range<usize> {
    match scope {
        FineTuneScope::AllLayers => 0..params.len(),
        FineTuneScope::LastLayer => params.layout().last_layer(),
    }
}

/// Shared epoch loop: shuffled mini-batches, mean L1 loss, gradients outside
/// `trainable` zeroed before the optimizer step.
fn run_epochs(
    theta0: &CnnParams,
    data: &Batch,
    cfg: &TrainConfig,
    trainable: std::ops::Range<usize>,
    eval: &[EvalSet<'_>],
) -> Result<(CnnParams, LearningCurve)> {
    if data.is_empty() {
        return Err(Error::invalid_input("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid_config("batch_size must be positive"));
    }
    let cnn = Cnn::new(*theta0.config())?;
    let mut params = theta0.clone();
    let mut curve = Vec::new();
    if cfg.epochs == 0 {
        return Ok((params, curve));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(params.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.select(chunk);
            let (loss, mut grad) = cnn.loss_and_grad(params.as_slice(), &batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}")));
            }
            grad[..trainable.start].fill(0.0);
            grad[trainable.end..].fill(0.0);
            match cfg.optimizer {
                OptimizerKind::Adam => adam_update(&mut adam, params.as_mut_slice(), &grad, cfg.lr)?,
                OptimizerKind::Sgd => {
                    for (p, g) in params.as_mut_slice()[trainable.clone()]
                        .iter_mut()
                        .zip(&grad[trainable.clone()])
                    {
                        *p -= cfg.lr * g;
                    }
                }
            }
        }
        for set in eval {
            let mut metrics = evaluate_mae(&params, set.data)?;
            metrics.epoch = epoch;
            curve.push(CurvePoint {
                epoch,
                split: set.split,
                metrics,
            });
        }
    }
    Ok((params, curve))
}

/// Mini-batch training of every parameter on `train`, recording validation MAE each epoch.
pub fn train_supervised(
    train: &Batch,
    validation: Option<&Batch>,
    cfg: &TrainConfig,
    theta0: &CnnParams,
) -> Result<(CnnParams, LearningCurve)> {
    let eval: Vec<EvalSet> = validation
        .map(|data| EvalSet {
            split: CurveSplit::Val,
            data,
        })
        .into_iter()
        .collect();
    run_epochs(theta0, train, cfg, 0..theta0.len(), &eval)
}

/// The supervised loop restricted to `scope`; parameters outside it are left bit-identical.
pub fn fine_tune(
    theta: &CnnParams,
    tune_set: &Batch,
    scope: FineTuneScope,
    cfg: &TrainConfig,
    eval: &[EvalSet<'_>],
) -> Result<(CnnParams, LearningCurve)> {
    if tune_set.is_empty() {
        return Err(Error::invalid_input("fine-tune set is empty"));
    }
    run_epochs(theta, tune_set, cfg, scope_range(theta, scope), eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, CnnConfig};
    use crate::pointcloud::InputGrid;
    use rand::Rng;

    fn small_config() -> CnnConfig {
        CnnConfig {
            grid_size: 2,
            in_channels: 2,
            conv1_out: 3,
            conv2_out: 3,
            kernel: 3,
            fc_hidden: 16,
            out_dim: 6,
        }
    }

    /// Targets are a fixed linear map of the inputs.
    fn linear_set(n: usize, seed: u64) -> Batch {
        let c = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = c.grid_size * c.grid_size * c.in_channels;
        let map: Vec<Vec<f64>> = (0..c.out_dim)
            .map(|_| (0..cells).map(|_| rng.gen_range(-0.3..0.3)).collect())
            .collect();
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..n {
            let mut g = InputGrid::zeros(c.grid_size, c.grid_size, c.in_channels);
            for v in &mut g.values {
                *v = rng.gen_range(-1.0..1.0);
            }
            targets.push(map.iter().map(|row| row.iter().zip(&g.values).map(|(a, b)| a * b).sum()).collect());
            inputs.push(g);
        }
        Batch::new(inputs, targets).unwrap()
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let s = AdamState::new(3);
        let (s2, p) = adam_step(&s, &[1.0, -2.0, 3.0], &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(s2.t, 1);
    }

    #[test]
    fn adam_first_step_is_near_sign() {
        // t = 1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let g = [0.5, -2.0, 1e-3];
        let lr = 0.01;
        let (_, p) = adam_step(&AdamState::new(3), &[0.0; 3], &g, lr).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            let expected = -lr * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-15, "{pi} vs {expected}");
            assert!((pi + lr * gi.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_is_deterministic_and_checks_lengths() {
        let s = AdamState::new(2);
        let a = adam_step(&s, &[1.0, 2.0], &[0.3, -0.1], 0.5).unwrap();
        let b = adam_step(&s, &[1.0, 2.0], &[0.3, -0.1], 0.5).unwrap();
        assert_eq!(a, b);
        assert!(adam_step(&s, &[1.0], &[0.3, -0.1], 0.5).is_err());
    }

    #[test]
    fn adam_without_momentum_is_sign_descent() {
        let mut s = AdamState::with_betas(3, 0.0, 0.0, 0.0);
        let mut p = vec![0.0; 3];
        for step in 1..=4 {
            let g = [3.0 * step as f64, -0.2, 7e-5];
            adam_update(&mut s, &mut p, &g, 0.25).unwrap();
            assert_eq!(p, vec![-0.25 * step as f64, 0.25 * step as f64, -0.25 * step as f64]);
        }
    }

    #[test]
    fn metrics_of_exact_predictions_are_zero() {
        let t = vec![vec![0.1; 6], vec![-0.3; 6]];
        let m = metrics_from_predictions(&t, &t).unwrap();
        assert_eq!((m.mae_x, m.mae_y, m.mae_z, m.mae_avg), (0.0, 0.0, 0.0, 0.0));
        assert!(m.per_joint.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn metrics_of_one_cm_x_offset() {
        let t = vec![vec![0.0; 57]; 4];
        let p: Vec<Vec<f64>> = t
            .iter()
            .map(|row| row.iter().enumerate().map(|(i, v)| if i % 3 == 0 { v + 0.01 } else { *v }).collect())
            .collect();
        let m = metrics_from_predictions(&p, &t).unwrap();
        assert!((m.mae_x - 1.0).abs() < 1e-12);
        assert_eq!((m.mae_y, m.mae_z), (0.0, 0.0));
        assert!((m.mae_avg - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.per_joint.len(), 19);
    }

    #[test]
    fn evaluate_matches_naive_double_loop() {
        let c = small_config();
        let params = init_params(&c, 4).unwrap();
        let set = linear_set(9, 5);
        let m = evaluate_mae(&params, &set).unwrap();

        let mut sums = [0.0; 3];
        let mut count = 0.0;
        for s in 0..set.len() {
            let pred = crate::nn::forward(&params, &set.inputs[s]).unwrap();
            for j in 0..c.out_dim / 3 {
                for a in 0..3 {
                    sums[a] += (pred[3 * j + a] - set.targets[s][3 * j + a]).abs();
                }
                count += 1.0;
            }
        }
        let naive: Vec<f64> = sums.iter().map(|s| s / count * 100.0).collect();
        assert!((m.mae_x - naive[0]).abs() < 1e-12);
        assert!((m.mae_y - naive[1]).abs() < 1e-12);
        assert!((m.mae_z - naive[2]).abs() < 1e-12);
        assert!((m.mae_avg - (m.mae_x + m.mae_y + m.mae_z) / 3.0).abs() < 1e-9);
    }

    #[test]
    fn evaluate_is_permutation_invariant() {
        let c = small_config();
        let params = init_params(&c, 4).unwrap();
        let set = linear_set(7, 5);
        let rev: Vec<usize> = (0..7).rev().collect();
        let a = evaluate_mae(&params, &set).unwrap();
        let b = evaluate_mae(&params, &set.select(&rev)).unwrap();
        assert!((a.mae_avg - b.mae_avg).abs() < 1e-12);
    }

    #[test]
    fn evaluate_rejects_empty() {
        let params = init_params(&small_config(), 4).unwrap();
        assert!(matches!(evaluate_mae(&params, &Batch::default()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_epochs_and_zero_lr_are_no_ops() {
        let params = init_params(&small_config(), 1).unwrap();
        let set = linear_set(20, 2);
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (p, curve) = train_supervised(&set, Some(&set), &cfg, &params).unwrap();
        assert_eq!(p, params);
        assert!(curve.is_empty());
        let cfg = TrainConfig {
            epochs: 3,
            lr: 0.0,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (p, curve) = train_supervised(&set, Some(&set), &cfg, &params).unwrap();
        assert_eq!(p, params);
        assert_eq!(curve.len(), 3);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let params = init_params(&small_config(), 1).unwrap();
        let cfg = TrainConfig::default();
        assert!(train_supervised(&Batch::default(), None, &cfg, &params).is_err());
        assert!(fine_tune(&params, &Batch::default(), FineTuneScope::AllLayers, &cfg, &[]).is_err());
    }

    #[test]
    fn supervised_training_reduces_mae_on_linear_targets() {
        let params = init_params(&small_config(), 3).unwrap();
        let set = linear_set(64, 4);
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 16,
            lr: 0.01,
            ..TrainConfig::default()
        };
        let (_, curve) = train_supervised(&set, Some(&set), &cfg, &params).unwrap();
        let first = curve.first().unwrap().metrics.mae_avg;
        let last = curve.last().unwrap().metrics.mae_avg;
        assert!(last < first, "first {first} last {last}");
        for p in &curve {
            let m = &p.metrics;
            assert!((m.mae_avg - (m.mae_x + m.mae_y + m.mae_z) / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn last_layer_scope_freezes_the_rest() {
        let params = init_params(&small_config(), 3).unwrap();
        let set = linear_set(32, 4);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: 0.01,
            ..TrainConfig::default()
        };
        let (tuned, _) = fine_tune(&params, &set, FineTuneScope::LastLayer, &cfg, &[]).unwrap();
        let last = params.layout().last_layer();
        assert_eq!(tuned.as_slice()[..last.start], params.as_slice()[..last.start]);
        assert_ne!(tuned.as_slice()[last.clone()], params.as_slice()[last]);
    }

    #[test]
    fn all_layer_fine_tune_equals_supervised_loop() {
        let params = init_params(&small_config(), 3).unwrap();
        let set = linear_set(30, 4);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 7,
            lr: 0.005,
            seed: 99,
            ..TrainConfig::default()
        };
        let eval = [EvalSet {
            split: CurveSplit::Val,
            data: &set,
        }];
        let (a, ca) = fine_tune(&params, &set, FineTuneScope::AllLayers, &cfg, &eval).unwrap();
        let (b, cb) = train_supervised(&set, Some(&set), &cfg, &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        let (c, _) = fine_tune(&params, &set, FineTuneScope::AllLayers, &cfg, &[]).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn curve_csv_layout() {
        let m = Metrics {
            mae_x: 1.5,
            mae_y: 0.0,
            mae_z: 3.0,
            mae_avg: 1.5,
            per_joint: vec![],
            epoch: 2,
        };
        let curve = vec![CurvePoint {
            epoch: 2,
            split: CurveSplit::New,
            metrics: m,
        }];
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &curve).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,split,mae_x,mae_y,mae_z,mae_avg\n2,new,1.5,0,3,1.5\n"
        );
    }
}
