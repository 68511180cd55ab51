use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::LayeredModel;

/// Mini-batch SGD settings for one client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) && self.learning_rate != 0.0 {
            return Err(Error::Config("learning rate must be >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Outcome of a local training call: updated model, mean loss over the final
/// epoch, and the exact parameter delta.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: LayeredModel,
    pub loss: f64,
    pub delta: LayeredModel,
}

struct ForwardTrace {
    /// Pre-activations per layer.
    zs: Vec<Vec<f64>>,
    /// Post-activations per layer (ReLU everywhere but the output).
    activations: Vec<Vec<f64>>,
}

fn forward_trace(model: &LayeredModel, x: &[f64]) -> ForwardTrace {
    let n_layers = model.layers.len();
    let mut zs: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    for (l, layer) in model.layers.iter().enumerate() {
        let input: &[f64] = if l == 0 { x } else { &activations[l - 1] };
        let mut z = vec![0.0; layer.shape.out_units];
        for (j, zj) in z.iter_mut().enumerate() {
            let mut acc = if layer.shape.has_bias { layer.bias[j] } else { 0.0 };
            for (w, xi) in layer.row(j).iter().zip(input) {
                acc += w * xi;
            }
            *zj = acc;
        }
        let a = if l + 1 < n_layers {
            z.iter().map(|&v| v.max(0.0)).collect()
        } else {
            z.clone()
        };
        zs.push(z);
        activations.push(a);
    }
    ForwardTrace { zs, activations }
}

/// Class logits for one example.
pub fn forward_one(model: &LayeredModel, x: &[f64]) -> Vec<f64> {
    let mut cur = x.to_vec();
    let n_layers = model.layers.len();
    for (l, layer) in model.layers.iter().enumerate() {
        let mut next = vec![0.0; layer.shape.out_units];
        for (j, nj) in next.iter_mut().enumerate() {
            let mut acc = if layer.shape.has_bias { layer.bias[j] } else { 0.0 };
            for (w, xi) in layer.row(j).iter().zip(&cur) {
                acc += w * xi;
            }
            *nj = acc;
        }
        if l + 1 < n_layers {
            next.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        cur = next;
    }
    cur
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Logits and mean cross-entropy over a batch of dataset indices.
pub fn forward(
    model: &LayeredModel,
    ds: &LabeledDataset,
    indices: &[usize],
) -> Result<(Vec<Vec<f64>>, f64)> {
    if ds.dim != model.layers[0].shape.in_units {
        return Err(Error::ShapeMismatch(format!(
            "feature dim {} vs model input {}",
            ds.dim,
            model.layers[0].shape.in_units
        )));
    }
    let mut logits_all = Vec::with_capacity(indices.len());
    let mut loss = 0.0;
    for &i in indices {
        let logits = forward_one(model, ds.feature(i));
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow("forward activations".into()));
        }
        loss += log_sum_exp(&logits) - logits[ds.label(i)];
        logits_all.push(logits);
    }
    Ok((logits_all, loss / indices.len().max(1) as f64))
}

/// Mean cross-entropy loss and its gradient over a batch.
pub fn batch_loss_grad(
    model: &LayeredModel,
    ds: &LabeledDataset,
    indices: &[usize],
) -> Result<(f64, LayeredModel)> {
    let shape = model.shape();
    let mut grad = LayeredModel::zeros(&shape);
    let scale = 1.0 / indices.len().max(1) as f64;
    let mut loss = 0.0;
    let n_layers = model.layers.len();
    for &i in indices {
        let x = ds.feature(i);
        let y = ds.label(i);
        let trace = forward_trace(model, x);
        let logits = &trace.zs[n_layers - 1];
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow("forward activations".into()));
        }
        let lse = log_sum_exp(logits);
        loss += (lse - logits[y]) * scale;

        // Softmax-CE gradient at the logits.
        let mut g: Vec<f64> = logits.iter().map(|&v| (v - lse).exp()).collect();
        g[y] -= 1.0;
        g.iter_mut().for_each(|v| *v *= scale);

        for l in (0..n_layers).rev() {
            let layer = &model.layers[l];
            let input: &[f64] = if l == 0 { x } else { &trace.activations[l - 1] };
            {
                let gl = &mut grad.layers[l];
                let n_in = layer.shape.in_units;
                for (j, &gj) in g.iter().enumerate() {
                    if gj != 0.0 {
                        let row = &mut gl.weights[j * n_in..(j + 1) * n_in];
                        for (w, xi) in row.iter_mut().zip(input) {
                            *w += gj * xi;
                        }
                    }
                    if layer.shape.has_bias {
                        gl.bias[j] += gj;
                    }
                }
            }
            if l > 0 {
                let mut g_prev = vec![0.0; layer.shape.in_units];
                for (j, &gj) in g.iter().enumerate() {
                    if gj != 0.0 {
                        for (gp, w) in g_prev.iter_mut().zip(layer.row(j)) {
                            *gp += gj * w;
                        }
                    }
                }
                // ReLU derivative at the previous layer's pre-activation.
                for (gp, &z) in g_prev.iter_mut().zip(&trace.zs[l - 1]) {
                    if z <= 0.0 {
                        *gp = 0.0;
                    }
                }
                g = g_prev;
            }
        }
    }
    Ok((loss, grad))
}

/// Run `cfg.epochs` epochs of mini-batch SGD over the client's samples.
/// The reported loss is the sample-weighted mean over the final epoch,
/// evaluated at the pre-step parameters of each batch.
pub fn local_train(
    model: &LayeredModel,
    ds: &LabeledDataset,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    if indices.is_empty() {
        return Err(Error::InsufficientData("client has no samples".into()));
    }
    let mut current = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = indices.to_vec();
    let mut final_epoch_loss = 0.0;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let last = epoch + 1 == cfg.epochs;
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad) = batch_loss_grad(&current, ds, batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step });
            }
            if last {
                epoch_loss += loss * batch.len() as f64;
            }
            current.scaled_add(-cfg.learning_rate, &grad);
            step += 1;
        }
        if last {
            final_epoch_loss = epoch_loss / order.len() as f64;
        }
    }
    if !current.all_finite() {
        return Err(Error::Divergence { step });
    }
    let delta = current.delta_from(model);
    Ok(TrainResult {
        model: current,
        loss: final_epoch_loss,
        delta,
    })
}

/// Compare the analytic gradient against central finite differences on up to
/// `max_coords` sampled coordinates; returns the max relative error with
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(
    model: &LayeredModel,
    ds: &LabeledDataset,
    indices: &[usize],
    eps_fd: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64> {
    if eps_fd <= 0.0 {
        return Err(Error::Range("eps_fd must be > 0".into()));
    }
    let (_, grad) = batch_loss_grad(model, ds, indices)?;
    let analytic: Vec<f64> = grad.iter_params().collect();
    let total = analytic.len();
    let mut coords: Vec<usize> = (0..total).collect();
    if total > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
    }
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for &c in &coords {
        let orig = set_coord(&mut probe, c, |v| v + eps_fd);
        let (_, loss_plus) = forward(&probe, ds, indices)?;
        restore_coord(&mut probe, c, orig - eps_fd);
        let (_, loss_minus) = forward(&probe, ds, indices)?;
        restore_coord(&mut probe, c, orig);
        let numeric = (loss_plus - loss_minus) / (2.0 * eps_fd);
        let denom = analytic[c].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[c] - numeric).abs() / denom);
    }
    Ok(worst)
}

fn set_coord(model: &mut LayeredModel, coord: usize, f: impl Fn(f64) -> f64) -> f64 {
    let v = model.iter_params_mut().nth(coord).expect("coord in range");
    let orig = *v;
    *v = f(orig);
    orig
}

fn restore_coord(model: &mut LayeredModel, coord: usize, value: f64) {
    let v = model.iter_params_mut().nth(coord).expect("coord in range");
    *v = value;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::model::{LayeredModel, ModelShape};
    use approx::assert_abs_diff_eq;

    fn toy_data(classes: usize, dims: usize, n: usize, seed: u64) -> LabeledDataset {
        gen_synthetic(classes, dims, n, 0.4, seed).unwrap()
    }

    #[test]
    fn zero_weight_loss_is_ln_c() {
        let shape = ModelShape::mlp(4, &[], 10);
        let model = LayeredModel::zeros(&shape);
        let ds = toy_data(10, 4, 3, 1);
        let idx: Vec<usize> = (0..ds.len()).collect();
        let (_, loss) = forward(&model, &ds, &idx).unwrap();
        assert_abs_diff_eq!(loss, 10.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let shape = ModelShape::mlp(2, &[], 2);
        let mut ds = LabeledDataset::new(2, 2);
        ds.push(&[1.0, 0.0], 0);
        let idx = [0usize];
        let mut prev = f64::INFINITY;
        for margin in [1.0, 4.0, 16.0, 64.0] {
            let mut model = LayeredModel::zeros(&shape);
            *model.layers[0].weight_mut(0, 0) = margin;
            let (_, loss) = forward(&model, &ds, &idx).unwrap();
            assert!(loss < prev, "loss must fall as the margin grows");
            prev = loss;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let shape = ModelShape::mlp(3, &[4], 2);
        let model = LayeredModel::init_uniform(&shape, 5);
        let ds = toy_data(2, 3, 8, 2);
        let idx: Vec<usize> = (0..ds.len()).collect();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 4,
            seed: 9,
        };
        let out = local_train(&model, &ds, &idx, &cfg).unwrap();
        assert_eq!(out.model, model);
        assert!(out.delta.iter_params().all(|v| v == 0.0));
    }

    /// Closed-form oracle for one softmax step on a 2x2 linear model:
    /// p = softmax(Wx + b), dW = (p - onehot(y)) x^T, db = p - onehot(y).
    #[test]
    fn single_step_matches_closed_form() {
        let shape = ModelShape::mlp(2, &[], 2);
        let mut model = LayeredModel::zeros(&shape);
        *model.layers[0].weight_mut(0, 0) = 0.3;
        *model.layers[0].weight_mut(0, 1) = -0.2;
        *model.layers[0].weight_mut(1, 0) = 0.1;
        *model.layers[0].weight_mut(1, 1) = 0.4;
        model.layers[0].bias = vec![0.05, -0.1];

        let x = [0.7, -1.2];
        let y = 1usize;
        let eta = 0.5;

        let z0: f64 = 0.3 * x[0] - 0.2 * x[1] + 0.05;
        let z1: f64 = 0.1 * x[0] + 0.4 * x[1] - 0.1;
        let m = z0.max(z1);
        let e0 = (z0 - m).exp();
        let e1 = (z1 - m).exp();
        let p0 = e0 / (e0 + e1);
        let p1 = e1 / (e0 + e1);
        let g = [p0, p1 - 1.0];
        let expect_w = [
            0.3 - eta * g[0] * x[0],
            -0.2 - eta * g[0] * x[1],
            0.1 - eta * g[1] * x[0],
            0.4 - eta * g[1] * x[1],
        ];
        let expect_b = [0.05 - eta * g[0], -0.1 - eta * g[1]];
        let _ = y;

        let mut ds = LabeledDataset::new(2, 2);
        ds.push(&x, 1);
        let cfg = TrainConfig {
            learning_rate: eta,
            epochs: 1,
            batch_size: 1,
            seed: 0,
        };
        let out = local_train(&model, &ds, &[0], &cfg).unwrap();
        for (got, want) in out.model.layers[0].weights.iter().zip(&expect_w) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-14);
        }
        for (got, want) in out.model.layers[0].bias.iter().zip(&expect_b) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-14);
        }
        // Expected pre-step loss of the single example.
        let expect_loss = (e0 + e1).ln() + m - z1;
        assert_abs_diff_eq!(out.loss, expect_loss, epsilon = 1e-14);
    }

    #[test]
    fn training_is_deterministic() {
        let shape = ModelShape::mlp(5, &[6], 3);
        let model = LayeredModel::init_uniform(&shape, 1);
        let ds = toy_data(3, 5, 20, 3);
        let idx: Vec<usize> = (0..ds.len()).collect();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 3,
            batch_size: 7,
            seed: 123,
        };
        let a = local_train(&model, &ds, &idx, &cfg).unwrap();
        let b = local_train(&model, &ds, &idx, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn delta_is_exact_difference() {
        let shape = ModelShape::mlp(4, &[5], 3);
        let model = LayeredModel::init_uniform(&shape, 2);
        let ds = toy_data(3, 4, 12, 4);
        let idx: Vec<usize> = (0..ds.len()).collect();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            epochs: 2,
            batch_size: 5,
            seed: 7,
        };
        let out = local_train(&model, &ds, &idx, &cfg).unwrap();
        let mut rebuilt = model.clone();
        rebuilt.scaled_add(1.0, &out.delta);
        // W + (W_hat - W) must reproduce W_hat exactly coordinate-wise.
        for (a, b) in rebuilt.iter_params().zip(out.model.iter_params()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn small_step_descends_on_fixed_batch() {
        let shape = ModelShape::mlp(4, &[6], 3);
        for seed in 0..5 {
            let model = LayeredModel::init_uniform(&shape, seed);
            let ds = toy_data(3, 4, 10, seed + 50);
            let idx: Vec<usize> = (0..ds.len()).collect();
            let (before, grad) = batch_loss_grad(&model, &ds, &idx).unwrap();
            let mut stepped = model.clone();
            stepped.scaled_add(-1e-4, &grad);
            let (_, after) = forward(&stepped, &ds, &idx).unwrap();
            assert!(after <= before + 1e-9, "seed {seed}: {after} > {before}");
        }
    }

    #[test]
    fn full_batch_loss_is_order_invariant() {
        let shape = ModelShape::mlp(4, &[5], 3);
        let model = LayeredModel::init_uniform(&shape, 3);
        let ds = toy_data(3, 4, 16, 6);
        let fwd: Vec<usize> = (0..ds.len()).collect();
        let rev: Vec<usize> = (0..ds.len()).rev().collect();
        let (_, a) = forward(&model, &ds, &fwd).unwrap();
        let (_, b) = forward(&model, &ds, &rev).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn grad_check_random_toy_model() {
        let shape = ModelShape::mlp(4, &[6, 5], 3);
        let model = LayeredModel::init_uniform(&shape, 21);
        let ds = toy_data(3, 4, 10, 22);
        let idx: Vec<usize> = (0..ds.len()).collect();
        let err = grad_check(&model, &ds, &idx, 1e-5, 60, 1).unwrap();
        assert!(err < 1e-4, "rel error {err}");
    }

    #[test]
    fn grad_check_linear_model_is_tighter() {
        let shape = ModelShape::mlp(4, &[], 3);
        let model = LayeredModel::init_uniform(&shape, 8);
        let ds = toy_data(3, 4, 10, 23);
        let idx: Vec<usize> = (0..ds.len()).collect();
        let err = grad_check(&model, &ds, &idx, 1e-5, 60, 2).unwrap();
        assert!(err < 1e-7, "rel error {err}");
    }

    #[test]
    fn grad_check_zero_gradient_uses_absolute_fallback() {
        // Two examples with the same features and opposite labels cancel the
        // softmax gradient exactly at the all-zeros model.
        let shape = ModelShape::mlp(2, &[], 2);
        let model = LayeredModel::zeros(&shape);
        let mut ds = LabeledDataset::new(2, 2);
        ds.push(&[0.5, -0.25], 0);
        ds.push(&[0.5, -0.25], 1);
        let (_, grad) = batch_loss_grad(&model, &ds, &[0, 1]).unwrap();
        assert!(grad.iter_params().all(|v| v == 0.0));
        let err = grad_check(&model, &ds, &[0, 1], 1e-5, 60, 3).unwrap();
        assert!(err < 1e-6, "rel error {err}");
    }
}
