use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayeredModel, ModelShape, SubModelSpec, UnitMask};

/// Clamp floor for the element-wise division by W; applied sign-preserving,
/// zeros clamp to +eps.
const EPS_DIV: f64 = 1e-8;

/// Coverage rate CR(k) per global unit: the fraction of clients whose
/// sub-model contains unit k. Indexed `[layer][unit]` in global coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageTable {
    pub per_layer: Vec<Vec<f64>>,
}

impl CoverageTable {
    pub fn homogeneous(shape: &ModelShape) -> Self {
        CoverageTable {
            per_layer: shape.0.iter().map(|l| vec![1.0; l.out_units]).collect(),
        }
    }
}

/// Compute coverage from the clients' (static) sub-model specs. With nested
/// prefixes, CR(k) is the fraction of clients whose layer width covers k.
pub fn coverage_table(specs: &[SubModelSpec], global: &ModelShape) -> Result<CoverageTable> {
    if specs.is_empty() {
        return Err(Error::Config("coverage needs at least one client".into()));
    }
    for s in specs {
        s.validate(global)?;
    }
    let n = specs.len() as f64;
    let per_layer = global
        .0
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            (0..layer.out_units)
                .map(|k| specs.iter().filter(|s| s.kept[l] > k).count() as f64 / n)
                .collect()
        })
        .collect();
    Ok(CoverageTable { per_layer })
}

/// Per-unit importance scores for the selectable (non-output) layers of one
/// client's sub-model.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    pub per_layer: Vec<Vec<f64>>,
}

fn clamp_denominator(w: f64) -> f64 {
    if w.abs() >= EPS_DIV {
        w
    } else if w < 0.0 {
        -EPS_DIV
    } else {
        EPS_DIV
    }
}

/// Importance of unit k: the Euclidean norm of
/// `delta_w * (w + delta_w) / w` over the unit's incoming row and bias,
/// divided by CR(k) when a coverage table is supplied (heterogeneous case).
pub fn importance(
    before: &LayeredModel,
    after: &LayeredModel,
    coverage: Option<&CoverageTable>,
) -> Result<ImportanceVector> {
    if !before.same_shape(after) {
        return Err(Error::ShapeMismatch(
            "importance needs models of identical shape".into(),
        ));
    }
    let n_layers = before.layers.len();
    let mut per_layer = Vec::with_capacity(n_layers.saturating_sub(1));
    for l in 0..n_layers.saturating_sub(1) {
        let b = &before.layers[l];
        let a = &after.layers[l];
        let n_in = b.shape.in_units;
        let mut scores = Vec::with_capacity(b.shape.out_units);
        for j in 0..b.shape.out_units {
            let mut acc = 0.0;
            for i in 0..n_in {
                let w = b.weights[j * n_in + i];
                let w_hat = a.weights[j * n_in + i];
                let dv = (w_hat - w) * w_hat / clamp_denominator(w);
                acc += dv * dv;
            }
            if b.shape.has_bias {
                let w = b.bias[j];
                let w_hat = a.bias[j];
                let dv = (w_hat - w) * w_hat / clamp_denominator(w);
                acc += dv * dv;
            }
            let mut score = acc.sqrt();
            if let Some(cr) = coverage {
                let c = cr.per_layer[l][j];
                if c <= 0.0 {
                    return Err(Error::Range(format!(
                        "coverage rate for unit ({l}, {j}) must be positive"
                    )));
                }
                score /= c;
            }
            scores.push(score);
        }
        per_layer.push(scores);
    }
    Ok(ImportanceVector { per_layer })
}

/// Which units a client uploads given its dropout rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SelectionStrategy {
    /// Keep the top-quota units by importance index.
    Feddd,
    /// Seeded shuffle; model values never consulted.
    Random { seed: u64 },
    /// Keep units with the largest post-update amplitude |W_hat|.
    Max,
    /// Keep units with the largest change |delta W|.
    Delta,
    /// Keep the first quota units in index order.
    Ordered,
}

fn group_sq_norm(layer: &crate::model::Layer, j: usize) -> f64 {
    let mut acc: f64 = layer.row(j).iter().map(|w| w * w).sum();
    if layer.shape.has_bias {
        acc += layer.bias[j] * layer.bias[j];
    }
    acc
}

/// Build the unit mask for one client: every selectable layer keeps
/// `round(N_l * (1 - d))` units chosen per strategy; output units are always
/// kept. Ties break toward the smaller unit index.
pub fn select_mask(
    before: &LayeredModel,
    after: &LayeredModel,
    scores: &ImportanceVector,
    d: f64,
    strategy: &SelectionStrategy,
) -> Result<UnitMask> {
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::Range(format!("dropout rate {d} outside [0, 1]")));
    }
    let shape = after.shape();
    let n_layers = shape.0.len();
    let mut per_layer = Vec::with_capacity(n_layers);
    let mut random_rng = match strategy {
        SelectionStrategy::Random { seed } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        _ => None,
    };
    for (l, layer) in shape.0.iter().enumerate() {
        let units = layer.out_units;
        if l + 1 == n_layers {
            per_layer.push(vec![true; units]);
            continue;
        }
        let quota = ((units as f64) * (1.0 - d)).round() as usize;
        let quota = quota.min(units);
        let mut order: Vec<usize> = (0..units).collect();
        match strategy {
            SelectionStrategy::Feddd => {
                let keys = &scores.per_layer[l];
                if keys.len() != units {
                    return Err(Error::ShapeMismatch(format!(
                        "importance layer {l} has {} scores for {} units",
                        keys.len(),
                        units
                    )));
                }
                order.sort_by(|&x, &y| {
                    keys[y].partial_cmp(&keys[x]).unwrap().then(x.cmp(&y))
                });
            }
            SelectionStrategy::Random { .. } => {
                order.shuffle(random_rng.as_mut().unwrap());
            }
            SelectionStrategy::Max => {
                let keys: Vec<f64> = (0..units)
                    .map(|j| group_sq_norm(&after.layers[l], j))
                    .collect();
                order.sort_by(|&x, &y| {
                    keys[y].partial_cmp(&keys[x]).unwrap().then(x.cmp(&y))
                });
            }
            SelectionStrategy::Delta => {
                let delta = after.delta_from(before);
                let keys: Vec<f64> = (0..units)
                    .map(|j| group_sq_norm(&delta.layers[l], j))
                    .collect();
                order.sort_by(|&x, &y| {
                    keys[y].partial_cmp(&keys[x]).unwrap().then(x.cmp(&y))
                });
            }
            SelectionStrategy::Ordered => {}
        }
        let mut bits = vec![false; units];
        for &j in order.iter().take(quota) {
            bits[j] = true;
        }
        per_layer.push(bits);
    }
    Ok(UnitMask { per_layer })
}
