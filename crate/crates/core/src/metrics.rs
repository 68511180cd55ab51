use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::Upload;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{embed, extract, LayeredModel, SubModelSpec};
use crate::trainer::{batch_loss_grad, forward_one};

/// Everything recorded about one simulated round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub t_server_s: f64,
    pub cum_time_s: f64,
    pub test_acc: f64,
    pub per_class_acc: Vec<Option<f64>>,
    /// Unweighted mean of the participating clients' reported losses.
    pub mean_loss: f64,
    /// Continuous allocator dropout rate per client.
    pub d: Vec<f64>,
    /// Realized upload volume (mask popcounts times the parameter width).
    pub uploaded_bits: u64,
    /// Realized download volume under the broadcast schedule.
    pub downloaded_bits: u64,
    /// Mask-induced aggregation error, unweighted form.
    pub eps_t: Option<f64>,
    /// Same monitor with data-size weights, logged separately.
    pub eps_weighted: Option<f64>,
    /// Norm of the full-batch global gradient, when monitoring is enabled.
    pub grad_norm: Option<f64>,
}

impl RoundRecord {
    pub fn mean_d(&self) -> f64 {
        if self.d.is_empty() {
            0.0
        } else {
            self.d.iter().sum::<f64>() / self.d.len() as f64
        }
    }
}

/// Top-1 accuracy over a test set, overall and per class. Classes absent
/// from the test set report `None`.
pub fn evaluate(
    model: &LayeredModel,
    ds: &LabeledDataset,
) -> Result<(f64, Vec<Option<f64>>)> {
    if ds.is_empty() {
        return Err(Error::InsufficientData("empty test set".into()));
    }
    let mut correct = 0usize;
    let mut class_total = vec![0usize; ds.classes];
    let mut class_hit = vec![0usize; ds.classes];
    for i in 0..ds.len() {
        let logits = forward_one(model, ds.feature(i));
        let mut arg = 0usize;
        for (j, &v) in logits.iter().enumerate() {
            if v > logits[arg] {
                arg = j;
            }
        }
        let y = ds.label(i);
        class_total[y] += 1;
        if arg == y {
            correct += 1;
            class_hit[y] += 1;
        }
    }
    let per_class = class_total
        .iter()
        .zip(&class_hit)
        .map(|(&t, &h)| if t == 0 { None } else { Some(h as f64 / t as f64) })
        .collect();
    Ok((correct as f64 / ds.len() as f64, per_class))
}

/// Time-to-accuracy outcome relative to a baseline run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum T2a {
    Ratio(f64),
    NotReached,
}

fn first_time_to(records: &[RoundRecord], target: f64) -> Option<f64> {
    records
        .iter()
        .find(|r| r.test_acc >= target)
        .map(|r| r.cum_time_s)
}

/// Simulated time for `records` to first reach `target`, normalized by the
/// baseline's time. Errors when the baseline itself never reaches it.
pub fn t2a(records: &[RoundRecord], baseline: &[RoundRecord], target: f64) -> Result<T2a> {
    let base = first_time_to(baseline, target).ok_or(Error::TargetNotReached(target))?;
    Ok(match first_time_to(records, target) {
        Some(t) => T2a::Ratio(t / base),
        None => T2a::NotReached,
    })
}

fn epsilon_of(uploads: &[Upload], weighted: bool) -> Option<f64> {
    if uploads.is_empty() {
        return None;
    }
    if uploads.iter().all(|u| u.mask.count_ones() == 0) {
        return None;
    }
    let flat: Vec<(Vec<f64>, Vec<bool>, f64)> = uploads
        .iter()
        .map(|u| {
            (
                u.model.iter_params().collect(),
                u.mask.iter_bits().collect(),
                if weighted { u.weight } else { 1.0 },
            )
        })
        .collect();
    let n_params = flat[0].0.len();
    let total_w: f64 = flat.iter().map(|f| f.2).sum();
    let mut num = 0.0;
    let mut den = 0.0;
    for j in 0..n_params {
        let mut mean = 0.0;
        let mut masked_num = 0.0;
        let mut masked_den = 0.0;
        for (values, bits, w) in &flat {
            mean += w * values[j];
            if bits[j] {
                masked_num += w * values[j];
                masked_den += w;
            }
        }
        mean /= total_w;
        let agg = if masked_den > 0.0 {
            masked_num / masked_den
        } else {
            0.0
        };
        let diff = agg - mean;
        num += diff * diff;
        den += mean * mean;
    }
    if den == 0.0 {
        return None;
    }
    Some(num / den)
}

/// Mask-induced aggregation error
/// `|| masked aggregate - plain mean ||^2 / || plain mean ||^2`
/// in global coordinates with equal weights. Zero-coverage coordinates
/// aggregate to zero; a round where no mask has support is undefined.
pub fn measure_epsilon(uploads: &[Upload]) -> Option<f64> {
    epsilon_of(uploads, false)
}

/// The weighted companion of `measure_epsilon` (aggregation weights applied
/// to both the masked aggregate and the plain mean).
pub fn measure_epsilon_weighted(uploads: &[Upload]) -> Option<f64> {
    epsilon_of(uploads, true)
}

/// Inputs to the convergence-bound evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub l_smooth: f64,
    pub epsilon: f64,
    pub eta: f64,
    pub h: usize,
    /// Number of broadcast periods K; the analyzed horizon is T = K * h.
    pub k_periods: usize,
    /// Per-client deviation bounds sigma_n.
    pub sigma: Vec<f64>,
    /// F(W^0) - F(W*).
    pub f_gap: f64,
}

impl BoundParams {
    pub fn step_size_limit(&self) -> f64 {
        2.0 / (self.l_smooth
            + self.l_smooth * self.epsilon
            + 4.0 * (self.epsilon + 1.0) * self.epsilon)
    }

    fn validate(&self) -> Result<()> {
        if !(self.l_smooth > 0.0) {
            return Err(Error::Domain("L must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Domain("epsilon must lie in [0, 1]".into()));
        }
        if self.h == 0 || self.k_periods == 0 {
            return Err(Error::Domain("h and K must be >= 1".into()));
        }
        if !(self.f_gap >= 0.0) {
            return Err(Error::Domain("F(W0) - F(W*) must be >= 0".into()));
        }
        if self.sigma.is_empty() {
            return Err(Error::Domain("sigma vector must be nonempty".into()));
        }
        if !(self.eta > 0.0) || self.eta >= self.step_size_limit() {
            return Err(Error::Domain(format!(
                "eta = {} violates eta < {}",
                self.eta,
                self.step_size_limit()
            )));
        }
        Ok(())
    }
}

/// The three additive terms of the convergence bound.
pub fn convergence_bound_parts(p: &BoundParams) -> Result<(f64, f64, f64)> {
    p.validate()?;
    let l = p.l_smooth;
    let e = p.epsilon;
    let eta = p.eta;
    let h = p.h as f64;
    let k = p.k_periods as f64;
    let denom = 2.0 * eta - l * eta * eta - l * e * eta * eta - 4.0 * (e + 1.0) * e * eta * eta;
    let sigma_mean_sq =
        p.sigma.iter().map(|s| s * s).sum::<f64>() / p.sigma.len() as f64;
    let first = 2.0 * p.f_gap / (k * h * denom);
    let second = l * e * eta * eta * sigma_mean_sq * (h - 1.0)
        * (2.0 * e + 2.0 * e * eta * eta * l * l + 2.0 * eta * eta * l * l + 3.0)
        / (h * denom);
    let third = l * e * eta * eta * sigma_mean_sq / (h * denom);
    Ok((first, second, third))
}

/// Numeric value of the convergence bound's right-hand side.
pub fn convergence_bound(p: &BoundParams) -> Result<f64> {
    let (a, b, c) = convergence_bound_parts(p)?;
    Ok(a + b + c)
}

/// Full-batch deviation of each client's gradient from the data-weighted
/// mean gradient, all at the current global model. Gradients of shrunken
/// clients are compared in global coordinates (zero outside their
/// sub-model).
pub fn estimate_sigma(
    ds: &LabeledDataset,
    client_indices: &[Vec<usize>],
    specs: &[SubModelSpec],
    global: &LayeredModel,
) -> Result<Vec<f64>> {
    if client_indices.len() != specs.len() {
        return Err(Error::Config("one spec per client required".into()));
    }
    let shape = global.shape();
    let mut grads = Vec::with_capacity(specs.len());
    let mut weights = Vec::with_capacity(specs.len());
    for (indices, spec) in client_indices.iter().zip(specs) {
        if indices.is_empty() {
            return Err(Error::InsufficientData("client has no samples".into()));
        }
        let sub = extract(global, spec)?;
        let (_, grad) = batch_loss_grad(&sub, ds, indices)?;
        let (grad_global, _) = embed(&grad, spec, &shape)?;
        grads.push(grad_global);
        weights.push(indices.len() as f64);
    }
    let total: f64 = weights.iter().sum();
    let mut mean = LayeredModel::zeros(&shape);
    for (g, w) in grads.iter().zip(&weights) {
        mean.scaled_add(w / total, g);
    }
    Ok(grads
        .iter()
        .map(|g| g.delta_from(&mean).sq_norm().sqrt())
        .collect())
}

/// Largest observed gradient-Lipschitz ratio over logged (model, gradient)
/// pairs; a practical stand-in for L when none is configured.
pub fn estimate_smoothness(pairs: &[(LayeredModel, LayeredModel)]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for w in pairs.windows(2) {
        let dw = w[1].0.delta_from(&w[0].0).sq_norm().sqrt();
        let dg = w[1].1.delta_from(&w[0].1).sq_norm().sqrt();
        if dw > 1e-12 {
            let ratio = dg / dw;
            best = Some(best.map_or(ratio, |b: f64| b.max(ratio)));
        }
    }
    best
}

pub const CSV_HEADER: &str =
    "round,t_server_s,cum_time_s,test_acc,mean_loss,eps_t,uploaded_bits,mean_D";

fn push_f64(out: &mut String, v: f64) {
    // Shortest round-trip formatting keeps the CSV byte-stable and lossless.
    write!(out, "{v}").unwrap();
}

/// Render the round log. Optional epsilon renders as an empty cell.
pub fn rounds_csv(records: &[RoundRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        write!(out, "{},", r.round).unwrap();
        push_f64(&mut out, r.t_server_s);
        out.push(',');
        push_f64(&mut out, r.cum_time_s);
        out.push(',');
        push_f64(&mut out, r.test_acc);
        out.push(',');
        push_f64(&mut out, r.mean_loss);
        out.push(',');
        if let Some(e) = r.eps_t {
            push_f64(&mut out, e);
        }
        write!(out, ",{},", r.uploaded_bits).unwrap();
        push_f64(&mut out, r.mean_d());
        out.push('\n');
    }
    out
}

/// One parsed CSV row; numeric fields round-trip at full precision.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub round: usize,
    pub t_server_s: f64,
    pub cum_time_s: f64,
    pub test_acc: f64,
    pub mean_loss: f64,
    pub eps_t: Option<f64>,
    pub uploaded_bits: u64,
    pub mean_d: f64,
}

pub fn parse_rounds_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Config(format!(
                "unexpected CSV header: {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Config(format!("row {i}: expected 8 fields")));
        }
        let parse_f =
            |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Config(format!("row {i}: bad float {s:?}"))) };
        rows.push(CsvRow {
            round: fields[0]
                .parse()
                .map_err(|_| Error::Config(format!("row {i}: bad round")))?,
            t_server_s: parse_f(fields[1])?,
            cum_time_s: parse_f(fields[2])?,
            test_acc: parse_f(fields[3])?,
            mean_loss: parse_f(fields[4])?,
            eps_t: if fields[5].is_empty() {
                None
            } else {
                Some(parse_f(fields[5])?)
            },
            uploaded_bits: fields[6]
                .parse()
                .map_err(|_| Error::Config(format!("row {i}: bad bits")))?,
            mean_d: parse_f(fields[7])?,
        });
    }
    Ok(rows)
}

/// Write `rounds.csv` and `summary.json` into `dir`. Identical inputs
/// reproduce byte-identical files.
pub fn export(
    records: &[RoundRecord],
    summary: &serde_json::Value,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("rounds.csv");
    std::fs::write(&csv_path, rounds_csv(records)).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = dir.join("summary.json");
    let mut body = serde_json::to_string_pretty(summary).expect("summary serializes");
    body.push('\n');
    std::fs::write(&json_path, body).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}
