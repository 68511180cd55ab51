use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::distribution_score;
use crate::error::{Error, Result};
use crate::model::SubModelSpec;
use crate::simplex;

/// Static per-client system/data description. Rates are stored directly;
/// they either come from measured configuration or from `link_rate` on
/// physical channel parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    /// CPU frequency f_n (Hz).
    pub freq_hz: f64,
    /// Cycles to process one sample, c_n.
    pub cycles_per_sample: f64,
    /// Batch size b_n.
    pub batch_size: usize,
    /// Uplink rate r_n^u (bit/s).
    pub rate_up: f64,
    /// Downlink rate r_n^d (bit/s).
    pub rate_down: f64,
    /// Local model size U_n (bits).
    pub size_bits: f64,
    /// Sample count m_n.
    pub samples: usize,
    /// Class proportions dis_n (kept server-side for metrics only).
    pub dis: Vec<f64>,
    pub spec: SubModelSpec,
}

/// Computation latency t_cmp = c_n * b_n / f_n.
pub fn compute_latency(cycles_per_sample: f64, batch_size: usize, freq_hz: f64) -> f64 {
    cycles_per_sample * batch_size as f64 / freq_hz
}

/// Shannon-style link rate r = B * log2(1 + p * h / N0).
pub fn link_rate(bandwidth_hz: f64, power_w: f64, gain: f64, noise_w: f64) -> f64 {
    bandwidth_hz * (1.0 + power_w * gain / noise_w).log2()
}

/// Transfer time of the kept fraction: U * (1 - d) / rate.
pub fn comm_time(size_bits: f64, d: f64, rate: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&d));
    size_bits * (1.0 - d) / rate
}

impl ClientProfile {
    pub fn compute_latency(&self) -> f64 {
        compute_latency(self.cycles_per_sample, self.batch_size, self.freq_hz)
    }

    /// Download + compute + upload time at dropout rate `d`.
    pub fn round_time(&self, d: f64) -> f64 {
        comm_time(self.size_bits, d, self.rate_down)
            + self.compute_latency()
            + comm_time(self.size_bits, d, self.rate_up)
    }
}

/// Heterogeneity-aware contribution weight
/// re_n = (m_n/m) * sum_c min(C dis_c, 1) * (U_n/U) * loss_n.
pub fn regularizer(
    samples: usize,
    total_samples: usize,
    dis: &[f64],
    classes: usize,
    size_bits: f64,
    global_size_bits: f64,
    loss: f64,
) -> f64 {
    let share = samples as f64 / total_samples as f64;
    share * distribution_score(dis, classes) * (size_bits / global_size_bits) * loss
}

/// One dropout-allocation problem in derived coefficients:
/// minimize `t + delta * sum w_n d_n` subject to
/// `t >= a_n - k_n d_n`, `0 <= d_n <= d_max`, `sum u_n d_n = (1 - a_server) sum u_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocInstance {
    /// Full-upload round time per client: t_cmp + U(1/r_u + 1/r_d).
    pub a: Vec<f64>,
    /// Communication slope per client: U(1/r_u + 1/r_d).
    pub k: Vec<f64>,
    /// Parameter volume per client (bits).
    pub u: Vec<f64>,
    /// Regularizer weights re_n.
    pub w: Vec<f64>,
    pub delta: f64,
    pub a_server: f64,
    pub d_max: f64,
}

impl AllocInstance {
    pub fn from_profiles(
        profiles: &[ClientProfile],
        weights: &[f64],
        delta: f64,
        a_server: f64,
        d_max: f64,
    ) -> Self {
        let a = profiles.iter().map(|p| p.round_time(0.0)).collect();
        let k = profiles
            .iter()
            .map(|p| p.size_bits * (1.0 / p.rate_up + 1.0 / p.rate_down))
            .collect();
        let u = profiles.iter().map(|p| p.size_bits).collect();
        AllocInstance {
            a,
            k,
            u,
            w: weights.to_vec(),
            delta,
            a_server,
            d_max,
        }
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.len();
        if n == 0 {
            return Err(Error::Config("allocation needs at least one client".into()));
        }
        if self.k.len() != n || self.u.len() != n || self.w.len() != n {
            return Err(Error::Config("instance vectors must share a length".into()));
        }
        for i in 0..n {
            if !(self.k[i] > 0.0) || !(self.u[i] > 0.0) {
                return Err(Error::Config(format!("client {i}: k and u must be > 0")));
            }
            if !(self.a[i] >= self.k[i]) {
                return Err(Error::Config(format!(
                    "client {i}: a must include the communication term (a >= k)"
                )));
            }
            if !(self.w[i] >= 0.0) {
                return Err(Error::Config(format!("client {i}: w must be >= 0")));
            }
        }
        if !(self.delta >= 0.0) {
            return Err(Error::Config("delta must be >= 0".into()));
        }
        if !(self.a_server > 0.0 && self.a_server <= 1.0) {
            return Err(Error::Config("a_server must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.d_max) {
            return Err(Error::Config("d_max must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn check_feasible(&self) -> Result<()> {
        let required = 1.0 - self.a_server;
        if self.d_max + 1e-12 < required {
            return Err(Error::Infeasible {
                required,
                d_max: self.d_max,
            });
        }
        Ok(())
    }

    /// Objective value at a feasible dropout vector.
    pub fn objective(&self, d: &[f64]) -> f64 {
        let t = self.t_server(d);
        let pen: f64 = self.w.iter().zip(d).map(|(w, d)| w * d).sum();
        t + self.delta * pen
    }

    pub fn t_server(&self, d: &[f64]) -> f64 {
        self.a
            .iter()
            .zip(&self.k)
            .zip(d)
            .map(|((a, k), d)| a - k * d)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per-round dropout assignment returned by the allocator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutPlan {
    pub d: Vec<f64>,
    pub t_server: f64,
    pub objective: f64,
}

/// Exact solution of the dropout-rate program. Deterministic: among optimal
/// vertices the lexicographically smallest dropout vector is chosen by
/// minimizing each d_i in turn over the optimal face.
///
/// Standard-form variables: d_0..d_{n-1}, t, s_0..s_{n-1} (epigraph slacks),
/// v_0..v_{n-1} (box slacks).
pub fn solve_allocation(inst: &AllocInstance) -> Result<DropoutPlan> {
    inst.validate()?;
    inst.check_feasible()?;
    let n = inst.len();
    let n_vars = 3 * n + 1;
    let t_col = n;
    let s0 = n + 1;
    let v0 = 2 * n + 1;

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(2 * n + 1);
    let mut rhs: Vec<f64> = Vec::with_capacity(2 * n + 1);
    // Epigraph rows: k_i d_i + t - s_i = a_i.
    for i in 0..n {
        let mut row = vec![0.0; n_vars];
        row[i] = inst.k[i];
        row[t_col] = 1.0;
        row[s0 + i] = -1.0;
        rows.push(row);
        rhs.push(inst.a[i]);
    }
    // Box rows: d_i + v_i = d_max.
    for i in 0..n {
        let mut row = vec![0.0; n_vars];
        row[i] = 1.0;
        row[v0 + i] = 1.0;
        rows.push(row);
        rhs.push(inst.d_max);
    }
    // Budget row, normalized by the total volume for conditioning.
    let total_u: f64 = inst.u.iter().sum();
    let mut row = vec![0.0; n_vars];
    for i in 0..n {
        row[i] = inst.u[i] / total_u;
    }
    rows.push(row);
    rhs.push(1.0 - inst.a_server);

    let mut objectives: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut primary = vec![0.0; n_vars];
    primary[t_col] = 1.0;
    for i in 0..n {
        primary[i] = inst.delta * inst.w[i];
    }
    objectives.push(primary);
    for i in 0..n {
        let mut c = vec![0.0; n_vars];
        c[i] = 1.0;
        objectives.push(c);
    }

    let sol = simplex::solve_lex(&rows, &rhs, &objectives)?;
    let d: Vec<f64> = sol.x[..n].to_vec();
    let t_server = inst.t_server(&d);
    Ok(DropoutPlan {
        objective: t_server
            + inst.delta * inst.w.iter().zip(&d).map(|(w, d)| w * d).sum::<f64>(),
        d,
        t_server,
    })
}

/// Brute-force reference: enumerate the dropout grid `{0, step, ..., d_max}`
/// over all clients but the last, solving the last coordinate from the
/// budget equality. Returns the best feasible point.
pub fn grid_oracle(inst: &AllocInstance, step: f64) -> Result<DropoutPlan> {
    inst.validate()?;
    inst.check_feasible()?;
    if !(step > 0.0) {
        return Err(Error::Range("grid step must be > 0".into()));
    }
    let n = inst.len();
    let total_u: f64 = inst.u.iter().sum();
    let budget = (1.0 - inst.a_server) * total_u;

    let mut grid: Vec<f64> = Vec::new();
    let mut g = 0.0;
    while g < inst.d_max - 1e-12 {
        grid.push(g);
        g += step;
    }
    grid.push(inst.d_max);

    let best = if n == 1 {
        let mut best = Candidate::none(0);
        best.consider(inst, &[], budget / inst.u[0], 0.0, 0.0);
        best
    } else {
        // Parallelize over the first coordinate; reduce deterministically.
        grid.par_iter()
            .map(|&d0| {
                let mut best = Candidate::none(n - 1);
                let mut prefix = vec![0.0; n - 1];
                prefix[0] = d0;
                search_tail(
                    inst,
                    &grid,
                    budget,
                    &mut prefix,
                    1,
                    inst.a[0] - inst.k[0] * d0,
                    inst.w[0] * d0,
                    inst.u[0] * d0,
                    &mut best,
                );
                best
            })
            .reduce(|| Candidate::none(n - 1), Candidate::merge)
    };

    match best.into_plan(inst) {
        Some(plan) => Ok(plan),
        None => Err(Error::Infeasible {
            required: 1.0 - inst.a_server,
            d_max: inst.d_max,
        }),
    }
}

/// Best feasible grid point seen so far. Ties prefer the lexicographically
/// smaller dropout vector so parallel reduction stays deterministic.
struct Candidate {
    objective: f64,
    prefix: Vec<f64>,
    d_last: f64,
}

impl Candidate {
    fn none(prefix_len: usize) -> Self {
        Candidate {
            objective: f64::INFINITY,
            prefix: vec![0.0; prefix_len],
            d_last: 0.0,
        }
    }

    #[inline]
    fn consider(
        &mut self,
        inst: &AllocInstance,
        prefix: &[f64],
        d_last: f64,
        acc_max: f64,
        acc_pen: f64,
    ) {
        let n = inst.len();
        let tol = 1e-9 * inst.d_max.max(1.0);
        if d_last < -tol || d_last > inst.d_max + tol {
            return;
        }
        let d_last = d_last.clamp(0.0, inst.d_max);
        let t = acc_max.max(inst.a[n - 1] - inst.k[n - 1] * d_last);
        let objective = t + inst.delta * (acc_pen + inst.w[n - 1] * d_last);
        if objective < self.objective {
            self.objective = objective;
            self.prefix.clear();
            self.prefix.extend_from_slice(prefix);
            self.d_last = d_last;
        }
    }

    fn merge(a: Candidate, b: Candidate) -> Candidate {
        if b.objective < a.objective
            || (b.objective == a.objective
                && (b.prefix < a.prefix
                    || (b.prefix == a.prefix && b.d_last < a.d_last)))
        {
            b
        } else {
            a
        }
    }

    fn into_plan(self, inst: &AllocInstance) -> Option<DropoutPlan> {
        if !self.objective.is_finite() {
            return None;
        }
        let mut d = self.prefix;
        d.push(self.d_last);
        let t_server = inst.t_server(&d);
        Some(DropoutPlan {
            objective: self.objective,
            d,
            t_server,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn search_tail(
    inst: &AllocInstance,
    grid: &[f64],
    budget: f64,
    prefix: &mut Vec<f64>,
    depth: usize,
    acc_max: f64,
    acc_pen: f64,
    acc_spent: f64,
    best: &mut Candidate,
) {
    let n = inst.len();
    if depth == n - 1 {
        // Innermost: the last coordinate is pinned by the budget equality.
        let d_last = (budget - acc_spent) / inst.u[n - 1];
        best.consider(inst, prefix, d_last, acc_max, acc_pen);
        return;
    }
    let (a, k, w, u) = (inst.a[depth], inst.k[depth], inst.w[depth], inst.u[depth]);
    for &g in grid {
        prefix[depth] = g;
        search_tail(
            inst,
            grid,
            budget,
            prefix,
            depth + 1,
            acc_max.max(a - k * g),
            acc_pen + w * g,
            acc_spent + u * g,
            best,
        );
    }
}
